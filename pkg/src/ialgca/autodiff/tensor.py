"""Tensor, tape and parameter types for the reverse-mode engine."""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import ContractError

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """Dense real array with an id that the active tape can refer to."""

    __slots__ = ("data", "id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, id={self.id})"

    # operator sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalars")
        return ops.scale(self, 1.0 / other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self, None)


@dataclass
class Node:
    kind: str
    inputs: tuple  # input tensor ids
    output: int
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Append-only record of primitive applications.

    Used as a context manager; tensors produced while it is active and that
    depend on a ``requires_grad`` tensor are recorded in execution order.
    """

    nodes: List[Node] = field(default_factory=list)
    gradients: Dict[int, np.ndarray] = field(default_factory=dict)
    _outputs: set = field(default_factory=set, repr=False)
    _token: object = field(default=None, repr=False)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(node.output)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._outputs

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True

    @classmethod
    def of(cls, name, data, trainable=True):
        return cls(name, Tensor(data, requires_grad=trainable), trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape


def backward(
    loss: Tensor, tape: Tape, params: Optional[Iterable[Parameter]] = None
) -> Dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d loss / d loss = 1.

    Returns a map from tensor id to gradient. When ``params`` is given,
    every trainable parameter gets an entry, zero if it was not reached.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ContractError("loss tensor is not recorded on the given tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    if params is not None:
        for p in params:
            if p.trainable and p.tensor.id not in grads:
                grads[p.tensor.id] = np.zeros_like(p.tensor.data)
    tape.gradients = grads
    return grads


def sgd_step(params: Iterable[Parameter], grads: Dict[int, np.ndarray], lr: float) -> None:
    """In-place update theta <- theta - lr * g for every trainable parameter."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.trainable and p.tensor.id not in grads:
            raise ContractError(f"no gradient for trainable parameter {p.name!r}")
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.tensor.id]
        if g.shape != p.tensor.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {p.name!r} {p.shape}"
            )
        p.tensor.data -= (lr * g).astype(p.tensor.dtype, copy=False)
