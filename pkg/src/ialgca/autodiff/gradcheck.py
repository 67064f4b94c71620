"""Central finite-difference gradients, used as the oracle for every adjoint."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from ..errors import ContractError, OracleInvalidError
from .tensor import Parameter, Tape, Tensor, backward

REL_FLOOR = 1e-8


def _scalar(value):
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.size != 1:
        raise ContractError(f"finite differences need a scalar function, got shape {arr.shape}")
    return arr.reshape(())[()]


def _snapshot(params: Sequence[Parameter]):
    # value copies rather than a byte hash: extended-precision dtypes carry
    # padding bytes that need not survive an element write
    return [p.tensor.data.copy() for p in params]


def _unchanged(params, snapshot) -> bool:
    return all(np.array_equal(p.tensor.data, s) for p, s in zip(params, snapshot))


def finite_diff_gradient(
    f: Callable[[], object],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    oracle_dtype=None,
) -> Dict[int, np.ndarray]:
    """(f(theta + eps) - f(theta - eps)) / (2 eps) for every parameter entry.

    ``f`` takes no arguments and reads the parameters it closes over. It is
    evaluated at the unperturbed point before and after the sweep; a mismatch
    (or parameters not restored) means the oracle cannot be trusted.

    ``oracle_dtype`` (e.g. ``np.longdouble``) runs the sweep on widened copies
    of the parameters, which lowers the round-off floor of the differences.
    The original arrays are put back afterwards.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    if oracle_dtype is None:
        return _sweep(f, params, epsilon)
    originals = [p.tensor.data for p in params]
    try:
        for p, orig in zip(params, originals):
            p.tensor.data = orig.astype(oracle_dtype)
        return _sweep(f, params, epsilon)
    finally:
        for p, orig in zip(params, originals):
            p.tensor.data = orig


def _sweep(f, params, epsilon):
    before_state = _snapshot(params)
    f0 = _scalar(f())
    out: Dict[int, np.ndarray] = {}
    for p in params:
        data = p.tensor.data
        grad = np.zeros(data.shape, dtype=np.float64)
        flat = data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = _scalar(f())
            flat[i] = orig - epsilon
            fm = _scalar(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * flat.dtype.type(epsilon))
        out[p.tensor.id] = grad
    f1 = _scalar(f())
    if f1 != f0 or not _unchanged(params, before_state):
        raise OracleInvalidError(
            f"function is not deterministic at the unperturbed point ({f0!r} vs {f1!r})"
        )
    return out


def analytic_gradient(f: Callable[[], Tensor], params: Sequence[Parameter]) -> Dict[int, np.ndarray]:
    with Tape() as tape:
        loss = f()
    return backward(loss, tape, params)


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def gradient_error(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    oracle_dtype=None,
) -> float:
    """Max entrywise relative error between backward() and central differences."""
    analytic = analytic_gradient(f, params)
    numeric = finite_diff_gradient(f, params, epsilon, oracle_dtype)
    return max(
        max_rel_error(analytic[p.tensor.id], numeric[p.tensor.id]) for p in params
    )
