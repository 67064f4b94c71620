"""Finite-difference checks for every primitive, block, loss and the tiny model.

Each case builds a scalar function of some parameters in 64-bit and reports
the max relative error between backward() and central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import attention, losses
from .autodiff import Parameter, Tensor, gradient_error, ops
from .model import DFERModel, ModelConfig, fuse_frames

BLOCK_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    module: str
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _p(rng, name, shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Parameter.of(name, data)


def primitive_cases(seed: int = 0) -> Dict[str, Callable]:
    """name -> builder(rng) returning (f, params)."""

    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn

        return deco

    def projected(make_out, params, rng):
        # random linear functional, drawn once so repeated calls agree
        w = None

        def f():
            nonlocal w
            out = make_out()
            if w is None:
                w = rng.standard_normal(out.shape)
            return ops.sum(ops.mul(out, w))

        return f, params

    @case("add")
    def _(rng):
        a, b = _p(rng, "a", (3, 4)), _p(rng, "b", (4,))
        return projected(lambda: ops.add(a.tensor, b.tensor), [a, b], rng)

    @case("sub")
    def _(rng):
        a, b = _p(rng, "a", (2, 3, 4)), _p(rng, "b", (3, 1))
        return projected(lambda: ops.sub(a.tensor, b.tensor), [a, b], rng)

    @case("mul")
    def _(rng):
        a, b = _p(rng, "a", (3, 4)), _p(rng, "b", (3, 4))
        return projected(lambda: ops.mul(a.tensor, b.tensor), [a, b], rng)

    @case("scale")
    def _(rng):
        a = _p(rng, "a", (5,))
        return projected(lambda: ops.scale(a.tensor, -1.7), [a], rng)

    @case("matmul")
    def _(rng):
        a, b = _p(rng, "a", (2, 3, 4)), _p(rng, "b", (4, 5))
        return projected(lambda: ops.matmul(a.tensor, b.tensor), [a, b], rng)

    @case("scale_channels")
    def _(rng):
        s, x = _p(rng, "s", (2, 3)), _p(rng, "x", (2, 3, 4, 4))
        return projected(lambda: ops.scale_channels(s.tensor, x.tensor), [s, x], rng)

    @case("relu")
    def _(rng):
        # keep entries away from the kink
        x = Parameter.of("x", rng.choice([-1, 1], (3, 4)) * (np.abs(rng.standard_normal((3, 4))) + 0.1))
        return projected(lambda: ops.relu(x.tensor), [x], rng)

    @case("sigmoid")
    def _(rng):
        x = _p(rng, "x", (3, 4))
        return projected(lambda: ops.sigmoid(x.tensor), [x], rng)

    @case("sqrt")
    def _(rng):
        x = _p(rng, "x", (3, 4), low=0.2)
        return projected(lambda: ops.sqrt(x.tensor), [x], rng)

    @case("exp")
    def _(rng):
        x = _p(rng, "x", (3, 4))
        return projected(lambda: ops.exp(x.tensor), [x], rng)

    @case("log")
    def _(rng):
        x = _p(rng, "x", (3, 4), low=0.2)
        return projected(lambda: ops.log(x.tensor), [x], rng)

    @case("softmax")
    def _(rng):
        x = _p(rng, "x", (3, 5))
        return projected(lambda: ops.softmax(x.tensor), [x], rng)

    @case("log_softmax")
    def _(rng):
        x = _p(rng, "x", (3, 5))
        return projected(lambda: ops.log_softmax(x.tensor), [x], rng)

    @case("mean")
    def _(rng):
        x = _p(rng, "x", (2, 3, 4))
        return projected(lambda: ops.mean(x.tensor, axis=(0, 2)), [x], rng)

    @case("sum")
    def _(rng):
        x = _p(rng, "x", (2, 3, 4))
        return projected(lambda: ops.sum(x.tensor, axis=1, keepdims=True), [x], rng)

    @case("spatial_weighted_sum")
    def _(rng):
        x, w = _p(rng, "x", (2, 3, 4, 5)), _p(rng, "w", (3, 4, 5))
        return projected(lambda: ops.spatial_weighted_sum(x.tensor, w.tensor), [x, w], rng)

    @case("conv2d")
    def _(rng):
        x, w, b = _p(rng, "x", (2, 2, 6, 6)), _p(rng, "w", (3, 2, 3, 3)), _p(rng, "b", (3,))
        stride = int(rng.integers(1, 3))
        return projected(lambda: ops.conv2d(x.tensor, w.tensor, b.tensor, stride=stride, padding=1), [x, w, b], rng)

    @case("layer_norm")
    def _(rng):
        x, g, b = _p(rng, "x", (3, 6)), _p(rng, "g", (6,)), _p(rng, "b", (6,))
        return projected(lambda: ops.layer_norm(x.tensor, g.tensor, b.tensor), [x, g, b], rng)

    @case("concat")
    def _(rng):
        a, b = _p(rng, "a", (2, 3)), _p(rng, "b", (2, 2))
        return projected(lambda: ops.concat([a.tensor, b.tensor], axis=1), [a, b], rng)

    @case("reshape")
    def _(rng):
        a = _p(rng, "a", (2, 6))
        return projected(lambda: ops.reshape(a.tensor, (3, 4)), [a], rng)

    @case("transpose")
    def _(rng):
        a = _p(rng, "a", (2, 3, 4))
        return projected(lambda: ops.transpose(a.tensor, (2, 0, 1)), [a], rng)

    @case("max_last")
    def _(rng):
        # distinct entries so the argmax is stable under perturbation
        a = Parameter.of("a", rng.permutation(12).reshape(3, 4) * 0.5 + rng.uniform(0, 0.1, (3, 4)))
        return projected(lambda: ops.max_last(a.tensor)[0], [a], rng)

    @case("pick")
    def _(rng):
        a = _p(rng, "a", (4, 5))
        idx = rng.integers(0, 5, 4)
        return projected(lambda: ops.pick(a.tensor, idx), [a], rng)

    @case("getitem")
    def _(rng):
        a = _p(rng, "a", (4, 5))
        return projected(lambda: ops.getitem(a.tensor, (slice(1, 3), slice(None, None, 2))), [a], rng)

    return cases


def _block_case(kind):
    def build(rng):
        t, c, h, w = 2, 3, 4, 4
        x = _p(rng, "x", (t, c, h, w))
        block = attention.make_block(kind, c, h, w, 1, rng, np.float64, kind)
        # random weights large enough that the gates move away from 1/2
        for prm in block.parameters():
            if not prm.name.endswith("kernel"):
                prm.tensor.data[...] = rng.standard_normal(prm.shape)
        weights = rng.standard_normal((t, c, h, w))

        def f():
            out, _ = attention.apply_block(x.tensor, block)
            return ops.sum(ops.mul(out, weights))

        return f, [x] + block.parameters()

    return build


def _loss_case(fn, near_tie=False):
    def build(rng):
        logits = rng.standard_normal((4, 5))
        targets = rng.integers(0, 5, 4)
        if near_tie:
            # second-largest competitor sits 1e-3 below the largest
            for i, t in enumerate(targets):
                others = [k for k in range(5) if k != t]
                a, b = rng.choice(others, 2, replace=False)
                logits[i, a] = logits[i].max() + 0.5
                logits[i, b] = logits[i, a] - 1e-3
        x = Parameter.of("logits", logits)
        return (lambda: fn(x.tensor, targets)), [x]

    return build


def _combined_case(rng):
    x = _p(rng, "logits", (3, 4))
    aux = [_p(rng, f"aux{i}", (3, 4)) for i in range(2)]
    targets = rng.integers(0, 4, 3)
    cfg = losses.LossConfig(lam=0.1, aux_weight=0.3)
    return (lambda: losses.combined_loss(x.tensor, [a.tensor for a in aux], targets, cfg)), [x] + aux


def _fusion_case(rng):
    x = _p(rng, "features", (2, 3, 2, 2, 2))
    weights = rng.standard_normal(x.shape)
    return (lambda: ops.sum(ops.mul(fuse_frames(x.tensor, "frame-diff"), weights))), [x]


def _transformer_case(rng):
    cfg = ModelConfig(num_classes=3, frames=3, height=4, width=4, widths=(2,), heads=2,
                      layers=1, token_dim=4, mlp_dim=6, dtype="float64", seed=int(rng.integers(1 << 30)))
    model = DFERModel(cfg)
    tokens = _p(rng, "tokens", (2, 3, 4))
    names = [n for n in model.params if n.startswith("encoder")]
    for n in names:
        model.params[n].tensor.data[...] += 0.3 * rng.standard_normal(model.params[n].shape)
    weights = rng.standard_normal((2, 3, 4))
    return (
        lambda: ops.sum(ops.mul(model.temporal_transformer(tokens.tensor), weights)),
        [tokens] + [model.params[n] for n in names],
    )


def tiny_model_config(attention_kind="gca", seed=0) -> ModelConfig:
    return ModelConfig(num_classes=3, frames=2, height=8, width=8, widths=(2, 4),
                       attention=attention_kind, reduction=1, heads=2, layers=1,
                       token_dim=4, mlp_dim=6, aux=True, dtype="float64", seed=seed)


def _model_case(rng):
    model = DFERModel(tiny_model_config(seed=int(rng.integers(1 << 30))))
    # move the near-identity attention init to a generic point so that no
    # gradient entry is small enough to drown in round-off
    for block in model.blocks:
        for prm in block.parameters():
            if not prm.name.endswith("kernel"):
                prm.tensor.data[...] = rng.standard_normal(prm.shape)
    clips = rng.standard_normal((2, 2, 3, 8, 8))
    targets = rng.integers(0, 3, 2)
    cfg = losses.LossConfig(lam=0.1, aux_weight=0.3)

    def f():
        logits, aux = model(clips)
        return losses.combined_loss(logits, aux, targets, cfg)

    return f, model.parameters(trainable_only=True)


def all_cases() -> List[tuple]:
    """(module, name, builder, tolerance)."""
    out = [("tensor", name, b, BLOCK_TOL) for name, b in primitive_cases().items()]
    out += [("attention", k, _block_case(k), BLOCK_TOL) for k in ("se", "cbam", "gca")]
    out += [
        ("losses", "cross_entropy", _loss_case(losses.cross_entropy), BLOCK_TOL),
        ("losses", "intensity_aware", _loss_case(losses.intensity_aware_loss), BLOCK_TOL),
        ("losses", "intensity_aware_near_tie", _loss_case(losses.intensity_aware_loss, True), BLOCK_TOL),
        ("losses", "cross_entropy_near_tie", _loss_case(losses.cross_entropy, True), BLOCK_TOL),
        ("losses", "combined", _combined_case, BLOCK_TOL),
        ("model", "fuse_frames", _fusion_case, BLOCK_TOL),
        ("model", "transformer_layer", _transformer_case, BLOCK_TOL),
        ("model", "tiny_model_end_to_end", _model_case, MODEL_TOL),
    ]
    return out


MODULES = ("tensor", "attention", "losses", "model")


def run_suite(
    module: Optional[str] = None, seed: int = 0, epsilon: float = 1e-5, oracle_dtype=np.longdouble
) -> List[CheckResult]:
    """Analytic gradients are 64-bit; the difference oracle runs in ``oracle_dtype``."""
    results = []
    for mod, name, build, tol in all_cases():
        if module is not None and mod != module:
            continue
        rng = np.random.default_rng([seed, len(results)])
        start = time.perf_counter()
        f, params = build(rng)
        err = gradient_error(f, params, epsilon, oracle_dtype)
        results.append(CheckResult(mod, name, err, tol, time.perf_counter() - start))
    return results
