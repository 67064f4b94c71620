import math

import numpy as np
import pytest

from ialgca import attention
from ialgca.attention import (
    CBAMChannelBlock,
    GCABlock,
    SEBlock,
    cbam_channel_attention,
    gca_attention,
    gca_descriptor,
    se_attention,
)
from ialgca.autodiff import Tensor, gradient_error
from ialgca.errors import ConfigError, ShapeError
from ialgca.gradcheck_suite import BLOCK_TOL, _block_case


def _set(block, **arrays):
    for name, value in arrays.items():
        getattr(block, name).data[...] = value


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _excite_loops(z, w1, w2):
    # straight-line sigma(W2 relu(W1 z)) for one descriptor vector
    hidden = [max(0.0, sum(w1[j, c] * z[c] for c in range(len(z)))) for j in range(w1.shape[0])]
    return [_sigmoid(sum(w2[c, j] * hidden[j] for j in range(len(hidden)))) for c in range(w2.shape[0])]


# ---------------------------------------------------------------- SE


def test_se_zero_weights_halve_the_input():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    block = SEBlock.create(4, 2)
    _set(block, w1=0, w2=0)
    out, s = se_attention(Tensor(x), block)
    np.testing.assert_array_equal(s.data, np.full((2, 4), 0.5))
    np.testing.assert_array_equal(out.data, x / 2)


def test_se_zero_input():
    block = SEBlock.create(4, 2, np.random.default_rng(1))
    out, s = se_attention(Tensor(np.zeros((1, 4, 2, 2))), block)
    np.testing.assert_array_equal(s.data, np.full((1, 4), 0.5))
    np.testing.assert_array_equal(out.data, 0)


def test_se_matches_loop_recomputation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 2, 2))
    block = SEBlock.create(2, 1, rng)
    _set(block, w1=rng.standard_normal((2, 2)) * 0.5, w2=rng.standard_normal((2, 2)) * 0.5)
    out, s = se_attention(Tensor(x), block)
    z = [sum(x[0, c, i, j] for i in range(2) for j in range(2)) / 4 for c in range(2)]
    expected = _excite_loops(z, block.w1.data, block.w2.data)
    np.testing.assert_allclose(s.data[0], expected, rtol=1e-14)
    for c in range(2):
        np.testing.assert_allclose(out.data[0, c], expected[c] * x[0, c], rtol=1e-14)


# ---------------------------------------------------------------- CBAM channel


def test_cbam_zero_weights():
    block = CBAMChannelBlock.create(3, 1)
    _set(block, w1=0, w2=0)
    _, s = cbam_channel_attention(Tensor(np.ones((2, 3, 2, 2))), block)
    np.testing.assert_array_equal(s.data, 0.5)


def test_cbam_constant_input_doubles_the_mlp():
    rng = np.random.default_rng(3)
    block = CBAMChannelBlock.create(3, 1, rng)
    _set(block, w1=rng.standard_normal((3, 3)), w2=rng.standard_normal((3, 3)))
    x = np.broadcast_to(rng.standard_normal((1, 3, 1, 1)), (1, 3, 4, 4)).copy()
    _, s = cbam_channel_attention(Tensor(x), block)
    z = x[0, :, 0, 0]
    mlp = block.w2.data @ np.maximum(block.w1.data @ z, 0)
    np.testing.assert_allclose(s.data[0], 1 / (1 + np.exp(-2 * mlp)), rtol=1e-14)


def test_cbam_matches_loop_recomputation():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 2, 2))
    block = CBAMChannelBlock.create(2, 1, rng)
    _set(block, w1=rng.standard_normal((2, 2)), w2=rng.standard_normal((2, 2)))
    _, s = cbam_channel_attention(Tensor(x), block)
    w1, w2 = block.w1.data, block.w2.data

    def mlp(z):
        hidden = [max(0.0, w1[j, 0] * z[0] + w1[j, 1] * z[1]) for j in range(2)]
        return [w2[c, 0] * hidden[0] + w2[c, 1] * hidden[1] for c in range(2)]

    vals = [[x[0, c, i, j] for i in range(2) for j in range(2)] for c in range(2)]
    a = mlp([sum(v) / 4 for v in vals])
    m = mlp([max(v) for v in vals])
    np.testing.assert_allclose(s.data[0], [_sigmoid(a[c] + m[c]) for c in range(2)], rtol=1e-14)


# ---------------------------------------------------------------- GCA


def _gate_block(channels=2, h=2, w=2):
    # W1 = I, W2 = [[1, -1], ...]: the gate logit is z0 - z1 for every channel
    block = GCABlock.create(channels, h, w, 1, np.random.default_rng(0))
    block.set_identity()
    w2 = np.zeros((channels, channels))
    w2[:, 0], w2[:, 1] = 1.0, -1.0
    _set(block, w1=np.eye(channels), w2=w2)
    return block


def _frames_with_gates(gates, h=2, w=2):
    # per-frame constant channels so that z = (logit+, logit-) hits each gate
    x = np.zeros((len(gates), 2, h, w))
    for t, g in enumerate(gates):
        logit = math.log(g / (1 - g))
        x[t, 0] = max(logit, 0.0)
        x[t, 1] = max(-logit, 0.0)
    return x


def test_gca_hand_evaluated_weights():
    block = _gate_block()
    x = _frames_with_gates([0.9, 0.4])
    _, weights = gca_attention(Tensor(x), block)
    # mean gate 0.65; 2 sqrt(0.9 * 0.65), 2 sqrt(0.4 * 0.65)
    np.testing.assert_allclose(weights.data[:, 0], [1.52971, 1.01980], atol=5e-6)
    np.testing.assert_allclose(weights.data[:, 0], [2 * math.sqrt(0.585), 2 * math.sqrt(0.26)], rtol=1e-12)


def test_gca_constant_gate_doubles():
    block = _gate_block()
    for v in (0.2, 0.7):
        _, weights = gca_attention(Tensor(_frames_with_gates([v, v, v])), block)
        np.testing.assert_allclose(weights.data, 2 * v, rtol=1e-12)


def test_gca_identity_init_is_bitwise_identity():
    rng = np.random.default_rng(5)
    block = GCABlock.create(4, 3, 5, 2, rng)
    block.set_identity()
    x = rng.standard_normal((3, 4, 3, 5)) * 10
    out, weights = gca_attention(Tensor(x), block)
    np.testing.assert_array_equal(weights.data, 1.0)
    np.testing.assert_array_equal(out.data, x)


def test_gca_descriptor_matches_loops():
    rng = np.random.default_rng(6)
    block = GCABlock.create(2, 3, 2, 1, rng, kernel_noise=0.3)
    x = rng.standard_normal((2, 2, 3, 2))
    z = gca_descriptor(Tensor(x), block).data
    k = block.kernel.data
    for t in range(2):
        for c in range(2):
            ref = sum(x[t, c, i, j] * k[c, i, j] for i in range(3) for j in range(2))
            assert abs(z[t, c] - ref) <= 1e-14


def test_location_sensitivity():
    # same spatial mean, different layout
    a = np.zeros((1, 1, 2, 2))
    b = np.zeros((1, 1, 2, 2))
    a[0, 0, 0, 0] = 1.0
    b[0, 0, 1, 1] = 1.0
    se = SEBlock.create(1, 1)
    _, s_a = se_attention(Tensor(a), se)
    _, s_b = se_attention(Tensor(b), se)
    np.testing.assert_array_equal(s_a.data, s_b.data)
    gca = GCABlock.create(1, 2, 2, 1, kernel_noise=0)
    gca.kernel.data[...] = [[[0.7, 0.1], [0.1, 0.1]]]
    z_a = gca_descriptor(Tensor(a), gca).data
    z_b = gca_descriptor(Tensor(b), gca).data
    assert z_a[0, 0] != z_b[0, 0]


# ---------------------------------------------------------------- ranges


def _random_setting(rng, kind, max_scale=1.0):
    t, c = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    r = int(rng.integers(1, c + 1))
    block = attention.make_block(kind, c, h, w, r, rng, np.float64, kind)
    scale = rng.uniform(0.1, max_scale)
    for prm in block.parameters():
        prm.data[...] = rng.standard_normal(prm.shape) * scale
        if prm.name.endswith("kernel"):
            # same order as the averaging kernel, so the descriptor is
            # comparable to a spatial mean
            prm.data[...] /= h * w
    x = rng.standard_normal((t, c, h, w)) * rng.uniform(0.1, 2 * max_scale)
    return x, block


@pytest.mark.parametrize("kind,upper", [("se", 1.0), ("cbam", 1.0), ("gca", 2.0)])
def test_attention_weights_stay_in_range(kind, upper):
    # unit-scale draws keep gate logits well inside +-36, where float64 can
    # still tell sigmoid(v) apart from 0 and 1; past that the open bounds
    # hold mathematically but round to the endpoints
    rng = np.random.default_rng([7, len(kind)])
    lo, hi = np.inf, -np.inf
    for _ in range(10_000 // 3):
        x, block = _random_setting(rng, kind)
        _, s = attention.apply_block(Tensor(x), block)
        lo, hi = min(lo, s.data.min()), max(hi, s.data.max())
    assert 0 < lo and hi < upper


def test_random_search_finds_gca_weight_above_one_and_a_half():
    rng = np.random.default_rng(8)
    best = 0.0
    for _ in range(2000):
        x, block = _random_setting(rng, "gca", max_scale=3.0)
        best = max(best, float(gca_attention(Tensor(x), block)[1].data.max()))
        if best > 1.5:
            break
    assert best > 1.5


# ---------------------------------------------------------------- gradients and errors


@pytest.mark.parametrize("kind", ["se", "cbam", "gca"])
@pytest.mark.parametrize("seed", range(5))
def test_block_gradients(kind, seed):
    f, params = _block_case(kind)(np.random.default_rng([seed, 17]))
    assert gradient_error(f, params, 1e-5, np.longdouble) <= BLOCK_TOL


def test_reduction_must_leave_hidden_units():
    with pytest.raises(ConfigError):
        SEBlock.create(4, 8)


def test_channel_mismatch_is_a_shape_error():
    block = SEBlock.create(4, 2)
    with pytest.raises(ShapeError):
        se_attention(Tensor(np.zeros((1, 3, 2, 2))), block)
    gca = GCABlock.create(4, 2, 2, 2)
    with pytest.raises(ShapeError):
        gca_attention(Tensor(np.zeros((1, 4, 3, 2))), gca)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        attention.make_block("eca", 4, 2, 2, 1, np.random.default_rng(0), np.float64, "x")
