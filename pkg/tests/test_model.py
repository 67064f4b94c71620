import numpy as np
import pytest

from ialgca.autodiff import Tape, Tensor, backward, gradient_error, ops
from ialgca.errors import ClipIOError, ConfigError, ShapeError
from ialgca.gradcheck_suite import MODEL_TOL, BLOCK_TOL, _fusion_case, _model_case, _transformer_case, tiny_model_config
from ialgca.losses import LossConfig, combined_loss
from ialgca.model import (
    DFERModel,
    ModelConfig,
    config_path,
    fuse_frames,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)


def small_cfg(**kw):
    base = dict(num_classes=4, frames=3, height=8, width=8, widths=(4, 8), reduction=2,
                heads=2, layers=1, token_dim=8, mlp_dim=12, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- backbone


def test_default_backbone_shape():
    model = DFERModel(ModelConfig())
    clips = np.random.default_rng(0).standard_normal((1, 8, 3, 32, 32))
    feats, aux = model.backbone_forward(clips)
    assert feats.shape == (1, 8, 32, 4, 4)
    assert aux == []


def test_aux_heads_follow_attention_sites():
    model = DFERModel(small_cfg(attention="se", aux=True))
    clips = np.random.default_rng(1).standard_normal((2, 3, 3, 8, 8))
    logits, aux = model(clips)
    assert logits.shape == (2, 4)
    assert [a.shape for a in aux] == [(2, 4), (2, 4)]


def test_identity_gca_matches_attention_free_model_bitwise():
    clips = np.random.default_rng(2).standard_normal((2, 3, 3, 8, 8))
    plain = DFERModel(small_cfg(attention="none"))
    gca = DFERModel(small_cfg(attention="gca"))
    gca.set_identity_attention()
    f_plain, _ = plain.backbone_forward(clips)
    f_gca, _ = gca.backbone_forward(clips)
    np.testing.assert_array_equal(f_plain.data, f_gca.data)
    np.testing.assert_array_equal(plain(clips)[0].data, gca(clips)[0].data)


def test_wrong_clip_shape():
    model = DFERModel(small_cfg())
    with pytest.raises(ShapeError):
        model.backbone_forward(np.zeros((1, 3, 3, 16, 16)))


@pytest.mark.parametrize(
    "kw", [dict(token_dim=10, heads=4), dict(num_classes=1), dict(attention="eca"),
           dict(height=10), dict(widths=(4, 8), reduction=8, attention="se")]
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


# ---------------------------------------------------------------- fusion


def test_fusion_identity():
    x = np.random.default_rng(3).standard_normal((1, 4, 2, 3, 3))
    np.testing.assert_array_equal(fuse_frames(Tensor(x), "identity").data, x)


def test_fusion_constant_over_time():
    x = np.broadcast_to(np.random.default_rng(4).standard_normal((1, 1, 2, 3, 3)), (1, 5, 2, 3, 3)).copy()
    np.testing.assert_array_equal(fuse_frames(Tensor(x), "frame-diff").data, x)


def test_fusion_worked_example():
    x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1, 1)
    np.testing.assert_array_equal(fuse_frames(Tensor(x), "frame-diff").data.reshape(-1), [1.0, 5.0])


def test_fusion_gradient():
    f, params = _fusion_case(np.random.default_rng(5))
    assert gradient_error(f, params, 1e-5, np.longdouble) <= BLOCK_TOL


# ---------------------------------------------------------------- transformer


def test_zero_projections_make_the_transformer_an_identity():
    model = DFERModel(small_cfg(layers=2))
    for name in list(model.params):
        if name.endswith(("attn.o.w", "attn.o.b", "mlp.w2", "mlp.b2")):
            model.params[name].data[...] = 0
    tokens = np.random.default_rng(6).standard_normal((2, 3, 8))
    np.testing.assert_array_equal(model.temporal_transformer(Tensor(tokens)).data, tokens)


def test_single_token_reduces_to_value_output_path():
    model = DFERModel(small_cfg())
    rng = np.random.default_rng(7)
    for name in model.params:
        if name.startswith("encoder"):
            model.params[name].data[...] = rng.standard_normal(model.params[name].shape)
    tokens = rng.standard_normal((1, 1, 8))
    out, maps = model.temporal_transformer(Tensor(tokens), return_attention=True)
    np.testing.assert_array_equal(maps[0], 1.0)

    p = lambda n: model.params[f"encoder0.{n}"].data  # noqa: E731

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    x = tokens
    v = ln(x, p("ln1.gamma"), p("ln1.beta")) @ p("attn.v.w").T + p("attn.v.b")
    x = x + v @ p("attn.o.w").T + p("attn.o.b")
    h = np.maximum(ln(x, p("ln2.gamma"), p("ln2.beta")) @ p("mlp.w1").T + p("mlp.b1"), 0)
    x = x + h @ p("mlp.w2").T + p("mlp.b2")
    np.testing.assert_allclose(out.data, x, rtol=1e-10, atol=1e-12)


def test_attention_rows_sum_to_one():
    model = DFERModel(small_cfg(layers=2, frames=5))
    tokens = np.random.default_rng(8).standard_normal((3, 5, 8)) * 3
    _, maps = model.temporal_transformer(Tensor(tokens), return_attention=True)
    for m in maps:
        assert m.shape == (3, 2, 5, 5)
        assert np.max(np.abs(m.sum(-1) - 1)) <= 1e-12


def test_token_width_mismatch():
    with pytest.raises(ShapeError):
        DFERModel(small_cfg()).temporal_transformer(Tensor(np.zeros((3, 6))))


@pytest.mark.parametrize("seed", range(3))
def test_transformer_gradient(seed):
    f, params = _transformer_case(np.random.default_rng([seed, 9]))
    assert gradient_error(f, params, 1e-5, np.longdouble) <= BLOCK_TOL


# ---------------------------------------------------------------- classify


def test_classify_is_deterministic():
    model = DFERModel(small_cfg(attention="gca", aux=True))
    clip = np.random.default_rng(9).standard_normal((3, 3, 8, 8))
    a, aux_a = model.classify(clip)
    b, aux_b = model.classify(clip.copy())
    assert a.shape == (4,)
    np.testing.assert_array_equal(a.data, b.data)
    for x, y in zip(aux_a, aux_b):
        np.testing.assert_array_equal(x.data, y.data)


def test_frame_permutation_changes_logits():
    model = DFERModel(small_cfg(attention="gca"))
    clip = np.random.default_rng(10).standard_normal((3, 3, 8, 8))
    a = model.classify(clip)[0].data
    b = model.classify(clip[[2, 0, 1]])[0].data
    assert not np.array_equal(a, b)


def test_end_to_end_gradient():
    f, params = _model_case(np.random.default_rng(11))
    assert gradient_error(f, params, 1e-5, np.longdouble) <= MODEL_TOL


def test_every_parameter_is_reachable():
    model = DFERModel(tiny_model_config(seed=3))
    rng = np.random.default_rng(12)
    clips = rng.standard_normal((4, 2, 3, 8, 8))
    targets = rng.integers(0, 3, 4)
    params = model.parameters(trainable_only=True)
    with Tape() as tape:
        logits, aux = model(clips)
        loss = combined_loss(logits, aux, targets, LossConfig(lam=0.1, aux_weight=0.3))
    grads = backward(loss, tape, params)
    dead = [p.name for p in params if not np.any(grads[p.tensor.id])]
    assert dead == []


def test_dead_network_logits_ignore_clip_content():
    model = DFERModel(small_cfg(attention="gca", aux=True))
    rng = np.random.default_rng(13)
    for name, prm in model.params.items():
        if name.startswith("stage") and name.endswith(".w") and ("conv" in name or "skip" in name):
            prm.data[...] = 0
        elif name.endswith((".b",)) and name.startswith("stage"):
            prm.data[...] = rng.standard_normal(prm.shape)
    outs = [model(rng.standard_normal((1, 3, 3, 8, 8)))[0].data for _ in range(3)]
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_parameter_registry():
    model = DFERModel(small_cfg(attention="cbam", aux=True))
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    assert model.num_parameters() == DFERModel(small_cfg(attention="cbam", aux=True)).num_parameters()
    assert "encoder0.attn.k.b" not in model.params


def test_attention_variants_share_other_initialization():
    a = DFERModel(small_cfg(attention="none", seed=5))
    b = DFERModel(small_cfg(attention="gca", seed=5))
    for name, prm in a.params.items():
        np.testing.assert_array_equal(prm.data, b.params[name].data)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(num_classes=3, frames=2, height=8, width=8, widths=(4, 8), attention="gca",
                      reduction=2, heads=2, layers=1, token_dim=8, mlp_dim=8, aux=True)
    model = DFERModel(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    assert path.read_bytes()[:8] == b"IALGCA01"
    assert config_path(path).exists()
    loaded = load_checkpoint(path)
    for name, prm in model.params.items():
        np.testing.assert_array_equal(prm.data, loaded.params[name].data)
    clips = np.random.default_rng(14).standard_normal((2, 2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(model(clips)[0].data, loaded(clips)[0].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ClipIOError):
        read_checkpoint(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(DFERModel(small_cfg(dtype="float32", token_dim=8)), path)
    with pytest.raises(ClipIOError):
        load_checkpoint(path, small_cfg(dtype="float32", mlp_dim=16))


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(DFERModel(small_cfg(dtype="float32")), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ClipIOError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ClipIOError):
        read_checkpoint(tmp_path / "absent.ckpt")
