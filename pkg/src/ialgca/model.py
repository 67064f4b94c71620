"""Residual backbone with pluggable channel attention and a temporal transformer.

Clips enter as (B, T, 3, H, W) arrays (a single clip may drop B). Frames go
through the residual stages independently; an attention block after each
stage rescales channels, optionally feeding an auxiliary classifier. The
fused frame features are projected to tokens, encoded along T, averaged
and classified.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import attention
from .autodiff import Parameter, Tensor, ops
from .errors import ClipIOError, ConfigError, ShapeError

FUSIONS = ("identity", "frame-diff")
CHECKPOINT_MAGIC = b"IALGCA01"


@dataclass
class ModelConfig:
    num_classes: int = 7
    frames: int = 8
    height: int = 32
    width: int = 32
    in_channels: int = 3
    widths: Tuple[int, ...] = (8, 16, 32)
    attention: str = "none"
    reduction: int = 4
    heads: int = 4
    layers: int = 2
    token_dim: int = 64
    mlp_dim: int = 128
    aux: bool = False
    fusion: str = "frame-diff"
    positional: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.frames < 1:
            raise ConfigError("frames must be positive")
        if self.attention not in attention.KINDS:
            raise ConfigError(f"attention must be one of {attention.KINDS}, got {self.attention!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigError(
                f"token_dim {self.token_dim} is not divisible by heads {self.heads}"
            )
        if not self.widths:
            raise ConfigError("at least one backbone stage is required")
        step = 2 ** len(self.widths)
        if self.height % step or self.width % step:
            raise ConfigError(
                f"input {self.height}x{self.width} is not divisible by 2^{len(self.widths)}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.attention != "none":
            for w in self.widths:
                attention._hidden(w, self.reduction)

    @property
    def feature_shape(self):
        step = 2 ** len(self.widths)
        return (self.widths[-1], self.height // step, self.width // step)

    def stage_shapes(self):
        return [
            (w, self.height // 2 ** (i + 1), self.width // 2 ** (i + 1))
            for i, w in enumerate(self.widths)
        ]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides):
        """112x112 input, ResNet18 widths, T = 16, r = 16, 4 heads, 2 encoders."""
        base = dict(
            frames=16,
            height=112,
            width=112,
            widths=(64, 128, 256, 512),
            reduction=16,
            heads=4,
            layers=2,
            token_dim=512,
            mlp_dim=1024,
            aux=True,
            attention="gca",
        )
        base.update(overrides)
        # 112 is divisible by 2^4
        return cls(**base)


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class DFERModel:
    """Parameter registry plus the forward pass.

    Components draw their initial values from independent seeded streams, so
    two configs that differ only in attention kind share backbone, transformer
    and head initialization.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: Dict[str, Parameter] = {}
        dt = np.dtype(cfg.dtype)
        streams = {
            k: np.random.default_rng([cfg.seed, i])
            for i, k in enumerate(("backbone", "attention", "aux", "tokens", "transformer", "head"))
        }

        self.add("norm.mean", np.zeros(cfg.in_channels, dt), trainable=False)
        self.add("norm.std", np.ones(cfg.in_channels, dt), trainable=False)

        rng = streams["backbone"]
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.widths):
            p = f"stage{i}"
            self.add(f"{p}.conv1.w", _normal(rng, (cout, cin, 3, 3), math.sqrt(2 / (cin * 9)), dt))
            self.add(f"{p}.conv1.b", np.zeros(cout, dt))
            self.add(f"{p}.conv2.w", _normal(rng, (cout, cout, 3, 3), math.sqrt(1 / (cout * 9)), dt))
            self.add(f"{p}.conv2.b", np.zeros(cout, dt))
            self.add(f"{p}.skip.w", _normal(rng, (cout, cin, 1, 1), math.sqrt(1 / cin), dt))
            self.add(f"{p}.skip.b", np.zeros(cout, dt))
            cin = cout

        self.blocks: List[Optional[object]] = []
        rng = streams["attention"]
        for i, (c, h, w) in enumerate(cfg.stage_shapes()):
            block = attention.make_block(cfg.attention, c, h, w, cfg.reduction, rng, dt, f"stage{i}.{cfg.attention}")
            self.blocks.append(block)
            if block is not None:
                for prm in block.parameters():
                    self._register(prm)

        rng = streams["aux"]
        self.aux_sites: List[int] = []
        if cfg.aux and cfg.attention != "none":
            for i, c in enumerate(cfg.widths):
                self.add(f"aux{i}.w", _normal(rng, (cfg.num_classes, c), math.sqrt(1 / c), dt))
                self.add(f"aux{i}.b", np.zeros(cfg.num_classes, dt))
                self.aux_sites.append(i)

        rng = streams["tokens"]
        flat = int(np.prod(cfg.feature_shape))
        d = cfg.token_dim
        self.add("tokens.w", _normal(rng, (d, flat), math.sqrt(1 / flat), dt))
        self.add("tokens.b", np.zeros(d, dt))
        if cfg.positional:
            self.add("tokens.pos", _normal(rng, (cfg.frames, d), 0.02, dt))

        rng = streams["transformer"]
        m = cfg.mlp_dim
        for li in range(cfg.layers):
            p = f"encoder{li}"
            for ln in ("ln1", "ln2"):
                self.add(f"{p}.{ln}.gamma", np.ones(d, dt))
                self.add(f"{p}.{ln}.beta", np.zeros(d, dt))
            for proj in ("q", "k", "v", "o"):
                self.add(f"{p}.attn.{proj}.w", _normal(rng, (d, d), math.sqrt(1 / d), dt))
                # a key bias shifts every score in a row equally; softmax ignores it
                if proj != "k":
                    self.add(f"{p}.attn.{proj}.b", np.zeros(d, dt))
            self.add(f"{p}.mlp.w1", _normal(rng, (m, d), math.sqrt(2 / d), dt))
            self.add(f"{p}.mlp.b1", np.zeros(m, dt))
            self.add(f"{p}.mlp.w2", _normal(rng, (d, m), math.sqrt(1 / m), dt))
            self.add(f"{p}.mlp.b2", np.zeros(d, dt))

        rng = streams["head"]
        self.add("head.w", _normal(rng, (cfg.num_classes, d), 0.01, dt))
        self.add("head.b", np.zeros(cfg.num_classes, dt))

    # ------------------------------------------------------------ registry

    def add(self, name, data, trainable=True) -> Parameter:
        return self._register(Parameter.of(name, data, trainable))

    def _register(self, prm: Parameter) -> Parameter:
        if prm.name in self.params:
            raise ConfigError(f"parameter {prm.name!r} registered twice")
        self.params[prm.name] = prm
        return prm

    def __getitem__(self, name) -> Tensor:
        return self.params[name].tensor

    def parameters(self, trainable_only=False) -> List[Parameter]:
        ps = list(self.params.values())
        return [p for p in ps if p.trainable] if trainable_only else ps

    def num_parameters(self, trainable_only=True) -> int:
        return int(sum(p.tensor.data.size for p in self.parameters(trainable_only)))

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def set_identity_attention(self):
        for block in self.blocks:
            if isinstance(block, attention.GCABlock):
                block.set_identity()

    def normalize(self, clips: np.ndarray) -> np.ndarray:
        mean = self.params["norm.mean"].data
        std = self.params["norm.std"].data
        shape = (-1, 1, 1)
        out = (clips - mean.reshape(shape)) / std.reshape(shape)
        return out.astype(self.cfg.dtype, copy=False)

    # ------------------------------------------------------------ forward

    def _conv(self, x, name, stride, padding):
        return ops.conv2d(x, self[f"{name}.w"], self[f"{name}.b"], stride=stride, padding=padding)

    def backbone_forward(self, clips) -> Tuple[Tensor, List[Tensor]]:
        """(B, T, 3, H, W) -> features (B, T, C, h, w) and auxiliary logits."""
        cfg = self.cfg
        x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=cfg.dtype))
        expect = (cfg.in_channels, cfg.height, cfg.width)
        if x.ndim != 5 or x.shape[2:] != expect:
            raise ShapeError("backbone_forward", x.shape, ("B", "T") + expect)
        b, t = x.shape[:2]
        h = ops.reshape(x, (b * t,) + expect)
        aux_logits = []
        for i in range(len(cfg.widths)):
            p = f"stage{i}"
            y = ops.relu(self._conv(h, f"{p}.conv1", 2, 1))
            y = self._conv(y, f"{p}.conv2", 1, 1)
            h = ops.relu(ops.add(y, self._conv(h, f"{p}.skip", 2, 0)))
            block = self.blocks[i]
            if block is not None:
                frames = ops.reshape(h, (b, t) + h.shape[1:])
                frames, _ = attention.apply_block(frames, block)
                if i in self.aux_sites:
                    pooled = ops.mean(ops.mean(frames, axis=(-2, -1)), axis=1)
                    aux_logits.append(ops.linear(pooled, self[f"aux{i}.w"], self[f"aux{i}.b"]))
                h = ops.reshape(frames, (b * t,) + h.shape[1:])
        return ops.reshape(h, (b, t) + h.shape[1:]), aux_logits

    def temporal_transformer(self, tokens, return_attention=False):
        """Pre-norm encoder layers over the frame axis of (..., T, D) tokens."""
        cfg = self.cfg
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if x.shape[-1] != cfg.token_dim:
            raise ShapeError("temporal_transformer", x.shape, (cfg.token_dim,))
        lead, t, d = x.shape[:-2], x.shape[-2], x.shape[-1]
        nh, dh = cfg.heads, d // cfg.heads
        maps = []

        def split(y):
            y = ops.reshape(y, lead + (t, nh, dh))
            return ops.transpose(y, _swap_axes(len(lead)))

        for li in range(cfg.layers):
            p = f"encoder{li}"
            y = ops.layer_norm(x, self[f"{p}.ln1.gamma"], self[f"{p}.ln1.beta"])
            q = split(ops.linear(y, self[f"{p}.attn.q.w"], self[f"{p}.attn.q.b"]))
            k = split(ops.linear(y, self[f"{p}.attn.k.w"]))
            v = split(ops.linear(y, self[f"{p}.attn.v.w"], self[f"{p}.attn.v.b"]))
            scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(dh))
            weights = ops.softmax(scores)
            maps.append(weights.data)
            ctx = ops.transpose(ops.matmul(weights, v), _swap_axes(len(lead)))
            ctx = ops.reshape(ctx, lead + (t, d))
            x = ops.add(x, ops.linear(ctx, self[f"{p}.attn.o.w"], self[f"{p}.attn.o.b"]))
            y = ops.layer_norm(x, self[f"{p}.ln2.gamma"], self[f"{p}.ln2.beta"])
            y = ops.relu(ops.linear(y, self[f"{p}.mlp.w1"], self[f"{p}.mlp.b1"]))
            x = ops.add(x, ops.linear(y, self[f"{p}.mlp.w2"], self[f"{p}.mlp.b2"]))
        return (x, maps) if return_attention else x

    def forward(self, clips) -> Tuple[Tensor, List[Tensor]]:
        """Batch forward: (B, T, 3, H, W) -> logits (B, K) and auxiliary logits."""
        cfg = self.cfg
        feats, aux = self.backbone_forward(clips)
        if feats.shape[1] != cfg.frames and cfg.positional:
            raise ShapeError("classify", feats.shape, (cfg.frames,), detail="frame count")
        feats = fuse_frames(feats, cfg.fusion)
        b, t = feats.shape[:2]
        tokens = ops.linear(ops.reshape(feats, (b, t, -1)), self["tokens.w"], self["tokens.b"])
        if cfg.positional:
            tokens = ops.add(tokens, self["tokens.pos"])
        encoded = self.temporal_transformer(tokens)
        pooled = ops.mean(encoded, axis=1)
        return ops.linear(pooled, self["head.w"], self["head.b"]), aux

    __call__ = forward

    def classify(self, clip) -> Tuple[Tensor, List[Tensor]]:
        """Single clip (T, 3, H, W) -> logits (K,) and auxiliary logits (K,) each."""
        arr = clip.data if isinstance(clip, Tensor) else np.asarray(clip)
        if arr.ndim != 4:
            raise ShapeError("classify", arr.shape, ("T", 3, "H", "W"))
        logits, aux = self.forward(ops.reshape(clip, (1,) + arr.shape) if isinstance(clip, Tensor) else arr[None])
        k = self.cfg.num_classes
        return ops.reshape(logits, (k,)), [ops.reshape(a, (k,)) for a in aux]


def _swap_axes(n_lead):
    lead = tuple(range(n_lead))
    return lead + (n_lead + 1, n_lead, n_lead + 2)


def fuse_frames(features, kind: str = "frame-diff"):
    """Frame fusion on (..., T, C, H, W).

    ``frame-diff`` adds the temporal difference to each frame,
    out_t = f_t + (f_t - f_{t-1}) with f_{-1} := f_0.
    """
    if kind == "identity":
        return features
    if kind != "frame-diff":
        raise ConfigError(f"unknown fusion {kind!r}")
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim < 4 or x.shape[-4] < 1:
        raise ShapeError("fuse_frames", x.shape, ("T", "C", "H", "W"))
    t_axis = x.ndim - 4
    lead = (slice(None),) * t_axis
    if x.shape[t_axis] == 1:
        return x
    prev = ops.concat(
        [ops.getitem(x, lead + (slice(0, 1),)), ops.getitem(x, lead + (slice(0, -1),))],
        axis=t_axis,
    )
    return ops.sub(ops.scale(x, 2.0), prev)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: DFERModel, path, write_config=True) -> None:
    """Binary parameter dump; the model config goes to a JSON sidecar."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(model.params))]
    for name, prm in model.params.items():
        raw = name.encode("utf-8")
        data = prm.tensor.data
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    if write_config:
        config_path(path).write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def config_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ClipIOError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ClipIOError(f"{path}: not a checkpoint (bad magic {buf[:8]!r})")
    try:
        (count,) = struct.unpack_from("<I", buf, 8)
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ClipIOError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise ClipIOError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> DFERModel:
    """Rebuild a model from ``path``. Without ``cfg`` the JSON sidecar is used."""
    if cfg is None:
        sidecar = config_path(path)
        try:
            cfg = ModelConfig.from_dict(json.loads(sidecar.read_text()))
        except OSError:
            raise ClipIOError(f"missing model config {sidecar}") from None
    model = DFERModel(cfg)
    stored = read_checkpoint(path)
    if set(stored) != set(model.params):
        missing = sorted(set(model.params) - set(stored))
        extra = sorted(set(stored) - set(model.params))
        raise ClipIOError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, arr in stored.items():
        prm = model.params[name]
        if arr.shape != prm.shape:
            raise ClipIOError(f"{path}: {name} has shape {arr.shape}, config expects {prm.shape}")
        prm.tensor.data[...] = arr
    return model


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
