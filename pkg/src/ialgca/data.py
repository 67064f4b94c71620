"""Clip files, manifests, segment samplers and the synthetic intensity dataset."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ClipIOError, ConfigError, ContractError

CLIP_MAGIC = b"DFERCLP1"
HEADER = struct.Struct("<8s4I")
MANIFEST_FIELDS = ("path", "label", "num_frames", "intensity")


# ---------------------------------------------------------------- clip files


def write_clip(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ContractError(f"clip must be (T, C, H, W), got {frames.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(CLIP_MAGIC, *frames.shape))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_clip_header(path) -> Tuple[int, int, int, int]:
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
    except OSError as exc:
        raise ClipIOError(f"cannot open clip {path}: {exc.strerror}") from None
    if len(head) < HEADER.size or head[:8] != CLIP_MAGIC:
        raise ClipIOError(f"{path}: bad clip magic")
    return HEADER.unpack(head)[1:]


@dataclass
class ClipRecord:
    path: str
    label: int
    num_frames: int
    intensity: Optional[float] = None

    def __post_init__(self):
        if self.num_frames < 1:
            raise ContractError(f"{self.path}: num_frames must be positive")


def load_clip(record: ClipRecord, indices: Sequence[int]) -> np.ndarray:
    """Read the frames at ``indices`` (repeats allowed) as a (T, C, H, W) array."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= record.num_frames):
        raise ClipIOError(
            f"{record.path}: frame index out of range [0, {record.num_frames})"
        )
    n, c, h, w = read_clip_header(record.path)
    if n != record.num_frames:
        raise ClipIOError(
            f"{record.path}: file holds {n} frames, manifest says {record.num_frames}"
        )
    frame_bytes = c * h * w * 4
    out = np.empty((idx.size, c, h, w), dtype=np.float32)
    with open(record.path, "rb") as fh:
        for k, i in enumerate(idx):
            fh.seek(HEADER.size + int(i) * frame_bytes)
            raw = fh.read(frame_bytes)
            if len(raw) != frame_bytes:
                raise ClipIOError(f"{record.path}: truncated at frame {i}")
            out[k] = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    return out


# ---------------------------------------------------------------- manifests


@dataclass
class Manifest:
    records: List[ClipRecord]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ContractError(f"split must be train or test, got {self.split!r}")
        for r in self.records:
            if not 0 <= r.label < self.num_classes:
                raise ContractError(f"{r.path}: label {r.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def write_manifest(manifest: Manifest, path) -> None:
    """CSV with header path,label,num_frames,intensity; paths relative to the file."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for r in manifest.records:
        rel = Path(r.path)
        try:
            rel = rel.relative_to(path.parent)
        except ValueError:
            pass
        intensity = "" if r.intensity is None else repr(float(r.intensity))
        writer.writerow([rel.as_posix(), r.label, r.num_frames, intensity])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path, num_classes: Optional[int] = None, split: Optional[str] = None) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ClipIOError(f"cannot read manifest {path}: {exc.strerror}") from None
    rows = list(csv.DictReader(io.StringIO(text)))
    if text and tuple(text.splitlines()[0].split(",")) != MANIFEST_FIELDS:
        raise ClipIOError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}")
    records = []
    for line, row in enumerate(rows, start=2):
        clip = Path(row["path"])
        if not clip.is_absolute():
            clip = path.parent / clip
        if not clip.exists():
            raise ClipIOError(f"{path}:{line}: clip {clip} does not exist")
        try:
            intensity = float(row["intensity"]) if row["intensity"] else None
            records.append(ClipRecord(str(clip), int(row["label"]), int(row["num_frames"]), intensity))
        except ValueError as exc:
            raise ClipIOError(f"{path}:{line}: {exc}") from None
    if num_classes is None:
        num_classes = max((r.label for r in records), default=0) + 1
    if split is None:
        split = "test" if "test" in path.stem else "train"
    return Manifest(records, num_classes, split)


# ---------------------------------------------------------------- samplers


def segment_bounds(num_frames: int, segments: int) -> List[Tuple[int, int]]:
    """(start, length) of ``segments`` contiguous chunks covering [0, n).

    Chunks differ in length by at most one; the first n % U chunks are the
    longer ones. With fewer frames than segments, each segment is a single
    frame at floor(k * n / U).
    """
    if num_frames < 1 or segments < 1:
        raise ContractError("num_frames and segments must be positive")
    if num_frames < segments:
        return [(k * num_frames // segments, 1) for k in range(segments)]
    base, rem = divmod(num_frames, segments)
    bounds = []
    start = 0
    for k in range(segments):
        length = base + (1 if k < rem else 0)
        bounds.append((start, length))
        start += length
    return bounds


def sample_train_indices(num_frames: int, U: int, V: int, rng: np.random.Generator) -> List[int]:
    """V random frames per segment; without replacement when the segment allows."""
    if V < 1:
        raise ContractError("V must be positive")
    out = []
    for start, length in segment_bounds(num_frames, U):
        picks = rng.choice(length, size=V, replace=length < V)
        out.extend(start + int(p) for p in picks)
    return sorted(out)


def sample_test_indices(num_frames: int, U: int, V: int) -> List[int]:
    """V consecutive frames centred in each segment."""
    if V < 1:
        raise ContractError("V must be positive")
    out = []
    for start, length in segment_bounds(num_frames, U):
        if length < V:
            out.extend([start + (length - 1) // 2] * V)
            continue
        first = start + (length - V) // 2
        out.extend(min(first + j, start + length - 1) for j in range(V))
    return sorted(out)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticConfig:
    num_classes: int = 7
    train_per_class: int = 16
    test_per_class: int = 16
    min_frames: int = 12
    max_frames: int = 24
    channels: int = 3
    height: int = 32
    width: int = 32
    p_low: float = 0.5
    low_range: Tuple[float, float] = (0.05, 0.3)
    high_range: Tuple[float, float] = (0.6, 1.0)
    noise_std: float = 0.01
    base_scale: float = 1.0
    blobs_per_class: int = 3
    blob_sigma: float = 3.0
    modulation: str = "raised-cosine"
    neutral_class: int = 0
    fixed_intensity: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.low_range = tuple(self.low_range)
        self.high_range = tuple(self.high_range)
        for name in ("low_range", "high_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi <= 1:
                raise ConfigError(f"{name} must satisfy 0 <= lo < hi <= 1, got {(lo, hi)}")
        if not 0 <= self.p_low <= 1:
            raise ConfigError("p_low must lie in [0, 1]")
        if self.num_classes < 2 or not 0 <= self.neutral_class < self.num_classes:
            raise ConfigError("need K >= 2 and a neutral class inside [0, K)")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("frame range must satisfy 1 <= min <= max")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.fixed_intensity is not None and not 0 < self.fixed_intensity <= 1:
            raise ConfigError("fixed_intensity must lie in (0, 1]")
        if self.modulation not in ("raised-cosine", "constant"):
            raise ConfigError(f"unknown modulation {self.modulation!r}")

    def to_dict(self):
        d = asdict(self)
        d["low_range"] = list(self.low_range)
        d["high_range"] = list(self.high_range)
        return d


def _blob_field(rng, cfg: SyntheticConfig, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width]
    out = np.zeros((cfg.channels, cfg.height, cfg.width))
    for _ in range(count):
        cy, cx = rng.uniform(0, cfg.height), rng.uniform(0, cfg.width)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma**2))
        out += rng.standard_normal(cfg.channels)[:, None, None] * bump
    return out


def make_patterns(cfg: SyntheticConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Neutral base B and orthonormal class directions P_k (zero for the neutral class)."""
    rng = np.random.default_rng([cfg.seed, 0])
    base = _blob_field(rng, cfg, 8)
    base *= cfg.base_scale / np.linalg.norm(base)
    k = cfg.num_classes
    raw = np.stack([_blob_field(rng, cfg, cfg.blobs_per_class).reshape(-1) for _ in range(k - 1)], axis=1)
    q, _ = np.linalg.qr(raw)
    q *= np.sign(np.sum(q * raw, axis=0))  # keep each direction aligned with its blobs
    patterns = np.zeros((k,) + base.shape)
    others = [c for c in range(k) if c != cfg.neutral_class]
    for j, c in enumerate(others):
        patterns[c] = q[:, j].reshape(base.shape)
    return base, patterns


def modulation_profile(num_frames: int, kind: str, phase: float = 0.0) -> np.ndarray:
    """Per-frame factor in [0.5, 1]: a raised-cosine bump (onset, apex, offset)."""
    if kind == "constant":
        return np.ones(num_frames)
    t = (np.arange(num_frames) + 0.5) / num_frames
    centre = 0.5 + phase
    return 0.75 + 0.25 * np.cos(2 * np.pi * np.clip(t - centre, -0.5, 0.5))


def _draw_intensity(rng, cfg: SyntheticConfig) -> float:
    if cfg.fixed_intensity is not None:
        return float(cfg.fixed_intensity)
    lo, hi = cfg.low_range if rng.random() < cfg.p_low else cfg.high_range
    # the ranges are half-open on the left: (lo, hi]
    return float(hi - (hi - lo) * rng.random())


def synthesize_clip(rng, cfg: SyntheticConfig, base, pattern, intensity) -> np.ndarray:
    n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    m = modulation_profile(n, cfg.modulation, phase=float(rng.uniform(-0.15, 0.15)))
    frames = base[None] + intensity * m[:, None, None, None] * pattern[None]
    if cfg.noise_std:
        frames = frames + rng.normal(0.0, cfg.noise_std, frames.shape)
    return frames.astype(np.float32)


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> Tuple[Manifest, Manifest]:
    """Write clips plus train.csv / test.csv / meta.json under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    base, patterns = make_patterns(cfg)
    manifests = []
    for split_id, (split, per_class) in enumerate(
        (("train", cfg.train_per_class), ("test", cfg.test_per_class))
    ):
        rng = np.random.default_rng([cfg.seed, 1, split_id])
        records = []
        for label in range(cfg.num_classes):
            for i in range(per_class):
                if label == cfg.neutral_class:
                    alpha = 0.0
                else:
                    alpha = _draw_intensity(rng, cfg)
                frames = synthesize_clip(rng, cfg, base, patterns[label], alpha)
                path = out_dir / "clips" / f"{split}_{label}_{i:04d}.clip"
                write_clip(path, frames)
                records.append(ClipRecord(str(path), label, len(frames), alpha))
        manifest = Manifest(records, cfg.num_classes, split)
        write_manifest(manifest, out_dir / f"{split}.csv")
        manifests.append(manifest)
    meta = {"num_classes": cfg.num_classes, "neutral_class": cfg.neutral_class, "config": cfg.to_dict()}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifests[0], manifests[1]


def load_dataset(data_dir) -> Tuple[Manifest, Manifest, dict]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    k = meta.get("num_classes")
    train = read_manifest(data_dir / "train.csv", k, "train")
    test = read_manifest(data_dir / "test.csv", k if k else None, "test")
    if k is None:
        k = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = k
    return train, test, meta


def clip_mean_frames(manifest: Manifest) -> np.ndarray:
    """Temporal mean of every clip, shape (N, C*H*W)."""
    rows = []
    for r in manifest.records:
        rows.append(load_clip(r, range(r.num_frames)).mean(axis=0).reshape(-1))
    return np.stack(rows)


def nearest_prototype_predict(train: Manifest, test: Manifest) -> np.ndarray:
    """Brute-force oracle: class means of training clip means, nearest in L2."""
    x_train = clip_mean_frames(train).astype(np.float64)
    x_test = clip_mean_frames(test).astype(np.float64)
    labels = train.labels()
    protos = np.stack([x_train[labels == k].mean(axis=0) for k in range(train.num_classes)])
    d = ((x_test[:, None, :] - protos[None]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)
