"""SGD training with exponential decay, evaluation and the ablation matrix."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tape, backward, sgd_step
from .data import (
    Manifest,
    SyntheticConfig,
    generate_synthetic,
    load_clip,
    read_clip_header,
    sample_test_indices,
    sample_train_indices,
)
from .errors import ConfigError, NumericOverflowError, TrainingDivergedError
from .losses import LossConfig, combined_loss
from .metrics import EvalReport, build_report
from .model import DFERModel, ModelConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss", "train_war", "test_uar", "test_war")


@dataclass
class TrainConfig:
    epochs: int = 80
    base_lr: float = 0.001
    gamma: float = 0.96
    batch_size: int = 40
    seed: int = 0
    lam: float = 0.1
    aux_weight: float = 0.3
    ial_on_aux: bool = False
    U: int = 8
    V: int = 1
    flip: bool = True
    crop: bool = True
    crop_pad: int = 2
    momentum: float = 0.0
    eval_every: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 0 or self.batch_size < 1 or self.U < 1 or self.V < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, U >= 1 and V >= 1 are required")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    @property
    def frames(self) -> int:
        return self.U * self.V

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, aux_weight=self.aux_weight, ial_on_aux=self.ial_on_aux)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_war: float
    test_uar: Optional[float] = None
    test_war: Optional[float] = None


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    return cfg.base_lr * cfg.gamma**epoch


def channel_stats(manifest: Manifest):
    """Per-channel mean and std over every frame of every clip."""
    total = sq = None
    count = 0
    for r in manifest.records:
        frames = load_clip(r, range(r.num_frames)).astype(np.float64)
        s = frames.sum(axis=(0, 2, 3))
        q = (frames**2).sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        sq = q if sq is None else sq + q
        count += frames.shape[0] * frames.shape[2] * frames.shape[3]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean**2, 1e-12))
    return mean, std


def augment(clip: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Same flip / crop for every frame of the clip."""
    if cfg.flip and rng.random() < 0.5:
        clip = clip[..., ::-1]
    if cfg.crop and cfg.crop_pad > 0:
        p = cfg.crop_pad
        h, w = clip.shape[-2:]
        padded = np.pad(clip, ((0, 0), (0, 0), (p, p), (p, p)))
        dy, dx = rng.integers(0, 2 * p + 1, size=2)
        clip = padded[..., dy : dy + h, dx : dx + w]
    return np.ascontiguousarray(clip)


def write_log(entries: Sequence[EpochLog], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for e in entries:
        writer.writerow(
            [e.epoch, repr(e.lr), repr(e.loss), repr(e.train_war)]
            + ["" if v is None else repr(v) for v in (e.test_uar, e.test_war)]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def train(
    model: DFERModel,
    cfg: TrainConfig,
    train_set: Manifest,
    test_set: Optional[Manifest] = None,
    log_path=None,
):
    """Train ``model`` in place; returns it with the per-epoch log."""
    if cfg.frames != model.cfg.frames:
        raise ConfigError(f"U*V = {cfg.frames} but the model expects {model.cfg.frames} frames")
    entries: List[EpochLog] = []
    if cfg.epochs == 0:
        if log_path is not None:
            write_log(entries, log_path)
        return model, entries

    mean, std = channel_stats(train_set)
    model.params["norm.mean"].tensor.data[...] = mean
    model.params["norm.std"].tensor.data[...] = std

    params = model.parameters(trainable_only=True)
    velocity = {p.tensor.id: np.zeros_like(p.tensor.data) for p in params} if cfg.momentum else None
    loss_cfg = cfg.loss_config()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, correct = [], 0
        for j, start in enumerate(range(0, n, cfg.batch_size)):
            batch_seed = (cfg.seed, epoch, j)
            rng = np.random.default_rng(batch_seed)
            recs = [train_set.records[i] for i in order[start : start + cfg.batch_size]]
            clips = np.stack(
                [
                    augment(load_clip(r, sample_train_indices(r.num_frames, cfg.U, cfg.V, rng)), rng, cfg)
                    for r in recs
                ]
            )
            targets = np.array([r.label for r in recs])
            try:
                with Tape() as tape:
                    logits, aux = model(model.normalize(clips))
                    loss = combined_loss(logits, aux, targets, loss_cfg)
            except NumericOverflowError as exc:
                raise TrainingDivergedError(f"{exc} at batch seed {batch_seed}") from None
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at batch seed {batch_seed}")
            grads = backward(loss, tape, params)
            if velocity is not None:
                for p in params:
                    v = velocity[p.tensor.id]
                    v *= cfg.momentum
                    v += grads[p.tensor.id]
                    grads[p.tensor.id] = v
            sgd_step(params, grads, lr)
            losses.append(value * len(recs))
            correct += int((np.argmax(logits.data, axis=1) == targets).sum())
        entry = EpochLog(epoch, lr, float(np.sum(losses) / n), correct / n)
        if test_set is not None and cfg.eval_every and (
            (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        ):
            report = evaluate(model, test_set, cfg.U, cfg.V)
            entry.test_uar, entry.test_war = report.uar, report.war
        log.debug("epoch %d lr %.5g loss %.5f train_war %.3f", epoch, lr, entry.loss, entry.train_war)
        entries.append(entry)
    if log_path is not None:
        write_log(entries, log_path)
    return model, entries


def predict(model: DFERModel, manifest: Manifest, U: int, V: int, batch_size: int = 32) -> np.ndarray:
    """Main-head argmax per clip with centred test sampling (ties -> lowest index)."""
    preds = []
    recs = manifest.records
    for start in range(0, len(recs), batch_size):
        chunk = recs[start : start + batch_size]
        clips = np.stack([load_clip(r, sample_test_indices(r.num_frames, U, V)) for r in chunk])
        logits, _ = model(model.normalize(clips))
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: DFERModel, manifest: Manifest, U: int, V: int) -> EvalReport:
    if not len(manifest):
        raise ConfigError("cannot evaluate on an empty manifest")
    pred = predict(model, manifest, U, V)
    intensities = [r.intensity for r in manifest.records]
    has_intensity = any(v is not None for v in intensities)
    return build_report(manifest.labels(), pred, manifest.num_classes, intensities if has_intensity else None)


# ---------------------------------------------------------------- ablation


@dataclass
class Cell:
    name: str
    attention: str = "none"
    ial: bool = False
    aux: bool = False
    lam: float = 0.1
    reduction: int = 4


@dataclass
class AblationSpec:
    cells: List[Cell]
    seeds: List[int] = field(default_factory=lambda: [0])
    synthetic: Dict = field(default_factory=dict)
    model: Dict = field(default_factory=dict)
    train: Dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Dict) -> "AblationSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ablation keys {sorted(unknown)}")
        cells = []
        for c in d.get("cells", []):
            c = dict(c)
            if "lambda" in c:
                c["lam"] = c.pop("lambda")
            if "r" in c:
                c["reduction"] = c.pop("r")
            try:
                cells.append(Cell(**c))
            except TypeError as exc:
                raise ConfigError(f"bad ablation cell {c}: {exc}") from None
        if not cells:
            raise ConfigError("ablation spec lists no cells")
        return cls(
            cells,
            list(d.get("seeds", [0])),
            dict(d.get("synthetic", {})),
            dict(d.get("model", {})),
            dict(d.get("train", {})),
        )

    @classmethod
    def load(cls, path) -> "AblationSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# Desk-scale training recipe used by the ablation unless the spec overrides it.
DESK_SYNTHETIC = dict(noise_std=0.03, test_per_class=40)
DESK_TRAIN = dict(epochs=30, base_lr=0.01, gamma=0.96, batch_size=16, U=8, V=1, momentum=0.9, flip=False)


def default_ablation(seeds=(0, 1, 2, 3, 4)) -> AblationSpec:
    return AblationSpec(
        cells=[
            Cell("baseline"),
            Cell("gca", attention="gca", aux=True),
            Cell("ial", ial=True),
            Cell("gca+ial", attention="gca", aux=True, ial=True),
        ],
        seeds=list(seeds),
        synthetic=dict(DESK_SYNTHETIC),
    )


@dataclass
class CellResult:
    cell: Cell
    seed: int
    uar: float
    war: float
    low_war: Optional[float]
    high_war: Optional[float]


def run_cell(cell: Cell, seed: int, train_set, test_set, spec: AblationSpec) -> CellResult:
    tcfg = TrainConfig(**{**DESK_TRAIN, **spec.train, "seed": seed})
    tcfg = replace(tcfg, lam=cell.lam if cell.ial else 0.0)
    _, channels, height, width = read_clip_header(train_set.records[0].path)
    mcfg = ModelConfig(
        **{
            "num_classes": train_set.num_classes,
            "frames": tcfg.frames,
            "in_channels": channels,
            "height": height,
            "width": width,
            **spec.model,
            "attention": cell.attention,
            "aux": cell.aux,
            "reduction": cell.reduction,
            "seed": seed,
        }
    )
    model, _ = train(DFERModel(mcfg), tcfg, train_set)
    rep = evaluate(model, test_set, tcfg.U, tcfg.V)
    return CellResult(cell, seed, rep.uar, rep.war, rep.low_war, rep.high_war)


def run_ablation(spec: AblationSpec, workdir=None, progress=None) -> List[CellResult]:
    """Train every cell on the synthetic dataset of every seed."""
    results = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for seed in spec.seeds:
            syn = SyntheticConfig(**{**spec.synthetic, "seed": seed})
            train_set, test_set = generate_synthetic(syn, Path(tmp) / f"seed{seed}")
            for cell in spec.cells:
                res = run_cell(cell, seed, train_set, test_set, spec)
                if progress is not None:
                    progress(res)
                results.append(res)
    return results


METRICS = ("uar", "war", "low_war", "high_war")
ABLATION_FIELDS = ("cell", "attention", "ial", "aux", "lambda", "r", "seeds") + tuple(
    f"{m}_{agg}" for m in METRICS for agg in ("mean", "std")
)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def ablation_table(results: Sequence[CellResult]) -> str:
    """CSV with one row per cell: mean and population std over its seeds."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_FIELDS)
    by_cell: Dict[str, List[CellResult]] = {}
    for r in results:
        by_cell.setdefault(r.cell.name, []).append(r)
    for name, rows in by_cell.items():
        c = rows[0].cell
        row = [name, c.attention, int(c.ial), int(c.aux), _fmt(c.lam) if c.ial else "", c.reduction]
        row.append(";".join(str(r.seed) for r in rows))
        for key in METRICS:
            xs = [getattr(r, key) for r in rows if getattr(r, key) is not None]
            row += [_fmt(float(np.mean(xs))), _fmt(float(np.std(xs)))] if xs else ["", ""]
        writer.writerow(row)
    return buf.getvalue()
