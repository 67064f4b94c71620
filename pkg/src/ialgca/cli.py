"""Command-line entry point: ``ialgca {synth,train,eval,gradcheck,ablate,inspect}``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines; keys
are the long flag names without dashes (``batch-size`` or ``batch_size``).
Explicit flags win over the file. Failures print one line

    IALGCA-ERROR <code>: <message>

on stderr and exit 1; a gradient check beyond tolerance exits 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .errors import ClipIOError, ConfigError, ContractError, IALGCAError

HELP_WIDTH = 100
EXIT_OK, EXIT_ERROR, EXIT_GRADCHECK = 0, 1, 2


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    # fixed width so help output does not depend on the terminal
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ContractError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


# ---------------------------------------------------------------- config files


def read_config_file(path) -> List[tuple]:
    """(line_number, key, value) triples in file order."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ClipIOError(f"cannot read config {path}: {exc.strerror}") from None
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        entries.append((lineno, key, value))
    return entries


def _config_defaults(parser: argparse.ArgumentParser, path) -> Dict[str, object]:
    # keys are long flag names without the dashes; '-' and '_' are interchangeable
    actions = {
        opt.lstrip("-").replace("-", "_"): a
        for a in parser._actions
        if a.dest not in ("help", "config")
        for opt in a.option_strings
        if opt.startswith("--")
    }
    out = {}
    for lineno, key, value in read_config_file(path):
        action = actions.get(key.replace("-", "_"))
        if action is None:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        dest = action.dest
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{path}:{lineno}: {key} expects a boolean, got {value!r}")
            out[dest] = value.lower() in ("true", "1", "yes")
            continue
        try:
            converted = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        if action.choices is not None and converted not in action.choices:
            raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
        out[dest] = converted  # later lines override earlier ones
    return out


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ialgca",
        description="Intensity-aware loss and global convolution-attention for video expression recognition.",
        formatter_class=_Formatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.add_argument("--config", metavar="FILE", help="key = value file; explicit flags override it")
        return p

    p = command("synth", "write a synthetic clip dataset with train/test manifests")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--classes", type=int, default=7, help="number of classes (class 0 is neutral)")
    p.add_argument("--train-per-class", type=int, default=16, help="training clips per class")
    p.add_argument("--test-per-class", type=int, default=16, help="test clips per class")
    p.add_argument("--min-frames", type=int, default=12, help="shortest clip length")
    p.add_argument("--max-frames", type=int, default=24, help="longest clip length")
    p.add_argument("--size", type=int, default=32, help="frame height and width")
    p.add_argument("--p-low", type=float, default=0.5, help="probability of a low-intensity clip")
    p.add_argument("--noise", type=float, default=0.01, help="pixel noise standard deviation")

    p = command("train", "train a model on a dataset directory and write a checkpoint")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory (train.csv, test.csv)")
    p.add_argument("--out", metavar="CKPT", required=True, help="checkpoint path; config goes to CKPT.json")
    p.add_argument("--log", metavar="CSV", help="training log path (default CKPT.log.csv)")
    p.add_argument("--attention", choices=("none", "se", "cbam", "gca"), default="none", help="attention block")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="intensity-aware loss weight")
    p.add_argument("--aux", type=_on_off, default=False, metavar="{on,off}", help="auxiliary stage heads")
    p.add_argument("--aux-weight", type=float, default=0.3, help="weight of each auxiliary loss")
    p.add_argument("--reduction", type=int, default=4, help="attention reduction ratio r")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--gamma", type=float, default=0.96, help="per-epoch learning-rate decay")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (0 disables it)")
    p.add_argument("--batch-size", type=int, default=16, help="clips per batch")
    p.add_argument("--U", type=int, default=8, help="temporal segments")
    p.add_argument("--V", type=int, default=1, help="frames per segment")
    p.add_argument("--flip", action="store_true", help="random horizontal flips")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization and batching")

    p = command("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", metavar="FILE", required=True, help="checkpoint path")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test", help="manifest to evaluate")
    p.add_argument("--U", type=int, help="temporal segments (default: model frames)")
    p.add_argument("--V", type=int, default=1, help="frames per segment")
    p.add_argument("--json", action="store_true", help="print a JSON document instead of text")

    p = command("gradcheck", "run the finite-difference gradient suite")
    p.add_argument("--module", choices=("tensor", "attention", "losses", "model"), help="restrict to one module")
    p.add_argument("--seed", type=int, default=0, help="seed for the random test points")

    p = command("ablate", "train every cell of an ablation over seeds and emit a CSV table")
    p.add_argument("--spec", metavar="FILE", help="JSON ablation spec (default: built-in four-cell table)")
    p.add_argument("--seeds", type=int, help="run seeds 0..N-1 instead of the spec's list")
    p.add_argument("--out", metavar="CSV", help="write the table here instead of stdout")

    p = command("inspect", "list checkpoint parameters and shapes")
    p.add_argument("--ckpt", metavar="FILE", required=True, help="checkpoint path")
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_config_defaults(sub, args.config))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- commands


def _cmd_synth(args, out) -> int:
    from .data import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(
        num_classes=args.classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        min_frames=args.min_frames,
        max_frames=args.max_frames,
        height=args.size,
        width=args.size,
        p_low=args.p_low,
        noise_std=args.noise,
        seed=args.seed,
    )
    train_set, test_set = generate_synthetic(cfg, args.out)
    print(f"wrote {len(train_set)} train and {len(test_set)} test clips to {args.out}", file=out)
    return EXIT_OK


def _cmd_train(args, out) -> int:
    from .data import load_dataset, read_clip_header
    from .model import DFERModel, ModelConfig, save_checkpoint
    from .trainer import TrainConfig, train

    train_set, test_set, _ = load_dataset(args.data)
    if not len(train_set):
        raise ConfigError(f"{args.data}: empty training manifest")
    _, channels, height, width = read_clip_header(train_set.records[0].path)
    tcfg = TrainConfig(
        epochs=args.epochs,
        base_lr=args.lr,
        gamma=args.gamma,
        batch_size=args.batch_size,
        seed=args.seed,
        lam=args.lam,
        aux_weight=args.aux_weight,
        U=args.U,
        V=args.V,
        flip=args.flip,
        momentum=args.momentum,
    )
    mcfg = ModelConfig(
        num_classes=train_set.num_classes,
        frames=tcfg.frames,
        height=height,
        width=width,
        in_channels=channels,
        attention=args.attention,
        reduction=args.reduction,
        aux=args.aux,
        seed=args.seed,
    )
    log_path = args.log or f"{args.out}.log.csv"
    model, entries = train(DFERModel(mcfg), tcfg, train_set, log_path=log_path)
    save_checkpoint(model, args.out)
    last = f"final loss {entries[-1].loss:.6f}" if entries else "no epochs run"
    print(f"trained {len(entries)} epochs ({last}); checkpoint {args.out}, log {log_path}", file=out)
    return EXIT_OK


def _cmd_eval(args, out) -> int:
    from .data import load_dataset
    from .model import load_checkpoint
    from .trainer import evaluate

    model = load_checkpoint(args.ckpt)
    train_set, test_set, _ = load_dataset(args.data)
    manifest = test_set if args.split == "test" else train_set
    V = args.V
    U = args.U if args.U is not None else model.cfg.frames // V
    if U * V != model.cfg.frames:
        raise ConfigError(f"U*V = {U * V} but the model expects {model.cfg.frames} frames")
    report = evaluate(model, manifest, U, V)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True), file=out)
    else:
        print(report.to_text(), file=out)
    return EXIT_OK


def _cmd_gradcheck(args, out) -> int:
    from .gradcheck_suite import run_suite

    results = run_suite(args.module, seed=args.seed)
    width = max(len(f"{r.module}.{r.name}") for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.module + '.' + r.name:<{width}}  {r.error:.3e}  tol {r.tolerance:.0e}  {status}", file=out)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks within tolerance", file=out)
    if failed:
        names = ", ".join(f"{r.module}.{r.name}" for r in failed)
        print(f"IALGCA-ERROR E_GRADCHECK: {names} beyond tolerance", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _cmd_ablate(args, out) -> int:
    from .trainer import AblationSpec, ablation_table, default_ablation, run_ablation

    spec = AblationSpec.load(args.spec) if args.spec else default_ablation()
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        spec.seeds = list(range(args.seeds))

    def progress(res):
        print(f"seed {res.seed} {res.cell.name}: war {res.war:.4f}", file=sys.stderr)

    table = ablation_table(run_ablation(spec, progress=progress))
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        out.write(table)
    return EXIT_OK


def _cmd_inspect(args, out) -> int:
    from .model import read_checkpoint

    stored = read_checkpoint(args.ckpt)
    width = max((len(n) for n in stored), default=0)
    total = 0
    for name, arr in stored.items():
        total += arr.size
        print(f"{name:<{width}}  {'x'.join(map(str, arr.shape)) or 'scalar'}", file=out)
    print(f"{len(stored)} tensors, {total} values", file=out)
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "inspect": _cmd_inspect,
}


def _thread_limit():
    raw = os.environ.get("IALGCA_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"IALGCA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"IALGCA_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        with _thread_limit():
            return COMMANDS[args.command](args, out)
    except IALGCAError as exc:
        print(f"IALGCA-ERROR {exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"IALGCA-ERROR E_IO: {exc.strerror or exc} ({exc.filename})", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
