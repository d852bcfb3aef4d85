"""Command-line entry point: gen-data, train, eval, predict, bench.

Diagnostics go to stderr as one JSON object per line. Errors carry a
``code`` field; log records carry ``level`` and ``logger``. Results go to
stdout or to the file named by ``--out``. Verbosity is set by the
XTAL2DOS_LOG environment variable (debug, info, warning, error).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext

from . import __version__
from .bench import BENCH_KINDS, run_bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DECODER_KINDS, ENCODER_CONVS, HEAD_KINDS, LOSS_KINDS, ConfigError, TrainConfig
from .graph import SPLITS, DataError, generate_synthetic, load_dataset, save_dataset, split
from .tensor import ACTIVATIONS, DomainError, ShapeError
from .training import Trainer, TrainingError, evaluate, predict

log = logging.getLogger("xtal2dos")

EXIT_CODES = {
    "E_USAGE": 2,
    "E_CONFIG": 3,
    "E_DATA": 4,
    "E_CHECKPOINT": 5,
    "E_IO": 6,
    "E_TRAINING": 7,
    "E_INTERNAL": 70,
}


class CliError(Exception):
    def __init__(self, code: str, message: str, details: list | None = None):
        super().__init__(message)
        self.code = code
        self.details = details or []


# ---------------------------------------------------------------- diagnostics


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()})


def setup_logging(stream=None) -> None:
    level_name = os.environ.get("XTAL2DOS_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def emit_error(err: CliError, stream=None) -> None:
    rec = {"level": "error", "code": err.code, "message": str(err)}
    if err.details:
        rec["details"] = err.details
    print(json.dumps(rec), file=stream or sys.stderr, flush=True)


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="random seed (overrides the config file)")
    p.add_argument("--config", default=default, help="JSON config file; explicit flags take precedence")
    p.add_argument("--threads", type=int, default=default, help="BLAS / kernel thread count")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and optimization (override --config)")
    g.add_argument("--ly", dest="l_y", type=int)
    g.add_argument("--d-hid", type=int)
    g.add_argument("--encoder-conv", choices=ENCODER_CONVS)
    g.add_argument("--encoder-layers", type=int)
    g.add_argument("--encoder-heads", type=int)
    g.add_argument("--decoder", choices=DECODER_KINDS)
    g.add_argument("--chunk", type=int)
    g.add_argument("--decoder-layers", type=int)
    g.add_argument("--decoder-heads", type=int)
    g.add_argument("--ff-width", type=int)
    g.add_argument("--activation", choices=sorted(ACTIVATIONS))
    g.add_argument("--loss", choices=LOSS_KINDS)
    g.add_argument("--head", choices=HEAD_KINDS)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--grad-clip", type=float)
    g.add_argument("--split-ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--bin-width", type=float)


MODEL_FIELDS = ("l_y", "d_hid", "encoder_conv", "encoder_layers", "encoder_heads", "decoder", "chunk",
                "decoder_layers", "decoder_heads", "ff_width", "activation", "loss", "head", "batch_size",
                "epochs", "lr", "grad_clip", "split_ratios", "bin_width")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xtal2dos", description="Crystal graph to density-of-states models.")
    parser.add_argument("--version", action="version", version=f"xtal2dos {__version__}")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as JSON lines")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--ly", dest="l_y", type=int, default=51)
    p.add_argument("--min-atoms", type=int, default=4)
    p.add_argument("--max-atoms", type=int, default=20)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--data", help="training JSONL (default: train_path from the config)")
    p.add_argument("--val", help="validation JSONL; without it the data is split by hash")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log (default: <out>.csv)")
    p.add_argument("--resume", help="continue from this checkpoint up to --epochs total epochs")
    _model_flags(p)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all",) + SPLITS, default="all")
    p.add_argument("--bin-width", type=float)
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("predict", parents=[common], help="CSV of predicted and true spectra")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all",) + SPLITS, default="all")
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("bench", parents=[common], help="seconds per epoch for each decoder kind")
    p.add_argument("--ly", dest="l_y", type=int, default=128)
    p.add_argument("--d-hid", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--kinds", nargs="+", choices=BENCH_KINDS + ("chunk_rnn",), default=list(BENCH_KINDS))
    p.add_argument("--out", help="write the report here instead of stdout")
    return parser


# ---------------------------------------------------------------- helpers


def base_config(args) -> TrainConfig:
    """Defaults, then the --config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except FileNotFoundError:
            raise CliError("E_IO", f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CliError("E_CONFIG", f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise CliError("E_CONFIG", f"config file {args.config} must hold a JSON object")
    for name in MODEL_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = tuple(v) if name == "split_ratios" else v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except ConfigError:
        raise
    except TypeError as exc:
        raise CliError("E_CONFIG", f"bad config value: {exc}") from None


def validated(cfg: TrainConfig) -> TrainConfig:
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise CliError("E_CONFIG", f"{len(exc.problems)} config problem(s)", exc.problems) from None
    except TypeError as exc:
        raise CliError("E_CONFIG", f"bad config value: {exc}") from None


def load(path: str, cfg: TrainConfig):
    if not os.path.exists(path):
        raise CliError("E_IO", f"dataset not found: {path}")
    return load_dataset(path, cfg.l_y, cfg.d_atom, cfg.n_max_nbr)


def select(path: str, cfg: TrainConfig, name: str):
    ds = load(path, cfg)
    if name == "all":
        return ds.samples
    return split(ds, cfg.split_ratios, cfg.seed).subset(name)


def open_out(path: str | None):
    if path is None:
        return nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


def limit_threads(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise CliError("E_USAGE", "--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    if args.count < 1:
        raise CliError("E_USAGE", f"--count must be at least 1, got {args.count}")
    if args.l_y < 1:
        raise CliError("E_USAGE", f"--ly must be at least 1, got {args.l_y}")
    if not 2 <= args.min_atoms <= args.max_atoms:
        raise CliError("E_USAGE", "need 2 <= --min-atoms <= --max-atoms")
    seed = 0 if args.seed is None else args.seed
    ds = generate_synthetic(args.count, seed, n_range=(args.min_atoms, args.max_atoms), l_y=args.l_y)
    save_dataset(args.out, ds)
    log.info("wrote %d samples to %s", len(ds), args.out)
    return {"path": args.out, "count": len(ds), "seed": seed, "l_y": args.l_y}


def cmd_train(args) -> dict:
    if args.resume:
        trainer = load_checkpoint(args.resume)
        changed = [n for n in MODEL_FIELDS if n != "epochs" and getattr(args, n, None) is not None]
        if args.config or args.seed is not None:
            changed.append("--config/--seed")
        if changed:
            raise CliError("E_CONFIG", "a resumed run keeps its checkpoint config; drop the overrides",
                           [f"cannot change {n} when resuming" for n in changed])
        if args.epochs is not None:
            trainer.cfg = dataclasses.replace(trainer.cfg, epochs=args.epochs)
        cfg = trainer.cfg
    else:
        cfg = validated(base_config(args))
        trainer = None
    data_path = args.data or cfg.train_path
    if not data_path:
        raise CliError("E_USAGE", "no training data: pass --data or set train_path in the config")
    if args.val:
        train_samples = load(data_path, cfg).samples
        val_samples = load(args.val, cfg).samples
    else:
        ds = split(load(data_path, cfg), cfg.split_ratios, cfg.seed)
        train_samples, val_samples = ds.subset("train"), ds.subset("val")
    if not train_samples:
        raise CliError("E_DATA", "training split is empty")
    if trainer is None:
        trainer = Trainer(dataclasses.replace(cfg, train_path=data_path, val_path=args.val))
        cfg = trainer.cfg
    remaining = cfg.epochs - trainer.epoch
    if remaining < 0:
        raise CliError("E_CONFIG", f"checkpoint is already at epoch {trainer.epoch} > --epochs {cfg.epochs}")
    log_path = args.log or f"{args.out}.csv"
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)
    log.info("training %s for %d epoch(s) on %d samples (%d val)", cfg.decoder, remaining, len(train_samples),
             len(val_samples))
    rows = trainer.fit(train_samples, val_samples, remaining, log_path)
    save_checkpoint(args.out, trainer)
    last = rows[-1] if rows else {}
    return {"checkpoint": args.out, "log": log_path, "epoch": trainer.epoch,
            "train_loss": last.get("train_loss"), "val_r2": _finite(last.get("val_r2")),
            "val_wd": _finite(last.get("val_wd"))}


def _finite(v):
    return None if v is None or v != v else v


def cmd_eval(args) -> None:
    trainer = load_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    if args.bin_width is not None:
        if args.bin_width <= 0:
            raise CliError("E_USAGE", "--bin-width must be positive")
        cfg = dataclasses.replace(cfg, bin_width=args.bin_width)
    samples = select(args.data, cfg, args.split)
    if not samples:
        raise CliError("E_DATA", f"split {args.split!r} is empty")
    report = evaluate(trainer.model, samples, cfg)
    with open_out(args.out) as fh:
        fh.write(report.to_json() + "\n")


def cmd_predict(args) -> None:
    trainer = load_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    samples = select(args.data, cfg, args.split)
    if not samples:
        raise CliError("E_DATA", f"split {args.split!r} is empty")
    preds = predict(trainer.model, samples, cfg.batch_size)
    with open_out(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "position", "y_hat", "y"])
        for s, row in zip(samples, preds):
            for i, (p, y) in enumerate(zip(row, s.target.values)):
                w.writerow([s.id, i, repr(float(p)), repr(float(y))])


def cmd_bench(args) -> None:
    cfg = base_config(args)
    over = {"l_y": args.l_y}
    if args.d_hid is not None:
        over["d_hid"] = args.d_hid
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    cfg = validated(dataclasses.replace(cfg, **over))
    if args.samples < 1:
        raise CliError("E_USAGE", "--samples must be at least 1")
    try:
        report = run_bench(cfg, tuple(args.kinds), args.samples, args.warmup, args.repeats, args.threads,
                           progress=lambda k, s: log.info("bench %s: %.4f s/epoch", k, s))
    except ValueError as exc:
        raise CliError("E_USAGE", str(exc)) from None
    with open_out(args.out) as fh:
        fh.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "bench": cmd_bench}


def _translate(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, ConfigError):
        return CliError("E_CONFIG", f"{len(exc.problems)} config problem(s)", exc.problems)
    if isinstance(exc, DataError):
        return CliError("E_DATA", str(exc))
    if isinstance(exc, CheckpointError):
        return CliError("E_CHECKPOINT", str(exc))
    if isinstance(exc, (TrainingError, DomainError, ShapeError)):
        return CliError("E_TRAINING", str(exc))
    if isinstance(exc, OSError):
        return CliError("E_IO", str(exc))
    return CliError("E_INTERNAL", f"{type(exc).__name__}: {exc}")


def main(argv: list[str] | None = None) -> int:
    saved = (list(log.handlers), log.level, log.propagate)
    setup_logging()
    try:
        return _run(argv)
    finally:
        log.handlers[:], log.level, log.propagate = saved


def _run(argv: list[str] | None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with limit_threads(args.threads):
            result = COMMANDS[args.command](args)
        if isinstance(result, dict):
            print(json.dumps(result, sort_keys=True))
        return 0
    except KeyboardInterrupt:
        emit_error(CliError("E_INTERNAL", "interrupted"))
        return 130
    except Exception as exc:  # every failure leaves through the diagnostic stream
        err = _translate(exc)
        if err.code == "E_INTERNAL":
            log.debug("internal error", exc_info=True)
        emit_error(err)
        return EXIT_CODES[err.code]


if __name__ == "__main__":
    sys.exit(main())
