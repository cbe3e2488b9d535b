"""Command-line entry point: ``train``, ``eval``, ``gradcheck`` and ``inspect``.

Exit codes:

    0  success
    2  configuration error
    3  data error (manifest, images, split)
    4  numeric divergence
    5  checkpoint does not match the model or dataset
    6  gradient check breached its threshold
    7  checkpoint unreadable (corrupt, truncated, newer version)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from . import gradcheck
from .backbone import count_params_flops
from .checkpoint import checkpoint_load, checkpoint_save, model_checkpoint, restore_model
from .config import RunConfig, parse_file, parse_overrides, parse_text, resolve
from .data import ManifestDataset, load_manifest, stratified_split, synth_dataset
from .exceptions import (CheckpointError, CheckpointMismatchError, ConfigError, DataError,
                         DivergenceError, NumericError)
from .model import PViGNet
from .tensor import OPS, precision
from .training import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
EXIT_MISMATCH, EXIT_GRADCHECK, EXIT_CHECKPOINT = 5, 6, 7

log = logging.getLogger("pvigcaps")

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


class GradcheckFailure(Exception):
    def __init__(self, names):
        super().__init__(f"gradient check failed for: {', '.join(names)}")
        self.names = names


# ---------------------------------------------------------------- plumbing


def _flag_overrides(args) -> list[str]:
    out = []
    for flag in ("preset", "seed", "out", "precision", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{flag}={value}")
    if getattr(args, "synthetic", False):
        out.append("synthetic=true")
    return out


def load_run_config(args, base_text: str | None = None) -> RunConfig:
    """Resolve the run config: ``base_text`` < --config file < --set < explicit flags."""
    raw = {}
    if base_text is not None:
        raw.update(parse_text(base_text, "<checkpoint>"))
    if args.config:
        raw.update(parse_file(args.config))
    raw.update(parse_overrides(list(args.set or []) + _flag_overrides(args)))
    return resolve(raw)


def build_datasets(run: RunConfig):
    """(train, val, test) datasets for the run."""
    v = run.values
    if run.synthetic:
        data = synth_dataset(v["num_classes"], v["synthetic_per_class"], v["input_size"], v["seed"],
                             v["synthetic_noise"])
        return stratified_split(data, run.split)
    manifest = load_manifest(v["metadata"], v["images"])
    return tuple(ManifestDataset(part, v["input_size"]) for part in stratified_split(manifest, run.split))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_history(path: Path, history) -> None:
    lines = ["\t".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append("\t".join([str(row.epoch), _fmt(row.lr), _fmt(row.train_loss), _fmt(row.train_acc),
                                _fmt(row.val_loss), _fmt(row.val_acc)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = load_run_config(args)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(run.to_text(), encoding="utf-8")
    with precision(run.train.precision):
        train_set, val_set, _ = build_datasets(run)
        model = PViGNet(run.model, run.train.seed)
        start = time.perf_counter()
        result = train(model, train_set, val_set, run.train)
        log.info("trained %d epochs in %.1fs", len(result.history), time.perf_counter() - start)
        write_history(out / "history.tsv", result.history)
        ckpt = model_checkpoint(model, result.opt_state, result.best_epoch, result.rng_state, result.best_state,
                                run_config=run.to_text(), class_names=list(train_set.class_names))
        checkpoint_save(out / "best.ckpt", ckpt)
        model.load_state_dict(result.best_state)
        report_set = val_set if len(val_set) else train_set
        report = evaluate(model, report_set, run.train.batch_size, train_set.class_names)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    print(f"best epoch {result.best_epoch}; validation accuracy {report.accuracy:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = checkpoint_load(args.checkpoint)
    run = load_run_config(args, ckpt.extra.get("run_config"))
    model = restore_model(ckpt)
    if model.config.num_classes != run.model.num_classes:
        raise CheckpointMismatchError(f"checkpoint has {model.config.num_classes} classes, "
                                      f"dataset has {run.model.num_classes}")
    if (model.config.height, model.config.width) != (run.model.height, run.model.width):
        raise CheckpointMismatchError(f"checkpoint expects {model.config.height}×{model.config.width} input, "
                                      f"config gives {run.model.height}×{run.model.width}")
    with precision(run.train.precision):
        parts = dict(zip(("train", "val", "test"), build_datasets(run)))
        split = args.split or run.values["eval_split"]
        dataset = parts[split]
        if not len(dataset):
            raise DataError(f"the {split} split is empty")
        report = evaluate(model, dataset, run.train.batch_size, dataset.class_names)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.precision == "f32":
        raise ConfigError("gradcheck runs in 64-bit precision only")
    preset = args.preset or "micro"
    seed = args.seed or 0
    failed = []

    def report(kind, name, err, limit):
        ok = err <= limit
        if not ok:
            failed.append(f"{kind} {name}")
        print(f"{kind:<6} {name:<14} max_rel_err {err:.3e}  limit {limit:.0e}  {'PASS' if ok else 'FAIL'}",
              flush=True)

    start = time.perf_counter()
    with precision("f64"):
        names = [n for n, op in OPS.items() if op.differentiable]
        missing = sorted(set(names) - set(gradcheck.OP_CASES))
        if missing:
            raise GradcheckFailure([f"op {n} (no check)" for n in missing])
        for name in names:
            report("op", name, gradcheck.check_op(name, args.instances, seed), gradcheck.OP_THRESHOLD)
        for name, err in gradcheck.check_blocks(seed).items():
            report("block", name, err, gradcheck.OP_THRESHOLD)
        err = gradcheck.check_end_to_end(preset, batch=2, seed=seed)
        report("model", preset, err, gradcheck.MODEL_THRESHOLD)
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    if failed:
        raise GradcheckFailure(failed)
    return EXIT_OK


def cmd_inspect(args) -> int:
    run = load_run_config(args)
    base = run.model
    results = {}
    for head in ("pooling-mlp", "capsule"):
        config = base.__class__.from_dict({**base.to_dict(), "head": head})
        census = count_params_flops(config)
        results[head] = census
        print(f"[{head}] input {config.height}×{config.width}, {config.num_classes} classes")
        print(census.table())
        print(f"params {census.params / 1e6:.3f}M  FLOPs {census.flops / 1e9:.3f}G\n")
    pool, caps = results["pooling-mlp"], results["capsule"]
    print(f"capsule params < pooling params: {caps.params < pool.params}")
    print(f"capsule FLOPs > pooling FLOPs: {caps.flops > pool.flops}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for initialisation, shuffling, augmentation and splits")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--synthetic", action="store_true", help="use generated stripe images instead of a manifest")
    p.add_argument("--preset", choices=("tiny", "micro"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvigcaps", description=__doc__.split("\n")[0],
                                     epilog=__doc__.split("\n", 2)[2],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write history, checkpoint and metrics")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op, block and a whole model")
    _common(p)
    p.add_argument("--instances", type=int, default=20, help="random instances per op")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="per-stage shapes, parameters and FLOPs for both heads")
    _common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def _thread_limit():
    value = os.environ.get("PVGC_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"PVGC_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except GradcheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
