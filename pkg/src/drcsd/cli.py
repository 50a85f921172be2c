"""Experiment driver: prepare, train, evaluate, ablate, sweep.

Every command resolves its configuration from defaults, an optional flat
key=value config file, and --key value overrides, in that order, and
writes the fully-resolved config next to its outputs. All commands are
deterministic given the resolved config and input files; exit status is
zero only when all requested work succeeded.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import data as data_mod
from . import eval as eval_mod
from .decouple import DEFAULT_MEMORY_BUDGET
from .errors import DrcsdError
from .graph import write_matrix_text
from .model import load_checkpoint, save_checkpoint
from .train import LOG_COLUMNS, TrainConfig, _format_cell, fit

CACHE_ENV_VAR = "DRCSD_CACHE_DIR"

SWEEP_AXES = {
    "noise": (0.0, 0.05, 0.10, 0.15, 0.20),
    "beta": (0.3, 0.4, 0.5),
    "layers": (2, 3),
}


@dataclass
class RunConfig:
    """Flat configuration; cap = -1 means no per-row retention limit."""

    dataset: str = ""
    dataset_name: str = ""
    input_format: str = "tsv"
    split_dir: str = ""
    outdir: str = ""
    ratios: str = "0.7,0.1,0.2"
    noise_ratio: float = 0.0
    seed: int = 0
    d: int = 64
    order_count: int = 2
    batch_size: int = 2048
    learning_rate: float = 1e-3
    beta: float = 0.4
    l2_coeff: float = 1e-4
    tau: float = 0.5
    patience: int = 10
    max_epochs: int = 300
    mode: str = "full"
    cap: int = -1
    binary_decouple: bool = False
    hard_mask: bool = False
    hidden_mode: str = "sequential"
    k: int = 20
    phase: str = "test"
    cache_dir: str = ""
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    workers: int = 1


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_FIELD_PARSERS = {bool: _parse_bool, int: int, float: float, str: str}


def load_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment."""
    values = {}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DrcsdError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise DrcsdError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = _FIELD_PARSERS[types[key]](value.strip())
    return values


def serialize_config(rc: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(rc, f.name)}" for f in sorted(fields(rc), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def write_resolved_config(rc: RunConfig, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(serialize_config(rc), encoding="utf-8")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(rc, key, value)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(rc, f.name, value)
    return rc


def _train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(
        d=rc.d, order_count=rc.order_count, batch_size=rc.batch_size,
        learning_rate=rc.learning_rate, beta=rc.beta, l2_coeff=rc.l2_coeff,
        tau=rc.tau, patience=rc.patience, max_epochs=rc.max_epochs,
        seed=rc.seed, mode=rc.mode, cap=None if rc.cap < 0 else rc.cap,
        binary_decouple=rc.binary_decouple, hard_mask=rc.hard_mask,
        hidden_mode=rc.hidden_mode)


def _cache_dir(rc: RunConfig, outdir: Path):
    if rc.cache_dir:
        return rc.cache_dir
    env = os.environ.get(CACHE_ENV_VAR, "")
    if env:
        return env
    return outdir / "cache"


def _parse_ratios(text: str):
    parts = [float(p) for p in text.split(",")]
    return tuple(parts)


def _dataset_name(rc: RunConfig) -> str:
    if rc.dataset_name:
        return rc.dataset_name
    if rc.dataset:
        return Path(rc.dataset).stem
    if rc.split_dir:
        return Path(rc.split_dir).name
    return ""


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(rc: RunConfig, force: bool) -> int:
    outdir = Path(rc.outdir)
    if (outdir / "manifest.json").exists() and not force:
        print(f"error: {outdir} already contains a split; pass --force to overwrite",
              file=sys.stderr)
        return 1
    interactions = data_mod.load_interactions(rc.dataset, rc.input_format)
    split_data = data_mod.split(interactions, _parse_ratios(rc.ratios), rc.seed)
    if rc.noise_ratio > 0:
        split_data = data_mod.inject_noise(split_data, rc.noise_ratio, rc.seed)
    data_mod.write_split(split_data, outdir)
    write_resolved_config(rc, outdir)
    print(f"prepared {outdir}: train={len(split_data.train)} "
          f"validation={len(split_data.validation)} test={len(split_data.test)} "
          f"noise={split_data.noise_pairs.shape[0]}")
    return 0


def _run_training(rc: RunConfig, outdir: Path, quiet: bool = False):
    split_data = data_mod.read_split(rc.split_dir)
    cfg = _train_config(rc)
    outdir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(rc, outdir)
    log_path = outdir / "training_log.csv"
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(",".join(LOG_COLUMNS) + "\n")

        def on_epoch(row):
            log.write(",".join(_format_cell(row[c]) for c in LOG_COLUMNS) + "\n")
            log.flush()
            if not quiet:
                print(f"epoch {row['epoch']}: loss={row['loss_total']:.6f} "
                      f"val_recall@20={row['val_recall@20']:.6f} "
                      f"({row['seconds']:.1f}s)", file=sys.stderr)

        result = fit(split_data, cfg, cache_dir=_cache_dir(rc, outdir),
                     on_epoch=on_epoch, memory_budget=rc.memory_budget)
    result.meta["dataset"] = _dataset_name(rc)
    save_checkpoint(outdir / "checkpoint", result.checkpoint)
    return result, split_data


def cmd_train(rc: RunConfig, dump_stack=None) -> int:
    outdir = Path(rc.outdir)
    result, split_data = _run_training(rc, outdir)
    if dump_stack:
        from .decouple import load_or_decouple
        from .graph import build_bipartite

        graph = build_bipartite(split_data.train)
        cfg = _train_config(rc)
        stack = load_or_decouple(graph, cfg.order_count, cfg.cap,
                                 binary=cfg.binary_decouple,
                                 cache_dir=_cache_dir(rc, outdir),
                                 memory_budget=rc.memory_budget)
        dump_dir = Path(dump_stack)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for order, mat in enumerate(stack.matrices, start=1):
            write_matrix_text(mat, dump_dir / f"order_{order:02d}.txt")
    print(f"trained: best epoch {result.best_epoch} of {result.stopped_epoch}, "
          f"checkpoint at {outdir / 'checkpoint.json'}")
    return 0


def cmd_evaluate(rc: RunConfig, checkpoint_base) -> int:
    ckpt = load_checkpoint(checkpoint_base)
    split_data = data_mod.read_split(rc.split_dir)
    outdir = Path(rc.outdir)
    report = eval_mod.evaluate(ckpt, split_data, k=rc.k, phase=rc.phase,
                               cache_dir=_cache_dir(rc, outdir),
                               memory_budget=rc.memory_budget)
    if not report.dataset:
        report.dataset = _dataset_name(rc)
    eval_mod.write_report(report, outdir / f"report_{rc.phase}")
    write_resolved_config(rc, outdir)
    print(f"{rc.phase}: recall@{rc.k}={report.recall:.6f} "
          f"ndcg@{rc.k}={report.ndcg:.6f} precision@{rc.k}={report.precision:.6f} "
          f"({report.n_users_evaluated} users)")
    return 0


def cmd_ablate(rc: RunConfig) -> int:
    outdir = Path(rc.outdir)
    rows = []
    status = 0
    for mode in ("full", "no_denoise", "no_decouple"):
        sub = replace(rc, mode=mode, outdir=str(outdir / mode))
        try:
            result, split_data = _run_training(sub, Path(sub.outdir))
            report = eval_mod.evaluate(result.checkpoint, split_data, k=rc.k,
                                       phase="test",
                                       cache_dir=_cache_dir(sub, Path(sub.outdir)))
            eval_mod.write_report(report, Path(sub.outdir) / "report_test")
            rows.append(f"{mode},{rc.seed},{report.recall!r},{report.ndcg!r},"
                        f"{report.precision!r},ok")
        except (DrcsdError, OSError) as exc:
            rows.append(f"{mode},{rc.seed},,,,error:{exc}")
            status = 1
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "ablate.csv").write_text(
        "mode,seed,recall,ndcg,precision,status\n" + "\n".join(rows) + "\n",
        encoding="utf-8")
    write_resolved_config(rc, outdir)
    return status


def _sweep_point(payload: dict) -> tuple:
    """One grid point: prepare, train, evaluate. Runs in a worker process."""
    rc = RunConfig(**payload["rc"])
    axis, value, seed = payload["axis"], payload["value"], payload["seed"]
    subdir = Path(rc.outdir) / f"{axis}_{value}_seed{seed}"
    point = replace(rc, seed=seed, outdir=str(subdir),
                    split_dir=str(subdir / "split"))
    if axis == "noise":
        point = replace(point, noise_ratio=value)
    elif axis == "beta":
        point = replace(point, beta=value)
    elif axis == "layers":
        point = replace(point, order_count=int(value))
    try:
        interactions = data_mod.load_interactions(point.dataset, point.input_format)
        split_data = data_mod.split(interactions, _parse_ratios(point.ratios),
                                    point.seed)
        if point.noise_ratio > 0:
            split_data = data_mod.inject_noise(split_data, point.noise_ratio,
                                               point.seed)
        data_mod.write_split(split_data, subdir / "split")
        result, split_data = _run_training(point, subdir, quiet=True)
        report = eval_mod.evaluate(result.checkpoint, split_data, k=point.k,
                                   phase="test",
                                   cache_dir=_cache_dir(point, subdir))
        eval_mod.write_report(report, subdir / "report_test")
        return (value, seed, f"{report.recall!r}", f"{report.ndcg!r}",
                f"{report.precision!r}", "ok")
    except (DrcsdError, OSError) as exc:
        return (value, seed, "", "", "", f"error:{exc}")


def cmd_sweep(rc: RunConfig, axis: str, values, seeds) -> int:
    if axis not in SWEEP_AXES:
        print(f"error: unknown sweep axis {axis!r}", file=sys.stderr)
        return 1
    values = list(values) if values else list(SWEEP_AXES[axis])
    seeds = list(seeds) if seeds else [rc.seed]
    payloads = [{"rc": vars(rc), "axis": axis, "value": v, "seed": s}
                for v in values for s in seeds]
    if rc.workers > 1:
        with ProcessPoolExecutor(max_workers=rc.workers) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    rows.sort(key=lambda r: (float(r[0]), int(r[1])))
    outdir = Path(rc.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = ["axis_value,seed,recall,ndcg,precision,status"]
    lines += [",".join(str(c) for c in row) for row in rows]
    (outdir / f"sweep_{axis}.csv").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
    write_resolved_config(rc, outdir)
    failures = sum(1 for row in rows if row[-1] != "ok")
    if failures:
        print(f"error: {failures} of {len(rows)} grid points failed",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None,
                            type=_FIELD_PARSERS[types[f.name]],
                            help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drcsd", allow_abbrev=False,
        description="Order-decoupled denoised graph collaborative filtering")
    sub = parser.add_subparsers(dest="command", required=True)

    p_prepare = sub.add_parser("prepare", allow_abbrev=False,
                               help="split a dataset, optionally inject noise")
    p_prepare.add_argument("--input", dest="dataset", default=None)
    p_prepare.add_argument("--force", action="store_true")
    _add_config_flags(p_prepare)

    p_train = sub.add_parser("train", allow_abbrev=False,
                             help="train on a prepared split")
    p_train.add_argument("--dump-stack", default=None,
                         help="directory for text dumps of the decoupled matrices")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("evaluate", allow_abbrev=False,
                            help="score a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True,
                        help="checkpoint base path (without extension)")
    _add_config_flags(p_eval)

    p_ablate = sub.add_parser("ablate", allow_abbrev=False,
                              help="train and evaluate modes full, no_denoise, no_decouple")
    _add_config_flags(p_ablate)

    p_sweep = sub.add_parser("sweep", allow_abbrev=False,
                             help="grid runs over noise, beta or layers")
    p_sweep.add_argument("--input", dest="dataset", default=None)
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", default=None,
                         help="comma-separated axis values (defaults per axis)")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds")
    _add_config_flags(p_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(rc, args.force)
        if args.command == "train":
            return cmd_train(rc, args.dump_stack)
        if args.command == "evaluate":
            return cmd_evaluate(rc, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(rc)
        if args.command == "sweep":
            values = None
            if args.values:
                caster = int if args.axis == "layers" else float
                values = [caster(v) for v in args.values.split(",")]
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            return cmd_sweep(rc, args.axis, values, seeds)
        raise AssertionError(f"unhandled command {args.command}")
    except (DrcsdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
