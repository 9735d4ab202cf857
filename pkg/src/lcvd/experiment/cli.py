"""Command-line entry point: ``lcvd <command> [flags]``.

Every flag mirrors a field of :class:`ExperimentConfig`. Values come from the
dataclass defaults, then ``--config file.json``, then explicit flags.
Outputs are byte-identical across re-runs with the same config and seed;
wall-clock timings go to the log unless ``--record-timings`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import FormatError
from ..detectors import DETECTORS, KL_OUTPUT_UNIFORM, KL_UNIFORM_OUTPUT, score_max_softmax
from ..model import TrainingDiverged, load_checkpoint, save_checkpoint
from ..numerics import GENERATOR_NAME, GENERATOR_VERSION, InvalidArgument, Rng
from ..theorem import (class_count_distribution, monte_carlo_class_count, occupancy_distribution,
                       prob_all_classes, occupancy_fractions)
from ..vicinity import ANY_SAMPLE, DISTINCT_CLASS
from . import pipeline as pl
from .config import OOD_SETS, ConfigError, ExperimentConfig

log = logging.getLogger("lcvd")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
METRIC_COLUMNS = list(pl.METRIC_KEYS)


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: Path, header: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def write_metric_rows(path: Path, lead: list[str], rows: list[dict]) -> None:
    """Metric CSV with percentages to two decimals."""
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(lead + METRIC_COLUMNS)
        for r in rows:
            w.writerow([str(r[c]) for c in lead] + [f"{100 * r[m]:.2f}" for m in METRIC_COLUMNS])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _manifest(cfg: ExperimentConfig, command: str, **extra) -> dict:
    m = {
        "command": command,
        "run_id": cfg.run_id(command),
        "generator": {"name": GENERATOR_NAME, "version": GENERATOR_VERSION},
        "config": cfg.to_dict(),
    }
    m.update(extra)
    return m


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_matching(path, cfg: ExperimentConfig, bench: pl.Benchmark):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    model = load_checkpoint(path)
    want = pl.layer_dims(cfg, bench)
    if model.layer_dims != want:
        raise ConfigError(f"checkpoint {path} has layer dims {model.layer_dims}, config expects {want}")
    return model


def _pretrained(args, cfg, bench, timer):
    if args.checkpoint:
        return _load_matching(args.checkpoint, cfg, bench)
    with timer("pretrain"):
        model, _ = pl.run_pretrain(cfg, bench)
    return model


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    with timer("pretrain"):
        model, curve = pl.run_pretrain(cfg, bench)
    save_checkpoint(model, out / "pretrained.ckpt")
    write_rows(out / "pretrain_curve.csv", ["epoch", "loss", "train_acc", "test_acc"], curve)
    summary = {"test_acc": curve[-1]["test_acc"], "checkpoint": "pretrained.ckpt"}
    write_json(out / "pretrain_manifest.json", _manifest(cfg, "pretrain", **summary))
    return summary


def cmd_finetune(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    ckpt = args.checkpoint or str(out / "pretrained.ckpt")
    pretrained = _load_matching(ckpt, cfg, bench)
    with timer("finetune"):
        model, res = pl.run_finetune(cfg, bench, pretrained)
    save_checkpoint(model, out / "finetuned.ckpt")
    write_rows(out / "finetune_curve.csv", ["epoch", "loss", "train_acc", "test_acc"], res.curve)
    summary = {"epochs_run": res.epochs_run, "converged": res.converged,
               "finetune_lr": cfg.effective_finetune_lr, "checkpoint": "finetuned.ckpt",
               "test_acc_before": pl.accuracy(pretrained, bench.test), "test_acc_after": pl.accuracy(model, bench.test)}
    write_json(out / "finetune_manifest.json", _manifest(cfg, "finetune", **summary))
    return summary


def cmd_retrain(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    with timer("retrain"):
        model, res = pl.run_retrain(cfg, bench)
    save_checkpoint(model, out / "retrained.ckpt")
    write_rows(out / "retrain_curve.csv", ["epoch", "loss", "train_acc", "test_acc"], res.curve)
    summary = {"epochs_run": res.epochs_run, "checkpoint": "retrained.ckpt",
               "test_acc": pl.accuracy(model, bench.test)}
    write_json(out / "retrain_manifest.json", _manifest(cfg, "retrain", **summary))
    return summary


def _parse_named_checkpoints(specs, out: Path):
    named = []
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        named.append((name, path))
    if not named:
        named = [(p.stem, str(p)) for p in (out / "pretrained.ckpt", out / "finetuned.ckpt") if p.exists()]
        if not named:
            raise ConfigError("no checkpoint given and none found in the output directory")
    return named


def cmd_evaluate(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    rows, accs = [], {}
    for name, path in _parse_named_checkpoints(args.checkpoint_list, out):
        model = _load_matching(path, cfg, bench)
        accs[name] = pl.accuracy(model, bench.test)
        with timer(f"evaluate[{name}]"):
            rows += [{"model": name, **r} for r in pl.evaluate(model, cfg, bench)]
    write_metric_rows(out / "report.csv", ["model", "detector", "ood_set"], rows)
    report = _manifest(cfg, "evaluate", id_test_accuracy=accs, rows=rows)
    if args.record_timings:
        report["timings"] = timer.timings
    write_json(out / "report.json", report)
    return {"rows": len(rows), "id_test_accuracy": accs}


def cmd_sweep_m(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    pretrained = _pretrained(args, cfg, bench, timer)
    rows = []
    for M in args.m_values:
        if M < 1:
            raise ConfigError(f"M must be >= 1, got {M}")
        with timer(f"sweep[M={M}]"):
            model, res = pl.run_finetune(cfg, bench, pretrained, M=M)
            acc = pl.accuracy(model, bench.test)
            rows += [{"M": M, "id_acc": f"{100 * acc:.2f}", **r} for r in pl.evaluate(model, cfg, bench)]
    write_metric_rows(out / "sweep_m.csv", ["M", "detector", "ood_set", "id_acc"], rows)
    return {"rows": len(rows)}


def cmd_ablate(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    variants = list(pl.ABLATION_VARIANTS) if "all" in args.variant else args.variant
    for v in variants:
        if v not in pl.ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {list(pl.ABLATION_VARIANTS)}")
    pretrained = _pretrained(args, cfg, bench, timer)
    rows = []
    for v in variants:
        with timer(f"ablate[{v}]"):
            model, _ = pl.run_finetune(cfg, bench, pretrained, variant=v)
            acc = pl.accuracy(model, bench.test)
            rows += [{"variant": v, "id_acc": f"{100 * acc:.2f}", **r} for r in pl.evaluate(model, cfg, bench)]
    write_metric_rows(out / "ablation.csv", ["variant", "detector", "ood_set", "id_acc"], rows)
    return {"rows": len(rows)}


def theorem_rows(M: int, K: int, trials: int, seed: int) -> list[dict]:
    p_dp = class_count_distribution(M, K)
    p_occ = occupancy_distribution(M, K)
    p_mc = monte_carlo_class_count(M, K, trials, Rng(seed).substream(pl.STREAM_THEOREM))
    return [{"K_C": k + 1, "p_dp": float(p_dp[k]), "p_occupancy": float(p_occ[k]),
             "p_montecarlo": float(p_mc[k])} for k in range(K)]


def cmd_theorem(cfg: ExperimentConfig, args, timer) -> dict:
    out = _out_dir(cfg)
    rows = theorem_rows(args.M_theorem, args.K, args.trials, cfg.seed)
    write_rows(out / "theorem.csv", ["K_C", "p_dp", "p_occupancy", "p_montecarlo"], rows)
    curve = [{"M": m, "p_all_dp": prob_all_classes(m, args.K),
              "p_all_occupancy": float(occupancy_fractions(m, args.K)[-1])} for m in args.curve_m]
    write_rows(out / "theorem_curve.csv", ["M", "p_all_dp", "p_all_occupancy"], curve)
    return {"mode_dp": int(np.argmax([r["p_dp"] for r in rows])) + 1}


def heatmap_rows(model, norm, bounds, resolution):
    x0 = np.linspace(bounds[0], bounds[1], resolution)
    x1 = np.linspace(bounds[2], bounds[3], resolution)
    g0, g1 = np.meshgrid(x0, x1, indexing="ij")
    raw = np.stack([g0.ravel(), g1.ravel()], axis=1)
    conf = score_max_softmax(model, (raw - norm.mean) / norm.std)
    return [{"x0": float(a), "x1": float(b), "confidence": float(c)} for (a, b), c in zip(raw, conf)]


def cmd_heatmap(cfg: ExperimentConfig, args, timer) -> dict:
    bench = pl.build_benchmark(cfg)
    out = _out_dir(cfg)
    if bench.train.dim != 2:
        raise InvalidArgument("heatmap needs a model with 2-D inputs")
    ckpt = args.checkpoint or str(out / "finetuned.ckpt")
    model = _load_matching(ckpt, cfg, bench)
    rows = heatmap_rows(model, bench.norm, args.bounds, args.resolution)
    name = args.heatmap_name or f"heatmap_{Path(ckpt).stem}.csv"
    write_rows(out / name, ["x0", "x1", "confidence"], rows)
    return {"cells": len(rows), "file": name}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "sweep-m": cmd_sweep_m,
    "ablate": cmd_ablate,
    "theorem": cmd_theorem,
    "heatmap": cmd_heatmap,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per config field; defaults are None so the config file can fill them."""
    g = p.add_argument_group("experiment config")
    g.add_argument("--config", help="JSON file with any subset of config fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir")
    g.add_argument("--num-classes", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--class-radius", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--n-train-per-class", type=int)
    g.add_argument("--n-test-per-class", type=int)
    g.add_argument("--train-csv")
    g.add_argument("--test-csv")
    g.add_argument("--ood-sets", nargs="+", choices=OOD_SETS)
    g.add_argument("--ring-inner", type=float)
    g.add_argument("--ring-outer", type=float)
    g.add_argument("--n-ring", type=int)
    g.add_argument("--shift-offset", type=float, nargs="+")
    g.add_argument("--uniform-low", type=float)
    g.add_argument("--uniform-high", type=float)
    g.add_argument("--n-uniform", type=int)
    g.add_argument("--hidden", type=int, nargs="+")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--milestones", type=int, nargs="*")
    g.add_argument("--decay", type=float)
    g.add_argument("--finetune-lr", type=float)
    g.add_argument("--finetune-epochs", type=int)
    g.add_argument("--plateau-tol", type=float)
    g.add_argument("--plateau-patience", type=int)
    g.add_argument("--M", dest="M", type=int)
    g.add_argument("--companion-policy", choices=(ANY_SAMPLE, DISTINCT_CLASS))
    g.add_argument("--ood-pool-size", type=int)
    g.add_argument("--detectors", nargs="+", choices=DETECTORS)
    g.add_argument("--odin-temperature", type=float)
    g.add_argument("--odin-epsilon", type=float)
    g.add_argument("--energy-temperature", type=float)
    g.add_argument("--ra-percentile", type=float)
    g.add_argument("--maha-ridge", type=float)
    g.add_argument("--gradnorm-temperature", type=float)
    g.add_argument("--gradnorm-order", type=float)
    g.add_argument("--gradnorm-kl", choices=(KL_OUTPUT_UNIFORM, KL_UNIFORM_OUTPUT))
    p.add_argument("--record-timings", action="store_true", help="embed wall-clock timings in report.json")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcvd", description="Cross-class vicinity OOD detection lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name in ("finetune", "sweep-m", "ablate", "heatmap"):
            p.add_argument("--checkpoint", help="pretrained (or, for heatmap, any) checkpoint")
        if name == "evaluate":
            p.add_argument("--checkpoint", dest="checkpoint_list", action="append",
                           help="[name=]path; repeat to compare models")
        if name == "sweep-m":
            p.add_argument("--m-values", type=int, nargs="+", default=[1, 5, 10, 15, 20])
        if name == "ablate":
            p.add_argument("--variant", nargs="+", default=["all"])
        if name == "theorem":
            p.add_argument("--theorem-M", dest="M_theorem", type=int, default=10)
            p.add_argument("--K", type=int, default=10)
            p.add_argument("--trials", type=int, default=100_000)
            p.add_argument("--curve-m", type=int, nargs="+", default=[10, 20, 50, 100, 200, 500, 1000])
        if name == "heatmap":
            p.add_argument("--bounds", type=float, nargs=4, default=[-6.0, 6.0, -6.0, 6.0],
                           metavar=("X0MIN", "X0MAX", "X1MIN", "X1MAX"))
            p.add_argument("--resolution", type=int, default=100)
            p.add_argument("--heatmap-name")
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if args.config:
        base.update(ExperimentConfig.load(args.config).to_dict())
    for key in ExperimentConfig.field_names():
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    timer = pl.Timer()
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](cfg, args, timer)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InvalidArgument, FormatError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
