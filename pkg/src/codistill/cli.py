"""Command-line entry point: run, sweep, inspect-spectrum, partition.

Exit codes: 0 success, 2 bad config or arguments, 3 training diverged,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import struct
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import STRATEGIES, ConfigError, ExperimentConfig, parse_config
from .data import dirichlet_partition, mean_tv_distance, split_local
from .federation import TrainingDiverged, TrainingRun, build_dataset, fine_tune_new_clients, run_training
from .model import MlpSpec
from .spectrum import spectrum, truncate
from .timing import speedup_report

OUT_ENV = "CODISTILL_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

ROUND_COLUMNS = ("round", "gm_acc", "pm_acc", "gm_ce", "gm_reg", "pm_ce", "pm_reg", "t_sim_cw", "t_sim_wf")
SWEEP_PARAMS = ("lambda_p", "lambda_g", "tau", "alpha", "strategy", "ablation")
# ablation cells as (keep lambda_p, keep lambda_g)
ABLATIONS = {"full": (True, True), "no_gm": (True, False), "no_pm": (False, True), "none": (False, False)}

CKPT_MAGIC = b"CDSTCKPT"
CKPT_VERSION = 1


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, w: np.ndarray, layer_sizes: Sequence[int]) -> None:
    """Binary layout: magic, u32 version, u32 n_layers, u32 sizes, u64 d, float64 LE weights."""
    w = np.asarray(w, dtype=np.float64)
    d = MlpSpec(tuple(layer_sizes)).num_params
    if w.ndim != 1 or w.size != d:
        raise ValueError(f"weight vector has {w.size} entries, layer sizes imply {d}")
    header = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(layer_sizes))
    header += struct.pack(f"<{len(layer_sizes)}I", *layer_sizes) + struct.pack("<Q", d)
    Path(path).write_bytes(header + w.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic bytes)")
    pos = len(CKPT_MAGIC)
    try:
        version, n_layers = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        sizes = struct.unpack_from(f"<{n_layers}I", raw, pos)
        pos += 4 * n_layers
        (d,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error:
        raise ValueError(f"{path}: truncated checkpoint header") from None
    try:
        expected = MlpSpec(tuple(sizes)).num_params
    except ValueError as exc:
        raise ValueError(f"{path}: corrupt layer sizes ({exc})") from None
    if d != expected:
        raise ValueError(f"{path}: stored d={d} does not match layer sizes ({expected})")
    if len(raw) - pos != 8 * d:
        raise ValueError(f"{path}: expected {8 * d} weight bytes, found {len(raw) - pos}")
    w = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    return w, tuple(sizes)


# ---------------------------------------------------------------- formatting

def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    # repr of a Python float is the shortest round-tripping form and locale independent
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def round_rows(run: TrainingRun) -> list[list[str]]:
    rows = []
    for r in run.records:
        rows.append([
            _num(r.round), _num(r.gm_acc), _num(r.pm_acc), _num(r.gm_ce), _num(r.gm_reg),
            _num(r.pm_ce), _num(r.pm_reg),
            _num(r.t_sim.get("compute_and_wait")), _num(r.t_sim.get("wait_free")),
        ])
    return rows


def _best(values: list[float]) -> tuple[float | None, int | None]:
    if not values:
        return None, None
    k = int(np.argmax(values))
    return values[k], k + 1


def summarize(cfg: ExperimentConfig, run: TrainingRun, finetune: list[tuple[float, float]] | None = None) -> dict:
    gm = [r.gm_acc for r in run.records]
    pm = [r.pm_acc for r in run.records]
    best_gm, best_gm_round = _best(gm)
    best_pm, best_pm_round = _best(pm)
    timelines = run.setup.timelines
    summary = {
        "rounds_completed": len(run.records),
        "num_params": run.setup.spec.num_params,
        "final": {"gm_acc": gm[-1] if gm else None, "pm_acc": pm[-1] if pm else None},
        "best": {"gm_acc": best_gm, "gm_round": best_gm_round, "pm_acc": best_pm, "pm_round": best_pm_round},
        "zeta_total": {p: tl.total for p, tl in sorted(timelines.items())},
        "seeds": {"data": cfg.data_seed, "init": cfg.init_seed, "sampling": cfg.sampling_seed},
        "config": resolved_config(cfg),
    }
    if pm and "compute_and_wait" in timelines and "wait_free" in timelines:
        summary["speedup"] = speedup_report(timelines["compute_and_wait"], timelines["wait_free"], pm, cfg.target_acc)
    else:
        summary["speedup"] = None
    if finetune:
        before = [b for b, _ in finetune]
        after = [a for _, a in finetune]
        summary["new_clients"] = {
            "count": len(finetune),
            "epochs": cfg.finetune_epochs,
            "mean_acc_before": float(np.mean(before)),
            "mean_acc_after": float(np.mean(after)),
        }
    return summary


def resolved_config(cfg: ExperimentConfig) -> dict:
    # the output location is not part of the experiment, so reruns elsewhere stay byte-identical
    out = cfg.to_dict()
    out.pop("out_dir")
    return out


# ---------------------------------------------------------------- commands

def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV) or cfg.out_dir)


def execute(cfg: ExperimentConfig, threads: int = 1) -> tuple[TrainingRun, dict]:
    run = run_training(cfg, threads=threads)
    finetune = None
    if cfg.n_new_clients:
        finetune = fine_tune_new_clients(run, cfg.finetune_epochs, cfg.finetune_eta, cfg.sampling_seed)
    return run, summarize(cfg, run, finetune)


def cmd_run(args) -> int:
    cfg = _load(args)
    run, summary = execute(cfg, args.threads)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "rounds.csv", ROUND_COLUMNS, round_rows(run))
    _dump_json(out / "summary.json", summary)
    save_checkpoint(out / "global.ckpt", run.server.w_g, run.setup.spec.layer_sizes)
    print(f"wrote {out / 'rounds.csv'}, {out / 'summary.json'}, {out / 'global.ckpt'}")
    return EXIT_OK


def parse_sweep_values(param: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError("--values is empty")
    if param == "strategy":
        bad = [v for v in items if v not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategy {bad[0]!r}; choose from {STRATEGIES}")
        return items
    if param == "ablation":
        bad = [v for v in items if v not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation {bad[0]!r}; choose from {tuple(ABLATIONS)}")
        return items
    try:
        return [float(v) for v in items]
    except ValueError:
        raise ValueError(f"--values for {param} must be numbers") from None


def sweep_config(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if param == "ablation":
        keep_p, keep_g = ABLATIONS[value]
        return cfg.replace(lambda_p=cfg.lambda_p if keep_p else 0.0, lambda_g=cfg.lambda_g if keep_g else 0.0)
    return cfg.replace(**{param: value})


SWEEP_COLUMNS = ("param", "value", "final_gm_acc", "final_pm_acc", "best_gm_acc", "best_pm_acc",
                 "rounds_to_target", "speedup")


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, threads: int = 1) -> list[list[str]]:
    rows = []
    for value in values:
        _, s = execute(sweep_config(cfg, param, value), threads)
        sp = s["speedup"] or {}
        rows.append([param, value if isinstance(value, str) else _num(value),
                     _num(s["final"]["gm_acc"]), _num(s["final"]["pm_acc"]),
                     _num(s["best"]["gm_acc"]), _num(s["best"]["pm_acc"]),
                     _num(sp.get("rounds_to_target")), _num(sp.get("speedup"))])
    return rows


def cmd_sweep(args) -> int:
    cfg = _load(args)
    try:
        values = parse_sweep_values(args.param, args.values)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = sweep(cfg, args.param, values, args.threads)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.param}.csv"
    _write_csv(path, SWEEP_COLUMNS, rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_inspect_spectrum(args) -> int:
    try:
        w, _ = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    s = spectrum(w)
    if args.tau < 1.0:
        s = truncate(s, args.tau)
    rows = [[str(k), _num(m)] for k, m in enumerate(s.values)]
    if args.out:
        _write_csv(Path(args.out), ("index", "magnitude"), rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(("index", "magnitude"))
        writer.writerows(rows)
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load(args)
    ds = build_dataset(cfg)
    n = cfg.n_clients + cfg.n_new_clients
    part = dirichlet_partition(ds, n, cfg.alpha, cfg.data_seed)
    split = split_local(part, ds, cfg.test_fraction, cfg.data_seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["client", "n_samples", *(f"class_{c}" for c in range(ds.num_classes))])
    for k, idx in enumerate(part.client_indices):
        hist = np.bincount(ds.labels[idx], minlength=ds.num_classes)
        writer.writerow([k, len(idx), *(int(h) for h in hist)])
    print(f"mean TV distance to global histogram: {mean_tv_distance(ds, part):.6f}", file=sys.stderr)
    for w in split.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- argparse

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**63:
        raise argparse.ArgumentTypeError("must be a non-negative 63-bit integer")
    return value


def _tau(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codistill", description="Spectral co-distillation federated simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="TOML config path, or '-' for stdin")
        sp.add_argument("--out", help=out_help + f" (overrides ${OUT_ENV} and out_dir)")
        sp.add_argument("--seed-override", type=_seed, help="use this seed for data, init and sampling")
        sp.add_argument("--threads", type=_positive_int, default=1, help="worker threads for client updates")

    run = sub.add_parser("run", help="train once and write rounds.csv, summary.json, global.ckpt")
    common(run, "output directory")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="one training run per value; writes sweep_<param>.csv")
    common(sw, "output directory")
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.set_defaults(func=cmd_sweep)

    ins = sub.add_parser("inspect-spectrum", help="CSV of (index, magnitude) for a checkpoint")
    ins.add_argument("checkpoint")
    ins.add_argument("--out", help="write CSV here instead of stdout")
    ins.add_argument("--tau", type=_tau, default=1.0, help="keep only the first ceil(tau*d) bins")
    ins.set_defaults(func=cmd_inspect_spectrum)

    part = sub.add_parser("partition", help="dry-run the Dirichlet split and print label histograms")
    part.add_argument("--config", required=True, help="TOML config path, or '-' for stdin")
    part.add_argument("--seed-override", type=_seed)
    part.set_defaults(func=cmd_partition)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
