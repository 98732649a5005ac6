"""Drivers behind the CLI subcommands; all artifact I/O lives here.

Artifacts per run directory:

    config.resolved        fully resolved configuration
    history.csv            iteration,loss,accuracy,val_accuracy,outer_lr
    checkpoint.ckpt        final state (plus checkpoint_NNNNNN.ckpt at intervals)
    transference.csv       iteration,source_task_id,target_task_id,source_mode,
                           target_mode,loss_before,loss_after,lr,label
    transference_summary.json
    report.json            consolidated accuracies, transference, embeddings

CSV floats use repr, so file -> memory -> file round-trips are lossless and
identical configurations produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..metalearn import meta_evaluate, meta_train, export_embeddings
from ..modulation import film_equivalence_report, paramcount_report
from ..tasks import sample_episode
from ..tensor import precision, set_default_dtype
from ..transference import NeutralBand, measure_transference, summarize
from .checkpoint import load_state, save_state
from .config import RunConfig, parse_config

HISTORY_FIELDS = ("iteration", "loss", "accuracy", "val_accuracy", "outer_lr")
TRANSFER_FIELDS = ("iteration", "source_task_id", "target_task_id", "source_mode",
                   "target_mode", "loss_before", "loss_after", "lr", "label")


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_history_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_FIELDS)
        for row in rows:
            w.writerow([_cell(row[k]) for k in HISTORY_FIELDS])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = []
        for r in reader:
            rows.append({
                "iteration": int(r["iteration"]),
                "loss": float(r["loss"]),
                "accuracy": float(r["accuracy"]),
                "val_accuracy": float(r["val_accuracy"]),
                "outer_lr": float(r["outer_lr"]),
            })
    return rows


def write_transference_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(TRANSFER_FIELDS)
        for r in records:
            w.writerow([_cell(getattr(r, k)) for k in TRANSFER_FIELDS])


def read_transference_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = []
        for r in csv.DictReader(f):
            rows.append({
                "iteration": int(r["iteration"]),
                "source_task_id": int(r["source_task_id"]),
                "target_task_id": int(r["target_task_id"]),
                "source_mode": int(r["source_mode"]),
                "target_mode": int(r["target_mode"]),
                "loss_before": float(r["loss_before"]),
                "loss_after": float(r["loss_after"]),
                "lr": float(r["lr"]),
                "label": r["label"],
            })
    return rows


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_run_config(arg) -> RunConfig:
    return arg if isinstance(arg, RunConfig) else parse_config(arg)


def run_train(config) -> dict:
    """Train per the configuration, writing history and checkpoints."""
    rc = _load_run_config(config)
    set_default_dtype(rc.precision)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(rc.resolved_text(), encoding="utf-8")

    def hook(state):
        if rc.checkpoint_interval and state.iteration % rc.checkpoint_interval == 0:
            save_state(out / f"checkpoint_{state.iteration:06d}.ckpt", state,
                       downcast=rc.checkpoint_downcast)

    result = meta_train(rc.learner, rc.modes, iteration_hook=hook)
    write_history_csv(out / "history.csv", result.history)
    save_state(out / "checkpoint.ckpt", result.state, downcast=rc.checkpoint_downcast)
    return {
        "out_dir": str(out),
        "history": str(out / "history.csv"),
        "checkpoint": str(out / "checkpoint.ckpt"),
        "final_loss": result.history[-1]["loss"] if result.history else float("nan"),
    }


def run_transfer(config, checkpoint_path) -> dict:
    """Measure source-to-target transference from a trained checkpoint."""
    rc = _load_run_config(config)
    set_default_dtype(rc.precision)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_state(checkpoint_path, rc.learner, rc.modes)
    ts = rc.transfer
    band = NeutralBand(ts.epsilon)
    cfg = rc.learner
    force_src = None if ts.source_mode < 0 else ts.source_mode
    force_tgt = None if ts.target_mode < 0 else ts.target_mode
    sources = [
        sample_episode(rc.modes, cfg.n_way, cfg.k_shot, cfg.m_query, "train",
                       ts.seed, index=i, force_mode=force_src)
        for i in range(ts.sources)
    ]
    records = []
    per_target = []
    for j in range(ts.targets):
        target = sample_episode(rc.modes, cfg.n_way, cfg.k_shot, cfg.m_query, "test",
                                ts.seed, index=j, force_mode=force_tgt)
        rs = measure_transference(state, sources, target, ts.alpha, band)
        live = [r.lr for r in rs if not r.degenerate]
        per_target.append({"target_task_id": target.task_id,
                           "target_mode": target.mode_id,
                           "mean_lr": float(np.mean(live)) if live else float("nan")})
        records.extend(rs)
    write_transference_csv(out / "transference.csv", records)
    s = summarize(records, bins=ts.bins, band=band, lr_range=(0.0, ts.lr_max))
    summary = {
        "alpha": ts.alpha,
        "epsilon": s.epsilon,
        "sources": ts.sources,
        "targets": ts.targets,
        "records": s.records,
        "degenerate": s.degenerate,
        "pct_positive": s.pct_positive,
        "pct_negative": s.pct_negative,
        "pct_neutral": s.pct_neutral,
        "mean_lr": s.mean_lr,
        "histogram": {"edges": list(s.edges), "counts": list(s.counts),
                      "underflow": s.underflow, "overflow": s.overflow},
        "per_target": per_target,
        "iteration": state.iteration,
    }
    write_json(out / "transference_summary.json", summary)
    return {"records": str(out / "transference.csv"),
            "summary": str(out / "transference_summary.json"),
            "mean_lr": s.mean_lr}


def run_verify_film(seed: int = 0, trials: int = 100) -> dict:
    """Two-path equivalence report at both storage precisions."""
    with precision("f64"):
        r64 = film_equivalence_report(seed=seed, trials=trials)
    with precision("f32"):
        r32 = film_equivalence_report(seed=seed, trials=trials)
    return {"f64": r64, "f32": r32}


def run_paramcount(arch: str, embedding_dim: int = 128, rank: int = 1) -> dict:
    return paramcount_report(arch, embedding_dim=embedding_dim, rank=rank)


def run_report(run_dir) -> dict:
    """Consolidate a finished run directory into report.json."""
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    cfg_path = run / "config.resolved"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing {cfg_path}")
    rc = parse_config(cfg_path)
    set_default_dtype(rc.precision)
    ckpt = run / "checkpoint.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing {ckpt}")
    state = load_state(ckpt, rc.learner, rc.modes)
    rep = meta_evaluate(state, rc.modes, rc.report.episodes, rc.report.seed)

    def acc_row(a):
        return {"mean": a.mean, "half_width95": a.half_width95, "episodes": a.episodes}

    accuracy = {str(mode): acc_row(a) for mode, a in rep.per_mode.items()}
    accuracy["overall"] = acc_row(rep.overall)
    report = {
        "iteration": state.iteration,
        "eval_episodes": rc.report.episodes,
        "eval_seed": rc.report.seed,
        "accuracy": accuracy,
    }
    if state.params.encoder is not None and rc.report.embeddings > 0:
        rows = export_embeddings(state, rc.modes, rc.report.embeddings, rc.report.seed)
        report["embeddings"] = [{"mode": m, "v": [float(x) for x in v]} for m, v in rows]
    summary_path = run / "transference_summary.json"
    if summary_path.exists():
        with open(summary_path, encoding="utf-8") as f:
            report["transference"] = json.load(f)
    history_path = run / "history.csv"
    if history_path.exists():
        rows = read_history_csv(history_path)
        report["history_rows"] = len(rows)
        if rows:
            report["final_train_loss"] = rows[-1]["loss"]
            report["final_train_accuracy"] = rows[-1]["accuracy"]
    write_json(run / "report.json", report)
    return report
