"""Figures for run directories and variance reports (matplotlib, Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import yaml  # noqa: E402

from siamlab.errors import InputError  # noqa: E402


def read_epoch_records(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise InputError(f"{run_dir} has no metrics.jsonl")
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return [r for r in records if r.get("kind") == "epoch"]


def run_label(run_dir) -> str:
    cfg_path = Path(run_dir) / "config.yaml"
    if not cfg_path.is_file():
        return Path(run_dir).name
    cfg = yaml.safe_load(cfg_path.read_text())
    return f"{cfg['method']} K={cfg['K']} seed={cfg['seed']}"


def plot_metric_curves(run_dirs, metric: str, out_path) -> Path:
    """One curve per run of an epoch-level metric (e.g. ``knn_accuracy``)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for run in run_dirs:
        records = [r for r in read_epoch_records(run) if metric in r]
        if not records:
            plt.close(fig)
            raise InputError(f"{run} has no epoch records with {metric!r}")
        ax.plot([r["epoch"] + 1 for r in records], [r[metric] for r in records], marker="o", ms=3, label=run_label(run))
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_variance_report(report, out_path) -> Path:
    """Per-image gradient-variance traces of the compared methods."""
    traces = report.method_traces
    fig, ax = plt.subplots(figsize=(6, 4))
    n = len(next(iter(traces.values())))
    width = 0.8 / len(traces)
    for j, (method, values) in enumerate(traces.items()):
        ax.bar([i + j * width for i in range(n)], values, width=width, label=method)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(n)])
    ax.set_xticklabels([str(i) for i in range(n)])
    ax.set_xlabel("image")
    ax.set_ylabel("trace of gradient covariance")
    ax.legend()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
