"""Loss curves, PR curves and per-class prediction counts as PNG images with CSV twins."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import CLASS_NAMES  # noqa: E402

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "proposal", "det", "qc", "dn")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> tuple:
    """Returns ``(header, rows)``; cells that parse as numbers come back as int or float."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[_parse(c) for c in row] for row in reader]
    return header, rows


def _parse(cell: str):
    for kind in (int, float):
        try:
            return kind(cell)
        except ValueError:
            pass
    return cell


def _records(metrics):
    if isinstance(metrics, (str, Path)):
        path = Path(metrics)
        if not path.exists():
            raise FileNotFoundError(f"metrics log {path} does not exist")
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
    return list(metrics or [])


def plot_losses(records, out_dir) -> list:
    keys = [k for k in LOSS_KEYS if k in records[0]]
    steps = [r["step"] for r in records]
    out = Path(out_dir)
    write_csv(out / "loss_curves.csv", ["step", *keys], [[r["step"], *(float(r[k]) for k in keys)] for r in records])
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        ax.plot(steps, [r[k] for r in records], label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=100)
    plt.close(fig)
    return [out / "loss_curves.csv", out / "loss_curves.png"]


def plot_pr_curves(reports: dict, out_dir) -> list:
    out = Path(out_dir)
    rows = []
    fig, axes = plt.subplots(1, len(CLASS_NAMES), figsize=(4 * len(CLASS_NAMES), 3.5), squeeze=False)
    for run, report in reports.items():
        for c, curve in sorted(report.curves.items()):
            for r, p in zip(curve.recall, curve.precision):
                rows.append([run, CLASS_NAMES[c], float(r), float(p)])
            axes[0, c].plot(curve.recall, curve.precision, label=run)
    for c, name in enumerate(CLASS_NAMES):
        axes[0, c].set_title(name)
        axes[0, c].set_xlabel("recall")
        axes[0, c].set_xlim(0, 1)
        axes[0, c].set_ylim(0, 1.05)
    axes[0, 0].set_ylabel("precision")
    axes[0, -1].legend()
    fig.tight_layout()
    fig.savefig(out / "pr_curves.png", dpi=100)
    plt.close(fig)
    write_csv(out / "pr_curves.csv", ["run", "class", "recall", "precision"], rows)
    return [out / "pr_curves.csv", out / "pr_curves.png"]


def plot_predictions_per_scene(reports: dict, out_dir) -> list:
    """Grouped bars: one bar per run for every class."""
    out = Path(out_dir)
    runs = list(reports)
    table = [[name, *(float(reports[r].predictions_per_scene_by_class[c]) for r in runs)]
             for c, name in enumerate(CLASS_NAMES)]
    write_csv(out / "predictions_per_scene.csv", ["class", *runs], table)
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(runs), 1)
    x = np.arange(len(CLASS_NAMES))
    for i, run in enumerate(runs):
        ax.bar(x + i * width, [row[1 + i] for row in table], width, label=run)
    ax.set_xticks(x + width * (len(runs) - 1) / 2, CLASS_NAMES)
    ax.set_ylabel("predictions per scene")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "predictions_per_scene.png", dpi=100)
    plt.close(fig)
    return [out / "predictions_per_scene.csv", out / "predictions_per_scene.png"]


def emit_plots(metrics, reports: dict = None, out_dir=".") -> list:
    """Write every plot the inputs allow; returns the written paths.

    ``metrics`` is a JSONL path or a list of records; ``reports`` maps run names to
    :class:`~conquer.evaluation.EvalReport`. An empty log writes nothing and logs a notice.
    """
    records = _records(metrics)
    reports = reports or {}
    if not records and not reports:
        log.warning("metrics log is empty; no plots written")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if records:
        written += plot_losses(records, out)
    else:
        log.warning("metrics log is empty; loss curves skipped")
    if reports:
        written += plot_pr_curves(reports, out)
        written += plot_predictions_per_scene(reports, out)
    return written
