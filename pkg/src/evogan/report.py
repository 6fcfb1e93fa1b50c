"""Run artifacts: CSV step logs, fitness/training figures, metrics tables.

Figures are rendered with the Agg backend straight to files, next to the
delimited logs they summarize.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_FIELDS = ("round", "step", "candidate_id", "w_estimate", "gp", "g_loss", "d_loss")


class CsvStepLog:
    """Append-only training log with one row per optimizer step."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_FIELDS)

    def log(self, round_idx, step, candidate_id, w_estimate, gp, g_loss, d_loss):
        self._writer.writerow([round_idx, step, candidate_id,
                               f"{w_estimate:.6g}", f"{gp:.6g}",
                               f"{g_loss:.6g}", f"{d_loss:.6g}"])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_step_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_trajectory_figure(trajectory, role: str, path) -> None:
    """Best/mean/worst fitness per round for one search stage."""
    rounds = [t["round"] for t in trajectory]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("best", "o-"), ("mean", "s--"), ("worst", "^:")):
        ax.plot(rounds, [t[key] for t in trajectory], style, label=key)
    ax.set_xlabel("round")
    ax.set_ylabel("fitness")
    direction = "max" if role == "generator" else "min"
    ax.set_title(f"{role} search fitness ({direction})")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_figure(csv_path, path) -> None:
    """Wasserstein estimate and losses over the steps of one training log."""
    rows = read_step_log(csv_path)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    w = [(int(r["step"]), float(r["w_estimate"])) for r in rows
         if r["w_estimate"] != "nan"]
    g = [(int(r["step"]), float(r["g_loss"])) for r in rows if r["g_loss"] != "nan"]
    d = [(int(r["step"]), float(r["d_loss"])) for r in rows if r["d_loss"] != "nan"]
    if w:
        ax1.plot(*zip(*w), lw=0.7)
    ax1.set_ylabel("wasserstein estimate")
    ax1.grid(True, alpha=0.3)
    if d:
        ax2.plot(*zip(*d), lw=0.7, label="critic loss")
    if g:
        ax2.plot(*zip(*g), lw=0.7, label="generator loss")
    ax2.set_xlabel("step")
    ax2.set_ylabel("loss")
    ax2.legend()
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(metrics: dict, path) -> None:
    """Bar chart of the zero-shot metrics."""
    items = [(k, v) for k, v in metrics.items() if v is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [k for k, _ in items]
    vals = [v for _, v in items]
    bars = ax.bar(names, vals, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("per-class top-1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_table(metrics: dict) -> str:
    """Human-readable metrics summary."""
    rows = [("CZSL acc", metrics.get("czsl_acc")),
            ("GZSL U", metrics.get("gzsl_u")),
            ("GZSL S", metrics.get("gzsl_s")),
            ("GZSL H", metrics.get("gzsl_h"))]
    extra = [(k, v) for k, v in metrics.items()
             if k not in ("czsl_acc", "gzsl_u", "gzsl_s", "gzsl_h")]
    rows.extend(extra)
    width = max(len(name) for name, _ in rows)
    lines = ["metric".ljust(width) + "  value", "-" * (width + 8)]
    for name, value in rows:
        shown = "  n/a" if value is None else f"{value:7.4f}"
        lines.append(name.ljust(width) + shown)
    return "\n".join(lines) + "\n"
