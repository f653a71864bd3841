"""Figure and table rendering for training logs and decomposition audits.

Everything writes to files (headless backend); each entry point returns the
list of paths it produced so callers can log or test them.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .export import AuditReport


def _rolling_mean(x, window: int):
    if len(x) < window or window < 2:
        return np.asarray(x)
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def read_loss_csv(path):
    """Parse a training loss log into a dict of column arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {"step": np.zeros(0, dtype=int)}
    out = {
        "step": np.array([int(r["step"]) for r in rows]),
        "kind": [r["kind"] for r in rows],
        "sds_count": np.array([int(r["sds_count"]) for r in rows]),
        "penet": np.array([float(r["penet"]) for r in rows]),
        "eikonal": np.array([float(r["eikonal"]) for r in rows]),
        "total": np.array([float(r["total"]) for r in rows]),
    }
    return out


def plot_losses(csv_path, out_dir, window: int = 25) -> list:
    """Loss-curve figures from a training CSV; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = read_loss_csv(csv_path)
    steps = log["step"]
    written = []

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for ax, key, title in zip(
            axes, ("total", "penet", "eikonal"),
            ("objective", "penetration", "eikonal")):
        y = log.get(key, np.zeros_like(steps, dtype=float))
        ax.plot(steps, y, alpha=0.35, lw=0.8, label="per step")
        smooth = _rolling_mean(y, window)
        if len(smooth) != len(y):
            ax.plot(steps[window - 1:], smooth, lw=1.6, label=f"mean({window})")
        ax.set_title(title)
        ax.set_xlabel("step")
        if np.all(y >= 0) and np.any(y > 0):
            ax.set_yscale("symlog", linthresh=max(1e-8, np.abs(y).max() * 1e-6))
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def write_audit_csv(report: AuditReport, path) -> None:
    """Delimited audit summary: one row per object and per object pair."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "i", "j", "value"])
        for i, v in enumerate(report.occupancy):
            w.writerow(["occupancy_volume", i, "", f"{float(v):.8g}"])
        for i, j, v in report.pairs():
            w.writerow(["overlap_volume", i, j, f"{v:.8g}"])
        for i, v in sorted(report.iou.items()):
            w.writerow(["reference_iou", i, "", f"{float(v):.8g}"])
        for k, c in enumerate(report.histogram):
            w.writerow(["penetration_count", k, "", int(c)])
        w.writerow(["naive_penetration", "", "", f"{report.naive_penetration:.8g}"])


def plot_audit(report: AuditReport, out_dir) -> list:
    """Audit figures: occupancy bars, overlap matrix, penetration histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    m = report.m

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    axes[0].bar(range(m), report.occupancy, color="steelblue")
    axes[0].set_title("occupied volume per object")
    axes[0].set_xlabel("object")
    axes[0].set_ylabel("volume")

    im = axes[1].imshow(report.overlap, cmap="magma", vmin=0.0)
    axes[1].set_title("pairwise overlap volume")
    axes[1].set_xlabel("object")
    axes[1].set_ylabel("object")
    fig.colorbar(im, ax=axes[1], fraction=0.046)

    ks = np.arange(len(report.histogram))
    axes[2].bar(ks, report.histogram, color="darkorange")
    axes[2].set_yscale("log")
    axes[2].set_title("points inside exactly k objects")
    axes[2].set_xlabel("k")
    fig.tight_layout()
    path = out / "audit_figures.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if report.iou:
        fig, ax = plt.subplots(figsize=(5, 4))
        keys = sorted(report.iou)
        ax.bar([str(k) for k in keys], [report.iou[k] for k in keys],
               color="seagreen")
        ax.axhline(1.0, color="gray", lw=0.8, ls="--")
        ax.set_ylim(0, 1.05)
        ax.set_title("occupancy IoU vs reference")
        ax.set_xlabel("object")
        fig.tight_layout()
        path = out / "audit_iou.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_audit_outputs(report: AuditReport, out_dir) -> dict:
    """Write the audit JSON + CSV and the figures; returns all paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "audit.json"
    csv_path = out / "audit.csv"
    report.save_json(json_path)
    write_audit_csv(report, csv_path)
    figures = plot_audit(report, out)
    return {"json": json_path, "csv": csv_path, "figures": figures}
