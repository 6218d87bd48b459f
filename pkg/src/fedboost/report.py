"""Figure rendering for completed runs.

Reads the delimited outputs a run directory already contains (errors.csv,
epsilon.csv, sweep.csv, manifest.json) and writes PNG figures next to them.
matplotlib is imported lazily so the core library works without it.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_errors(run_dir: Path) -> Optional[Path]:
    src = run_dir / "errors.csv"
    if not src.exists():
        return None
    rows = _read_csv(src)
    if not rows:
        return None
    plt = _pyplot()
    names = [r["method"] for r in rows]
    vals = [100.0 * float(r["test_error"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, vals, color="tab:blue")
    ax.set_ylabel("test error (%)")
    ax.set_title("held-out error by method")
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    out = run_dir / "errors.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_epsilon(run_dir: Path) -> Optional[Path]:
    src = run_dir / "epsilon.csv"
    if not src.exists():
        return None
    rows = _read_csv(src)
    if not rows:
        return None
    plt = _pyplot()
    t = [int(r["round"]) for r in rows]
    eps = [float(r["epsilon"]) for r in rows]
    bound = [float(r["bound"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, eps, label="measured error", lw=0.8)
    ax.plot(t, bound, label="upper bound", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("boosting round")
    ax.set_ylabel("approximation error")
    ax.legend()
    fig.tight_layout()
    out = run_dir / "epsilon.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_ledger(run_dir: Path) -> Optional[Path]:
    src = run_dir / "manifest.json"
    if not src.exists():
        return None
    manifest = json.loads(src.read_text())
    ledger = manifest.get("ledger")
    if not ledger:
        return None
    plt = _pyplot()
    labels = ["preprocessing", "training", "total"]
    vals = [
        ledger.get("preprocessing_bytes", 0) / 1e6,
        ledger.get("training_bytes", 0) / 1e6,
        ledger.get("total_bytes", 0) / 1e6,
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, vals, color=["tab:orange", "tab:green", "tab:gray"])
    ax.set_ylabel("megabytes transferred")
    ax.set_title("communication by phase")
    fig.tight_layout()
    out = run_dir / "ledger.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_sweep(run_dir: Path) -> Optional[Path]:
    src = run_dir / "sweep.csv"
    if not src.exists():
        return None
    rows = _read_csv(src)
    if not rows:
        return None
    plt = _pyplot()
    axis = rows[0]["axis"]
    by_method: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(
            (float(r["value"]), 100.0 * float(r["test_error"]))
        )
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, pts in sorted(by_method.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel(axis)
    ax.set_ylabel("test error (%)")
    ax.legend()
    fig.tight_layout()
    out = run_dir / "sweep.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_all(run_dir: Path) -> list[Path]:
    """Render every figure whose input exists; returns the paths written."""
    run_dir = Path(run_dir)
    written = []
    for fn in (plot_errors, plot_epsilon, plot_ledger, plot_sweep):
        out = fn(run_dir)
        if out is not None:
            written.append(out)
    return written
