"""Report files: JSON + CSV mirrors of an EvalResult and matplotlib figures."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalResult  # noqa: E402

PNG_META = {"Software": None}
CSV_HEADER = ("section", "name", "ap25", "ap50", "ar25", "ar50", "n")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    """Per-step total loss with its per-epoch mean, plus the loss terms."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if history:
        steps = [r["step"] for r in history]
        for key in ("total", "cls", "box", "center"):
            ax.plot(steps, [r[key] for r in history], label=key, lw=1.2 if key == "total" else 0.8)
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_result(result: EvalResult, path) -> Path:
    """Grouped AP@0.25 / AP@0.5 bars for overall, splits and category groups."""
    path = Path(path)
    names: List[str] = ["overall"]
    ms = [result.overall]
    for section in (result.splits, result.groups):
        for k, m in section.items():
            names.append(k)
            ms.append(m)
    xs = range(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 1), 3.5))
    ax.bar([x - 0.2 for x in xs], [m.ap25 for m in ms], width=0.4, label="AP@0.25")
    ax.bar([x + 0.2 for x in xs], [m.ap50 for m in ms], width=0.4, label="AP@0.5")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_title(f"{result.task} evaluation")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(table: Dict[str, List[float]], path, title: str = "") -> Path:
    """Per-variant seed scatter with the median marked."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for i, (name, vals) in enumerate(table.items()):
        ax.scatter([i] * len(vals), vals, s=18)
        if vals:
            med = sorted(vals)[len(vals) // 2]
            ax.hlines(med, i - 0.25, i + 0.25, colors="k")
    ax.set_xticks(range(len(table)))
    ax.set_xticklabels(list(table), fontsize=8)
    ax.set_ylabel("eval AP@0.25")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def write_report(result: EvalResult, path) -> List[Path]:
    """``path`` is the JSON report; CSV and PNG siblings share its stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in result.rows():
            w.writerow([row[0], row[1], *(f"{v:.6f}" for v in row[2:6]), row[6]])
    png = plot_result(result, path.with_suffix(".png"))
    return [path, csv_path, png]
