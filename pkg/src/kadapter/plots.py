"""Report figures. Everything renders off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# strip the version string matplotlib would otherwise embed, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curve(history: Sequence[tuple[int, float, float]], path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if history:
        steps, _, losses = zip(*history)
        ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def grouped_bars(values: Mapping[str, Mapping[str, float]], path, title: str, ylabel: str) -> Path:
    """One group per outer key, one bar per inner key."""
    groups = list(values)
    series = sorted({k for g in groups for k in values[g]})
    width = 0.8 / max(len(series), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for j, s in enumerate(series):
        xs = [i + (j - (len(series) - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, [values[g].get(s, 0.0) for g in groups], width, label=s)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def forgetting_bars(report: Mapping, path) -> Path:
    keys = ("dev_a_before", "dev_a_after")
    vals = {arm: {k: float(report[arm][k]) for k in keys} for arm in ("full_model", "k_adapter")}
    return grouped_bars(vals, path, "task A dev accuracy before/after training on B", "accuracy")


def probe_bars(results: Mapping[str, float], path) -> Path:
    return grouped_bars({"P@1": dict(results)}, path, "cloze probe", "P@1")
