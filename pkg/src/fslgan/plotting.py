"""Figures for benchmark reports. Charts are derived views of the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps SVG output byte-stable across runs
_SVG_META = {"Date": None, "Creator": None}

plt.rcParams.update({
    "svg.hashsalt": "fslgan",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _figure(width: float = 6.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, width * golden))


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kwargs = {"metadata": _SVG_META} if path.suffix == ".svg" else {"metadata": {"Software": None}}
    fig.tight_layout()
    fig.savefig(path, **kwargs)
    plt.close(fig)
    return path


def strategy_bars(path: Path, labels: Sequence[str], means: Sequence[float],
                  stds: Sequence[float], ylabel: str = "slowest client epoch time (s)") -> Path:
    fig, ax = _figure()
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=4, color="0.6", edgecolor="0.2")
    ax.set_xticks(x)
    ax.set_xticklabels([l.replace("_", "\n") for l in labels])
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def loss_curves(path: Path, curves: Mapping[str, tuple[Sequence[int], Sequence[float]]],
                ylabel: str = "generator loss") -> Path:
    fig, ax = _figure()
    for label, (x, y) in curves.items():
        ax.plot(x, y, lw=1.2, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if curves:
        ax.legend(frameon=False)
    return _save(fig, path)


def image_panel(path: Path, grids: Mapping[tuple[str, int], np.ndarray]) -> Path:
    """Rows are runs, columns epochs; each cell an image grid in [-1, 1]."""
    rows = sorted({r for r, _ in grids}, key=lambda r: (len(r), r))
    cols = sorted({c for _, c in grids})
    fig, axes = plt.subplots(len(rows), len(cols), figsize=(1.6 * len(cols), 1.6 * len(rows)),
                             squeeze=False)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            for side in ax.spines.values():
                side.set_visible(False)
            if (r, c) in grids:
                ax.imshow(grids[r, c][0], cmap="gray", vmin=-1, vmax=1, interpolation="nearest")
            if i == 0:
                ax.set_title(f"epoch {c}", fontsize=8)
            if j == 0:
                ax.set_ylabel(r, fontsize=8)
    return _save(fig, path)
