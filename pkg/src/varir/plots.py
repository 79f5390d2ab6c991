"""Headless bar-chart rendering for the pipeline tables.

Figures are written straight to PNG files next to the delimited tables they
visualize; nothing here opens a window. Rows are plain mappings, the same
shape the pipelines emit, and duplicate (x, group) cells collapse to the
last value so pre-aggregated tables with repeated reference rows render
cleanly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_grouped_bars(
    rows: Sequence[Mapping[str, object]],
    *,
    x: str,
    group: str,
    value: str,
    path: str | Path,
    title: str,
    ylabel: str,
) -> Path:
    """Grouped bars: one cluster per `x` category, one bar per `group`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs: list[str] = []
    groups: list[str] = []
    cells: dict[tuple[str, str], float] = {}
    for row in rows:
        xv, gv = str(row[x]), str(row[group])
        if xv not in xs:
            xs.append(xv)
        if gv not in groups:
            groups.append(gv)
        cells[(xv, gv)] = float(row[value])

    fig, ax = plt.subplots(figsize=(max(6.0, 1.9 * len(xs)), 3.8))
    if xs and groups:
        width = 0.8 / len(groups)
        base = np.arange(len(xs), dtype=float)
        for gi, gv in enumerate(groups):
            heights = [cells.get((xv, gv), 0.0) for xv in xs]
            ax.bar(base + gi * width, heights, width=width, label=gv)
        ax.set_xticks(base + 0.4 - width / 2)
        ax.set_xticklabels(xs, fontsize=9)
        ax.legend(fontsize=8, ncols=2)
    ax.set_title(title, fontsize=10)
    ax.set_ylabel(ylabel, fontsize=9)
    ax.axhline(0.0, color="black", linewidth=0.6)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path
