"""Render sweep results as figures next to the CSV output."""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["figure.figsize"] = (7.0, 4.5)
plt.rcParams["font.size"] = 10
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def read_sweep_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _series_by_kind(rows, ycol):
    series = {}
    for row in rows:
        kind = row["kind"]
        y = row[ycol]
        if y in ("", None):
            continue
        series.setdefault(kind, []).append((int(row["n"]), float(y)))
    for pts in series.values():
        pts.sort()
    return series


def _line_plot(rows, ycol, ylabel, title, path, logy=False):
    fig, ax = plt.subplots()
    for kind, pts in sorted(_series_by_kind(rows, ycol).items()):
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", label=kind)
    ax.set_xscale("log", base=2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("operations")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_sweep_figures(rows, outdir) -> list[str]:
    """Amortized cost, cost ratio, and peak-space figures as PNG files."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    written.append(
        _line_plot(
            rows,
            "amortized",
            "I/Os per operation",
            "Amortized I/O cost",
            os.path.join(outdir, "amortized_vs_n.png"),
        )
    )
    written.append(
        _line_plot(
            rows,
            "ratio",
            "measured / predicted",
            "Cost against the sorting-reduction bound",
            os.path.join(outdir, "ratio_vs_n.png"),
        )
    )
    written.append(
        _line_plot(
            rows,
            "peak_blocks",
            "peak allocated blocks",
            "External space",
            os.path.join(outdir, "peak_blocks_vs_n.png"),
            logy=True,
        )
    )
    return written
