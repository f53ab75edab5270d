"""Static figures for experiment series.  Presentational only."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linewidth": 0.5,
    "lines.linewidth": 1.4,
    "legend.frameon": False,
    "legend.fontsize": 8,
    "svg.hashsalt": "memflow",
}


def _col(series, name):
    cols, rows = series
    i = cols.index(name)
    return [r[i] for r in rows]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_moments(series, path: Path, title: str = "moment curves") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = _col(series, "t")
        ax.plot(t, _col(series, "estimate"), label=r"$E\|X_t\|^k$")
        ax.plot(t, _col(series, "sup_estimate"), label=r"$E\sup_{s\leq t}\|X_s\|^k$", linestyle="--")
        ax.set_xlabel("t")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_moment_family(series, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        cols, rows = series
        keys = sorted({(r[0], r[1]) for r in rows})
        for x0, k in keys:
            sub = [r for r in rows if r[0] == x0 and r[1] == k]
            ax.plot([r[2] for r in sub], [r[5] for r in sub], label=f"|X0|={x0:g}, k={k:g}")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_title("running sup moments")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_picard(series, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it, d = _col(series, "iter"), _col(series, "d")
        pos = [(i, v) for i, v in zip(it, d) if v > 0]
        ax.semilogy([p[0] for p in pos], [p[1] for p in pos], marker="o")
        ax.set_xlabel("iteration j")
        ax.set_ylabel(r"$d_j$")
        ax.set_title("fixed-point iterate gaps")
        return _save(fig, path)


def plot_coupling(series, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t, g = _col(series, "t"), _col(series, "gap_p_weighted")
        pos = [(a, b) for a, b in zip(t, g) if b > 0]
        ax.semilogy([p[0] for p in pos], [p[1] for p in pos])
        ax.set_xlabel("t")
        ax.set_ylabel(r"$E_Q\|X_t-Y_t\|^p$")
        ax.set_title("coupling gap")
        return _save(fig, path)


PLOTTERS = {
    "moments": ("moments", plot_moments),
    "moment_curves": ("moment_curves", plot_moment_family),
    "trace": ("picard_distances", plot_picard),
    "coupling": ("coupling_gap", plot_coupling),
}


def emit_plots(series: dict, out_dir, fmt: str = "png") -> list:
    """Render every known series in ``series``; returns written paths."""
    out = Path(out_dir)
    written = []
    for name, (stem, fn) in PLOTTERS.items():
        s = series.get(name)
        if s is None:
            continue
        if not s[1]:
            log.info("series %s is empty; plot skipped", name)
            continue
        written.append(fn(s, out / f"{stem}.{fmt}"))
    if not written:
        log.info("no plottable series present; no figures written")
    return written
