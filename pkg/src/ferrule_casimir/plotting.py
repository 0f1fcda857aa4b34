"""Report figures (PNG via the Agg backend).

Each function writes one file and returns its path. Figures carry no
timestamp, so identical inputs give identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_METADATA = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("." + path.name + ".tmp")
    fig.savefig(tmp, dpi=120, format="png", metadata=_METADATA)
    plt.close(fig)
    tmp.replace(path)
    return path


def _frame(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def plot_v0(path, d, v0, fit=None):
    """Residual potential against separation, with the log fit if given."""
    d = np.asarray(d)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(d * 1e9, np.asarray(v0) * 1e3, ".", ms=2, color="0.3", label="servo")
    if fit is not None:
        dd = np.geomspace(d.min(), d.max(), 200)
        ax.plot(dd * 1e9, (fit.a * np.log(dd) + fit.b) * 1e3, "-", color="C3",
                label=f"a = {fit.a * 1e3:.2f} mV")
        ax.legend(frameon=False)
    ax.set_xscale("log")
    ax.set_xlabel("separation d (nm)")
    ax.set_ylabel("V0 (mV)")
    _frame(ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_gradient(path, d, grad_casimir, grad_es=None, theory=None):
    """Casimir gradient over radius against separation (log-log)."""
    d = np.asarray(d)
    g = np.asarray(grad_casimir)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    pos = g > 0
    ax.plot(d[pos] * 1e9, g[pos], ".", ms=2, color="0.3", label="measured")
    if grad_es is not None:
        ax.plot(d * 1e9, np.asarray(grad_es), ".", ms=1, color="C0", alpha=0.5,
                label="electrostatic")
    if theory is not None:
        dd = np.asarray(theory.separations)
        ax.plot(dd * 1e9, theory.gradient_over_radius, "-", color="C3", label="theory")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("separation d (nm)")
    ax.set_ylabel("F'/R (N/m$^2$)")
    ax.legend(frameon=False)
    _frame(ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_residual_histogram(path, counts, edges, sigma=None):
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    edges = np.asarray(edges)
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="0.6",
           edgecolor="0.3")
    ax.set_xlabel("residual (N/m$^2$)")
    ax.set_ylabel("count")
    if sigma is not None:
        ax.set_title(f"sigma = {sigma:.3g} N/m$^2$", fontsize=10)
    _frame(ax)
    fig.tight_layout()
    return _save(fig, path)
