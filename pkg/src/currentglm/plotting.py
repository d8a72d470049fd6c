"""Figures for study reports (matplotlib, file output only)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(tmp, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_confusions(reports, path):
    """One heatmap per basis kind; rows are expert decisions."""
    kinds = list(reports)
    fig, axes = plt.subplots(1, len(kinds), figsize=(3.6 * len(kinds), 3.4), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        rep = reports[kind]
        C = np.asarray(rep.confusion)
        ax.imshow(C, cmap="Blues", vmin=0)
        cats = [str(c) for c in rep.categories]
        ax.set_xticks(range(len(cats)), cats)
        ax.set_yticks(range(len(cats)), cats)
        for i in range(C.shape[0]):
            for j in range(C.shape[1]):
                ax.text(j, i, str(int(C[i, j])), ha="center", va="center",
                        color="white" if C[i, j] > C.max() / 2 else "black")
        ax.set_xlabel("prediction")
        ax.set_ylabel("expert decision")
        ax.set_title(f"{kind}: {rep.agreement:.2f}%")
    fig.tight_layout()
    return _save(fig, path)


def plot_spectra(spectra, path, n_show=30):
    """Normalized eigenvalue decay per basis kind (log scale)."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for kind, vals in spectra.items():
        v = np.asarray(vals, float)[:n_show]
        ax.semilogy(np.arange(1, len(v) + 1), v / v[0], marker="o", ms=3, label=kind)
    ax.set_xlabel("index")
    ax.set_ylabel("eigenvalue / largest")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_delta_sweep(sweep, path):
    """Agreement against grid gap for each basis kind."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    gaps = [s["gap"] for s in sweep]
    kinds = sorted({k for s in sweep for k in s["agreement"]})
    for kind in kinds:
        ax.plot(gaps, [s["agreement"].get(kind, np.nan) for s in sweep], marker="o", label=kind)
    for s in sweep:
        ax.annotate(f"N={s['n_points']}", (s["gap"], min(s["agreement"].values())),
                    textcoords="offset points", xytext=(0, -14), ha="center", fontsize=8)
    ax.set_xlabel("grid gap")
    ax.set_ylabel("% agreement")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_reconstruction(errors, path):
    """Mean reconstruction error against truncation order per basis kind."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for kind, e in errors.items():
        e = np.asarray(e, float)
        ax.plot(np.arange(1, len(e) + 1), e / e[0], marker="o", ms=3, label=kind)
    ax.set_xlabel("r")
    ax.set_ylabel("relative mean error")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
