"""Matplotlib rendering of the pipeline's report artifacts.

Every reporting CLI command drops these PNGs next to its CSV output:
surface/mode heatmaps, the singular-value spectrum, training loss
curves, latent-statistics panels, and the pricer benchmark scatter and
error maps.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 150


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)


def _heatmap(ax, grid: np.ndarray, k_axis: np.ndarray, t_axis: np.ndarray,
             title: str, centered: bool = False):
    kwargs = {}
    if centered:
        bound = float(np.abs(grid).max()) or 1.0
        kwargs = dict(cmap="RdBu_r", vmin=-bound, vmax=bound)
    else:
        kwargs = dict(cmap="viridis")
    im = ax.pcolormesh(t_axis, k_axis, grid, shading="nearest", **kwargs)
    ax.set_xlabel("T (years)")
    ax.set_ylabel("log-moneyness k")
    ax.set_title(title)
    return im


def save_surface_heatmap(path: str | Path, grid: np.ndarray, k_axis: np.ndarray,
                         t_axis: np.ndarray, title: str,
                         centered: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    im = _heatmap(ax, grid, k_axis, t_axis, title, centered)
    fig.colorbar(im, ax=ax)
    _save(fig, path)


def save_reconstruction_panel(path: str | Path, original: np.ndarray,
                              recon: np.ndarray, k_axis: np.ndarray,
                              t_axis: np.ndarray, label: str) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    im0 = _heatmap(axes[0], original, k_axis, t_axis, f"{label} original")
    fig.colorbar(im0, ax=axes[0])
    im1 = _heatmap(axes[1], recon, k_axis, t_axis, "reconstruction")
    fig.colorbar(im1, ax=axes[1])
    im2 = _heatmap(axes[2], recon - original, k_axis, t_axis, "difference",
                   centered=True)
    fig.colorbar(im2, ax=axes[2])
    fig.tight_layout()
    _save(fig, path)


def save_spectrum(path: str | Path,
                  spectrum: list[tuple[int, float, float]]) -> None:
    ranks = [r for r, _, _ in spectrum]
    values = [max(s, 1e-30) for _, s, _ in spectrum]
    energy = [e for _, _, e in spectrum]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].loglog(ranks, values, marker="o", markersize=3, lw=1)
    axes[0].set_xlabel("singular value rank")
    axes[0].set_ylabel("singular value")
    axes[0].set_title("Spectrum decay")
    axes[0].grid(True, which="both", alpha=0.3)
    axes[1].semilogx(ranks, energy, marker="o", markersize=3, lw=1)
    axes[1].set_xlabel("rank")
    axes[1].set_ylabel("cumulative energy")
    axes[1].set_title("Cumulative energy")
    axes[1].grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_modes(path: str | Path, right_vectors: np.ndarray, k_axis: np.ndarray,
               t_axis: np.ndarray, n_modes: int = 8) -> None:
    n_modes = min(n_modes, right_vectors.shape[1])
    ncols = 4
    nrows = (n_modes + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3.2 * nrows))
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        if i >= n_modes:
            ax.axis("off")
            continue
        grid = right_vectors[:, i].reshape(len(k_axis), len(t_axis))
        im = _heatmap(ax, grid, k_axis, t_axis, f"mode {i + 1}", centered=True)
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def save_loss_curves(path: str | Path, rows: list[tuple], title: str) -> None:
    epochs = [r[0] for r in rows]
    train = [r[1] for r in rows]
    test = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(epochs, train, label="train")
    if not all(np.isnan(test)):
        ax.semilogy(epochs, test, label="test", ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_latent_panels(path: str | Path, mus: np.ndarray,
                       logvars: np.ndarray) -> None:
    """Distributions of the latent means/log-variances and |corr(mu)|."""
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for i in range(mus.shape[1]):
        axes[0].hist(mus[:, i], bins=40, histtype="step")
    axes[0].set_xlabel(r"$\mu$")
    axes[0].set_title("latent means")
    for i in range(logvars.shape[1]):
        axes[1].hist(logvars[:, i], bins=40, histtype="step")
    axes[1].set_xlabel(r"$2\log s$")
    axes[1].set_title("latent log-variances")
    corr = np.abs(np.corrcoef(mus.T))
    im = axes[2].imshow(corr, cmap="viridis", vmin=0, vmax=1)
    axes[2].set_title(r"$|corr(\mu_i, \mu_j)|$")
    fig.colorbar(im, ax=axes[2])
    fig.tight_layout()
    _save(fig, path)


def save_parity(path: str | Path, oracle: np.ndarray, predicted: np.ndarray,
                kind: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(oracle, predicted, s=6, alpha=0.4)
    lo = min(float(oracle.min()), float(predicted.min()))
    hi = max(float(oracle.max()), float(predicted.max()))
    ax.plot([lo, hi], [lo, hi], color="k", ls="--", lw=1)
    ax.set_xlabel("oracle price")
    ax.set_ylabel("predicted price")
    ax.set_title(f"{kind}: prediction vs oracle")
    _save(fig, path)


def save_error_map(path: str | Path, ks: np.ndarray, ts: np.ndarray,
                   errs: np.ndarray, kind: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    bound = float(np.abs(errs).max()) or 1.0
    sc = ax.scatter(ks, ts, c=errs, s=12, cmap="RdBu_r", vmin=-bound, vmax=bound)
    ax.set_xlabel("log-moneyness k")
    ax.set_ylabel("T (years)")
    ax.set_title(f"{kind}: prediction error over (k, T)")
    fig.colorbar(sc, ax=ax, label="predicted - oracle")
    _save(fig, path)
