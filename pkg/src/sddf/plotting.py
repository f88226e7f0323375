"""Report figures written next to the delimited outputs."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_loss_curve(rows: Sequence[dict], path) -> None:
    """Prior and residual losses per iteration, plus validation MAE if logged."""
    plt = _pyplot()
    it = np.array([r["iteration"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("L_P", "prior loss"), ("L_R", "residual loss")):
        y = np.array([float(r[key]) for r in rows])
        mask = y > 0
        if mask.any():
            ax.semilogy(it[mask], y[mask], label=label, lw=0.8)
    val = [(r["iteration"], float(r["mae_val"])) for r in rows if r.get("mae_val", "") != ""]
    if val:
        vx, vy = zip(*val)
        ax.semilogy(vx, vy, "o-", ms=3, label="val MAE [m]")
    ax.set_xlabel("iteration")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_distance_image(values: np.ndarray, path, d_view_max: float) -> None:
    """Distance image with a colorbar; misses are shown white."""
    plt = _pyplot()
    img = np.ma.masked_invalid(np.where(np.isfinite(values), values, np.nan))
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("white")
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(img, cmap=cmap, vmin=0.0, vmax=d_view_max)
    fig.colorbar(im, ax=ax, label="distance [m]")
    ax.set_axis_off()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_coverage(reports, path) -> None:
    """Visible-volume proxy per waypoint before and after optimization."""
    plt = _pyplot()
    idx = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(idx - 0.2, [r.coverage_before for r in reports], 0.4, label="initial")
    ax.bar(idx + 0.2, [r.coverage_after for r in reports], 0.4, label="optimized")
    ax.set_xticks(idx, [str(r.index) for r in reports])
    ax.set_xlabel("waypoint")
    ax.set_ylabel("sum of clamped f^2 [m^2]")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_error_histogram(errors: np.ndarray, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    e = np.asarray(errors, dtype=float)
    ax.hist(e[np.isfinite(e)], bins=60, log=True)
    ax.set_xlabel("|f_hat - f*| [m]")
    ax.set_ylabel("rays")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
