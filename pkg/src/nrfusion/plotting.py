"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .energy import TERM_ORDER  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def energy_figure(logs, path) -> Path:
    """Per-frame energy before and after each solve, with per-term breakdown."""
    frames = [t for t, log in enumerate(logs) if log]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
    if frames:
        first = [logs[t][0].energy for t in frames]
        last = [logs[t][-1].energy for t in frames]
        ax0.semilogy(frames, first, "o-", label="after first GN step")
        ax0.semilogy(frames, last, "s-", label="final")
        for kind in TERM_ORDER:
            vals = [logs[t][-1].term_energies.get(kind) for t in frames]
            if any(v is not None and v > 0 for v in vals):
                ax1.semilogy(frames, [v if v else np.nan for v in vals], label=kind)
    ax0.set_xlabel("frame")
    ax0.set_ylabel("energy")
    ax0.legend(fontsize=8)
    ax1.set_xlabel("frame")
    ax1.set_ylabel("final term energy")
    if ax1.lines:
        ax1.legend(fontsize=7)
    return _save(fig, path)


def alignment_figure(source, target, alignment, path) -> Path:
    """Target distance map and per-vertex depth residual of the dense matches."""
    K = target.intrinsics
    h, w = K.shape
    from .geometry import distance_map

    dist = distance_map(target.mask).values
    resid = np.full((h, w), np.nan)
    m = alignment.matches
    ok = alignment.valid & np.isfinite(m).all(axis=1) & (np.nan_to_num(m[:, 2]) > 0)
    safe = np.where(ok[:, None], m, [0.0, 0.0, 1.0])
    u = np.round(K.fx * safe[:, 0] / safe[:, 2] + K.cx).astype(np.int64)
    v = np.round(K.fy * safe[:, 1] / safe[:, 2] + K.cy).astype(np.int64)
    ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    d = target.depth[v[ok], u[ok]]
    px = alignment.source_pixels[ok]
    has = d > 0
    resid[px[has, 1], px[has, 0]] = np.abs(d[has] - m[ok][has, 2]) * 100.0

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].imshow(np.clip(source.color, 0, 1) if source.color is not None else source.depth)
    axes[0].set_title("source")
    im = axes[1].imshow(dist, cmap="magma")
    axes[1].set_title("target mask distance (px)")
    fig.colorbar(im, ax=axes[1], fraction=0.04)
    im = axes[2].imshow(resid, cmap="viridis", vmin=0, vmax=max(1.0, np.nanpercentile(resid, 95) if np.isfinite(resid).any() else 1.0))
    axes[2].set_title("match depth residual (cm)")
    fig.colorbar(im, ax=axes[2], fraction=0.04)
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)


def error_histogram(values, path, xlabel: str, threshold: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if len(values):
        ax.hist(values, bins=40, color="tab:blue", alpha=0.8)
    if threshold is not None:
        ax.axvline(threshold, color="tab:red", ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    return _save(fig, path)
