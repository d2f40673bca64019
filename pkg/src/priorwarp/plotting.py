"""Figures written next to the CLI's text outputs.

Everything renders through the Agg canvas with a fixed style and no
timestamp or software metadata, so identical inputs give identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "image.interpolation": "nearest",
}

_PLANES = (("x", 0), ("y", 1), ("z", 2))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _mid_slices(arr: np.ndarray):
    cx, cy, cz = (d // 2 for d in arr.shape[:3])
    return arr[cx, :, :], arr[:, cy, :], arr[:, :, cz]


def plot_loss(records, path, window: int = 100) -> Path:
    """Raw loss (faint) and its moving average for one or more TrainRecords."""
    if not isinstance(records, (list, tuple)):
        records = [records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for rec in records:
            losses = np.asarray(rec.losses)
            if losses.size == 0:
                continue
            it = np.arange(1, losses.size + 1)
            line, = ax.plot(it, losses, lw=0.5, alpha=0.35)
            ma = rec.moving_average(min(window, losses.size))
            ax.plot(np.arange(losses.size - ma.size + 1, losses.size + 1), ma, lw=1.2,
                    color=line.get_color(), label=rec.stage)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("MSE loss")
        if ax.lines:
            ax.legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_slices(volumes: dict, path, vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """Central orthogonal slices of each named volume, one row per volume."""
    names = list(volumes)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), 3, figsize=(6, 2 * len(names)), squeeze=False)
        for row, name in enumerate(names):
            data = np.asarray(getattr(volumes[name], "data", volumes[name]), dtype=np.float64)
            for col, (sl, (plane, _)) in enumerate(zip(_mid_slices(data), _PLANES)):
                ax = axes[row, col]
                ax.imshow(sl.T, origin="lower", cmap="gray", vmin=vmin, vmax=vmax)
                ax.set_xticks([])
                ax.set_yticks([])
                ax.set_title(f"{name} ({plane} mid-plane)")
        fig.tight_layout()
        return _save(fig, path)


def plot_field(u, path, det: np.ndarray | None = None) -> Path:
    """Displacement components (voxel units) and the Jacobian determinant on the z mid-plane."""
    disp = np.asarray(getattr(u, "data", u), dtype=np.float64)
    dims = disp.shape[:3]
    scale = np.asarray(dims, dtype=np.float64) - 1
    cz = dims[2] // 2
    comps = [disp[:, :, cz, c] * scale[c] for c in range(3)]
    panels = [(f"u{axis} [voxels]", comp, "RdBu_r") for axis, comp in zip("xyz", comps)]
    if det is not None:
        panels.append(("det J", np.asarray(det)[:, :, cz], "viridis"))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4), squeeze=False)
        for ax, (title, data, cmap) in zip(axes[0], panels):
            if cmap == "RdBu_r":
                lim = float(np.max(np.abs(data))) or 1.0
                im = ax.imshow(data.T, origin="lower", cmap=cmap, vmin=-lim, vmax=lim)
            else:
                im = ax.imshow(data.T, origin="lower", cmap=cmap)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
