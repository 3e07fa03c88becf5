"""Report figures: maximum intensity projections and loss curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .volume import AXES, Volume3D  # noqa: E402


def mip(v: Volume3D, axis: str = "z") -> np.ndarray:
    return v.voxels.max(axis=AXES[axis])


def save_mip_figure(volumes: dict, path, axes=("z", "y")) -> None:
    """Grid of MIPs: one column per named volume, one row per projection axis."""
    names = list(volumes)
    fig, grid = plt.subplots(len(axes), len(names), figsize=(2.6 * len(names), 2.6 * len(axes)),
                             squeeze=False)
    for col, name in enumerate(names):
        for row, ax_name in enumerate(axes):
            ax = grid[row][col]
            ax.imshow(mip(volumes[name], ax_name), cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(name, fontsize=9)
            if col == 0:
                ax.set_ylabel(f"MIP {ax_name}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_loss_curves(histories: dict, path) -> None:
    """One panel per non-empty history list."""
    items = [(k, v) for k, v in histories.items() if len(v)]
    if not items:
        return
    fig, grid = plt.subplots(1, len(items), figsize=(3.2 * len(items), 2.6), squeeze=False)
    for ax, (name, values) in zip(grid[0], items):
        ax.plot(np.arange(len(values)), values, lw=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM of a [0, 1] image (values outside are clipped)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
