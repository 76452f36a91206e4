"""Evaluation figure: metric bars per configuration and one example map per configuration."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def save_eval_figure(path: str | Path, reports: Mapping[str, EvalReport], image: np.ndarray,
                     gt: np.ndarray, examples: Mapping[str, np.ndarray]) -> None:
    names = list(reports)
    x = np.arange(len(names))
    ncols = max(3, len(examples) + 2)
    fig = plt.figure(figsize=(2.6 * ncols, 6.2))
    grid = fig.add_gridspec(2, ncols)

    ax = fig.add_subplot(grid[0, : ncols // 2])
    ax.bar(x - 0.2, [reports[n].mae for n in names], 0.4, label="MAE")
    ax.bar(x + 0.2, [reports[n].mse for n in names], 0.4, label="MSE")
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("count error")
    ax.legend(fontsize=8)

    ax = fig.add_subplot(grid[0, ncols // 2:])
    ax.bar(x - 0.2, [reports[n].mean_psnr for n in names], 0.4, color="tab:green", label="PSNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    twin = ax.twinx()
    twin.bar(x + 0.2, [reports[n].mean_ssim for n in names], 0.4, color="tab:purple", label="SSIM")
    twin.set_ylim(0, 1)
    twin.set_ylabel("SSIM")

    vmax = float(max(gt.max(), *(m.max() for m in examples.values()))) or 1.0
    panels = [("image", image, "gray", 1.0), (f"ground truth ({gt.sum():.1f})", gt, "jet", vmax)]
    panels += [(f"{n} ({m.sum():.1f})", m, "jet", vmax) for n, m in examples.items()]
    for i, (title, arr, cmap, top) in enumerate(panels):
        ax = fig.add_subplot(grid[1, i])
        ax.imshow(arr, cmap=cmap, vmin=0, vmax=top)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
