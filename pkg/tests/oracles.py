"""Brute-force reference implementations shared by the metric tests."""

import math

import numpy as np


def brute_ssim(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM with an explicit 2-d Gaussian window, one window at a time."""
    ax = np.arange(size) - (size - 1) / 2
    win = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    win /= win.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cov = (win * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def brute_psnr(pred, gt):
    peak = gt.max()
    p, g = np.clip(pred / peak, 0, 1), np.clip(gt / peak, 0, 1)
    mse = sum((a - b) ** 2 for a, b in zip(p.ravel(), g.ravel())) / p.size
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))
