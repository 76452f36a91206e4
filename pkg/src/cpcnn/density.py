"""Dot annotations to density maps, counts, crops, and their file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DENSITY_MAGIC = b"CPDM"
TRUNCATE = 4.0


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


@dataclass
class DotScene:
    width: int
    height: int
    dots: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"scene dims must be positive, got {self.width}x{self.height}")
        bad = ((self.dots[:, 0] < 0) | (self.dots[:, 0] >= self.width)
               | (self.dots[:, 1] < 0) | (self.dots[:, 1] >= self.height))
        if bad.any():
            x, y = self.dots[np.argmax(bad)]
            raise ValueError(f"dot ({x}, {y}) outside {self.width}x{self.height} image")

    @property
    def count(self) -> int:
        return len(self.dots)


def render_density(scene: DotScene, sigma: float = 2.0) -> np.ndarray:
    """Sum of per-dot Gaussians, each truncated at 4 sigma and renormalized to unit mass.

    Pixel ``(row, col)`` is centred at ``(col + 0.5, row + 0.5)``.  The
    truncation window is also clipped to the image, so dots near borders
    still contribute exactly 1.  Returns a float64 ``[H, W]`` array.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w, h = scene.width, scene.height
    out = np.zeros((h, w), dtype=np.float64)
    radius = TRUNCATE * sigma
    for x, y in scene.dots:
        c0, c1 = max(0, int(np.floor(x - radius))), min(w, int(np.ceil(x + radius)) + 1)
        r0, r1 = max(0, int(np.floor(y - radius))), min(h, int(np.ceil(y + radius)) + 1)
        dx = np.arange(c0, c1) + 0.5 - x
        dy = np.arange(r0, r1) + 0.5 - y
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        k = np.where(d2 <= radius * radius, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        total = k.sum()
        if total == 0.0:
            # sub-pixel sigma: all mass on the containing pixel
            out[int(y), int(x)] += 1.0
            continue
        out[r0:r1, c0:c1] += k / total
    return out


def count_of(density: np.ndarray) -> float:
    return float(np.asarray(density, dtype=np.float64).sum())


def crop_density(density: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Sub-grid copy; border mass is split, never renormalized."""
    H, W = density.shape[-2:]
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > H or left + width > W:
        raise ValueError(f"rect (top={top}, left={left}, {height}x{width}) outside {H}x{W} map")
    return density[..., top:top + height, left:left + width].copy()


def downsample_sum(density: np.ndarray, factor: int = 4) -> np.ndarray:
    """Box-sum by ``factor``; preserves the count."""
    h, w = density.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"map {h}x{w} not divisible by {factor}")
    lead = density.shape[:-2]
    return density.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


# ---------------------------------------------------------------- file formats


def save_density(path: str | Path, density: np.ndarray) -> None:
    """``CPDM`` + u32 W + u32 H + W*H little-endian float32, row-major."""
    d = np.asarray(density, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(DENSITY_MAGIC + struct.pack("<II", w, h) + d.tobytes())


def load_density(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for a header")
    if raw[:4] != DENSITY_MAGIC:
        raise MagicMismatchError(f"{path}: magic {raw[:4]!r}, expected {DENSITY_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    w, h = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * w * h
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {need} for a {w}x{h} map")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype="<f4", count=w * h, offset=12).reshape(h, w).astype(np.float32)


def save_scene(path: str | Path, scene: DotScene) -> None:
    lines = [f"{scene.width} {scene.height}"]
    lines += [f"{x!r} {y!r}" for x, y in scene.dots.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scene(path: str | Path) -> DotScene:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise FormatError(f"{path}: first line must be 'W H'")
    try:
        w, h = int(rows[0][0]), int(rows[0][1])
        dots = np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return DotScene(w, h, dots)
