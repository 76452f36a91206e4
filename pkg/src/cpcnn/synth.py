"""Synthetic crowd scenes and the patch datasets built from them.

A scene is a set of head positions drawn from a few uniform clusters.  The
image is a blob rendering of those heads over a smooth background with
pixel noise, clipped to [0, 1]; dense clusters saturate, so local intensity
alone under-reports heavy crowds.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .context import fit_class_boundaries
from .density import (DotScene, crop_density, load_density, load_scene, render_density,
                      save_density, save_scene)

DME_CROPS = 100  # per image; flips and noisy crops add 2x this
LOCAL_CROPS = 100
NOISE_SIGMA = 0.02


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent RNG stream derived from one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    count_range: tuple[int, int] = (5, 150)
    cluster_count: int = 4
    cluster_spread: float = 14.0
    seed: int = 0
    head_sigma: tuple[float, float] = (1.0, 1.3)
    head_gain: tuple[float, float] = (0.4, 0.5)
    background: tuple[float, float] = (0.08, 0.12)
    noise: float = 0.03

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid count_range {self.count_range}")
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dims must be positive")
        if self.cluster_count < 1 and hi > 0:
            raise ValueError("need at least one cluster for non-empty scenes")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")
        for name in ("head_sigma", "head_gain", "background"):
            lo_v, hi_v = getattr(self, name)
            if not 0 <= lo_v <= hi_v:
                raise ValueError(f"invalid {name} range {getattr(self, name)}")


def _sample_dots(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return np.zeros((0, 2))
    w, h = spec.width, spec.height
    centres = rng.uniform([0, 0], [w, h], size=(spec.cluster_count, 2))
    # uneven cluster weights give lopsided, more varied layouts
    weights = rng.dirichlet(np.ones(spec.cluster_count))
    owner = rng.choice(spec.cluster_count, size=n, p=weights)
    dots = centres[owner] + rng.uniform(-spec.cluster_spread, spec.cluster_spread, size=(n, 2))
    # reflect into the image, then nudge off the far edge so 0 <= x < w holds strictly
    dots[:, 0] = np.abs(dots[:, 0]) % (2 * w)
    dots[:, 0] = np.where(dots[:, 0] >= w, 2 * w - dots[:, 0], dots[:, 0])
    dots[:, 1] = np.abs(dots[:, 1]) % (2 * h)
    dots[:, 1] = np.where(dots[:, 1] >= h, 2 * h - dots[:, 1], dots[:, 1])
    dots[:, 0] = np.minimum(dots[:, 0], np.nextafter(w, 0))
    dots[:, 1] = np.minimum(dots[:, 1], np.nextafter(h, 0))
    return dots


def render_image(scene: DotScene, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = scene.width, scene.height
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    # smooth background: random level plus a gentle linear gradient
    level = rng.uniform(*spec.background)
    gx, gy = rng.uniform(-0.05, 0.05, size=2)
    img = level + gx * (xx / w - 0.5) + gy * (yy / h - 0.5)
    gain = rng.uniform(*spec.head_gain)
    for x, y in scene.dots:
        s = rng.uniform(*spec.head_sigma)
        r = int(np.ceil(3 * s))
        c0, c1 = max(0, int(x) - r), min(w, int(x) + r + 1)
        r0, r1 = max(0, int(y) - r), min(h, int(y) + r + 1)
        d2 = (xx[r0:r1, c0:c1] - x) ** 2 + (yy[r0:r1, c0:c1] - y) ** 2
        img[r0:r1, c0:c1] += gain * np.exp(-d2 / (2 * s * s))
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec) -> tuple[DotScene, np.ndarray]:
    """Deterministic (scene, image) for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    scene = DotScene(spec.width, spec.height, _sample_dots(spec, rng))
    return scene, render_image(scene, spec, rng)


def generate_corpus(n: int, seed: int, spec: SceneSpec | None = None, sigma: float = 2.0):
    """``n`` scenes with per-image seeds derived from ``seed``; ordered by index."""
    base = spec or SceneSpec()
    seeds = substream(seed, "synth").integers(0, 2 ** 31 - 1, size=n)
    scenes, images, maps = [], [], []
    for s in seeds:
        sp = SceneSpec(**{**base.__dict__, "seed": int(s)})
        scene, img = generate_scene(sp)
        scenes.append(scene)
        images.append(img)
        maps.append(render_density(scene, sigma).astype(np.float32))
    return scenes, images, maps


# ---------------------------------------------------------------- patch datasets


@dataclass
class PatchDataset:
    kind: str  # "dme" or "local"
    inputs: np.ndarray  # [M, 1, h, w] float32
    density: np.ndarray  # [M, h, w] float32
    source: np.ndarray  # [M] index of the source image
    labels: np.ndarray | None = None
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = self.density.sum(axis=tuple(range(1, self.density.ndim)), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.inputs)


def _random_crop(img, dmap, ch, cw, rng):
    h, w = img.shape
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return img[top:top + ch, left:left + cw], crop_density(dmap, top, left, ch, cw)


def build_dme_dataset(images, maps, rng: np.random.Generator, crops: int = DME_CROPS,
                      noise_sigma: float = NOISE_SIGMA) -> PatchDataset:
    """Quarter-area crops plus flipped and noise-added crops (3 * ``crops`` per image).

    Flips and noisy variants come from fresh random crops.  Noise touches
    the image only, never the density target.
    """
    xs, ds, src = [], [], []
    for i, (img, dmap) in enumerate(zip(images, maps)):
        h, w = img.shape
        if h < 8 or w < 8:
            raise ValueError(f"image {i} is {w}x{h}; need at least 8x8")
        ch, cw = h // 2, w // 2
        for _ in range(crops):
            p, d = _random_crop(img, dmap, ch, cw, rng)
            xs.append(p)
            ds.append(d)
        for _ in range(crops):
            p, d = _random_crop(img, dmap, ch, cw, rng)
            xs.append(p[:, ::-1])
            ds.append(d[:, ::-1])
        for _ in range(crops):
            p, d = _random_crop(img, dmap, ch, cw, rng)
            xs.append(np.clip(p + rng.normal(0.0, noise_sigma, p.shape), 0.0, 1.0))
            ds.append(d)
        src += [i] * (3 * crops)
    inputs = np.ascontiguousarray(np.stack(xs)[:, None], dtype=np.float32)
    density = np.ascontiguousarray(np.stack(ds), dtype=np.float32)
    return PatchDataset("dme", inputs, density, np.asarray(src))


def build_local_dataset(images, maps, rng: np.random.Generator, patch: int, boundaries=None,
                        crops: int = LOCAL_CROPS) -> PatchDataset:
    """``crops`` random P x P patches per image, labelled by density class of their count.

    ``boundaries`` is a :class:`~cpcnn.context.DensityClasses`; when omitted
    it is fitted on the patch counts themselves.
    """
    xs, ds, src = [], [], []
    for i, (img, dmap) in enumerate(zip(images, maps)):
        if patch > min(img.shape):
            raise ValueError(f"patch {patch} larger than image {img.shape[1]}x{img.shape[0]}")
        for _ in range(crops):
            p, d = _random_crop(img, dmap, patch, patch, rng)
            xs.append(p)
            ds.append(d)
        src += [i] * crops
    ds_arr = np.stack(ds).astype(np.float32)
    out = PatchDataset("local", np.stack(xs)[:, None].astype(np.float32), ds_arr, np.asarray(src))
    bounds = boundaries or fit_class_boundaries(out.counts)
    out.labels = bounds.classify(out.counts)
    return out


# ---------------------------------------------------------------- corpus on disk


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM (P5) from values in [0, 1]."""
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


@dataclass
class Corpus:
    ids: list[str]
    scenes: list[DotScene]
    images: list[np.ndarray]
    maps: list[np.ndarray]
    classes: list[int]

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.count for s in self.scenes], dtype=np.float64)

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus([self.ids[i] for i in idx], [self.scenes[i] for i in idx],
                      [self.images[i] for i in idx], [self.maps[i] for i in idx],
                      [self.classes[i] for i in idx])

    def split(self, train_fraction: float) -> tuple["Corpus", "Corpus"]:
        k = int(round(len(self.ids) * train_fraction))
        return self.subset(range(k)), self.subset(range(k, len(self.ids)))


def write_corpus(root: str | Path, scenes, images, maps, classes) -> None:
    root = Path(root)
    for sub in ("scenes", "images", "density"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (scene, img, dmap, cls) in enumerate(zip(scenes, images, maps, classes)):
        sid = f"{i:04d}"
        save_scene(root / "scenes" / f"{sid}.txt", scene)
        write_pgm(root / "images" / f"{sid}.pgm", img)
        save_density(root / "density" / f"{sid}.cpdm", dmap)
        rows.append((sid, scene.count, int(cls)))
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "count", "class"))
        w.writerows(rows)


def read_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found; run `synth` first")
    ids, scenes, images, maps, classes = [], [], [], [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            ids.append(sid)
            scenes.append(load_scene(root / "scenes" / f"{sid}.txt"))
            images.append(read_pgm(root / "images" / f"{sid}.pgm"))
            maps.append(load_density(root / "density" / f"{sid}.cpdm"))
            classes.append(int(row["class"]))
    return Corpus(ids, scenes, images, maps, classes)
