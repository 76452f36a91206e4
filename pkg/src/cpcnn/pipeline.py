"""Generator (multi-column DME + fusion CNN), discriminator, losses and training.

Image tensors are ``[1, H, W]``; context maps ``[5, H/4, W/4]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import layers as L
from .context import Classifier, global_context_infer, global_context_train, local_context
from .density import (FormatError, MagicMismatchError, TruncatedFileError, VersionMismatchError,
                      downsample_sum)
from .nn import Conv2d, MaxPool2, ReLU, Sequential, Sigmoid, parse_layer_string
from .synth import PatchDataset
from .tensor import (SGD, Tape, Tensor, absolute, as_tensor, backward, concat, log, mean, mul, no_trace,
                     reshape, scale, square, sub)

FCNN_LAYERS = "CR(64,9)-CR(32,7)-TR(32)-CR(16,5)-TR(16)-C(1,1)"
DISC_LAYERS = "CP(64)-CP(128)-M-CP(256)-M-CP(256)-CP(256)-M-C(1)-Sigmoid"
DME_KERNELS = (9, 7, 5)
DME_WIDTHS = (16, 12, 8)
LAMBDA_A = 1e-3
LOG_EPS = 1e-7

BUNDLE_MAGIC = b"CPNW"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class AblationConfig:
    use_gce: bool = True
    use_lce: bool = True
    use_adversarial: bool = False

    def __post_init__(self):
        if self.use_lce and not self.use_gce:
            raise ValueError("local context requires global context (use_lce implies use_gce)")

    @property
    def dme_only(self) -> bool:
        return not self.use_gce

    @property
    def context_planes(self) -> int:
        return 5 * (int(self.use_gce) + int(self.use_lce))

    @property
    def name(self) -> str:
        parts = ["dme"]
        if self.use_gce:
            parts.append("gce")
        if self.use_lce:
            parts.append("lce")
        if self.use_gce:
            parts.append("fcnn")
        if self.use_adversarial:
            parts.append("adv")
        return "+".join(parts)


ABLATION_LADDER = (
    AblationConfig(False, False, False),
    AblationConfig(True, False, False),
    AblationConfig(True, True, False),
    AblationConfig(True, True, True),
)


class Generator:
    """DME columns, concatenated with context planes, fused by F-CNN back to full resolution.

    With ``ablation.dme_only`` the F-CNN is replaced by a 1x1 conv head and
    the output stays at quarter resolution.
    """

    def __init__(self, ablation: AblationConfig = AblationConfig(), seed: int = 0,
                 kernels=DME_KERNELS, widths=DME_WIDTHS, fcnn: str = FCNN_LAYERS,
                 fcnn_width_scale: float = 1.0):
        if len(kernels) != len(widths):
            raise ValueError("one width per DME column")
        rng = np.random.default_rng(seed)
        self.ablation = ablation
        self.columns = []
        for k, w in zip(kernels, widths):
            self.columns.append(Sequential([
                Conv2d(L.ConvSpec(1, w, k), rng), ReLU(), MaxPool2(),
                Conv2d(L.ConvSpec(w, w, k), rng), ReLU(), MaxPool2(),
                Conv2d(L.ConvSpec(w, w, k), rng), ReLU(),
            ]))
        self.dme_channels = int(sum(widths))
        if ablation.dme_only:
            self.head = Sequential([Conv2d(L.ConvSpec(self.dme_channels, 1, 1), rng)])
        else:
            self.fusion_in = self.dme_channels + ablation.context_planes
            self.head, out_ch = parse_layer_string(fcnn, self.fusion_in, rng, width_scale=fcnn_width_scale)
            first = self.head.layers[0]
            if first.spec.in_channels != self.dme_channels + ablation.context_planes:
                raise ValueError("F-CNN input channels do not match DME + context planes")
            if out_ch != 1:
                raise ValueError(f"F-CNN must end in one channel, got {out_ch}")
        # keep initial predictions near the scale of density values
        last = self.head.layers[-1]
        last.weight.data *= np.float32(0.1)

    @property
    def upscale(self) -> int:
        return 1 if self.ablation.dme_only else 4

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, col in enumerate(self.columns):
            out += col.named_parameters(f"generator.dme.col{i}.")
        prefix = "generator.head." if self.ablation.dme_only else "generator.fcnn."
        return out + self.head.named_parameters(prefix)

    def astype(self, dtype) -> "Generator":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def dme(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"image {w}x{h}: width and height must be divisible by 4")
        return concat([col(x) for col in self.columns], axis=-3)

    def forward(self, image, gc=None, lc=None) -> Tensor:
        feats = self.dme(image)
        if self.ablation.dme_only:
            return self.head(feats)
        parts = [feats]
        for use, ctx, label in ((self.ablation.use_gce, gc, "global"), (self.ablation.use_lce, lc, "local")):
            if not use:
                continue
            if ctx is None:
                raise ValueError(f"{label} context map required by {self.ablation.name}")
            ctx = ctx if isinstance(ctx, Tensor) else Tensor(np.asarray(ctx, dtype=feats.dtype))
            if ctx.shape[-2:] != feats.shape[-2:] or ctx.shape[-3] != 5:
                raise ValueError(f"{label} context {ctx.shape} does not match features {feats.shape}")
            parts.append(ctx)
        return self.head(concat(parts, axis=-3))

    __call__ = forward


class Discriminator:
    """Fully-convolutional discriminator; outputs a map of probabilities."""

    def __init__(self, seed: int = 0, width_scale: float = 1.0, layers: str = DISC_LAYERS,
                 kernel: int = 3):
        rng = np.random.default_rng(seed)
        self.net, out_ch = parse_layer_string(layers, 1, rng, default_kernel=kernel,
                                              width_scale=width_scale)
        if out_ch != 1 or not isinstance(self.net.layers[-1], Sigmoid):
            raise ValueError("discriminator must end in a single-channel sigmoid")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.net.named_parameters("discriminator.")

    def astype(self, dtype) -> "Discriminator":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, density) -> Tensor:
        x = density if isinstance(density, Tensor) else Tensor(np.asarray(density, dtype=np.float32))
        if x.data.ndim == 2:
            x = Tensor(x.data[None])
        return self.net(x)


# ---------------------------------------------------------------- losses


def euclidean_loss(pred: Tensor, gt, squared: bool = False) -> Tensor:
    """Per-pixel norm of the difference, averaged over pixels.

    For single-channel maps the per-pixel 2-norm is an absolute value, so
    the default is a mean absolute difference; ``squared=True`` gives MSE.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.size != gt.size:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    if pred.shape != gt.shape:
        gt = Tensor(gt.data.reshape(pred.shape))
    diff = sub(pred, gt)
    return mean(square(diff) if squared else absolute(diff))


def adversarial_loss(pred: Tensor, discriminator: Discriminator) -> Tensor:
    """``-log`` of the mean discriminator score on a generated map."""
    return scale(log(mean(discriminator(pred)), eps=LOG_EPS), -1.0)


def total_loss(l_e: Tensor, l_a: Tensor | None, lambda_a: float = LAMBDA_A) -> Tensor:
    if lambda_a < 0:
        raise ValueError(f"lambda_a must be non-negative, got {lambda_a}")
    if l_a is None or lambda_a == 0:
        return l_e
    return l_e + scale(l_a, lambda_a)


def discriminator_loss(real: Tensor, fake: Tensor, discriminator: Discriminator) -> Tensor:
    """``-log D(real) - log(1 - D(fake))`` with D reduced by its spatial mean.

    Both maps go through the network as one batch of two; each half is then
    averaged separately through a 0/1 mask.
    """
    real, fake = as_tensor(real), as_tensor(fake)
    if real.shape != fake.shape:
        raise ValueError(f"real {real.shape} and fake {fake.shape} maps differ in shape")
    h, w = real.shape[-2:]
    out = discriminator(concat([reshape(real, (1, 1, h, w)), reshape(fake, (1, 1, h, w))], axis=0))
    first = np.zeros(out.shape, dtype=out.dtype)
    first[0] = 1
    d_real = scale(mean(mul(out, first)), 2.0)
    d_fake = scale(mean(mul(out, 1 - first)), 2.0)
    return scale(log(d_real, eps=LOG_EPS) + log(sub(1.0, d_fake), eps=LOG_EPS), -1.0)


def discriminator_step(real, fake, discriminator: Discriminator, opt: SGD) -> float:
    """One update of the discriminator; ``fake`` is detached from any generator tape."""
    real = Tensor(np.asarray(real.data if isinstance(real, Tensor) else real, dtype=np.float32))
    fake = Tensor(np.array(fake.data if isinstance(fake, Tensor) else fake, dtype=np.float32))
    with Tape() as tape:
        loss = discriminator_loss(real, fake, discriminator)
    opt.zero_grad()
    backward(loss, tape)
    opt.step()
    return loss.item()


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-4
    momentum: float = 0.9
    lambda_a: float = LAMBDA_A
    disc_lr: float = 1e-4
    squared: bool = False
    target_scale: float = 1.0
    lce_window: int | None = None
    lce_stride: int | None = None


@dataclass
class TrainHistory:
    euclidean: list[float] = field(default_factory=list)
    adversarial: list[float] = field(default_factory=list)
    discriminator: list[float] = field(default_factory=list)
    disc_steps: int = 0


def training_contexts(inputs: np.ndarray, gce: Classifier | None, lce: Classifier | None,
                      window: int | None = None, stride: int | None = None):
    """Train-time context maps for a batch of patches (constant global, sliding local)."""
    gc = global_context_train(inputs, gce) if gce is not None else None
    lc = local_context(inputs, lce, window, stride) if lce is not None else None
    return gc, lc


def _require_frozen(model: Classifier | None, name: str) -> None:
    if model is not None and not model.fully_frozen:
        raise ValueError(f"{name} must be frozen before end-to-end training "
                         f"(frozen_prefix={model.frozen_prefix} of {len(model.param_layers)} layers)")


def _target(gen: Generator, density: np.ndarray) -> np.ndarray:
    return density if gen.upscale == 4 else downsample_sum(density, 4)


def train_end_to_end(dataset: PatchDataset, gce: Classifier | None, lce: Classifier | None,
                     generator: Generator, discriminator: Discriminator | None, config: TrainConfig,
                     rng: np.random.Generator,
                     on_epoch: Callable[[int, float], None] | None = None) -> TrainHistory:
    """Per-sample SGD on ``L_E + lambda_a * L_A`` with alternating discriminator steps.

    Context estimators are used frozen; their context maps are computed once
    up front.  Returns per-epoch mean losses.
    """
    abl = generator.ablation
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if abl.use_gce and gce is None or abl.use_lce and lce is None:
        raise ValueError(f"{abl.name} needs trained context estimators")
    _require_frozen(gce if abl.use_gce else None, "GCE")
    _require_frozen(lce if abl.use_lce else None, "LCE")
    adversarial = abl.use_adversarial and config.lambda_a > 0
    if adversarial and discriminator is None:
        raise ValueError("adversarial training needs a discriminator")

    gc, lc = training_contexts(dataset.inputs, gce if abl.use_gce else None,
                               lce if abl.use_lce else None, config.lce_window, config.lce_stride)
    gen_params = [p for _, p in generator.named_parameters()]
    g_opt = SGD(gen_params, config.lr, config.momentum)
    d_params = [p for _, p in discriminator.named_parameters()] if adversarial else []
    d_opt = SGD(d_params, config.disc_lr, config.momentum) if adversarial else None
    ts = np.float32(config.target_scale)
    history = TrainHistory()

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        le_sum = la_sum = ld_sum = 0.0
        for i in order:
            x = Tensor(dataset.inputs[i])
            gt = Tensor(_target(generator, dataset.density[i])[None] * ts)
            g_ctx = gc[i] if gc is not None else None
            l_ctx = lc[i] if lc is not None else None
            if adversarial:
                for p in d_params:
                    p.requires_grad = False
            with Tape() as tape:
                pred = generator.forward(x, g_ctx, l_ctx)
                l_e = euclidean_loss(pred, gt, config.squared)
                l_a = adversarial_loss(pred, discriminator) if adversarial else None
                l_t = total_loss(l_e, l_a, config.lambda_a)
            g_opt.zero_grad()
            backward(l_t, tape)
            g_opt.step()
            le_sum += l_e.item()
            if adversarial:
                for p in d_params:
                    p.requires_grad = True
                la_sum += l_a.item()
                ld_sum += discriminator_step(gt, pred, discriminator, d_opt)
                history.disc_steps += 1
        n = len(dataset)
        history.euclidean.append(le_sum / n)
        if adversarial:
            history.adversarial.append(la_sum / n)
            history.discriminator.append(ld_sum / n)
        if on_epoch is not None:
            on_epoch(epoch, le_sum / n)
    return history


def upsample_count_preserving(density: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsample that spreads each cell's mass over its block."""
    if factor == 1:
        return density
    return np.repeat(np.repeat(density, factor, axis=-2), factor, axis=-1) / (factor * factor)


def infer(image: np.ndarray, gce: Classifier | None, lce: Classifier | None, generator: Generator,
          lce_window: int | None = None, lce_stride: int | None = None,
          target_scale: float = 1.0) -> tuple[np.ndarray, float]:
    """Density map (clamped at 0) and its count for one test image.

    Global context uses the 4x4 block variant, local context the sliding
    window.  DME-only models return a quarter-resolution map.
    """
    x = np.asarray(image, dtype=np.float32)
    x = x.reshape((1,) + x.shape[-2:])
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"image {w}x{h}: width and height must be divisible by 4")
    abl = generator.ablation
    gc = global_context_infer(x, gce) if abl.use_gce else None
    lc = local_context(x, lce, lce_window, lce_stride) if abl.use_lce else None
    with no_trace():
        pred = generator.forward(Tensor(x), gc, lc).data[0]
    density = np.maximum(pred / np.float32(target_scale), 0.0).astype(np.float32)
    return density, float(density.sum(dtype=np.float64))


# ---------------------------------------------------------------- bundle files


def save_bundle(path: str | Path, params: Mapping[str, np.ndarray] | list) -> None:
    """``CPNW`` v1: named float32 tensors, all integers little-endian."""
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    chunks = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"record {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_bundle(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != BUNDLE_MAGIC:
        raise MagicMismatchError(f"{path}: magic {magic!r}, expected {BUNDLE_MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"record {k} name length"))
        try:
            name = r.take(nlen, f"record {k} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: record {k} name is not UTF-8") from None
        (rank,) = struct.unpack("<B", r.take(1, f"record {name!r} rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"record {name!r} dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(4 * n, f"record {name!r} data")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after {count} records")
    return out


def state_of(*models) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for m in models:
        for name, p in m.named_parameters():
            out[name] = p.data
    return out


def load_state(model, state: Mapping[str, np.ndarray]) -> None:
    """Copy matching records into ``model``; every model parameter must be present."""
    for name, p in model.named_parameters():
        if name not in state:
            raise FormatError(f"bundle lacks parameter {name!r}")
        arr = state[name]
        if arr.shape != p.shape:
            raise FormatError(f"parameter {name!r}: bundle shape {arr.shape}, model shape {p.shape}")
        p.data = np.array(arr, dtype=np.float32)
