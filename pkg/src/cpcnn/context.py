"""Density-level classifiers (global and local) and the context maps built from them.

Context maps have 5 planes, one per density class, at quarter resolution.
Values are sigmoid scores in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .nn import Conv2d, Dropout, Layer, Linear, MaxPool2, ReLU, Sequential
from .tensor import SGD, Tape, Tensor, backward, reshape

NUM_CLASSES = L.NUM_CLASSES
CLASS_NAMES = ("ex-lo", "lo", "med", "hi", "ex-hi")


@dataclass
class DensityClasses:
    """Four strictly increasing count thresholds splitting counts into 5 levels."""

    thresholds: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (NUM_CLASSES - 1,):
            raise ValueError(f"need {NUM_CLASSES - 1} thresholds, got {self.thresholds.shape}")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError(f"thresholds must be strictly increasing: {self.thresholds}")

    def classify(self, counts) -> np.ndarray:
        c = np.asarray(counts, dtype=np.float64)
        # bins are (t[i-1], t[i]]: a count equal to a threshold stays in the lower class,
        # so an empty region is always the lowest level even when the first quintile is 0
        return np.searchsorted(self.thresholds, c, side="left").astype(np.int64)


def fit_class_boundaries(counts) -> DensityClasses:
    """Equal-frequency quintiles (20/40/60/80th percentiles, linear interpolation).

    Ties among the quintiles (e.g. many empty patches) are broken by moving
    the later threshold to the next representable value, which keeps the
    thresholds strictly increasing at the cost of a near-empty class.
    """
    c = np.asarray(counts, dtype=np.float64).ravel()
    if np.unique(c).size < NUM_CLASSES:
        raise ValueError(f"need at least {NUM_CLASSES} distinct counts to fit class boundaries, "
                         f"got {np.unique(c).size}")
    t = np.percentile(c, [20, 40, 60, 80])
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], np.inf)
    return DensityClasses(t)


def resize(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``[..., h, w]`` to ``size x size`` (half-pixel centres)."""
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images

    def axis(n):
        pos = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, (pos - i0).astype(images.dtype)

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    rows = images[..., r0, :] * (1 - fr)[:, None] + images[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


class Classifier:
    """Density-level classifier with a frozen leading block of layers.

    ``frozen_prefix`` counts parameter-bearing layers from the input side;
    their parameters are never traced, so no optimizer can touch them.
    """

    def __init__(self, net: Sequential, input_size: int, frozen_prefix: int = 0, kind: str = "gce"):
        self.net = net
        self.input_size = input_size
        self.kind = kind
        self.boundaries: DensityClasses | None = None
        self.set_frozen_prefix(frozen_prefix)

    @property
    def param_layers(self) -> list[Layer]:
        return [layer for layer in self.net if layer.param_names]

    def set_frozen_prefix(self, k: int) -> None:
        layers = self.param_layers
        if not 0 <= k <= len(layers):
            raise ValueError(f"frozen_prefix {k} outside 0..{len(layers)}")
        self.frozen_prefix = k
        for i, layer in enumerate(layers):
            layer.freeze(i < k)

    def freeze_all(self) -> None:
        self.set_frozen_prefix(len(self.param_layers))

    @property
    def fully_frozen(self) -> bool:
        return self.frozen_prefix == len(self.param_layers)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.net.named_parameters(f"{self.kind}.")

    def trainable(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def astype(self, dtype) -> "Classifier":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def _check(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise ValueError(f"{self.kind} expects {self.input_size}x{self.input_size} input, "
                             f"got {x.shape[-2]}x{x.shape[-1]}")
        return x

    def logits(self, x, train: bool = False, rng=None) -> Tensor:
        return self.net(self._check(x), train, rng)

    def scores(self, x, batch: int = 256) -> np.ndarray:
        """Sigmoid class scores, shape [N, 5] (evaluation mode, untraced)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        out = [L.sigmoid(self.logits(x[i:i + batch])).data for i in range(0, len(x), batch)]
        return np.concatenate(out, axis=0)

    def predict(self, x, batch: int = 256) -> np.ndarray:
        """Predicted level per input.

        Uses the logits: sigmoid scores of confident classes can round to the
        same float32 value, which would make argmax fall back to the lower class.
        """
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        out = [self.logits(x[i:i + batch]).data.argmax(axis=1) for i in range(0, len(x), batch)]
        return np.concatenate(out)

    def prepare(self, patches: np.ndarray) -> np.ndarray:
        """Resize ``[N, 1, h, w]`` patches to this classifier's input size."""
        return resize(np.asarray(patches, dtype=np.float32), self.input_size).astype(np.float32)


def make_gce(input_size: int = 64, seed: int = 0, frozen_prefix: int = 2,
             widths=(8, 16, 16, 32), hidden: int = 64) -> Classifier:
    """Four conv-ReLU-pool blocks and two fully connected layers."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    ch = 1
    for w in widths:
        layers += [Conv2d(L.ConvSpec(ch, w, 3), rng), ReLU(), MaxPool2()]
        ch = w
    side = input_size
    for _ in widths:
        side = (side + 1) // 2
    layers += [Linear(ch * side * side, hidden, rng), ReLU(), Linear(hidden, NUM_CLASSES, rng)]
    return Classifier(Sequential(layers), input_size, frozen_prefix, kind="gce")


def make_lce(patch: int = 16, seed: int = 0, widths=(8, 16), hidden=(64, 32),
             dropout: float = 0.3) -> Classifier:
    """Conv/pool stack, then 3 fully connected layers with dropout after the first two.

    The sigmoid after the last layer is applied by :meth:`Classifier.scores`;
    training uses softmax cross-entropy on the pre-sigmoid logits.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    ch = 1
    for w in widths:
        layers += [Conv2d(L.ConvSpec(ch, w, 3), rng), ReLU(), MaxPool2()]
        ch = w
    side = patch
    for _ in widths:
        side = (side + 1) // 2
    n_in = ch * side * side
    for h in hidden:
        layers += [Linear(n_in, h, rng), ReLU(), Dropout(dropout)]
        n_in = h
    layers.append(Linear(n_in, NUM_CLASSES, rng))
    return Classifier(Sequential(layers), patch, 0, kind="lce")


def train_classifier(model: Classifier, inputs: np.ndarray, labels: np.ndarray, epochs: int,
                     lr: float, rng: np.random.Generator, momentum: float = 0.9,
                     batch_size: int = 32) -> list[float]:
    """Minibatch SGD on softmax cross-entropy.  Returns the mean loss per epoch.

    ``inputs`` must already match the model's input size (see
    :meth:`Classifier.prepare`).
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("empty training set")
    if len(labels) != n:
        raise ValueError(f"{n} inputs but {len(labels)} labels")
    params = model.trainable()
    opt = SGD(params, lr, momentum) if params else None
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                loss = L.softmax_cross_entropy(model.logits(inputs[idx], True, rng), labels[idx])
            if opt is not None:
                opt.zero_grad()
                if loss._tape is tape:
                    backward(loss, tape)
                opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
    return history


def accuracy(model: Classifier, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float((model.predict(inputs) == np.asarray(labels)).mean())


# ---------------------------------------------------------------- context maps


def _check_quarter(h: int, w: int) -> None:
    if h % 4 or w % 4:
        raise ValueError(f"image {w}x{h}: width and height must be divisible by 4")


def global_context_train(images: np.ndarray, gce: Classifier) -> np.ndarray:
    """Constant planes filled with whole-image GCE scores.

    ``images`` is ``[H, W]``, ``[1, H, W]`` or a batch ``[N, 1, H, W]``;
    returns ``[5, H/4, W/4]`` (or ``[N, 5, H/4, W/4]``).
    """
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim < 4
    x = x.reshape((-1, 1) + x.shape[-2:])
    h, w = x.shape[-2:]
    _check_quarter(h, w)
    s = gce.scores(gce.prepare(x))
    out = np.broadcast_to(s[:, :, None, None], (len(x), NUM_CLASSES, h // 4, w // 4)).copy()
    return out[0] if single else out


def _spans(n: int, parts: int) -> list[tuple[int, int]]:
    edges = [i * n // parts for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def global_context_infer(image: np.ndarray, gce: Classifier, grid: int = 4) -> np.ndarray:
    """4x4 grid of non-overlapping blocks, each scored by GCE independently."""
    x = np.asarray(image, dtype=np.float32).reshape(image.shape[-2:])
    h, w = x.shape
    _check_quarter(h, w)
    mh, mw = h // 4, w // 4
    rows, cols, mrows, mcols = _spans(h, grid), _spans(w, grid), _spans(mh, grid), _spans(mw, grid)
    blocks = np.stack([gce.prepare(x[None, r0:r1, c0:c1])[0] for r0, r1 in rows for c0, c1 in cols])
    scores = gce.scores(blocks[:, None]).reshape(grid, grid, NUM_CLASSES)
    out = np.zeros((NUM_CLASSES, mh, mw), dtype=np.float32)
    for bi, (r0, r1) in enumerate(mrows):
        for bj, (c0, c1) in enumerate(mcols):
            out[:, r0:r1, c0:c1] = scores[bi, bj][:, None, None]
    return out


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Window offsets covering ``[0, n)``; the last window is flush with the edge."""
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def box_downsample(x: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = x.shape[-2:]
    return x.reshape(*x.shape[:-2], h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def local_context(images: np.ndarray, lce: Classifier, window: int | None = None,
                  stride: int | None = None) -> np.ndarray:
    """Sliding-window LCE scores, averaged where windows overlap, box-downsampled by 4.

    Accepts ``[H, W]``, ``[1, H, W]`` or ``[N, 1, H, W]``.
    """
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim < 4
    x = x.reshape((-1, 1) + x.shape[-2:])
    n, _, h, w = x.shape
    _check_quarter(h, w)
    window = window or lce.input_size
    stride = stride or max(1, window // 2)
    if window > min(h, w):
        raise ValueError(f"window {window} larger than image {w}x{h}")
    if stride > window:
        raise ValueError(f"stride {stride} exceeds window {window}; pixels would be left unscored")
    rs, cs = window_starts(h, window, stride), window_starts(w, window, stride)
    patches = np.stack([x[:, :, r:r + window, c:c + window] for r in rs for c in cs], axis=1)
    scores = lce.scores(lce.prepare(patches.reshape(-1, 1, window, window)))
    scores = scores.reshape(n, len(rs) * len(cs), NUM_CLASSES)
    acc = np.zeros((n, NUM_CLASSES, h, w), dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.float64)
    k = 0
    for r in rs:
        for c in cs:
            acc[:, :, r:r + window, c:c + window] += scores[:, k, :, None, None]
            cover[r:r + window, c:c + window] += 1
            k += 1
    out = box_downsample(acc / cover).astype(np.float32)
    return out[0] if single else out
