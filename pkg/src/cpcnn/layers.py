"""Layer kernels with hand-written backward passes.

Spatial ops take ``[C, H, W]`` or batched ``[N, C, H, W]`` tensors.  Weights
follow the usual layouts: conv ``[out, in, k, k]``, transposed conv
``[in, out, 4, 4]``, fully connected ``[out, in]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, note_branch, record, reshape

NUM_CLASSES = 5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be an odd positive int, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding is None:
            object.__setattr__(self, "padding", (self.kernel - 1) // 2)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (_out_dim("conv2d", "H", h, self.kernel, self.stride, self.padding),
                _out_dim("conv2d", "W", w, self.kernel, self.stride, self.padding))


@dataclass(frozen=True)
class TransposedConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if (self.kernel, self.stride, self.padding) != (4, 2, 1):
            raise ValueError("transposed conv is fixed at kernel 4, stride 2, padding 1")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return 2 * h, 2 * w


def _out_dim(op: str, axis: str, n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(op, (n,), detail=f"{axis}={n} with kernel {k}, stride {stride}, "
                                          f"padding {pad} gives a non-integral output size")
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """[N,C,H,W] -> ([C*k*k, N*Ho*Wo], Ho, Wo), channel-major so the copy runs along rows."""
    n, c, h, w = x.shape
    if pad:
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = x
        x = padded
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into [N,C,H,W]."""
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += patches[:, :, i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ShapeError(op, x.shape, detail="expected [C,H,W] or [N,C,H,W]")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Zero-padded cross-correlation; ``padding=None`` means same-padding."""
    x = as_tensor(x)
    x4, squeeze = _batched(x, "conv2d")
    o, c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d", weight.shape, detail="kernel must be square")
    if x4.shape[1] != c:
        raise ShapeError("conv2d", x4.shape, weight.shape, detail="input channels")
    pad = (k - 1) // 2 if padding is None else padding
    n, _, h, w = x4.shape
    _out_dim("conv2d", "H", h, k, stride, pad)
    _out_dim("conv2d", "W", w, k, stride, pad)
    cols, ho, wo = _im2col(x4.data, k, stride, pad)
    wm = weight.data.reshape(o, -1)
    y = wm @ cols
    if bias is not None:
        y += bias.data[:, None]
    y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    xshape = x4.shape

    def bw(g, needs):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dx = dw = db = None
        if needs[0]:
            if stride == 1 and pad <= k - 1:
                # stride 1: dx is a full correlation of g with the flipped, transposed kernel
                gcols, _, _ = _im2col(g, k, 1, k - 1 - pad)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                dx = (wflip @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dx = _col2im(wm.T @ gm, xshape, k, stride, pad, ho, wo)
        if needs[1]:
            dw = (gm @ cols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            db = gm.sum(axis=1)
        return dx, dw, db

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    return _unbatch(record("conv2d", np.ascontiguousarray(y), inputs, bw), squeeze)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fractionally-strided convolution (k=4, s=2, p=1): exactly doubles H and W.

    Forward is the adjoint of a stride-2 :func:`conv2d` sharing ``weight``.
    """
    x = as_tensor(x)
    x4, squeeze = _batched(x, "transposed_conv2d")
    cin, cout, k, k2 = weight.shape
    if (k, k2) != (4, 4):
        raise ShapeError("transposed_conv2d", weight.shape, detail="kernel must be 4x4")
    if x4.shape[1] != cin:
        raise ShapeError("transposed_conv2d", x4.shape, weight.shape, detail="input channels")
    n, _, h, w = x4.shape
    xm = x4.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    wm = weight.data.reshape(cin, -1)
    out_shape = (n, cout, 2 * h, 2 * w)
    y = _col2im(wm.T @ xm, out_shape, 4, 2, 1, h, w)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def bw(g, needs):
        gcols, _, _ = _im2col(g, 4, 2, 1)
        dx = dw = db = None
        if needs[0]:
            dx = (wm @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        if needs[1]:
            dw = (xm @ gcols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    return _unbatch(record("transposed_conv2d", y, inputs, bw), squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride 2 max pool.  Odd H or W is replicate-padded first."""
    x = as_tensor(x)
    x4, squeeze = _batched(x, "maxpool2")
    n, c, h, w = x4.shape
    ph, pw = h % 2, w % 2
    xd = x4.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = xd.shape[2] // 2, xd.shape[3] // 2
    win = xd.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    arg = win.argmax(axis=-1)  # first index wins ties
    note_branch(arg)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g, needs):
        gw = np.zeros((n, c, hh, ww, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
        if ph:
            gx[:, :, h - 1, :] += gx[:, :, h, :]
            gx = gx[:, :, :h, :]
        if pw:
            gx[:, :, :, w - 1] += gx[:, :, :, w]
            gx = gx[:, :, :, :w]
        return (gx,)

    return _unbatch(record("maxpool2", y, (x4,), bw), squeeze)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, n: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel (axis -3 for maps)."""
    x, slope = as_tensor(x), as_tensor(slope)
    if x.data.ndim >= 3:
        axis = x.data.ndim - 3
        if x.shape[axis] != slope.size:
            raise ShapeError("prelu", x.shape, slope.shape, detail="one slope per channel")
        bshape = [1] * x.data.ndim
        bshape[axis] = slope.size
        a = slope.data.reshape(bshape)
        reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)
    else:
        a = slope.data.reshape(()) if slope.size == 1 else slope.data
        reduce_axes = None
    pos = x.data > 0
    note_branch(pos)
    y = np.where(pos, x.data, a * x.data).astype(x.dtype)

    def bw(g, needs):
        gx = np.where(pos, g, a * g) if needs[0] else None
        ga = None
        if needs[1]:
            contrib = np.where(pos, 0, x.data * g)
            ga = (contrib.sum(axis=reduce_axes) if reduce_axes is not None else contrib.sum())
            ga = np.asarray(ga, dtype=slope.dtype).reshape(slope.shape)
        return gx, ga

    return record("prelu", y, (x, slope), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return record("sigmoid", y, (x,), lambda g, n: (g * y * (1.0 - y),))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``W x + b`` for ``x`` of shape [n] or [N, n]."""
    x = as_tensor(x)
    m, nin = weight.shape
    if x.shape[-1] != nin or x.data.ndim not in (1, 2):
        raise ShapeError("fully_connected", x.shape, weight.shape)
    if bias is not None and bias.shape != (m,):
        raise ShapeError("fully_connected", weight.shape, bias.shape, detail="bias")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g, needs):
        dx = g @ weight.data if needs[0] else None
        dw = (np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data) if needs[1] else None
        db = None
        if len(needs) > 2 and needs[2]:
            db = g if g.ndim == 1 else g.sum(axis=0)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("fully_connected", y, inputs, bw)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g, n: (g * keep,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = as_tensor(logits)
    z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.shape[-1] != NUM_CLASSES:
        raise ShapeError("softmax_cross_entropy", logits.shape, detail=f"expected {NUM_CLASSES} logits")
    if labels.shape[0] != z.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError(f"label out of range 0..{NUM_CLASSES - 1}: {labels.tolist()}")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = np.asarray((logsum - picked).mean(), dtype=logits.dtype).reshape(1)

    def bw(g, needs):
        p = softmax(z)
        p[np.arange(n), labels] -= 1.0
        return ((p * (g.reshape(()) / n)).reshape(logits.shape).astype(logits.dtype),)

    return record("softmax_cross_entropy", loss, (logits,), bw)
