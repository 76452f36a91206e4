"""Central finite-difference checks of tape gradients.

Each check builds a scalar loss from float64 tensors, back-propagates once,
then perturbs entries one at a time by +-step.  The reported error is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over every
checked entry of a check, i.e. the worst deviation relative to the
gradient's own scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from .tensor import (Tape, Tensor, absolute, add, backward, branch_probe, log, mean, mul, scale,
                     square, sub, tensor_sum)

LAYER_TOL = 1e-4
COMPOSITE_TOL = 1e-3
STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class GradComparison:
    analytic: np.ndarray
    numeric: np.ndarray
    steps: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)

    @property
    def reduced_steps(self) -> int:
        return int((self.steps < STEP).sum())


def _central_difference(loss_fn, flat: np.ndarray, i: int, step: float, min_step: float):
    """Central difference at entry ``i``, shrinking ``step`` while the stencil straddles a kink."""
    orig = flat[i]
    with branch_probe() as base:
        loss_fn()
    while True:
        flat[i] = orig + step
        with branch_probe() as hi:
            up = loss_fn().item()
        flat[i] = orig - step
        with branch_probe() as lo:
            down = loss_fn().item()
        flat[i] = orig
        if (hi.same_as(base) and lo.same_as(base)) or step / 10 < min_step:
            return (up - down) / (2 * step), step
        step /= 10


def compare_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = STEP,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      min_step: float = 1e-7) -> GradComparison:
    """Tape gradients of ``loss_fn()`` w.r.t. ``tensors`` next to central differences.

    ``max_entries`` caps the number of perturbed entries per tensor (sampled
    with ``rng``).  Where the +-step stencil changes the branch pattern of a
    ReLU, max-pool or abs, the step is divided by 10 until it no longer does.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    analytic_all, numeric_all, steps_all = [], [], []
    for t in tensors:
        analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        for i in idx:
            num, used = _central_difference(loss_fn, flat, i, step, min_step)
            numeric_all.append(num)
            steps_all.append(used)
        analytic_all.append(analytic[idx])
    return GradComparison(np.concatenate(analytic_all), np.asarray(numeric_all), np.asarray(steps_all))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = STEP,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error of :func:`compare_gradients`."""
    return compare_gradients(loss_fn, tensors, step, max_entries, rng).max_rel_error


def _f64(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        # keep values off kinks so the +-step never crosses one
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo + x, x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _projection(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _projected(out_fn, proj):
    return lambda: tensor_sum(mul(out_fn(), proj))


def layer_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    """One finite-difference check per layer kernel, on random 64-bit inputs."""

    def conv():
        x, w, b = _f64(rng, 2, 3, 7, 6), _f64(rng, 4, 3, 3, 3), _f64(rng, 4)
        proj = _projection(rng, (2, 4, 7, 6))
        return check_gradients(_projected(lambda: L.conv2d(x, w, b), proj), [x, w, b])

    def conv_strided():
        x, w, b = _f64(rng, 1, 2, 9, 9), _f64(rng, 3, 2, 5, 5), _f64(rng, 3)
        proj = _projection(rng, (1, 3, 4, 4))
        return check_gradients(_projected(lambda: L.conv2d(x, w, b, stride=2, padding=1), proj), [x, w, b])

    def tconv():
        x, w, b = _f64(rng, 2, 3, 4, 5), _f64(rng, 3, 2, 4, 4), _f64(rng, 2)
        proj = _projection(rng, (2, 2, 8, 10))
        return check_gradients(_projected(lambda: L.transposed_conv2d(x, w, b), proj), [x, w, b])

    def pool():
        # distinct values spaced well beyond the step keep argmax stable
        vals = rng.permutation(2 * 3 * 7 * 5).astype(np.float64) * 0.01
        x = Tensor(vals.reshape(2, 3, 7, 5), requires_grad=True, dtype=np.float64)
        proj = _projection(rng, (2, 3, 4, 3))
        return check_gradients(_projected(lambda: L.maxpool2(x), proj), [x])

    def relu():
        x = _f64(rng, 3, 5, 5, lo=0.01)
        proj = _projection(rng, (3, 5, 5))
        return check_gradients(_projected(lambda: L.relu(x), proj), [x])

    def prelu():
        x, a = _f64(rng, 2, 3, 4, 4, lo=0.01), Tensor(rng.uniform(0.1, 0.4, 3), requires_grad=True,
                                                      dtype=np.float64)
        proj = _projection(rng, (2, 3, 4, 4))
        return check_gradients(_projected(lambda: L.prelu(x, a), proj), [x, a])

    def sig():
        x = _f64(rng, 4, 6)
        proj = _projection(rng, (4, 6))
        return check_gradients(_projected(lambda: L.sigmoid(x), proj), [x])

    def fc():
        x, w, b = _f64(rng, 3, 7), _f64(rng, 5, 7), _f64(rng, 5)
        proj = _projection(rng, (3, 5))
        return check_gradients(_projected(lambda: L.fully_connected(x, w, b), proj), [x, w, b])

    def drop():
        x = _f64(rng, 50)
        proj = _projection(rng, (50,))
        seed = int(rng.integers(1 << 30))
        # same mask on every evaluation
        return check_gradients(
            _projected(lambda: L.dropout(x, 0.3, True, np.random.default_rng(seed)), proj), [x])

    def xent():
        z = _f64(rng, 4, 5)
        labels = rng.integers(0, 5, 4)
        return check_gradients(lambda: L.softmax_cross_entropy(z, labels), [z])

    def elementwise():
        a, b = _f64(rng, 3, 4, lo=0.05), _f64(rng, 3, 4)
        pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)
        return check_gradients(
            lambda: mean(add(scale(absolute(sub(a, b)), 0.7), add(square(b), log(pos)))), [a, b, pos])

    return [("conv2d", conv), ("conv2d_stride2", conv_strided), ("transposed_conv2d", tconv),
            ("maxpool2", pool), ("relu", relu), ("prelu", prelu), ("sigmoid", sig),
            ("fully_connected", fc), ("dropout", drop), ("softmax_cross_entropy", xent),
            ("elementwise", elementwise)]


def composite_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    """Whole-network checks: generator under L_E, discriminator under L_A, classifiers under CE."""
    from .context import make_gce, make_lce
    from .pipeline import (AblationConfig, Discriminator, Generator, adversarial_loss,
                           euclidean_loss)

    def generator():
        g = Generator(AblationConfig(True, True, False), seed=int(rng.integers(1 << 30)))
        g.astype(np.float64)
        img = Tensor(rng.uniform(0, 1, (1, 16, 16)), dtype=np.float64)
        ctx = rng.uniform(0, 1, (5, 4, 4))
        gc, lc = Tensor(ctx, dtype=np.float64), Tensor(rng.uniform(0, 1, (5, 4, 4)), dtype=np.float64)
        pred = g.forward(img, gc, lc).data
        # ground truth kept away from the prediction so |pred - gt| has no kink in reach
        gt = Tensor(pred + rng.choice([-1.0, 1.0], pred.shape) * rng.uniform(0.05, 0.2, pred.shape),
                    dtype=np.float64)
        params = [p for _, p in g.named_parameters()]
        return check_gradients(lambda: euclidean_loss(g.forward(img, gc, lc), gt), params,
                               max_entries=6, rng=rng)

    def discriminator():
        d = Discriminator(seed=int(rng.integers(1 << 30)), width_scale=0.125)
        d.astype(np.float64)
        x = Tensor(rng.uniform(0, 1, (1, 16, 16)), requires_grad=True, dtype=np.float64)
        params = [p for _, p in d.named_parameters()]
        return check_gradients(lambda: adversarial_loss(x, d), params + [x], max_entries=6, rng=rng)

    def lce():
        m = make_lce(patch=16, seed=int(rng.integers(1 << 30)))
        m.astype(np.float64)
        x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)), dtype=np.float64)
        labels = rng.integers(0, 5, 2)
        params = [p for _, p in m.named_parameters()]
        return check_gradients(lambda: L.softmax_cross_entropy(m.logits(x), labels), params,
                               max_entries=6, rng=rng)

    return [("generator", generator), ("discriminator", discriminator), ("lce", lce)]


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in layer_checks(rng):
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, LAYER_TOL, time.perf_counter() - t0))
    for name, fn in composite_checks(rng):
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, COMPOSITE_TOL, time.perf_counter() - t0))
    return results
