"""The staged protocol: corpus -> GCE -> LCE -> generator -> evaluation.

Every stage draws randomness from its own named stream of the run seed,
so any stage can be rerun on its own and reproduce the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import RunConfig
from .context import (Classifier, DensityClasses, accuracy, fit_class_boundaries, make_gce, make_lce,
                      train_classifier)
from .metrics import EvalReport, evaluate
from .pipeline import (Discriminator, Generator, TrainConfig, TrainHistory, infer, train_end_to_end,
                       upsample_count_preserving)
from .synth import (Corpus, PatchDataset, build_dme_dataset, build_local_dataset, generate_corpus,
                    substream)

EpochHook = Callable[[int, float], None]


def synthesize(cfg: RunConfig) -> Corpus:
    scenes, images, maps = generate_corpus(cfg.n_scenes, cfg.seed, cfg.scene_spec(), cfg.sigma)
    counts = [s.count for s in scenes]
    classes = fit_class_boundaries(counts).classify(counts)
    ids = [f"{i:04d}" for i in range(len(scenes))]
    return Corpus(ids, scenes, images, maps, [int(c) for c in classes])


def dme_patches(cfg: RunConfig, corpus: Corpus, stream: str) -> PatchDataset:
    return build_dme_dataset(corpus.images, corpus.maps, substream(cfg.seed, stream), crops=cfg.dme_crops)


def local_patches(cfg: RunConfig, corpus: Corpus, stream: str,
                  boundaries: DensityClasses | None = None) -> PatchDataset:
    return build_local_dataset(corpus.images, corpus.maps, substream(cfg.seed, stream), cfg.patch,
                               boundaries, crops=cfg.local_crops)


@dataclass
class ClassifierRun:
    model: Classifier
    losses: list[float]
    train_accuracy: float


def _fit_classifier(model: Classifier, data: PatchDataset, boundaries: DensityClasses, epochs: int,
                    lr: float, rng: np.random.Generator, on_epoch: EpochHook | None) -> ClassifierRun:
    model.boundaries = boundaries
    labels = boundaries.classify(data.counts)
    inputs = model.prepare(data.inputs)
    losses = []
    for epoch in range(epochs):
        losses += train_classifier(model, inputs, labels, 1, lr, rng)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    model.freeze_all()
    return ClassifierRun(model, losses, accuracy(model, inputs, labels))


def train_gce(cfg: RunConfig, train: Corpus, on_epoch: EpochHook | None = None) -> ClassifierRun:
    """GCE learns the density level of quarter-area crops, as seen by the generator."""
    data = dme_patches(cfg, train, "train.gce.data")
    boundaries = fit_class_boundaries(data.counts)
    model = make_gce(cfg.gce_size, seed=int(substream(cfg.seed, "init.gce").integers(1 << 31)),
                     frozen_prefix=cfg.gce_frozen_prefix)
    return _fit_classifier(model, data, boundaries, cfg.gce_epochs, cfg.gce_lr,
                           substream(cfg.seed, "train.gce"), on_epoch)


def train_lce(cfg: RunConfig, train: Corpus, on_epoch: EpochHook | None = None) -> ClassifierRun:
    data = local_patches(cfg, train, "train.lce.data")
    boundaries = fit_class_boundaries(data.counts)
    model = make_lce(cfg.patch, seed=int(substream(cfg.seed, "init.lce").integers(1 << 31)))
    return _fit_classifier(model, data, boundaries, cfg.lce_epochs, cfg.lce_lr,
                           substream(cfg.seed, "train.lce"), on_epoch)


def classifier_accuracy(cfg: RunConfig, model: Classifier, corpus: Corpus, kind: str) -> float:
    """Accuracy on patches drawn from ``corpus`` with the model's own class boundaries."""
    if model.boundaries is None:
        raise ValueError(f"{kind} model has no class boundaries")
    if kind == "gce":
        data = dme_patches(cfg, corpus, "eval.gce.data")
    else:
        data = local_patches(cfg, corpus, "eval.lce.data", model.boundaries)
    return accuracy(model, model.prepare(data.inputs), model.boundaries.classify(data.counts))


def make_generator(cfg: RunConfig, row: int | None = None) -> Generator:
    seed = int(substream(cfg.seed, "init.generator").integers(1 << 31))
    return Generator(cfg.ablation_config(row), seed=seed)


def make_discriminator(cfg: RunConfig) -> Discriminator:
    seed = int(substream(cfg.seed, "init.discriminator").integers(1 << 31))
    return Discriminator(seed=seed, width_scale=cfg.disc_width_scale)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.gen_epochs, lr=cfg.gen_lr, lambda_a=cfg.lambda_a, disc_lr=cfg.disc_lr,
                       target_scale=cfg.target_scale, lce_window=cfg.patch,
                       squared=bool(cfg.squared_loss))


def train_generator(cfg: RunConfig, train: Corpus, gce: Classifier | None, lce: Classifier | None,
                    row: int | None = None,
                    on_epoch: EpochHook | None = None) -> tuple[Generator, Discriminator | None, TrainHistory]:
    generator = make_generator(cfg, row)
    abl = generator.ablation
    discriminator = make_discriminator(cfg) if abl.use_adversarial else None
    data = dme_patches(cfg, train, "train.generator.data")
    history = train_end_to_end(data, gce if abl.use_gce else None, lce if abl.use_lce else None,
                               generator, discriminator, train_config(cfg),
                               substream(cfg.seed, "train.generator"), on_epoch)
    return generator, discriminator, history


def predict_maps(cfg: RunConfig, corpus: Corpus, generator: Generator, gce: Classifier | None,
                 lce: Classifier | None) -> list[np.ndarray]:
    """Full-resolution predictions; quarter-resolution outputs are spread back over their blocks."""
    out = []
    for img in corpus.images:
        density, _ = infer(img, gce, lce, generator, lce_window=cfg.patch, target_scale=cfg.target_scale)
        out.append(upsample_count_preserving(density, 4 // generator.upscale))
    return out


def evaluate_generator(cfg: RunConfig, corpus: Corpus, generator: Generator, gce: Classifier | None,
                       lce: Classifier | None) -> EvalReport:
    return evaluate(corpus.maps, predict_maps(cfg, corpus, generator, gce, lce))
