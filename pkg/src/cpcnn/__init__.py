"""Desk-scale contextual pyramid CNN for crowd density estimation.

The package is built bottom up: ``tensor`` (reverse-mode autodiff),
``layers`` and ``nn`` (differentiable layers and containers), ``density``
(dot annotations to density maps), ``context`` (global and local density-level
classifiers), ``pipeline`` (generator, discriminator, training, inference),
``metrics`` (count and map-quality scores), ``synth`` (synthetic crowds) and
``cli`` (the ``cpcnn`` command).
"""

__version__ = "0.1.0"
