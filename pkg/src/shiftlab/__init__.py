"""Desk-scale robustness and adaptation toolkit.

Distributionally robust training with parametric and nonparametric
adversaries, worst-case checkpoint selection, Fisher-preconditioned
continual learning, and first-order input-perturbation evaluation, all on
small from-scratch differentiable models and synthetic datasets.
"""

__version__ = "0.1.0"

from . import advmetrics, continual, datasets, diffcore, dro, harness, selection

__all__ = [
    "advmetrics",
    "continual",
    "datasets",
    "diffcore",
    "dro",
    "harness",
    "selection",
]
