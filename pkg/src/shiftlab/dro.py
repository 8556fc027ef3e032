"""Training-time reweighting engines.

ERM, the KL-constrained nonparametric baseline, online group DRO, the
Gaussian-adversary min-max game for the 2-D toy family, and the parametric
likelihood-ratio game with batch-level or self-normalization.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .diffcore import (
    Example,
    ModelState,
    forward_logits_batch,
    grad_params,
    nll_loss_batch,
    softmax,
    _forward_batch,
    _backward_from_dlogits,
)

TAU_SEARCH_LO = 1e-10
TAU_SEARCH_HI = 1e10
WEIGHT_CLIP = 100.0  # guards against importance-weight overflow


@dataclass
class GaussianAdversary:
    """Isotropic Gaussian location adversary over the inputs."""

    mean: np.ndarray
    sigma: float
    mean0: np.ndarray

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.mean = np.asarray(self.mean, dtype=float)
        self.mean0 = np.asarray(self.mean0, dtype=float)

    def copy(self) -> "GaussianAdversary":
        return GaussianAdversary(self.mean.copy(), self.sigma, self.mean0.copy())


@dataclass
class RatioAdversary:
    """Likelihood-ratio adversary r = exp(f) with f a label-conditioned scorer.

    The scorer is a classifier-shaped model; f(x, y) is the y-th output, so
    each class owns one head over the shared input representation.
    """

    scorer: ModelState

    def f_values(self, batch: Sequence[Example]) -> np.ndarray:
        logits = forward_logits_batch(self.scorer, batch)
        labels = np.array([ex.label for ex in batch])
        return logits[np.arange(len(batch)), labels]

    def grad_f(self, batch: Sequence[Example], df: np.ndarray) -> np.ndarray:
        """Scorer-parameter gradient of sum_i df[i] * f(x_i, y_i)."""
        logits, cache = _forward_batch(self.scorer, batch)
        dlogits = np.zeros_like(logits)
        labels = np.array([ex.label for ex in batch])
        dlogits[np.arange(len(batch)), labels] = df
        return _backward_from_dlogits(self.scorer, cache, dlogits)

    def copy(self) -> "RatioAdversary":
        return RatioAdversary(self.scorer.copy())


@dataclass
class RunningNormalizer:
    """Pooled mean of exp(loss/tau) over a window of recent batches.

    Each record holds (log sum exp(loss/tau), count) for one batch; pooling
    happens in log space so small temperatures do not overflow.
    """

    window: int
    records: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def log_value(self) -> float:
        if not self.records:
            return 0.0
        log_total = logsumexp([s for s, _ in self.records])
        count = sum(c for _, c in self.records)
        return float(log_total - np.log(count))

    @property
    def value(self) -> float:
        return float(np.exp(self.log_value))


@dataclass
class DroConfig:
    method: str = "erm"
    lr: float = 0.1
    tau: float = 1.0
    kappa: float = 1.0
    k_window: int = 5
    adv_lr: float = 0.1
    eta_group: float = 0.1
    beta_selfnorm: float = 1.0
    norm_mode: str = "batch_level"
    project: bool = True
    reverse_kl: bool = True
    adv_steps_per_model_step: int = 1


def erm_step(model: ModelState, batch: Sequence[Example], lr: float) -> ModelState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    n = len(batch)
    grad = grad_params(model, batch, np.full(n, 1.0 / n))
    out = model.copy()
    out.params -= lr * grad
    return out


def _tilted_kl(losses: np.ndarray, tau: float) -> float:
    """KL(q* || uniform) for q* proportional to exp(loss/tau) over the batch."""
    z = losses / tau
    z -= z.max()
    w = np.exp(z)
    w /= w.sum()
    n = len(losses)
    nonzero = w > 0
    return float(np.sum(w[nonzero] * np.log(n * w[nonzero])))


def nonparam_weights(losses: np.ndarray, kappa: float) -> Tuple[np.ndarray, float]:
    """Closed-form worst-case weights under a KL ball of radius kappa.

    Weights are proportional to exp(loss/tau*) with tau* found by bisection
    in log10 space over [1e-10, 1e10], clipped at the bounds.
    """
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")

    def weights_at(tau):
        z = losses / tau
        z -= z.max()
        w = np.exp(z)
        return w / w.sum()

    if kappa == 0 or np.ptp(losses) == 0:
        # zero radius or constant losses: the KL is 0 everywhere reachable
        tau = TAU_SEARCH_HI if kappa == 0 else TAU_SEARCH_LO
        return weights_at(tau), tau

    # KL(tau) decreases from its max at tau -> 0 toward 0 at tau -> inf
    lo, hi = np.log10(TAU_SEARCH_LO), np.log10(TAU_SEARCH_HI)
    if _tilted_kl(losses, TAU_SEARCH_LO) <= kappa:
        return weights_at(TAU_SEARCH_LO), TAU_SEARCH_LO
    if _tilted_kl(losses, TAU_SEARCH_HI) >= kappa:
        return weights_at(TAU_SEARCH_HI), TAU_SEARCH_HI
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _tilted_kl(losses, 10.0 ** mid) > kappa:
            lo = mid
        else:
            hi = mid
    tau = 10.0 ** (0.5 * (lo + hi))
    return weights_at(tau), tau


def group_dro_weights(
    group_losses: np.ndarray, prev_weights: np.ndarray, eta: float
) -> np.ndarray:
    """Exponentiated-gradient update of the worst-group mixture weights."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    w = np.asarray(prev_weights, dtype=float) * np.exp(eta * np.asarray(group_losses))
    return w / w.sum()


def _log_density_ratio(adv: GaussianAdversary, x: np.ndarray) -> np.ndarray:
    d0 = np.sum((x - adv.mean0) ** 2, axis=-1)
    d1 = np.sum((x - adv.mean) ** 2, axis=-1)
    return (d0 - d1) / (2.0 * adv.sigma ** 2)


def pdro_model_weights(adv: GaussianAdversary, batch: Sequence[Example]) -> np.ndarray:
    """Importance weights q_psi(x) / q_psi0(x); exactly 1 when psi == psi0."""
    x = np.stack([np.asarray(ex.input, dtype=float) for ex in batch])
    if np.array_equal(adv.mean, adv.mean0):
        return np.ones(len(batch))
    with np.errstate(over="ignore"):  # overflow saturates into the clip
        return np.clip(np.exp(_log_density_ratio(adv, x)), 0.0, WEIGHT_CLIP)


def normalizer_update(
    normalizer: RunningNormalizer, batch_losses: np.ndarray, tau: float
) -> RunningNormalizer:
    losses = np.asarray(batch_losses, dtype=float)
    out = RunningNormalizer(normalizer.window, deque(normalizer.records))
    out.records.append((float(logsumexp(losses / tau)), len(losses)))
    while len(out.records) > out.window:
        out.records.popleft()
    return out


def pdro_adv_step(
    adv: GaussianAdversary,
    batch: Sequence[Example],
    losses: np.ndarray,
    tau: float,
    normalizer: RunningNormalizer,
    adv_lr: float,
) -> GaussianAdversary:
    """Ascend the exp(loss/tau)-weighted Gaussian log-likelihood of the batch."""
    log_z = normalizer.log_value
    if not np.isfinite(log_z):
        raise ValueError("normalizer must be positive and finite")
    x = np.stack([np.asarray(ex.input, dtype=float) for ex in batch])
    w = np.exp(np.asarray(losses) / tau - log_z)
    grad = (w[:, None] * (x - adv.mean)).sum(axis=0) / (len(batch) * adv.sigma ** 2)
    out = adv.copy()
    out.mean = adv.mean + adv_lr * grad
    return out


def pdro_adv_step_bare(
    adv: GaussianAdversary,
    batch: Sequence[Example],
    losses: np.ndarray,
    adv_lr: float,
) -> GaussianAdversary:
    """Direct ascent on the importance-sampled expected loss (no surrogate)."""
    x = np.stack([np.asarray(ex.input, dtype=float) for ex in batch])
    ratios = pdro_model_weights(adv, batch)
    score = (x - adv.mean) / adv.sigma ** 2
    grad = (ratios * np.asarray(losses))[:, None] * score
    out = adv.copy()
    out.mean = adv.mean + adv_lr * grad.mean(axis=0)
    return out


def gaussian_kl_project(adv: GaussianAdversary, kappa: float) -> GaussianAdversary:
    """Project the mean onto the ball ||psi - psi0|| <= sqrt(2 kappa) sigma."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    diff = adv.mean - adv.mean0
    dist = float(np.linalg.norm(diff))
    radius = np.sqrt(2.0 * kappa) * adv.sigma
    if dist <= radius:
        return adv
    out = adv.copy()
    if radius == 0.0:
        out.mean = adv.mean0.copy()
    else:
        out.mean = adv.mean0 + (radius / dist) * diff
    return out


def rpdro_batch_weights(f_values: np.ndarray) -> np.ndarray:
    """Minibatch-normalized ratios: a stable softmax of the raw scores."""
    f = np.asarray(f_values, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("f values must be finite")
    return softmax(f)


def rpdro_objective(
    losses: np.ndarray, f_values: np.ndarray, tau: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Batch-level-normalized game objective.

    Returns (objective, model-side weights r_tilde, d objective / d f).
    The KL penalty sum r log(n r) is shifted to be 0 at uniform weights;
    the shift is constant per batch and leaves all gradients unchanged.
    """
    losses = np.asarray(losses, dtype=float)
    r = rpdro_batch_weights(f_values)
    n = len(r)
    if len(losses) != n:
        raise ValueError("losses and f_values must have the same length")
    nonzero = r > 0
    log_nr = np.zeros(n)
    log_nr[nonzero] = np.log(n * r[nonzero])
    kl_term = float(np.sum(r * log_nr))
    objective = float(np.sum(r * losses)) - tau * kl_term
    # d objective / d f through the softmax
    a = losses - tau * (log_nr + 1.0)
    dobj_df = r * (a - np.sum(r * a))
    return objective, r, dobj_df


def rpdro_selfnorm_objective(
    losses: np.ndarray, f_values: np.ndarray, tau: float, beta: float
) -> Tuple[float, np.ndarray]:
    """Self-normalized game objective with a squared log-normalizer penalty.

    mean(r * loss) - tau * mean(r log r) - beta * log(mean r)^2 with raw
    ratios r = exp(f). Returns (objective, d objective / d f).
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    losses = np.asarray(losses, dtype=float)
    f = np.asarray(f_values, dtype=float)
    n = len(f)
    r = np.exp(f)
    mean_r = r.mean()
    log_z = np.log(mean_r)
    objective = float(np.mean(r * losses) - tau * np.mean(r * f) - beta * log_z ** 2)
    dobj_df = (
        r * losses / n
        - tau * r * (f + 1.0) / n
        - beta * 2.0 * log_z * (r / n) / mean_r
    )
    return objective, dobj_df


def simultaneous_step(
    model: ModelState,
    adversary,
    batch: Sequence[Example],
    config: DroConfig,
    normalizer: Optional[RunningNormalizer] = None,
):
    """One simultaneous update: both gradients use the same pre-update state.

    Returns (model', adversary', normalizer'). The adversary ascends while
    the model descends; config.adv_steps_per_model_step extra adversary
    updates reuse the same batch with refreshed scores.
    """
    if config.method not in ("pdro", "rpdro"):
        raise ValueError(f"simultaneous_step does not handle {config.method!r}")
    losses = nll_loss_batch(model, batch)
    n = len(batch)

    if config.method == "pdro":
        weights = pdro_model_weights(adversary, batch)
        model_grad = grad_params(model, batch, weights / n)
        new_adv = adversary
        new_norm = normalizer
        for _ in range(config.adv_steps_per_model_step):
            if config.reverse_kl:
                new_norm = normalizer_update(new_norm, losses, config.tau)
                new_adv = pdro_adv_step(
                    new_adv, batch, losses, config.tau, new_norm, config.adv_lr
                )
            else:
                new_adv = pdro_adv_step_bare(new_adv, batch, losses, config.adv_lr)
            if config.project:
                new_adv = gaussian_kl_project(new_adv, config.kappa)
    else:
        f = adversary.f_values(batch)
        if config.norm_mode == "batch_level":
            _, weights, dobj_df = rpdro_objective(losses, f, config.tau)
            model_grad = grad_params(model, batch, weights)
        else:
            _, dobj_df = rpdro_selfnorm_objective(
                losses, f, config.tau, config.beta_selfnorm
            )
            weights = np.clip(np.exp(f), 0.0, WEIGHT_CLIP)
            model_grad = grad_params(model, batch, weights / n)
        new_adv = adversary.copy()
        new_adv.scorer.params += config.adv_lr * adversary.grad_f(batch, dobj_df)
        for _ in range(config.adv_steps_per_model_step - 1):
            f = new_adv.f_values(batch)
            if config.norm_mode == "batch_level":
                _, _, dobj_df = rpdro_objective(losses, f, config.tau)
            else:
                _, dobj_df = rpdro_selfnorm_objective(
                    losses, f, config.tau, config.beta_selfnorm
                )
            new_adv.scorer.params += config.adv_lr * new_adv.grad_f(batch, dobj_df)
        new_norm = normalizer

    new_model = model.copy()
    if config.lr > 0:
        new_model.params -= config.lr * model_grad
    return new_model, new_adv, new_norm
