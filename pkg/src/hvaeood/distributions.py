"""Probability primitives: diagonal Gaussians, Bernoulli likelihood, free bits.

All density math runs on autodiff Tensors so gradients flow through training
objectives; under `no_grad()` the same functions serve as plain evaluators.
Log-variances are clamped to [-14, 14] where they are produced (model heads),
not here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch, Tensor, binary_cross_logits

LOG_2PI = math.log(2.0 * math.pi)


class NonBinaryInput(ValueError):
    """Bernoulli data must contain only 0s and 1s."""


class DiagGaussian:
    """Batch of diagonal Gaussians with mean and log-variance [B, d]."""

    def __init__(self, mean: Tensor, log_variance: Tensor):
        if mean.data.shape != log_variance.data.shape:
            raise ShapeMismatch(
                f"mean {mean.data.shape} vs log_variance {log_variance.data.shape}"
            )
        self.mean = mean
        self.log_variance = log_variance

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]

    @classmethod
    def standard(cls, batch: int, dim: int) -> "DiagGaussian":
        zeros = np.zeros((batch, dim))
        return cls(Tensor(zeros), Tensor(zeros.copy()))


def gaussian_log_prob(dist: DiagGaussian, z) -> Tensor:
    """Per-example log density, summed over the feature axis."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.shape != dist.mean.data.shape:
        raise ShapeMismatch(f"z {z.data.shape} vs mean {dist.mean.data.shape}")
    diff = z - dist.mean
    inv_var = (-dist.log_variance).exp()
    per_dim = dist.log_variance + diff * diff * inv_var + LOG_2PI
    return per_dim.sum(axis=-1) * (-0.5)


def gaussian_rsample(dist: DiagGaussian, rng: np.random.Generator, noise=None):
    """Reparameterized sample z = mean + std * eps; returns (z, eps).

    `noise` lets callers replay a previous draw (common random numbers);
    gradients flow to mean and log_variance only, never through eps.
    """
    if noise is None:
        noise = rng.standard_normal(dist.mean.data.shape)
    std = (dist.log_variance * 0.5).exp()
    z = dist.mean + std * Tensor(noise)
    return z, noise


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Analytic KL(q || p) per example for diagonal Gaussians."""
    if q.mean.data.shape != p.mean.data.shape:
        raise ShapeMismatch(f"q {q.mean.data.shape} vs p {p.mean.data.shape}")
    lvq, lvp = q.log_variance, p.log_variance
    var_ratio = (lvq - lvp).exp()
    diff = p.mean - q.mean
    per_dim = var_ratio + diff * diff * (-lvp).exp() - 1.0 + lvp - lvq
    return per_dim.sum(axis=-1) * 0.5


class BernoulliLikelihood:
    """Factorized Bernoulli over pixels, parameterized by logits [B, D]."""

    def __init__(self, logits: Tensor):
        self.logits = logits

    def mean(self) -> np.ndarray:
        return _np_sigmoid(self.logits.data)


def bernoulli_log_prob(lik: BernoulliLikelihood, x) -> Tensor:
    """Per-example log mass of binary data under the likelihood's logits.

    Kept in log-sigmoid form so saturated logits never produce -inf or NaN.
    """
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all((x_arr == 0.0) | (x_arr == 1.0)):
        raise NonBinaryInput("data must be exactly 0 or 1")
    return binary_cross_logits(lik.logits, x_arr).sum(axis=-1)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class FreeBitsSchedule:
    """KL floor lambda held constant, then annealed linearly to zero."""

    lambda_nats: float = 2.0
    constant_epochs: int = 20
    anneal_epochs: int = 20

    def effective_lambda(self, epoch: int) -> float:
        if epoch < self.constant_epochs:
            return self.lambda_nats
        into = epoch - self.constant_epochs
        if into < self.anneal_epochs:
            return self.lambda_nats * (1.0 - (into + 1) / self.anneal_epochs)
        return 0.0


def free_bits_kl(kl_per_layer, schedule: FreeBitsSchedule, epoch: int):
    """Clamp each layer's aggregate KL at the scheduled floor.

    One clamp per latent variable (shared across its dimensions). Input is a
    list of scalars or scalar Tensors; Tensors below the floor are replaced
    by the constant floor, which is exactly the subgradient of max(KL, lam).
    Training-objective use only; evaluation bounds are never clamped.
    """
    lam = schedule.effective_lambda(epoch)
    clamped = []
    for kl in kl_per_layer:
        value = float(kl.data) if isinstance(kl, Tensor) else float(kl)
        if value >= lam:
            clamped.append(kl)
        else:
            clamped.append(Tensor(lam) if isinstance(kl, Tensor) else lam)
    return clamped
