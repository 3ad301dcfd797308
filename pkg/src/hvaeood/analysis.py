"""Why low layers dominate: Gaussian-Jacobian volume analysis, plus
cross-model feature correlations.

For a layer map with a Gaussian random Jacobian J (tall, d_in rows > d_out
columns, entries N(0, sigma^2)), J'J is Wishart and the expected inverse
volume change E[(det J'J)^(-1/2)] has a closed form in gamma functions. It
decays super-exponentially in d_in at a fixed dimension gap, which is why
high-dimensional (low) layers dominate likelihoods in bottleneck models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Arguments outside the domain of the closed form."""


class NumericalInstability(RuntimeError):
    """A sampled Gram matrix was not numerically positive definite."""


@dataclass
class JacobianLayerSpec:
    """Dimensions and entry scale of one Gaussian random Jacobian."""

    d_in: int
    d_out: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.d_out < 1 or self.d_in <= self.d_out:
            raise DomainError("requires d_in > d_out >= 1")
        if self.sigma <= 0:
            raise DomainError("sigma must be positive")


def log_multivariate_gamma(d: int, a: float) -> float:
    """log Gamma_d(a) = d(d-1)/4 * log(pi) + sum_j log Gamma(a + (1-j)/2)."""
    if d < 1:
        raise DomainError("d must be >= 1")
    if a <= (d - 1) / 2.0:
        raise DomainError(f"need a > (d-1)/2, got a={a}, d={d}")
    total = d * (d - 1) / 4.0 * math.log(math.pi)
    for j in range(1, d + 1):
        total += math.lgamma(a + (1 - j) / 2.0)
    return total


def expected_inverse_volume(spec: JacobianLayerSpec) -> float:
    """log E[(det J'J)^(-1/2)] for J with i.i.d. N(0, sigma^2) entries.

    Telescoped form: -d_out log(sigma) - (d_out/2) log 2
                     + log Gamma((d_in - d_out)/2) - log Gamma(d_in/2).
    """
    return (
        -spec.d_out * math.log(spec.sigma)
        - spec.d_out / 2.0 * math.log(2.0)
        + math.lgamma((spec.d_in - spec.d_out) / 2.0)
        - math.lgamma(spec.d_in / 2.0)
    )


def mc_inverse_volume(spec: JacobianLayerSpec, samples: int, rng: np.random.Generator):
    """Monte-Carlo oracle for `expected_inverse_volume`.

    Draws J as a tall d_in x d_out Gaussian matrix and averages
    (det J'J)^(-1/2), computed from a QR factorization for stability.
    Returns (mean, standard error).
    """
    if samples < 1000:
        raise ValueError("use at least 1e3 samples")
    if spec.d_in > 12:
        raise ValueError("MC oracle supports d_in <= 12")
    values = np.empty(samples)
    block = 4096
    done = 0
    while done < samples:
        count = min(block, samples - done)
        mats = rng.normal(0.0, spec.sigma, size=(count, spec.d_in, spec.d_out))
        # det(J'J)^(1/2) equals |prod of R's diagonal| from J = QR.
        rs = np.linalg.qr(mats, mode="r")
        diags = np.abs(np.diagonal(rs, axis1=1, axis2=2))
        if np.any(diags <= 0):
            raise NumericalInstability("rank-deficient sample encountered")
        values[done : done + count] = np.exp(-np.log(diags).sum(axis=1))
        done += count
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(samples))
    return mean, se


def dimension_sweep(gap: int, d_range, sigma: float = 1.0):
    """Closed-form log values over d_in in `d_range` at a fixed gap.

    Returns a list of (d_in, d_out, sigma, log_value) rows, asserting the
    decay is strictly monotone.
    """
    rows = []
    prev = None
    for d_in in d_range:
        spec = JacobianLayerSpec(d_in=int(d_in), d_out=int(d_in) - gap, sigma=sigma)
        value = expected_inverse_volume(spec)
        if prev is not None and value >= prev:
            raise AssertionError("expected strictly decreasing log values")
        rows.append((spec.d_in, spec.d_out, sigma, value))
        prev = value
    return rows


def sweep_to_csv(rows, path, header_lines=()) -> None:
    lines = list(header_lines) + ["d_in,d_out,sigma,log_expected_inverse_volume"]
    for d_in, d_out, sigma, value in rows:
        lines.append(f"{d_in},{d_out},{sigma:.17g},{value:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class CorrelationMap:
    """Absolute Pearson correlations between two layers' units."""

    layer_a: int
    layer_b: int
    matrix: np.ndarray  # [dim_a, dim_b] in [0, 1]
    mask: np.ndarray  # True where either unit had zero variance

    def block_mean(self) -> float:
        return float(self.matrix.mean())

    def to_csv(self, path, header_lines=()) -> None:
        lines = list(header_lines)
        for row in self.matrix:
            lines.append(",".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _inference_means(model, data: np.ndarray) -> list:
    """Posterior means per layer along the mode-forwarded deterministic path."""
    from .autodiff import Tensor, no_grad
    from .model import inference_pass

    L = model.config.num_layers
    with no_grad():
        records = inference_pass(model, Tensor(data), L, [None] * L)
    return [rec.params.mean.data.copy() for rec in records]


def cross_model_correlation(model_a, model_b, data: np.ndarray) -> list:
    """Correlate the two models' per-layer representations of the same batch.

    `data` is a binarized [N, D] batch (shared binarization seed for both
    models). Representations are posterior means from the deterministic
    mode-forwarded pass. Units with zero variance get correlation 0 and are
    marked in the mask. Returns a CorrelationMap per (layer_a, layer_b) pair.
    """
    if data.shape[0] < 2:
        raise ValueError("need at least 2 examples to correlate")
    means_a = _inference_means(model_a, data)
    means_b = _inference_means(model_b, data)
    maps = []
    for ia, rep_a in enumerate(means_a, start=1):
        for ib, rep_b in enumerate(means_b, start=1):
            matrix, mask = _abs_correlation(rep_a, rep_b)
            maps.append(CorrelationMap(layer_a=ia, layer_b=ib, matrix=matrix, mask=mask))
    return maps


def _abs_correlation(a: np.ndarray, b: np.ndarray):
    a_center = a - a.mean(axis=0)
    b_center = b - b.mean(axis=0)
    a_norm = np.sqrt((a_center**2).sum(axis=0))
    b_norm = np.sqrt((b_center**2).sum(axis=0))
    dead_a = a_norm == 0
    dead_b = b_norm == 0
    a_norm = np.where(dead_a, 1.0, a_norm)
    b_norm = np.where(dead_b, 1.0, b_norm)
    corr = (a_center / a_norm).T @ (b_center / b_norm)
    mask = dead_a[:, None] | dead_b[None, :]
    corr = np.where(mask, 0.0, np.abs(corr))
    return np.clip(corr, 0.0, 1.0), mask
