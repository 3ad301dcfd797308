"""ELBO training loop with dynamic binarization, warmup, and free bits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data_io import IdxDataset, binarize_dynamic
from .distributions import BernoulliLikelihood, bernoulli_log_prob, free_bits_kl, gaussian_log_prob
from .model import HvaeConfig, HvaeModel, draw_bound_noise, generative_pass, inference_pass
from .optim import Adam
from .rng import STREAM_BINARIZE_TRAIN, STREAM_TRAIN, substream


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN or inf; message names the batch."""


@dataclass
class EpochStats:
    epoch: int
    elbo_nats: float
    bpd: float
    kl_per_layer: list
    lambda_effective: float
    warmup_beta: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, stats: EpochStats):
        self.epochs.append(stats)

    def to_csv(self, path) -> None:
        L = len(self.epochs[0].kl_per_layer) if self.epochs else 0
        kl_cols = ",".join(f"kl_z{i + 1}" for i in range(L))
        lines = [f"epoch,elbo_nats,bpd,{kl_cols},lambda_effective,warmup_beta"]
        for s in self.epochs:
            kls = ",".join(f"{v:.17g}" for v in s.kl_per_layer)
            lines.append(
                f"{s.epoch},{s.elbo_nats:.17g},{s.bpd:.17g},{kls},"
                f"{s.lambda_effective:.17g},{s.warmup_beta:.17g}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def warmup_beta(epoch: int, warmup_epochs: int) -> float:
    """KL weight annealed 0 -> 1 linearly over the warmup period."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warmup_epochs)


def training_step(model: HvaeModel, batch: np.ndarray, beta: float, epoch: int, rng):
    """One objective evaluation; returns (loss Tensor, elbo estimate, kl list)."""
    cfg = model.config
    noise = draw_bound_noise(model, batch.shape[0], rng)
    x_t = Tensor(batch)
    inf_records = inference_pass(model, x_t, 0, noise.posterior)
    given = [rec.sample for rec in inf_records]
    gen_records, logits = generative_pass(model, given, noise.prior)
    decoder_term = bernoulli_log_prob(BernoulliLikelihood(logits), batch).mean()
    kl_terms = []
    for i in range(1, cfg.num_layers + 1):
        z = inf_records[i - 1].sample
        log_p = gaussian_log_prob(gen_records[i - 1].params, z)
        log_q = gaussian_log_prob(inf_records[i - 1].params, z)
        kl_terms.append((log_q - log_p).mean())
    clamped = free_bits_kl(kl_terms, cfg.free_bits, epoch)
    kl_total = clamped[0]
    for term in clamped[1:]:
        kl_total = kl_total + term
    loss = -(decoder_term - beta * kl_total)
    elbo_estimate = float(decoder_term.data) - sum(float(t.data) for t in kl_terms)
    return loss, elbo_estimate, [float(t.data) for t in kl_terms]


def train(model: HvaeModel, dataset: IdxDataset, config: HvaeConfig | None = None,
          progress=None) -> TrainLog:
    """Optimize the ELBO on dynamically binarized data; returns the epoch log.

    Deterministic given config.seed: shuffling, binarization, and sampling all
    derive from named substreams of the root seed.
    """
    cfg = config or model.config
    rng_train = substream(cfg.seed, STREAM_TRAIN)
    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    n = dataset.num_examples
    d = dataset.pixel_dim
    log = TrainLog()
    for epoch in range(cfg.epochs):
        bin_rng = substream(cfg.seed, STREAM_BINARIZE_TRAIN, epoch)
        binarized = binarize_dynamic(
            dataset.images, bin_rng, seed_state=f"{cfg.seed}/binarize-train/{epoch}"
        )
        order = rng_train.permutation(n)
        beta = warmup_beta(epoch, cfg.warmup_epochs)
        elbo_sum = 0.0
        kl_sums = np.zeros(cfg.num_layers)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue  # data-dependent statistics need >= 2 rows
            batch = binarized.data[idx]
            loss, elbo_estimate, kls = training_step(model, batch, beta, epoch, rng_train)
            if not math.isfinite(float(loss.data)):
                raise NonFiniteLoss(
                    f"non-finite loss in epoch {epoch}, batch starting at {start}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            elbo_sum += elbo_estimate
            kl_sums += np.asarray(kls)
            batches += 1
        mean_elbo = elbo_sum / batches
        stats = EpochStats(
            epoch=epoch,
            elbo_nats=mean_elbo,
            bpd=-mean_elbo / (d * math.log(2.0)),
            kl_per_layer=list(kl_sums / batches),
            lambda_effective=cfg.free_bits.effective_lambda(epoch),
            warmup_beta=beta,
        )
        log.append(stats)
        if progress is not None:
            progress(stats)
    return log
