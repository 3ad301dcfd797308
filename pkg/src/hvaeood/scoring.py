"""Likelihood-ratio OOD scores over datasets, k selection, and diagnostics.

The headline score of an example is LLR_k = elbo - gt_k: how much worse the
partial-proposal bound explains the input than the full posterior bound.
Both bounds of an example share the same posterior noise draws (common
random numbers), which makes their difference a low-variance estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .metrics import auroc
from .model import BoundNoise, HvaeModel, bound_gt_k, bound_lt_l, draw_bound_noise, elbo
from .rng import STREAM_SCORE, substream


class LengthMismatch(ValueError):
    """Operands cover different numbers of examples."""


class EmptyTable(ValueError):
    """A score table with no rows cannot be summarized."""


class InsufficientReference(ValueError):
    """Too few reference rows to build an empirical-quantile rule."""


@dataclass
class ScoreTable:
    """Per-example bound values and LLR scores for one dataset."""

    dataset: str
    S: int
    seed: int
    indices: np.ndarray
    elbo: np.ndarray
    gt: dict  # k -> [N]
    lt: dict  # l -> [N]
    llr: dict  # k -> [N]

    @property
    def num_rows(self) -> int:
        return self.elbo.shape[0]

    def recompute_check(self, tol: float = 0.0) -> bool:
        """Audit the stored identity llr_k = elbo - gt_k on every row."""
        for k, values in self.llr.items():
            if np.max(np.abs(values - (self.elbo - self.gt[k]))) > tol:
                return False
        return True

    def columns(self):
        cols = ["dataset", "index", "S", "seed", "elbo"]
        cols += [f"gt_{k}" for k in sorted(self.gt)]
        cols += [f"lt_{l}" for l in sorted(self.lt)]
        cols += [f"llr_{k}" for k in sorted(self.llr)]
        return cols

    def to_csv(self, path, header_lines=()) -> None:
        lines = list(header_lines)
        lines.append(",".join(self.columns()))
        gt_ks = sorted(self.gt)
        lt_ls = sorted(self.lt)
        for row in range(self.num_rows):
            cells = [
                self.dataset,
                str(int(self.indices[row])),
                str(self.S),
                str(self.seed),
                f"{self.elbo[row]:.17g}",
            ]
            cells += [f"{self.gt[k][row]:.17g}" for k in gt_ks]
            cells += [f"{self.lt[l][row]:.17g}" for l in lt_ls]
            cells += [f"{self.llr[k][row]:.17g}" for k in gt_ks]
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
        header = lines[0].split(",")
        rows = [ln.split(",") for ln in lines[1:] if ln]
        if not rows:
            raise EmptyTable(f"{path}: no data rows")
        col = {name: i for i, name in enumerate(header)}
        gt_ks = sorted(int(c[3:]) for c in header if c.startswith("gt_"))
        lt_ls = sorted(int(c[3:]) for c in header if c.startswith("lt_"))
        llr_ks = sorted(int(c[4:]) for c in header if c.startswith("llr_"))
        return cls(
            dataset=rows[0][col["dataset"]],
            S=int(rows[0][col["S"]]),
            seed=int(rows[0][col["seed"]]),
            indices=np.array([int(r[col["index"]]) for r in rows]),
            elbo=np.array([float(r[col["elbo"]]) for r in rows]),
            gt={k: np.array([float(r[col[f"gt_{k}"]]) for r in rows]) for k in gt_ks},
            lt={l: np.array([float(r[col[f"lt_{l}"]]) for r in rows]) for l in lt_ls},
            llr={k: np.array([float(r[col[f"llr_{k}"]]) for r in rows]) for k in llr_ks},
        )


def _per_example_noise(model: HvaeModel, seed: int, indices, S: int) -> BoundNoise:
    """Noise drawn per example from substream (seed, score, index).

    Row blocks of S replicates per example are stacked in index order, so the
    result is independent of how examples are batched or sharded.
    """
    dims = model.config.latent_dims
    posterior = [np.empty((len(indices) * S, d)) for d in dims]
    prior = [np.empty((len(indices) * S, d)) for d in dims]
    for row, example_index in enumerate(indices):
        rng = substream(seed, STREAM_SCORE, int(example_index))
        lo, hi = row * S, (row + 1) * S
        for j, d in enumerate(dims):
            posterior[j][lo:hi] = rng.standard_normal((S, d))
        for j, d in enumerate(dims):
            prior[j][lo:hi] = rng.standard_normal((S, d))
    return BoundNoise(posterior=posterior, prior=prior)


def score_dataset(
    model: HvaeModel,
    data: np.ndarray,
    ks,
    S: int = 1,
    seed: int = 0,
    dataset_name: str = "dataset",
    ls=(),
    indices=None,
    batch_rows: int = 2048,
) -> ScoreTable:
    """Score every example: ELBO, requested bounds, and LLR columns.

    `data` is a binarized [N, D] array. The ELBO and every gt_k bound of an
    example share posterior noise; prior-chain draws are shared across k.
    """
    n = data.shape[0]
    if indices is None:
        indices = np.arange(n)
    ks = sorted(int(k) for k in ks)
    ls = sorted(int(l) for l in ls)
    elbo_vals = np.empty(n)
    gt_vals = {k: np.empty(n) for k in ks}
    lt_vals = {l: np.empty(n) for l in ls}
    block = max(1, batch_rows // S)
    with no_grad():
        for start in range(0, n, block):
            stop = min(start + block, n)
            x = data[start:stop]
            noise = _per_example_noise(model, seed, indices[start:stop], S)
            elbo_vals[start:stop] = elbo(model, x, S=S, noise=noise).per_example_value
            for k in ks:
                gt_vals[k][start:stop] = bound_gt_k(
                    model, x, k, S=S, noise=noise
                ).per_example_value
            for l in ls:
                lt_vals[l][start:stop] = bound_lt_l(
                    model, x, l, S=S, noise=noise
                ).per_example_value
    llr_vals = {k: elbo_vals - gt_vals[k] for k in ks}
    return ScoreTable(
        dataset=dataset_name,
        S=S,
        seed=seed,
        indices=np.asarray(indices),
        elbo=elbo_vals,
        gt=gt_vals,
        lt=lt_vals,
        llr=llr_vals,
    )


def llr_generalized(elbo_lt_l, gt_k) -> np.ndarray:
    """Generalized ratio: how much better the low-level bound explains the data.

    Arguments are BoundResults (or raw value arrays) for L_lt_l and L_gt_k on
    the same examples with the same seed discipline.
    """
    a = elbo_lt_l.per_example_value if hasattr(elbo_lt_l, "per_example_value") else np.asarray(elbo_lt_l)
    b = gt_k.per_example_value if hasattr(gt_k, "per_example_value") else np.asarray(gt_k)
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(f"{a.shape[0]} vs {b.shape[0]} examples")
    return a - b


def select_k(in_table: ScoreTable, out_table: ScoreTable):
    """Pick the k whose LLR separates the pair best (ties -> smaller k).

    Returns (k_star, {k: auroc}). OOD rows are the positive class; higher LLR
    means more OOD, so the LLR columns are used as-is.
    """
    if in_table.num_rows == 0 or out_table.num_rows == 0:
        raise EmptyTable("select_k requires nonempty tables")
    common = sorted(set(in_table.llr) & set(out_table.llr))
    if not common:
        raise EmptyTable("tables share no llr columns")
    per_k = {}
    for k in common:
        per_k[k] = auroc(out_table.llr[k], in_table.llr[k])
    k_star = max(common, key=lambda k: (per_k[k], -k))
    return k_star, per_k


@dataclass
class ThresholdRule:
    """Per-k empirical reference distribution of in-distribution LLR scores."""

    references: dict  # k -> sorted reference values
    flag_quantile: float
    thresholds: dict = field(init=False)

    def __post_init__(self):
        self.thresholds = {
            k: float(np.quantile(ref, self.flag_quantile, method="higher"))
            for k, ref in self.references.items()
        }

    def classify(self, row: dict):
        """Flag a row of {k: llr value}; returns (is_ood, most_deviant_k).

        A row is OOD if any k exceeds that k's reference quantile; among
        flagging k's the one with the largest empirical-CDF exceedance wins
        (rank-based, so differently scaled k's are comparable).
        """
        best_k = None
        best_exceedance = 0.0
        for k, value in row.items():
            ref = self.references[k]
            if value <= self.thresholds[k]:
                continue
            cdf = np.searchsorted(ref, value, side="right") / ref.size
            exceedance = cdf - self.flag_quantile
            if best_k is None or exceedance > best_exceedance:
                best_k = k
                best_exceedance = exceedance
        return best_k is not None, best_k


def threshold_rule(in_table: ScoreTable, flag_quantile: float = 0.95) -> ThresholdRule:
    """Build the deployment-time flagging rule from in-distribution scores."""
    if in_table.num_rows < 100:
        raise InsufficientReference(
            f"need >= 100 reference rows, got {in_table.num_rows}"
        )
    references = {k: np.sort(v) for k, v in in_table.llr.items()}
    return ThresholdRule(references=references, flag_quantile=flag_quantile)


@dataclass
class VarianceReport:
    var_elbo: float
    var_gt: float
    var_llr: float
    cov: float
    replicates_elbo: np.ndarray
    replicates_gt: np.ndarray

    def identity_gap(self) -> float:
        """Normalized |var_llr - (var_elbo + var_gt - 2 cov)|; rounding-level."""
        gap = abs(self.var_llr - (self.var_elbo + self.var_gt - 2.0 * self.cov))
        return gap / max(1.0, self.var_elbo + self.var_gt)


def estimator_variance(
    model: HvaeModel,
    x: np.ndarray,
    k: int,
    S: int = 1,
    repeats: int = 100,
    noise_mode: str = "shared",
    rng=None,
) -> VarianceReport:
    """Replicate the two bound estimators R times and decompose Var(LLR).

    With noise_mode="shared" each replicate pair reuses the same posterior
    draws (the scoring discipline); "independent" draws them separately.
    """
    if repeats < 100:
        raise ValueError("need at least 100 replicates")
    if noise_mode not in ("shared", "independent"):
        raise ValueError("noise_mode must be 'shared' or 'independent'")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] != 1:
        raise ValueError("estimator_variance expects a single-example batch")
    x_rep = np.repeat(x, repeats, axis=0)
    with no_grad():
        noise_a = draw_bound_noise(model, repeats * S, rng)
        elbo_reps = _replicate_values(elbo(model, x_rep, S=S, noise=noise_a), repeats)
        noise_use = noise_a if noise_mode == "shared" else draw_bound_noise(model, repeats * S, rng)
        gt_reps = _replicate_values(
            bound_gt_k(model, x_rep, k, S=S, noise=noise_use), repeats
        )
    llr_reps = elbo_reps - gt_reps
    cov_matrix = np.cov(np.stack([elbo_reps, gt_reps]), ddof=1)
    return VarianceReport(
        var_elbo=float(cov_matrix[0, 0]),
        var_gt=float(cov_matrix[1, 1]),
        var_llr=float(np.var(llr_reps, ddof=1)),
        cov=float(cov_matrix[0, 1]),
        replicates_elbo=elbo_reps,
        replicates_gt=gt_reps,
    )


def _replicate_values(result, repeats: int) -> np.ndarray:
    values = result.per_example_value
    if values.shape[0] != repeats:
        raise ValueError("unexpected replicate count")
    return values
