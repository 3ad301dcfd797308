"""Hierarchical VAE likelihood bounds and OOD likelihood-ratio scoring."""

from .analysis import (
    JacobianLayerSpec,
    cross_model_correlation,
    dimension_sweep,
    expected_inverse_volume,
    log_multivariate_gamma,
    mc_inverse_volume,
)
from .autodiff import Tensor, finite_diff_check, no_grad, softplus_beta
from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import (
    BinarizedBatch,
    IdxDataset,
    balanced_pair,
    binarize_dynamic,
    invert,
    load_idx,
    parse_idx,
    save_idx,
)
from .distributions import (
    BernoulliLikelihood,
    DiagGaussian,
    FreeBitsSchedule,
    bernoulli_log_prob,
    free_bits_kl,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_rsample,
)
from .layers import ResidualBlock, WeightNormDense
from .metrics import auprc, auroc, bits_per_dim, fpr_at_tpr, roc_curve
from .model import (
    BoundResult,
    HvaeConfig,
    HvaeModel,
    bound_gt_k,
    bound_lt_l,
    build,
    elbo,
    kl_decomposition,
    reconstruct,
)
from .optim import Adam, AdamState, adam_step
from .scoring import (
    ScoreTable,
    estimator_variance,
    llr_generalized,
    score_dataset,
    select_k,
    threshold_rule,
)
from .training import TrainLog, train

__version__ = "0.1.0"
