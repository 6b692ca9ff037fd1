"""Learned augmented residual layers on a small float64 autodiff core."""

from laurel.data import (
    Dataset,
    gaussian_mixture_splits,
    gen_gaussian_mixture,
    gen_spirals,
    load_idx,
)
from laurel.layers import (
    LRParams,
    PAParams,
    ResidualParams,
    ResidualStream,
    RWParams,
    Variant,
    apply_residual,
    init_params,
    lr_combine,
    pa_combine,
    param_count,
    rw_combine,
)
from laurel.model import (
    Model,
    ModelConfig,
    build,
    count_params,
    forward,
    load_checkpoint,
    naive_scale,
    save_checkpoint,
)
from laurel.tensor import Tensor, backward, finite_diff_grad
from laurel.training import TrainConfig, run_trial, run_trials

__version__ = "0.1.0"
