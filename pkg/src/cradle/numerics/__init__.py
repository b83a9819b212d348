from . import autodiff
from .autodiff import Tensor, UnsupportedPrimitive, grad
from .distributions import (
    GaussianParams,
    bernoulli_kl,
    gamma_poisson_log_prob,
    gamma_poisson_sample,
    normal_kl,
    normal_rsample,
    relaxed_bernoulli_rsample,
)
from .nn import AdamState, MlpSpec, NonFiniteGradient, adam_step, init_mlp, mlp_forward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
