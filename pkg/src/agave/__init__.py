"""Hybrid latent-variable image model: a VAE whose factored decoder reconstructs
an auxiliary image, paired with a masked-convolution autoregressive decoder
conditioned on the VAE's output, all on a small reverse-mode autodiff core."""
from .autodiff import Tensor, backward, grad_check, no_grad, precision
from .config import RunConfig, build_config, load_config
from .estimator import AgaveEstimator
from .model import AgaveModel, FactoredVAE, ModelConfig
from .nn import Adamax, MaskSpec, ParameterStore, adamax_step
from .objectives import agave_loss, bpd, code_length_report, elbo, evaluate, iwae_bound

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad", "precision",
    "RunConfig", "build_config", "load_config",
    "AgaveEstimator", "AgaveModel", "FactoredVAE", "ModelConfig",
    "Adamax", "MaskSpec", "ParameterStore", "adamax_step",
    "agave_loss", "bpd", "code_length_report", "elbo", "evaluate", "iwae_bound",
]
