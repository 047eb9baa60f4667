"""Training objective, likelihood bounds, bits-per-dimension and code lengths.

Models plug into the bounds through two methods:

``log_weights(x, noise)``
    per-example ``log p(x, z) - log q(z | x)`` with ``z`` drawn from ``noise``.
``code_length_terms(x, y, noise)``
    per-example arrays ``kl``, ``aux_nll`` and ``primary_nll`` (nats).

Both :class:`~agave.model.AgaveModel` and the toy models in :mod:`agave.toy`
implement them.
"""
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import gaussian_kl, gaussian_rsample
from .errors import DomainError, ShapeMismatch

LN2 = math.log(2.0)


@dataclass
class ObjectiveReport:
    """Batch-averaged terms of the training loss, in nats per example.

    ``primary_reconstruction`` and ``auxiliary_reconstruction`` are
    log-likelihoods; ``total = -primary - auxiliary + lam * kl`` is minimized.
    """

    primary_reconstruction: Tensor
    auxiliary_reconstruction: Tensor
    kl: Tensor
    lam: float
    total: Tensor

    def as_dict(self) -> Dict[str, float]:
        return {
            "primary": float(self.primary_reconstruction.data),
            "aux": float(self.auxiliary_reconstruction.data),
            "kl": float(self.kl.data),
            "lambda": float(self.lam),
            "total": float(self.total.data),
        }


@dataclass
class CodeLengthReport:
    c_vae: float
    c_agave: float
    kl_term: float
    aux_nll: float
    primary_nll: float
    h_x_given_z: Optional[float] = None


@dataclass
class EvalReport:
    bpd: float
    nll_nats: float
    bound_type: str

    def to_line(self) -> str:
        return f"bound={self.bound_type} nll_nats={self.nll_nats:.6f} bpd={self.bpd:.6f}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def agave_loss(x, y, model, lam: float, noise, use_primary: bool = True, use_aux: bool = True) -> ObjectiveReport:
    """Batch-mean of ``-primary - auxiliary + lam * KL`` with one posterior sample.

    ``use_aux=False`` gives the plain autoregressive-decoder bound (the
    ablation objective); ``use_primary=False`` gives the factored VAE bound on y.
    """
    post = model.encode(x)
    noise = ad.as_tensor(noise, like=post.mean)
    if noise.shape != post.mean.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} differs from posterior shape {post.mean.shape}")
    z = gaussian_rsample(post, noise)
    aux = model.aux_decode(z)
    zero = Tensor(np.zeros((), dtype=post.mean.dtype))
    kl = ad.mean(gaussian_kl(post))
    primary = aux_term = zero
    if use_primary:
        primary = ad.mean(model.primary_log_likelihood(x, model.ar_decode(x, aux.f_z)))
    if use_aux:
        aux_term = ad.mean(model.aux_log_likelihood(y, aux))
    total = -primary - aux_term + kl * lam
    return ObjectiveReport(primary, aux_term, kl, lam, total)


def vae_loss(y, model, lam: float, noise, x=None) -> ObjectiveReport:
    """Auxiliary-only bound used to pretrain the encoder and factored decoder."""
    return agave_loss(x if x is not None else y, y, model, lam, noise, use_primary=False)


def teacher_forced_loss(x, y, model) -> Tensor:
    """Mean negative log-likelihood of the autoregressive decoder conditioned on true y."""
    params = model.ar_decode(x, model.teacher_conditioning(y))
    return -ad.mean(model.primary_log_likelihood(x, params))


def iwae_bound(x, model, K: int, noise_block) -> Tensor:
    """Per-example importance-weighted bound ``log mean_k exp(log w_k)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    noise_block = np.asarray(noise_block)
    if noise_block.shape[0] != K:
        raise ShapeMismatch(f"noise block holds {noise_block.shape[0]} draws, expected {K}")
    weights = [ad.reshape(model.log_weights(x, noise_block[k]), (1, -1)) for k in range(K)]
    stacked = ad.concat(weights, axis=0)
    return ad.logsumexp(stacked, axis=0) - math.log(K)


def elbo(x, model, noise) -> Tensor:
    """Single-sample evidence lower bound (identical to the K = 1 importance bound)."""
    return iwae_bound(x, model, 1, np.asarray(noise)[None])


def bpd(nll_nats, dims: int):
    """Negative log-likelihood in nats converted to bits per dimension."""
    if dims <= 0:
        raise DomainError("dims must be positive")
    return np.asarray(nll_nats) / (dims * LN2) if np.ndim(nll_nats) else float(nll_nats) / (dims * LN2)


def evaluate(model, x, rng: np.random.Generator, K: int = 1, batch_size: int = 50) -> EvalReport:
    """Dataset-average bound converted to bits per dimension."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            chunk = x[start:start + batch_size]
            noise = model.latent_noise(rng, len(chunk), samples=K)
            total += float(np.sum(iwae_bound(chunk, model, K, noise).data, dtype=np.float64))
    nll = -total / len(x)
    return EvalReport(bpd(nll, model.config.dims), nll, "elbo" if K == 1 else f"iwae-{K}")


def code_length_report(model, x, y=None, noise=None) -> CodeLengthReport:
    """Average code lengths of the auxiliary message and the full two-part message."""
    y = x if y is None else y
    terms = model.code_length_terms(x, y, noise)
    kl = float(np.mean(terms["kl"]))
    aux_nll = float(np.mean(terms["aux_nll"]))
    primary_nll = float(np.mean(terms["primary_nll"]))
    c_vae = kl + aux_nll
    entropy = getattr(model, "conditional_entropy", None)
    return CodeLengthReport(
        c_vae=c_vae,
        c_agave=c_vae + primary_nll,
        kl_term=kl,
        aux_nll=aux_nll,
        primary_nll=primary_nll,
        h_x_given_z=entropy() if callable(entropy) else None,
    )


def posterior_kl(model, x) -> np.ndarray:
    """Per-example analytic KL(q(z|x) || p(z)) of a Gaussian-posterior model."""
    with ad.no_grad():
        return gaussian_kl(model.encode(x)).data.astype(np.float64)
