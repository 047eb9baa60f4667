"""Diagonal Gaussian posterior and the discretized logistic pixel likelihood."""
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeMismatch

LOG_VARIANCE_RANGE = (-10.0, 10.0)
SCALE_FLOOR = 1e-7
_LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class QuantizationSpec:
    """``levels`` colour levels over [0, 255], each ``bin_width = 256 / levels`` wide."""

    levels: int = 256

    def __post_init__(self):
        b = self.levels
        if not (2 <= b <= 256) or b & (b - 1):
            raise ValueError(f"levels must be a power of two in [2, 256], got {b}")

    @property
    def bin_width(self) -> int:
        return 256 // self.levels

    def quantize(self, values: np.ndarray) -> np.ndarray:
        c = self.bin_width
        return (np.floor(np.asarray(values) / c) * c).astype(np.asarray(values).dtype)


@dataclass
class PosteriorParams:
    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeMismatch("posterior mean and log-variance shapes differ")

    @classmethod
    def from_raw(cls, mean, raw_log_variance) -> "PosteriorParams":
        """Build from network outputs, clamping the log-variance."""
        return cls(ad.as_tensor(mean), ad.clip(raw_log_variance, *LOG_VARIANCE_RANGE))

    @property
    def std(self) -> Tensor:
        return ad.exp(self.log_variance * 0.5)


@dataclass
class DiscretizedLogisticParams:
    """Logistic location ``mu`` (pixel-value units) and pre-softplus scale ``raw_scale``.

    ``raw_scale`` may be per pixel or broadcastable against ``mu`` (one value
    per channel for the factored decoder).
    """

    mu: Tensor
    raw_scale: Tensor
    quantization: QuantizationSpec = QuantizationSpec()

    @property
    def scale(self) -> Tensor:
        return ad.softplus(self.raw_scale) + SCALE_FLOOR


def gaussian_kl(post: PosteriorParams) -> Tensor:
    """KL(q || N(0, I)) summed over the trailing latent axis."""
    mean, log_var = post.mean, post.log_variance
    per_dim = (mean * mean + ad.exp(log_var) - 1.0 - log_var) * 0.5
    return ad.sum_(per_dim, axis=-1)


def gaussian_rsample(post: PosteriorParams, noise) -> Tensor:
    """Reparameterized draw ``mean + std * noise``."""
    noise = ad.as_tensor(noise, like=post.mean)
    if noise.shape != post.mean.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} differs from mean shape {post.mean.shape}")
    return post.mean + post.std * noise


def gaussian_log_density(z, post: PosteriorParams) -> Tensor:
    """log q(z) under the diagonal Gaussian, summed over the latent axis."""
    diff = z - post.mean
    per_dim = post.log_variance + diff * diff / ad.exp(post.log_variance) + _LOG_2PI
    return ad.sum_(per_dim, axis=-1) * -0.5


def standard_normal_log_density(z) -> Tensor:
    z = ad.as_tensor(z)
    return ad.sum_(z * z + _LOG_2PI, axis=-1) * -0.5


def _check_pixels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if np.any(y < 0) or np.any(y > 255):
        raise DomainError("pixel values must lie in [0, 255]")
    return y


def disc_logistic_logprob(y, params: DiscretizedLogisticParams) -> Tensor:
    """Elementwise log-mass of the colour bin that contains ``y``.

    The bin for level ``k`` spans ``[k c, (k + 1) c)``. The bottom bin absorbs
    the lower tail and the top bin the upper tail, so the masses over all
    levels sum to one. For interior bins the log of ``sigmoid(a) - sigmoid(b)``
    is evaluated as ``log sigmoid(a) - softplus(b) + log(1 - exp(b - a))``,
    which stays finite for tiny masses.
    """
    y = _check_pixels(y)
    q = params.quantization
    c = q.bin_width
    mu = params.mu
    dtype = mu.dtype
    level = np.floor(y / c)
    lower = (level * c).astype(dtype)
    upper = lower + dtype.type(c)
    bottom = (level == 0).astype(dtype)
    top = (level == q.levels - 1).astype(dtype)
    interior = (1 - bottom) * (1 - top)

    scale = params.scale
    a = (upper - mu) / scale
    b = (lower - mu) / scale
    log_cdf_upper = -ad.softplus(-a)
    log_survival_lower = -ad.softplus(b)
    gap = ad.log1mexp(b - a)
    return log_cdf_upper * (1 - top) + log_survival_lower * (1 - bottom) + gap * interior


def bin_log_masses(params: DiscretizedLogisticParams) -> np.ndarray:
    """Log-mass of every level, stacked on a new trailing axis (no gradient)."""
    q = params.quantization
    with ad.no_grad():
        mu = params.mu
        shape = np.broadcast_shapes(mu.shape, params.raw_scale.shape)
        mu = ad.broadcast_to(mu, shape)
        raw = ad.broadcast_to(params.raw_scale, shape)
        out = []
        for k in range(q.levels):
            y = np.full(shape, k * q.bin_width, dtype=np.float64)
            out.append(disc_logistic_logprob(y, DiscretizedLogisticParams(mu, raw, q)).data)
    return np.stack(out, axis=-1)


def disc_logistic_sample(params: DiscretizedLogisticParams, u: Union[np.ndarray, float],
                         temperature: float = 1.0) -> np.ndarray:
    """Inverse-CDF draw, clamped to [0, 255] and snapped to the level grid."""
    mu = np.asarray(params.mu.data, dtype=np.float64)
    scale = np.asarray(params.scale.data, dtype=np.float64) * temperature
    u = np.asarray(u, dtype=np.float64)
    x = mu + scale * (np.log(u) - np.log1p(-u))
    x = np.clip(x, 0.0, 255.0)
    return params.quantization.quantize(x)
