"""scikit-learn style wrapper around model construction, training and scoring."""
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from . import autodiff as ad
from .model import AgaveModel, ModelConfig
from .objectives import bpd, iwae_bound
from .training import Schedule, Trainer


class AgaveEstimator(TransformerMixin, BaseEstimator):
    """Fit the hybrid model to uint8 images of shape (n, 3, height, width).

    ``transform`` maps images to posterior means, ``inverse_transform`` maps
    latents to auxiliary renders, and ``score`` is the negated bits per
    dimension of the importance-weighted bound (higher is better).

    Examples
    --------
    >>> est = AgaveEstimator(vae_steps=10, ar_steps=10, joint_steps=10)
    >>> est.fit(images)                      # doctest: +SKIP
    >>> est.score(held_out)                  # doctest: +SKIP
    """

    def __init__(self, height: int = 8, width: int = 8, latent_dim: int = 32, ar_layers: int = 4,
                 ar_width: int = 32, aux_levels: int = 256, lam: float = 2.0, vae_steps: int = 500,
                 ar_steps: int = 500, joint_steps: int = 1000, batch_size: int = 32, lr: float = 0.002,
                 eval_samples: int = 1, random_state: Optional[int] = 0):
        self.height = height
        self.width = width
        self.latent_dim = latent_dim
        self.ar_layers = ar_layers
        self.ar_width = ar_width
        self.aux_levels = aux_levels
        self.lam = lam
        self.vae_steps = vae_steps
        self.ar_steps = ar_steps
        self.joint_steps = joint_steps
        self.batch_size = batch_size
        self.lr = lr
        self.eval_samples = eval_samples
        self.random_state = random_state

    def _config(self, seed: int) -> ModelConfig:
        return ModelConfig(height=self.height, width=self.width, latent_dim=self.latent_dim,
                           ar_layers=self.ar_layers, ar_width=self.ar_width, aux_levels=self.aux_levels,
                           lam=self.lam, seed=seed)

    def _check_images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, ensure_all_finite=True, dtype=None)
        if X.ndim == 2:
            X = X.reshape(len(X), 3, self.height, self.width)
        if X.shape[1:] != (3, self.height, self.width):
            raise ValueError(f"expected images of shape (n, 3, {self.height}, {self.width}), got {X.shape}")
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        return np.asarray(X, dtype=np.uint8)

    def fit(self, X, y=None):
        X = self._check_images(X)
        seed = check_random_state(self.random_state).randint(2 ** 31 - 1) if self.random_state is None else int(self.random_state)
        self.model_ = AgaveModel(self._config(seed))
        self.trainer_ = Trainer(self.model_, X, seed=seed, lr=self.lr)
        self.history_ = self.trainer_.run(Schedule(self.vae_steps, self.ar_steps, self.joint_steps,
                                                   batch_size=self.batch_size, log_every=100))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_images(X)
        with ad.no_grad():
            return self.model_.encode(X).mean.data.copy()

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=ad.get_default_dtype())
        with ad.no_grad():
            return self.model_.aux_decode(Z).render()

    def score_samples(self, X) -> np.ndarray:
        """Per-example lower bound on log p(x) in nats."""
        check_is_fitted(self, "model_")
        X = self._check_images(X)
        rng = np.random.default_rng(0)
        with ad.no_grad():
            noise = self.model_.latent_noise(rng, len(X), samples=self.eval_samples)
            return iwae_bound(X, self.model_, self.eval_samples, noise).data.astype(np.float64)

    def score(self, X, y=None) -> float:
        """Negated bits per dimension."""
        return -float(bpd(-np.mean(self.score_samples(X)), self.model_.config.dims))

    def sample(self, n_samples: int = 1, temperature: float = 1.0, random_state=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        z = self.model_.latent_noise(rng, n_samples)
        return self.model_.sample(z, temperature=temperature, rng=rng)[1]
