"""Small latent-variable models whose likelihoods are known exactly.

They implement the same ``log_weights`` / ``code_length_terms`` hooks as the
image model, so the bounds and code-length accounting can be checked against
exact enumeration or closed forms.
"""
import numpy as np
from scipy import special

from .autodiff import Tensor


def _bernoulli_log_prob(x: np.ndarray, logits: np.ndarray) -> np.ndarray:
    return x * -np.logaddexp(0, -logits) + (1 - x) * -np.logaddexp(0, logits)


class EnumerableToy:
    """Binary images with a latent on a finite grid.

    Prior masses follow a standard normal evaluated on ``grid_size`` evenly
    spaced points. Primary and auxiliary decoders are factored Bernoullis with
    logits linear in z; the approximate posterior is an arbitrary categorical
    table over all ``2**pixels`` images.
    """

    def __init__(self, pixels: int = 4, grid_size: int = 9, seed: int = 0, span: float = 2.5):
        rng = np.random.default_rng(seed)
        self.pixels = pixels
        self.grid = np.linspace(-span, span, grid_size) if grid_size > 1 else np.zeros(1)
        prior = np.exp(-0.5 * self.grid ** 2)
        self.log_prior = np.log(prior / prior.sum())
        self.primary_w = rng.normal(0, 2.0, pixels)
        self.primary_b = rng.normal(0, 0.5, pixels)
        self.aux_w = rng.normal(0, 2.0, pixels)
        self.aux_b = rng.normal(0, 0.5, pixels)
        self.q_logits = rng.normal(0, 1.5, (2 ** pixels, grid_size))

    @property
    def states(self) -> np.ndarray:
        """Every binary image, one per row, in index order."""
        idx = np.arange(2 ** self.pixels)
        return ((idx[:, None] >> np.arange(self.pixels)) & 1).astype(np.float64)

    def _flat(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        return x.reshape(len(x), self.pixels)

    def _index(self, x: np.ndarray) -> np.ndarray:
        return (x.astype(np.int64) << np.arange(self.pixels)).sum(axis=1)

    def log_likelihood(self, x, which: str = "primary") -> np.ndarray:
        """(n, grid) table of log p(x | z_g)."""
        x = self._flat(x)
        w, b = (self.primary_w, self.primary_b) if which == "primary" else (self.aux_w, self.aux_b)
        logits = self.grid[None, :, None] * w + b
        return _bernoulli_log_prob(x[:, None, :], logits).sum(axis=-1)

    def log_q(self, x) -> np.ndarray:
        logits = self.q_logits[self._index(self._flat(x))]
        return logits - special.logsumexp(logits, axis=1, keepdims=True)

    def log_marginal(self, x) -> np.ndarray:
        return special.logsumexp(self.log_prior + self.log_likelihood(x), axis=1)

    def log_true_posterior(self, x) -> np.ndarray:
        joint = self.log_prior + self.log_likelihood(x)
        return joint - special.logsumexp(joint, axis=1, keepdims=True)

    def exact_elbo(self, x) -> np.ndarray:
        log_q = self.log_q(x)
        return (np.exp(log_q) * (self.log_likelihood(x) + self.log_prior - log_q)).sum(axis=1)

    def kl_to_true_posterior(self, x) -> np.ndarray:
        log_q = self.log_q(x)
        return (np.exp(log_q) * (log_q - self.log_true_posterior(x))).sum(axis=1)

    def bits_back_length(self, x) -> np.ndarray:
        """E_q[log q(z|x) - log p(z) - log p(x|z)] per example."""
        return -self.exact_elbo(x)

    def log_weights(self, x, noise) -> Tensor:
        """Importance log-weights with z chosen by inverse-CDF from uniforms ``noise``."""
        log_q = self.log_q(x)
        cdf = np.cumsum(np.exp(log_q), axis=1)
        u = np.asarray(noise, dtype=np.float64).reshape(-1, 1)
        g = np.minimum((u > cdf).sum(axis=1), len(self.grid) - 1)
        rows = np.arange(len(g))
        log_w = self.log_likelihood(x)[rows, g] + self.log_prior[g] - log_q[rows, g]
        return Tensor(log_w, dtype=np.float64)

    def latent_noise(self, rng: np.random.Generator, count: int, samples=None) -> np.ndarray:
        shape = (count,) if samples is None else (samples, count)
        return rng.uniform(size=shape)

    def code_length_terms(self, x, y=None, noise=None):
        """Exact expectations over q of the code-length components."""
        y = x if y is None else y
        q = np.exp(self.log_q(x))
        return {
            "kl": (q * (np.log(q) - self.log_prior)).sum(axis=1),
            "aux_nll": -(q * self.log_likelihood(y, "aux")).sum(axis=1),
            "primary_nll": -(q * self.log_likelihood(x)).sum(axis=1),
        }

    def conditional_entropy(self) -> float:
        """H(X | Z) of the primary decoder under the prior, by enumeration."""
        p_x_given_z = np.exp(self.log_likelihood(self.states)).T
        per_z = -(p_x_given_z * np.log(p_x_given_z)).sum(axis=1)
        return float(np.exp(self.log_prior) @ per_z)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Images drawn from p(z) p(x | z), shaped (n, 2, 2) when there are four pixels."""
        g = rng.choice(len(self.grid), size=n, p=np.exp(self.log_prior))
        probs = special.expit(self.grid[g, None] * self.primary_w + self.primary_b)
        x = (rng.uniform(size=probs.shape) < probs).astype(np.float64)
        side = int(round(np.sqrt(self.pixels)))
        return x.reshape(n, side, side) if side * side == self.pixels else x


class LinearGaussianToy:
    """z ~ N(0, I), x | z ~ N(W z + b, sigma^2 I) with a deliberately imperfect
    diagonal Gaussian posterior, so log p(x) is available in closed form."""

    def __init__(self, latent_dim: int = 2, data_dim: int = 4, noise_std: float = 0.5, seed: int = 0,
                 shrink: float = 0.8, inflate: float = 1.5):
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0, 1, (data_dim, latent_dim))
        self.b = rng.normal(0, 1, data_dim)
        self.noise_std = noise_std
        precision = np.eye(latent_dim) + self.W.T @ self.W / noise_std ** 2
        self.post_cov = np.linalg.inv(precision)
        self.shrink = shrink
        self.q_var = inflate * np.diag(self.post_cov)

    def posterior(self, x):
        x = np.asarray(x, dtype=np.float64)
        mean = (x - self.b) @ self.W @ self.post_cov.T / self.noise_std ** 2
        return self.shrink * mean, np.broadcast_to(self.q_var, mean.shape)

    def log_marginal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        cov = self.W @ self.W.T + self.noise_std ** 2 * np.eye(len(self.b))
        chol = np.linalg.cholesky(cov)
        diff = np.linalg.solve(chol, (x - self.b).T).T
        logdet = 2 * np.log(np.diag(chol)).sum()
        return -0.5 * ((diff ** 2).sum(axis=1) + logdet + len(self.b) * np.log(2 * np.pi))

    def log_weights(self, x, noise) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        mean, var = self.posterior(x)
        eps = np.asarray(noise, dtype=np.float64)
        z = mean + np.sqrt(var) * eps
        resid = x - z @ self.W.T - self.b
        d = len(self.b)
        log_lik = -0.5 * ((resid / self.noise_std) ** 2).sum(axis=1) - d * (np.log(self.noise_std) + 0.5 * np.log(2 * np.pi))
        log_prior = -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
        log_q = -0.5 * (eps ** 2 + np.log(2 * np.pi * var)).sum(axis=1)
        return Tensor(log_lik + log_prior - log_q, dtype=np.float64)

    def latent_noise(self, rng: np.random.Generator, count: int, samples=None) -> np.ndarray:
        d = self.W.shape[1]
        shape = (count, d) if samples is None else (samples, count, d)
        return rng.standard_normal(shape)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.W.shape[1]))
        return z @ self.W.T + self.b + self.noise_std * rng.standard_normal((n, len(self.b)))
