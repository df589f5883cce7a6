"""Product kernel pieces: RBF over hyperparameters, Matern-5/2 over progression.

The RBF factor is a pure correlation (unit variance); the overall signal
variance lives on the Matern factor only, which keeps the product
identifiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)

NOISE_PRIOR_MEAN = -4.0
NOISE_PRIOR_STD = 1.0
LENGTHSCALE_PRIOR_STD = math.sqrt(3.0)


def lengthscale_prior_mean(d):
    return math.sqrt(2.0) + 0.5 * math.log(d)


@dataclass(frozen=True)
class ProductKernelParams:
    """All free parameters in log space; ``log_noise`` is ``log sigma^2``."""

    rbf_log_lengthscales: np.ndarray
    matern_log_lengthscale: float
    matern_log_outputscale: float
    log_noise: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.rbf_log_lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "rbf_log_lengthscales", ls)
        for name in ("matern_log_lengthscale", "matern_log_outputscale", "log_noise"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def d(self):
        return self.rbf_log_lengthscales.size

    @property
    def noise(self):
        return math.exp(self.log_noise)

    @property
    def outputscale(self):
        return math.exp(self.matern_log_outputscale)

    def to_vector(self):
        return np.concatenate(
            [
                self.rbf_log_lengthscales,
                [self.matern_log_lengthscale, self.matern_log_outputscale, self.log_noise],
            ]
        )

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-3], theta[-3], theta[-2], theta[-1])

    @classmethod
    def initial(cls, d):
        """Prior means where a prior exists, scale-neutral values elsewhere."""
        return cls(
            np.full(d, lengthscale_prior_mean(d)),
            matern_log_lengthscale=math.log(0.25),
            matern_log_outputscale=0.0,
            log_noise=NOISE_PRIOR_MEAN,
        )


def _sq_dists(X, X2, lengthscales):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != X2.shape[1] or X.shape[1] != lengthscales.size:
        raise ValueError(
            f"dimension mismatch: {X.shape[1]}, {X2.shape[1]}, {lengthscales.size}"
        )
    A = X / lengthscales
    B = X2 / lengthscales
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.clip(sq, 0.0, None)


def rbf_gram(X, X2, log_lengthscales):
    """``exp(-0.5 * sum_k (x_k - x'_k)^2 / l_k^2)`` with unit variance."""
    ls = np.exp(np.atleast_1d(np.asarray(log_lengthscales, dtype=float)))
    K = np.exp(-0.5 * _sq_dists(X, X2, ls))
    if X2 is X:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
    return K


def _abs_dists(t, t2):
    t = np.asarray(t, dtype=float).ravel()
    t2 = np.asarray(t2, dtype=float).ravel()
    return np.abs(t[:, None] - t2[None, :])


def matern52_gram(t, t2, log_lengthscale, log_outputscale):
    """Matern-5/2 Gram on scalar progressions, scaled by the output variance."""
    u = SQRT5 * _abs_dists(t, t2) / math.exp(log_lengthscale)
    return math.exp(log_outputscale) * (1.0 + u + u**2 / 3.0) * np.exp(-u)


@dataclass
class GramGrads:
    """Derivatives of the two factor Grams w.r.t. the log-parameters.

    ``rbf`` has shape ``(d, n, n)``; each entry only touches ``K1``. The two
    Matern entries only touch ``K2``. Noise is not a Gram parameter.
    """

    rbf: np.ndarray
    matern_lengthscale: np.ndarray
    matern_outputscale: np.ndarray

    def pairs(self):
        """``(dK1, dK2)`` per kernel parameter, with explicit zero factors."""
        n = self.rbf.shape[1]
        m = self.matern_lengthscale.shape[0]
        zero1, zero2 = np.zeros((n, n)), np.zeros((m, m))
        out = [(g, zero2) for g in self.rbf]
        out.append((zero1, self.matern_lengthscale))
        out.append((zero1, self.matern_outputscale))
        return out


def gram_grads(X, t, params):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ls = np.exp(params.rbf_log_lengthscales)
    if X.shape[1] != ls.size:
        raise ValueError(f"X has {X.shape[1]} columns, params have {ls.size}")
    K1 = rbf_gram(X, X, params.rbf_log_lengthscales)
    scaled = X / ls
    d_rbf = np.stack(
        [K1 * (scaled[:, k, None] - scaled[None, :, k]) ** 2 for k in range(ls.size)]
    )

    u = SQRT5 * _abs_dists(t, t) / math.exp(params.matern_log_lengthscale)
    s = params.outputscale
    e = np.exp(-u)
    K2 = s * (1.0 + u + u**2 / 3.0) * e
    d_len = s * e * u**2 * (1.0 + u) / 3.0
    return GramGrads(d_rbf, d_len, K2)


def _normal_logpdf(x, mean, std):
    z = (x - mean) / std
    return -0.5 * z**2 - math.log(std) - 0.5 * LOG_2PI, -z / std


def log_prior(params, d=None):
    """Log prior density (in log-parameter space) and its gradient.

    Normal on each RBF log-lengthscale and on the log-noise; the Matern
    parameters are flat and contribute nothing.
    """
    d = params.d if d is None else d
    grad = np.zeros(d + 3)
    lp_ls, g_ls = _normal_logpdf(
        params.rbf_log_lengthscales, lengthscale_prior_mean(d), LENGTHSCALE_PRIOR_STD
    )
    lp_noise, g_noise = _normal_logpdf(params.log_noise, NOISE_PRIOR_MEAN, NOISE_PRIOR_STD)
    grad[:d] = g_ls
    grad[-1] = g_noise
    return float(np.sum(lp_ls) + lp_noise), grad
