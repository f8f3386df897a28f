"""Analytic flow-matching teacher over isotropic Gaussian mixtures.

Under ``x_t = alpha(t) x0 + sigma(t) eps`` a mixture stays a mixture: component
``k`` becomes ``N(alpha mu_k, (alpha^2 var_k + sigma^2) I)``.  Everything the
distillation code needs (score, PF-ODE velocity, posterior means) follows from
per-component responsibilities of that diffused mixture.

Single-Gaussian closed form (used as an oracle in the tests): for
``N(mu, s0^2 I)`` on the rectified path the time-t marginal has mean
``m(t) = (1-t) mu`` and std ``s(t) = sqrt((1-t)^2 s0^2 + t^2)``, and the
probability-flow map is affine,
``Phi^{t->s}(x) = m(s) + s(s)/s(t) * (x - m(t))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

T_MIN = 1e-3


@dataclass(frozen=True)
class NoisePath:
    name: str
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    dalpha: Callable[[float], float]
    dsigma: Callable[[float], float]


RECTIFIED = NoisePath(
    "rectified",
    alpha=lambda t: 1.0 - t,
    sigma=lambda t: t,
    dalpha=lambda t: -1.0,
    dsigma=lambda t: 1.0,
)

COSINE = NoisePath(
    "cosine",
    alpha=lambda t: np.cos(0.5 * np.pi * t),
    sigma=lambda t: np.sin(0.5 * np.pi * t),
    dalpha=lambda t: -0.5 * np.pi * np.sin(0.5 * np.pi * t),
    dsigma=lambda t: 0.5 * np.pi * np.cos(0.5 * np.pi * t),
)

PATHS = {"rectified": RECTIFIED, "cosine": COSINE}


def get_path(name: str) -> NoisePath:
    try:
        return PATHS[name]
    except KeyError:
        raise ValueError(f"unknown noise path {name!r}; choose from {sorted(PATHS)}") from None


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if not (w.shape[0] == mu.shape[0] == var.shape[0]):
            raise ValueError("weights, means and variances must have one entry per component")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError(f"weights must be a probability vector, got {w}")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["variances"]))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise


def two_mode_gmm(separation: float = 2.0, variance: float = 0.04, dim: int = 2) -> GaussianMixture:
    means = np.zeros((2, dim))
    means[0, 0], means[1, 0] = -separation, separation
    return GaussianMixture(np.array([0.5, 0.5]), means, np.full(2, variance))


def _component_log_terms(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    # (B, K) log w_k N(x; mu_k, var_k I)
    d = gmm.dim
    sq = ((x[:, None, :] - gmm.means[None, :, :]) ** 2).sum(-1)
    return (
        np.log(gmm.weights)[None, :]
        - 0.5 * sq / gmm.variances[None, :]
        - 0.5 * d * np.log(2.0 * np.pi * gmm.variances)[None, :]
    )


def _batch(x: np.ndarray, dim: int):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise ValueError(f"point dimension {x.shape[1]} != mixture dimension {dim}")
    return x, squeeze


def gmm_log_density(gmm: GaussianMixture, x: np.ndarray):
    xb, squeeze = _batch(x, gmm.dim)
    out = logsumexp(_component_log_terms(gmm, xb), axis=1)
    return float(out[0]) if squeeze else out


def responsibilities(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    logs = _component_log_terms(gmm, x)
    return np.exp(logs - logsumexp(logs, axis=1, keepdims=True))


def gmm_score(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    xb, squeeze = _batch(x, gmm.dim)
    r = responsibilities(gmm, xb)
    comp = (gmm.means[None, :, :] - xb[:, None, :]) / gmm.variances[None, :, None]
    s = (r[:, :, None] * comp).sum(axis=1)
    return s[0] if squeeze else s


def diffused_gmm(gmm: GaussianMixture, path: NoisePath, t: float) -> GaussianMixture:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    a, s = path.alpha(t), path.sigma(t)
    return GaussianMixture(gmm.weights, a * gmm.means, a * a * gmm.variances + s * s)


def forward_noise(path: NoisePath, x0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    return path.alpha(t) * np.asarray(x0) + path.sigma(t) * np.asarray(eps)


def diffused_score(gmm: GaussianMixture, path: NoisePath, x: np.ndarray, t) -> np.ndarray:
    """Score of the t-diffused mixture with one noise level per row of ``x``."""
    xb, squeeze = _batch(x, gmm.dim)
    n, d = xb.shape
    t = np.asarray(t, dtype=np.float64)
    t = np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)
    a, s = path.alpha(t), path.sigma(t)
    a = np.broadcast_to(a, (n,))
    mu = a[:, None, None] * gmm.means[None]  # (n, K, d)
    var = (a * a)[:, None] * gmm.variances[None] + (s * s)[:, None]  # (n, K)
    resid = xb[:, None, :] - mu
    logs = np.log(gmm.weights)[None] - 0.5 * (resid**2).sum(-1) / var - 0.5 * d * np.log(2 * np.pi * var)
    r = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
    sc = -(r[:, :, None] * resid / var[:, :, None]).sum(1)
    return sc[0] if squeeze else sc


def posterior_means(gmm: GaussianMixture, path: NoisePath, x: np.ndarray, t: float):
    """``(E[x0 | x_t], E[eps | x_t])`` for a scalar ``t``."""
    a, s = path.alpha(t), path.sigma(t)
    xb, _ = _batch(x, gmm.dim)
    dg = diffused_gmm(gmm, path, t)
    r = responsibilities(dg, xb)
    resid = xb[:, None, :] - dg.means[None, :, :]
    var_t = dg.variances[None, :, None]
    x0_k = gmm.means[None, :, :] + (a * gmm.variances[None, :, None] / var_t) * resid
    eps_k = (s / var_t) * resid
    return (r[:, :, None] * x0_k).sum(1), (r[:, :, None] * eps_k).sum(1)


def teacher_velocity(gmm: GaussianMixture, path: NoisePath, x: np.ndarray, t: float) -> np.ndarray:
    """PF-ODE velocity ``alpha'(t) E[x0|x_t] + sigma'(t) E[eps|x_t]``."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"teacher velocity is defined on (0, 1], got t={t}")
    xb, squeeze = _batch(x, gmm.dim)
    x0_hat, eps_hat = posterior_means(gmm, path, xb, max(t, T_MIN))
    v = path.dalpha(t) * x0_hat + path.dsigma(t) * eps_hat
    return v[0] if squeeze else v


def oracle_flow_map(
    gmm: GaussianMixture,
    path: NoisePath,
    x: np.ndarray,
    t_from: float,
    t_to: float,
    substeps: int = 4096,
) -> np.ndarray:
    """Fine-grid Euler integration of the teacher PF-ODE from ``t_from`` down to ``t_to``."""
    if t_to > t_from or t_to < 0.0 or t_from > 1.0:
        raise ValueError(f"need 1 >= t_from >= t_to >= 0, got {t_from} -> {t_to}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.array(x, dtype=np.float64)
    if t_from == t_to:
        return x
    ts = np.linspace(t_from, t_to, substeps + 1)
    for i in range(substeps):
        x = x - (ts[i] - ts[i + 1]) * teacher_velocity(gmm, path, x, ts[i])
    return x


def single_gaussian_flow_map(mu: Sequence[float], var0: float, x: np.ndarray, t_from: float, t_to: float):
    """Closed-form rectified-path flow map for ``N(mu, var0 I)``."""
    mu = np.asarray(mu, dtype=np.float64)

    def mean(t):
        return (1.0 - t) * mu

    def std(t):
        return np.sqrt((1.0 - t) ** 2 * var0 + t * t)

    return mean(t_to) + std(t_to) / std(t_from) * (np.asarray(x) - mean(t_from))


class TeacherField:
    """Velocity evaluator wrapping the analytic teacher (conditioning ignored)."""

    def __init__(self, gmm: GaussianMixture, path: NoisePath = RECTIFIED):
        self.gmm = gmm
        self.path = path

    def __call__(self, x, t, c=None):
        return teacher_velocity(self.gmm, self.path, x, float(t))
