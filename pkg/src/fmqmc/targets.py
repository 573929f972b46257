"""Benchmark target distributions with exact log densities and moments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .base_map import logistic_logpdf

LOG_2PI = np.log(2.0 * np.pi)

GMM2D_MEANS = np.array([[1.0, 1.0], [2.0, 3.6], [3.3, 2.8], [1.1, 2.9]])
GMM2D_BASE_COVS = np.array([
    [[2.0, 0.6], [0.6, 1.0]],
    [[2.0, -0.4], [-0.4, 2.0]],
    [[3.0, 0.8], [0.8, 2.0]],
    [[3.0, 0.0], [0.0, 0.5]],
])
GMM2D_SIGMA1_SCALE = 1.0 / 40.0**2
GMM2D_SCALE = 1.0 / 4.0**2

BANANA_A = 0.3
BANANA_B = 1.0 / np.sqrt(2.0)
BANANA_C = -1.0


class UnsupportedTargetError(ValueError):
    """The target id is unknown or the target cannot provide what was asked."""


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError("mixture weights must sum to 1")
        covs = np.asarray(self.covs, dtype=np.float64)
        if not np.allclose(covs, np.swapaxes(covs, 1, 2)):
            raise ValueError("covariances must be symmetric")
        # raises LinAlgError when a covariance is not positive definite
        chol = np.linalg.cholesky(covs)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec_chol", np.linalg.inv(chol))
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        d = self.means.shape[1]
        object.__setattr__(self, "_lognorm", np.log(w) - 0.5 * (d * LOG_2PI + logdet))

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """(n, K) array of log w_k + log N(x | mu_k, Sigma_k)."""
        diff = x[:, None, :] - self.means[None, :, :]
        z = np.einsum("kij,nkj->nki", self._prec_chol, diff)
        return self._lognorm[None, :] - 0.5 * np.sum(z * z, axis=-1)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(x), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.means.shape[1]))
        out = np.empty_like(z)
        for k in range(len(self.weights)):
            sel = comp == k
            out[sel] = self.means[k] + z[sel] @ self._chol[k].T
        return out

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        first = self.weights @ self.means
        second = self.weights @ (self.means**2 + np.diagonal(self.covs, axis1=1, axis2=2))
        return first, second


@dataclass(frozen=True)
class Target:
    """A distribution on R^d with log density, seeded sampler, and exact coordinate moments.

    ``tail_rate`` records the exponential tail-decay rate assumed for the
    target; Gaussian-type tails decay faster than any exponential and are
    tagged ``inf``.
    """

    name: str
    d: int
    log_pdf_fn: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[int, np.random.Generator], np.ndarray] | None
    first_moment: np.ndarray
    second_moment: np.ndarray
    tail_rate: float = float("inf")

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.log_pdf_fn(x[None, :])[0]
        return self.log_pdf_fn(x)

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.first_moment.copy(), self.second_moment.copy()

    @property
    def samplable(self) -> bool:
        return self.sampler is not None


def sample(target: Target, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws; identical seeds give identical draws."""
    if target.sampler is None:
        raise UnsupportedTargetError(f"target {target.name!r} has no sampler")
    if n < 1:
        raise ValueError("n must be >= 1")
    return target.sampler(n, np.random.default_rng(seed))


def _gmm_target(name: str, spec: GmmSpec) -> Target:
    first, second = spec.moments()
    return Target(name, spec.means.shape[1], spec.logpdf, spec.sample, first, second)


def make_gmm2d(sigma1_scale: float = GMM2D_SIGMA1_SCALE) -> Target:
    """Four equally weighted 2-d Gaussians; the first covariance carries ``sigma1_scale``."""
    scales = np.array([sigma1_scale, GMM2D_SCALE, GMM2D_SCALE, GMM2D_SCALE])
    spec = GmmSpec(np.full(4, 0.25), GMM2D_MEANS, GMM2D_BASE_COVS * scales[:, None, None])
    return _gmm_target("gmm2d", spec)


def make_gmm30d() -> Target:
    means = np.zeros((4, 30))
    means[:, :2] = [[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0], [2.0, 2.0]]
    covs = np.broadcast_to(0.5 * np.eye(30), (4, 30, 30)).copy()
    return _gmm_target("gmm30d", GmmSpec(np.full(4, 0.25), means, covs))


def make_banana(a: float = BANANA_A, b: float = BANANA_B, c: float = BANANA_C) -> Target:
    """x1 = z1, x2 = a z1^2 + c + b z2 with z ~ N(0, I)."""

    def log_pdf(x):
        r = (x[:, 1] - a * x[:, 0] ** 2 - c) / b
        return -LOG_2PI - np.log(abs(b)) - 0.5 * (x[:, 0] ** 2 + r**2)

    def sampler(n, rng):
        z = rng.standard_normal((n, 2))
        return np.column_stack([z[:, 0], a * z[:, 0] ** 2 + c + b * z[:, 1]])

    # E[z^2] = 1, E[z^4] = 3
    first = np.array([0.0, a + c])
    var2 = 2.0 * a**2 + b**2
    second = np.array([1.0, var2 + (a + c) ** 2])
    return Target("banana", 2, log_pdf, sampler, first, second)


def make_logistic(d: int = 1) -> Target:
    """The logistic base distribution itself (mean 0, second moment pi^2 / 3)."""

    def sampler(n, rng):
        u = rng.random((n, d))
        return np.log(u) - np.log1p(-u)

    return Target(
        "logistic", d, logistic_logpdf, sampler,
        np.zeros(d), np.full(d, np.pi**2 / 3.0), tail_rate=1.0,
    )


TARGETS = {"gmm2d": make_gmm2d, "gmm30d": make_gmm30d, "banana": make_banana}


def get_target(name: str, **options) -> Target:
    if name == "logistic":
        return make_logistic(**options)
    try:
        factory = TARGETS[name]
    except KeyError:
        raise UnsupportedTargetError(f"unknown target {name!r}; expected one of {sorted(TARGETS)}") from None
    return factory(**options)
