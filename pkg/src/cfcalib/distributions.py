"""Probability distributions and support transforms.

The Double Gamma is the acceleration likelihood; every continuous latent is a
Normal pushed through an optional softplus bijection (``TransformedNormal``).
All objects are frozen dataclasses and all samplers take an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import digamma, gammaln

from cfcalib.errors import DomainError

LOG_2PI = math.log(2.0 * math.pi)
# cap for the gamma < 1 pole at x == mu
LOG_DENSITY_CAP = math.log(1e300)

SUPPORTS = ("real", "nonneg", "nonpos")


# --------------------------------------------------------------------------
# Double Gamma
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DoubleGammaParams:
    """Location ``mu``, scale ``beta`` and shape ``gamma`` of a Double Gamma."""

    mu: float = 0.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.beta > 0 and self.gamma > 0):
            raise DomainError(
                f"invalid Double Gamma parameters mu={self.mu}, beta={self.beta}, gamma={self.gamma}"
            )


def double_gamma_log_pdf(x, p: DoubleGammaParams):
    """Log-density of the Double Gamma.

    ``f(x) = z**(gamma-1) exp(-z) / (2 beta Gamma(gamma))`` with
    ``z = |x - mu| / beta``. For ``gamma < 1`` the density has a pole at
    ``x == mu``; the log-density is capped at ``log(1e300)`` there so that
    MCMC arithmetic stays finite.
    """
    return _dg_logpdf(np.asarray(x, dtype=float), p.mu, p.beta, p.gamma)


def _dg_logpdf(x, mu, beta, gamma):
    # raw-array version used by the likelihood hot path; no validation
    z = np.abs(x - mu) / beta
    with np.errstate(divide="ignore", invalid="ignore"):
        logz = np.log(z)
        shape_term = np.where(gamma == 1.0, 0.0, (gamma - 1.0) * logz)
    out = shape_term - z - np.log(2.0 * beta) - gammaln(gamma)
    out = np.minimum(out, LOG_DENSITY_CAP)
    if np.ndim(out) == 0:
        return float(out)
    return out


def double_gamma_entropy(p: DoubleGammaParams) -> float:
    """Shannon entropy in nats: ``log(2b) - (g-1) psi(g) + lnGamma(g) + g``."""
    g = p.gamma
    return float(math.log(2.0 * p.beta) - (g - 1.0) * digamma(g) + gammaln(g) + g)


def double_gamma_std(p: DoubleGammaParams) -> float:
    """Standard deviation ``beta * sqrt(gamma * (gamma + 1))``."""
    return p.beta * math.sqrt(p.gamma * (p.gamma + 1.0))


def double_gamma_sample(p: DoubleGammaParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` variates as ``mu + sign * beta * Gamma(gamma, 1)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rng.gamma(p.gamma, 1.0, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return p.mu + sign * p.beta * g


def double_gamma_cdf(x, p: DoubleGammaParams):
    """CDF via the regularized incomplete gamma function."""
    from scipy.special import gammainc

    x = np.asarray(x, dtype=float)
    z = np.abs(x - p.mu) / p.beta
    half = 0.5 * gammainc(p.gamma, z)
    return np.where(x >= p.mu, 0.5 + half, 0.5 - half)


# --------------------------------------------------------------------------
# Normal family and softplus bijection
# --------------------------------------------------------------------------


def normal_log_pdf(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    r = (x - mu) / sigma
    return -0.5 * r * r - np.log(sigma) - 0.5 * LOG_2PI


def half_normal_log_pdf(x, sigma):
    x = np.asarray(x, dtype=float)
    out = math.log(2.0) + normal_log_pdf(x, 0.0, sigma)
    return np.where(x >= 0, out, -np.inf)


def softplus(x, sharpness=1.0):
    """``log(1 + exp(sharpness * x)) / sharpness``, overflow-safe."""
    return np.logaddexp(0.0, sharpness * np.asarray(x, dtype=float)) / sharpness


def softplus_inverse(y, sharpness=1.0):
    y = np.asarray(y, dtype=float)
    cy = sharpness * y
    with np.errstate(divide="ignore"):
        # log(expm1(cy)) written to stay finite for large cy
        return (cy + np.log(-np.expm1(-cy))) / sharpness


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


@dataclass(frozen=True)
class TransformedNormal:
    """Normal(mu, sigma) on the unconstrained line, mapped onto a support.

    ``support='nonneg'`` applies softplus, ``'nonpos'`` applies minus
    softplus, ``'real'`` is the identity. ``mu`` and ``sigma`` live on the
    unconstrained side.
    """

    mu: float
    sigma: float
    support: str = "real"
    sharpness: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be > 0, got {self.sigma}")
        if self.support not in SUPPORTS:
            raise DomainError(f"unknown support {self.support!r}")
        if not self.sharpness > 0:
            raise DomainError("sharpness must be > 0")

    def forward(self, u):
        if self.support == "real":
            return np.asarray(u, dtype=float)
        y = softplus(u, self.sharpness)
        return y if self.support == "nonneg" else -y

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if self.support == "real":
            return x
        if self.support == "nonpos":
            x = -x
        return softplus_inverse(x, self.sharpness)

    def log_det_jacobian(self, u):
        """``log |d forward / du|``."""
        if self.support == "real":
            return np.zeros_like(np.asarray(u, dtype=float))
        return log_sigmoid(self.sharpness * np.asarray(u, dtype=float))

    def in_support(self, x):
        x = np.asarray(x, dtype=float)
        if self.support == "nonneg":
            return x >= 0
        if self.support == "nonpos":
            return x <= 0
        return np.isfinite(x)

    def sample(self, rng: np.random.Generator, n: int | None = None):
        return self.forward(rng.normal(self.mu, self.sigma, size=n))


def transformed_normal_log_pdf(x, p: TransformedNormal):
    """Log-density of ``p`` at a constrained value ``x``.

    Normal density at the preimage plus ``log |d preimage / dx|``.
    """
    x_arr = np.asarray(x, dtype=float)
    if not np.all(p.in_support(x_arr)):
        raise DomainError(f"value outside {p.support} support")
    u = p.inverse(x_arr)
    with np.errstate(invalid="ignore"):
        out = normal_log_pdf(u, p.mu, p.sigma) - p.log_det_jacobian(u)
    # boundary point (x == 0) has zero density
    out = np.where(np.isfinite(u), out, -np.inf)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Categorical latents
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimplexParams:
    """Category probabilities with a Dirichlet prior over them."""

    probs: tuple
    concentration: tuple = field(default=None)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError(f"probs must lie on the simplex, got {self.probs}")
        if self.concentration is None:
            object.__setattr__(self, "concentration", tuple([1.0] * len(probs)))
        conc = np.asarray(self.concentration, dtype=float)
        if conc.shape != probs.shape or np.any(conc <= 0):
            raise DomainError("concentration must be positive and match probs")

    @property
    def k(self) -> int:
        return len(self.probs)


def categorical_log_pmf(index: int, p: SimplexParams) -> float:
    with np.errstate(divide="ignore"):
        return float(np.log(p.probs[index]))


def dirichlet_log_pdf(probs, concentration) -> float:
    probs = np.asarray(probs, dtype=float)
    a = np.asarray(concentration, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a == 1.0, 0.0, (a - 1.0) * np.log(probs))
    return float(gammaln(a.sum()) - gammaln(a).sum() + terms.sum())


# --------------------------------------------------------------------------
# Sample-based KL
# --------------------------------------------------------------------------


def sample_kl_estimate(xs, log_p: Callable, log_q: Callable) -> float:
    """Monte-Carlo ``KL(p || q)`` as the mean of ``log p(x) - log q(x)`` over ``xs ~ p``."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise ValueError("sample_kl_estimate needs at least one sample")
    return float(np.mean(np.asarray(log_p(xs)) - np.asarray(log_q(xs))))
