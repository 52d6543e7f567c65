"""Windowed chi-squared residue test and the distributions behind it.

The incomplete gamma routines follow the usual split: a power series
below ``x < a + 1`` and a modified-Lentz continued fraction above it.
The non-central distribution is evaluated as a Poisson mixture of
central upper tails (the generalized Marcum Q function).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EstimationError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 100_000


def _gamma_series(a, x):
    # lower regularized P(a, x) by series; valid/fast for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a, x):
    # upper regularized Q(a, x) by modified Lentz; valid/fast for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cf(a, x))


def gammainc_upper(a, x):
    """Regularized upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return min(1.0, _gamma_cf(a, x))


def chi2_cdf(dof, x):
    """``P(X <= x)`` for a central chi-squared law with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if x <= 0:
        return 0.0
    return gammainc_lower(0.5 * dof, 0.5 * x)


def chi2_sf(dof, x):
    """Upper tail ``P(X > x)``, computed directly rather than as ``1 - cdf``."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if x <= 0:
        return 1.0
    return gammainc_upper(0.5 * dof, 0.5 * x)


def _poisson_mixture_sf(dof, lam, x, n_terms):
    """Sum of the first ``n_terms`` Poisson-weighted central tails."""
    half = 0.5 * lam
    a0 = 0.5 * dof
    xh = 0.5 * x
    if xh == 0.0:  # x underflowed; the whole mass lies above it
        return 1.0
    tail = gammainc_upper(a0, xh)
    log_half = math.log(half) if half > 0 else -math.inf
    log_xh = math.log(xh)
    total = 0.0
    for j in range(n_terms):
        if half > 0:
            log_w = -half + j * log_half - math.lgamma(j + 1.0)
        else:
            log_w = 0.0 if j == 0 else -math.inf
        total += math.exp(log_w) * tail
        # Q(a + 1, x) = Q(a, x) + x^a e^-x / Gamma(a + 1)
        a = a0 + j
        tail = min(1.0, tail + math.exp(a * log_xh - xh - math.lgamma(a + 1.0)))
    return min(1.0, total)


def _mixture_terms(lam, tol):
    """Number of Poisson terms needed so the neglected weight is below ``tol``."""
    half = 0.5 * lam
    if half == 0:
        return 1
    cum = 0.0
    log_half = math.log(half)
    j = 0
    while True:
        cum += math.exp(-half + j * log_half - math.lgamma(j + 1.0))
        j += 1
        if j >= half and 1.0 - cum < tol:
            return j
        if j > half + 50.0 * math.sqrt(half) + 200:
            return j


def marcum_q(order, a, b, tol=1e-12):
    """Generalized Marcum Q function ``Q_M(a, b)``.

    Equals the upper tail at ``b**2`` of a non-central chi-squared law with
    ``2 * order`` degrees of freedom and non-centrality ``a**2``. Each
    neglected term is bounded by its Poisson weight, so truncating once the
    remaining weight is below ``tol`` bounds the error by ``tol``.
    """
    if order <= 0 or a < 0 or b < 0 or not all(map(math.isfinite, (order, a, b))):
        raise ValueError("marcum_q needs order > 0 and finite a, b >= 0")
    if b == 0:
        return 1.0
    lam = a * a
    return _poisson_mixture_sf(2.0 * order, lam, b * b, _mixture_terms(lam, tol))


def noncentral_chi2_sf(dof, lam, x, tol=1e-12):
    if x <= 0:
        return 1.0
    return marcum_q(0.5 * dof, math.sqrt(lam), math.sqrt(x), tol)


def noncentral_chi2_cdf(dof, lam, x, tol=1e-12):
    return 1.0 - noncentral_chi2_sf(dof, lam, x, tol)


@dataclass(frozen=True)
class DetectorConfig:
    """Window length ``l`` and threshold ``th`` of a chi-squared detector."""

    l: int
    th: float
    sigma_r_inv: np.ndarray
    l_max: int = 10
    epsilon: float = 0.05

    def __post_init__(self):
        if int(self.l) != self.l or not 1 <= self.l <= self.l_max:
            raise ConfigError(f"window length {self.l} must be an integer in [1, {self.l_max}]")
        if not self.th > 0:
            raise ConfigError("threshold must be positive")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        S = np.atleast_2d(np.asarray(self.sigma_r_inv, dtype=float))
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise ConfigError("sigma_r_inv must be symmetric positive definite")
        object.__setattr__(self, "sigma_r_inv", S)

    @property
    def m(self):
        return self.sigma_r_inv.shape[0]


@dataclass(frozen=True)
class NoncentralParams:
    dof: float
    lam: float

    @property
    def mu(self):
        return self.dof + self.lam

    @property
    def sigma2(self):
        return 2.0 * (self.dof + 2.0 * self.lam)


def chi2_statistic(residues, sigma_r_inv, l=None):
    """``sum_i r_i^T S r_i`` over a window of residue vectors."""
    R = np.atleast_2d(np.asarray(residues, dtype=float))
    S = np.atleast_2d(np.asarray(sigma_r_inv, dtype=float))
    if R.shape[1] != S.shape[0]:
        R = R.reshape(-1, S.shape[0])
    if l is not None and R.shape[0] != l:
        raise ConfigError(f"expected {l} residues in the window, got {R.shape[0]}")
    return float(np.einsum("ij,jk,ik->", R, S, R))


def sliding_chi2(residues, sigma_r_inv, l):
    """Window statistic at every step; the first ``l - 1`` use what is available.

    ``l`` may be a scalar or a per-step sequence of window lengths.
    """
    R = np.atleast_2d(np.asarray(residues, dtype=float))
    S = np.atleast_2d(np.asarray(sigma_r_inv, dtype=float))
    q = np.einsum("ij,jk,ik->i", R, S, R)
    csum = np.concatenate([[0.0], np.cumsum(q)])
    idx = np.arange(len(q))
    ls = np.broadcast_to(np.asarray(l, dtype=int), idx.shape)
    start = np.maximum(idx + 1 - ls, 0)
    return csum[idx + 1] - csum[start]


def far(cfg, m=None):
    """Per-step false alarm probability ``1 - P(g <= th)`` of a central test."""
    m = cfg.m if m is None else m
    return chi2_sf(m * cfg.l, cfg.th)


def far_value(th, l, m=1):
    """:func:`far` without building a config."""
    return chi2_sf(m * l, th)


def tpr(cfg, lam, m=None):
    """Detection probability when the window statistic has non-centrality ``lam``."""
    if lam < 0:
        raise ValueError("non-centrality must be nonnegative")
    m = cfg.m if m is None else m
    return noncentral_chi2_sf(m * cfg.l, lam, cfg.th)


def estimate_noncentrality(attacked_residues, sigma_r, l):
    """Estimate the non-centrality an attack induces on an ``l``-window test.

    ``P`` is the empirical second moment of the attacked residues minus the
    nominal residue covariance; ``lam = l * trace(P sigma_r^-1)``, floored at 0.
    """
    R = np.atleast_2d(np.asarray(attacked_residues, dtype=float))
    S = np.atleast_2d(np.asarray(sigma_r, dtype=float))
    m = S.shape[0]
    if R.shape[1] != m:
        R = R.reshape(-1, m)
    if R.shape[0] < 30 * m:
        raise EstimationError(f"need at least {30 * m} attacked residues, got {R.shape[0]}")
    P = R.T @ R / R.shape[0] - S
    lam = max(0.0, float(l * np.trace(P @ np.linalg.inv(S))))
    return NoncentralParams(dof=m * l, lam=lam)
