"""Preferable operating region synthesis by exact affine reachability.

Under the nominal loop with ``xhat_0 = 0`` the state ``x_i`` is an affine
function of ``x_0`` and the noise sequence. Over a box of initial states and
a box of truncated noise, each coordinate's extremes are attained at corners
chosen by the signs of the affine coefficients, so a box region can be checked
exactly without a constraint solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, SynthesisError, VerificationError
from .lti import AttackVector, initial_state, step


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigError("box bounds have different lengths")
        if not np.all(lo < hi):
            raise ConfigError("box needs lo < hi in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_widths):
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h)

    @property
    def dim(self):
        return self.lo.size

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self):
        return 0.5 * (self.hi - self.lo)

    def scale(self, depth):
        if not 0 < depth <= 1:
            raise ConfigError("depth must lie in (0, 1]")
        return Box(depth * self.lo, depth * self.hi)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def contains_box(self, other, tol=1e-12):
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class Counterexample:
    x0: np.ndarray
    w: np.ndarray
    v: np.ndarray
    exit_step: int
    coordinate: int
    value: float


@dataclass(frozen=True)
class InvarianceCertificate:
    region: Box
    steps: int
    noise_bound_sigmas: float
    verified: bool
    counterexample: Optional[Counterexample] = None
    worst_margin: float = 0.0
    every_step: bool = False

    def __post_init__(self):
        if self.verified == (self.counterexample is not None):
            raise ValueError("a certificate is verified iff it has no counterexample")

    def to_dict(self):
        d = {
            "region": self.region.to_dict(),
            "steps": self.steps,
            "sigma_mult": self.noise_bound_sigmas,
            "every_step": self.every_step,
            "verified": self.verified,
            "worst_margin": self.worst_margin,
            "counterexample": None,
        }
        cx = self.counterexample
        if cx is not None:
            d["counterexample"] = {
                "x0": cx.x0.tolist(), "w": cx.w.tolist(), "v": cx.v.tolist(),
                "exit_step": cx.exit_step, "coordinate": cx.coordinate, "value": cx.value,
            }
        return d

    def to_text(self):
        return json.dumps(self.to_dict(), indent=2)


def closed_loop_matrices(model):
    """Nominal ``z = [x; xhat]`` dynamics ``z+ = M z + Gw w + Gv v``."""
    A, B, C, D, K, L = model.A, model.B, model.C, model.D, model.K, model.L
    n, m = model.n, model.m
    M = np.block([[A, -B @ K], [L @ C, A - B @ K - L @ C - L @ D @ K]])
    Gw = np.vstack([np.eye(n), np.zeros((n, n))])
    Gv = np.vstack([np.zeros((n, m)), L])
    return M, Gw, Gv


def noise_bounds(model, sigma_mult):
    return (sigma_mult * np.sqrt(np.diag(model.sigma_w)),
            sigma_mult * np.sqrt(np.diag(model.sigma_v)))


def affine_unroll(model, i):
    """Coefficients of ``x_i`` in ``x_0`` and in each ``w_j``, ``v_j`` (``xhat_0 = 0``).

    Returns ``(Fx, Fw, Fv)`` with shapes ``(n, n)``, ``(i, n, n)``, ``(i, n, m)``
    so that ``x_i = Fx x_0 + sum_j Fw[j] w_j + Fv[j] v_j``.
    """
    M, Gw, Gv = closed_loop_matrices(model)
    n = model.n
    powers = [np.eye(2 * n)]
    for _ in range(i):
        powers.append(M @ powers[-1])
    Fx = powers[i][:n, :n]
    Fw = np.stack([(powers[i - 1 - j] @ Gw)[:n] for j in range(i)]) if i else np.zeros((0, n, n))
    Fv = np.stack([(powers[i - 1 - j] @ Gv)[:n] for j in range(i)]) if i else np.zeros((0, n, model.m))
    return Fx, Fw, Fv


def is_invariant(model, region, i, sigma_mult=3.0, every_step=False):
    """Check ``x_0 in region => x_i in region`` for all truncated noise.

    Noise components are bounded by ``sigma_mult`` marginal standard
    deviations. With ``every_step`` the check covers ``x_1 .. x_i`` instead of
    ``x_i`` alone. On failure the certificate carries the worst corner as a
    replayable counterexample.
    """
    if i < 1:
        raise ConfigError("step count i must be >= 1")
    if not sigma_mult > 0:
        raise ConfigError("sigma_mult must be positive")
    if region.dim != model.n:
        raise ConfigError("region dimension does not match the model")
    M, Gw, Gv = closed_loop_matrices(model)
    bw, bv = noise_bounds(model, sigma_mult)
    n = model.n
    c, h = region.center, region.half

    # power_k[:n] are coefficients at step k; noise sums are cumulative in k
    power = np.eye(2 * n)
    noise_abs = np.zeros(n)
    noise_terms_w = []
    noise_terms_v = []
    worst = None  # (margin, step, coord, side)
    worst_margin = np.inf
    for k in range(1, i + 1):
        Ew = (power @ Gw)[:n]
        Ev = (power @ Gv)[:n]
        noise_terms_w.append(Ew)
        noise_terms_v.append(Ev)
        noise_abs = noise_abs + np.abs(Ew) @ bw + np.abs(Ev) @ bv
        power = M @ power
        if not np.all(np.isfinite(power)):
            raise VerificationError(f"closed-loop coefficients overflowed at step {k}")
        if not every_step and k < i:
            continue
        Fx = power[:n, :n]
        mid = Fx @ c
        spread = np.abs(Fx) @ h + noise_abs
        upper = region.hi - (mid + spread)
        lower = (mid - spread) - region.lo
        for side, margins in ((1, upper), (-1, lower)):
            j = int(np.argmin(margins))
            if margins[j] < worst_margin:
                worst_margin = float(margins[j])
                worst = (k, j, side)

    if worst_margin >= 0:
        return InvarianceCertificate(region, i, sigma_mult, True, None, worst_margin, every_step)

    k, j, side = worst
    Fx = np.linalg.matrix_power(M, k)[:n, :n]
    x0 = c + side * np.sign(Fx[j]) * h
    w = np.zeros((i, n))
    v = np.zeros((i, model.m))
    # noise_terms_*[q] multiplies the disturbance injected q steps before step k
    for q in range(k):
        w[k - 1 - q] = side * np.sign(noise_terms_w[q][j]) * bw
        v[k - 1 - q] = side * np.sign(noise_terms_v[q][j]) * bv
    xk = replay(model, x0, w, v)[k]
    cx = Counterexample(x0, w, v, k, j, float(xk[j]))
    return InvarianceCertificate(region, i, sigma_mult, False, cx, worst_margin, every_step)


def replay(model, x0, w, v):
    """Simulate the nominal loop from ``x0`` (``xhat_0 = 0``); returns ``x_0 .. x_T``."""
    s = initial_state(model, x0)
    zero = AttackVector.zero(model)
    xs = [s.x]
    for wk, vk in zip(np.asarray(w, dtype=float), np.asarray(v, dtype=float)):
        s = step(model, s, zero, wk, vk)
        xs.append(s.x)
    return np.array(xs)


@dataclass(frozen=True)
class SynthesisResult:
    region: Box
    depth: float
    certificate: InvarianceCertificate
    tried: tuple


def candidate_depths(d_delta):
    count = int(np.floor(1.0 / d_delta + 1e-9))
    depths = [round(k * d_delta, 12) for k in range(1, count + 1)]
    if depths[-1] < 1.0 - 1e-12:
        depths.append(1.0)
    return depths


def synthesize_region(model, x_s, i=50, d_delta=0.1, sigma_mult=3.0, every_step=False):
    """Smallest ``depth in {d, 2d, ..., 1}`` whose ``depth * x_s`` is invariant."""
    if not 0 < d_delta < 1:
        raise ConfigError("d_delta must lie in (0, 1)")
    tried = []
    for depth in candidate_depths(d_delta):
        region = x_s.scale(depth)
        assert x_s.contains_box(region)
        cert = is_invariant(model, region, i, sigma_mult, every_step)
        tried.append((depth, cert.verified))
        if cert.verified:
            return SynthesisResult(region, depth, cert, tuple(tried))
    raise SynthesisError(f"no depth in (0, 1] gives an invariant region (tried {len(tried)})")


def get_performance_region(model, x_s, i=50, d_delta=0.1, sigma_mult=3.0):
    return synthesize_region(model, x_s, i, d_delta, sigma_mult).region


def monte_carlo_violations(model, region, i, sigma_mult, n_runs, seed=0, every_step=False):
    """Count rollouts from uniform ``x_0 in region`` that end (or pass) outside it.

    Noise is Gaussian clipped to the same per-component bounds the verifier uses.
    """
    rng = np.random.default_rng(seed)
    M, Gw, Gv = closed_loop_matrices(model)
    bw, bv = noise_bounds(model, sigma_mult)
    sw = np.sqrt(np.diag(model.sigma_w))
    sv = np.sqrt(np.diag(model.sigma_v))
    n = model.n
    z = np.zeros((n_runs, 2 * n))
    z[:, :n] = region.sample(rng, n_runs)
    outside = np.zeros(n_runs, dtype=bool)
    for k in range(1, i + 1):
        w = np.clip(rng.standard_normal((n_runs, n)) * sw, -bw, bw)
        v = np.clip(rng.standard_normal((n_runs, model.m)) * sv, -bv, bv)
        z = z @ M.T + w @ Gw.T + v @ Gv.T
        if every_step or k == i:
            x = z[:, :n]
            outside |= np.any((x < region.lo) | (x > region.hi), axis=1)
    return int(outside.sum())
