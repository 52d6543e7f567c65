"""Discrete LTI plant / observer / controller loop with false data injection.

Per step ``k`` the loop is::

    u~_k    = u_k + a_u
    y_k     = C x_k + D u~_k + v_k + a_y
    r_k     = y_k - C xhat_k
    x_k+1   = A x_k + B u~_k + w_k
    xhat_k+1 = A xhat_k + B u_k + L r_k
    u_k+1   = -K xhat_k+1

The estimator uses its own control ``u_k``, never the forged ``u~_k``.
With a zero attack this is exactly the nominal closed loop.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InstabilityError

DIVERGENCE_LIMIT = 1e6


def _as_matrix(name, value, shape=None):
    arr = np.array(value, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if shape is None or shape[1] == 1 else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_psd(name, M, strict=False):
    if not np.allclose(M, M.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(M)
    if strict and eig.min() <= 0:
        raise ConfigError(f"{name} must be positive definite (min eigenvalue {eig.min():.3g})")
    if eig.min() < -1e-12:
        raise ConfigError(f"{name} must be positive semi-definite (min eigenvalue {eig.min():.3g})")


def spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def psd_sqrt(M):
    """Symmetric square root usable for sampling; tolerates singular ``M``."""
    eig, vec = np.linalg.eigh(M)
    return vec @ np.diag(np.sqrt(np.clip(eig, 0.0, None))) @ vec.T


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Closed-loop LTI system with observer gain ``L`` and feedback gain ``K``.

    Matrices are copied and frozen on construction. Construction fails if
    shapes disagree, a covariance is not PSD, ``sigma_v`` is singular, or
    either ``A - BK`` or ``A - LC`` has spectral radius >= 1. Analysis of
    deliberately unstable loops can pass ``check_stability=False``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    L: np.ndarray
    sigma_w: np.ndarray
    sigma_v: np.ndarray
    D: Optional[np.ndarray] = None
    x0_mean: Optional[np.ndarray] = None
    sigma_0: Optional[np.ndarray] = None
    h: float = 0.1
    check_stability: bool = field(default=True, repr=False)

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError(f"A must be square, got {A.shape}")
        B = _as_matrix("B", self.B)
        if B.shape[0] != n:
            raise ConfigError(f"B has {B.shape[0]} rows, expected {n}")
        p = B.shape[1]
        C = _as_matrix("C", self.C)
        if C.shape[1] != n:
            raise ConfigError(f"C has {C.shape[1]} columns, expected {n}")
        m = C.shape[0]
        D = _as_matrix("D", np.zeros((m, p)) if self.D is None else self.D, (m, p))
        K = _as_matrix("K", self.K, (p, n))
        L = _as_matrix("L", self.L, (n, m))
        sw = _as_matrix("sigma_w", self.sigma_w, (n, n))
        sv = _as_matrix("sigma_v", self.sigma_v, (m, m))
        s0 = _as_matrix("sigma_0", np.zeros((n, n)) if self.sigma_0 is None else self.sigma_0, (n, n))
        x0 = np.zeros(n) if self.x0_mean is None else np.array(self.x0_mean, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise ConfigError(f"x0_mean has length {x0.size}, expected {n}")
        x0.setflags(write=False)
        _check_psd("sigma_w", sw)
        _check_psd("sigma_v", sv, strict=True)
        _check_psd("sigma_0", s0)
        if not self.h > 0:
            raise ConfigError("sampling period h must be positive")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D), ("K", K), ("L", L),
                          ("sigma_w", sw), ("sigma_v", sv), ("sigma_0", s0), ("x0_mean", x0)):
            object.__setattr__(self, name, val)
        rho_bk = spectral_radius(A - B @ K)
        rho_lc = spectral_radius(A - L @ C)
        if not self.check_stability:
            return
        if rho_bk >= 1.0:
            raise ConfigError(f"A - BK is not stable (spectral radius {rho_bk:.6g})")
        if rho_lc >= 1.0:
            raise ConfigError(f"A - LC is not stable (spectral radius {rho_lc:.6g})")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.C.shape[0]

    @property
    def p(self):
        """Number of control inputs."""
        return self.B.shape[1]

    @cached_property
    def sigma_e(self):
        return steady_state_error_cov(self)

    @cached_property
    def sigma_r(self):
        return residue_cov(self)

    @cached_property
    def sigma_r_inv(self):
        return np.linalg.inv(self.sigma_r)

    @cached_property
    def noise_sqrt(self):
        return psd_sqrt(self.sigma_w), psd_sqrt(self.sigma_v)

    def with_noise(self, sigma_w, sigma_v):
        return SystemModel(A=self.A, B=self.B, C=self.C, D=self.D, K=self.K, L=self.L,
                           sigma_w=sigma_w, sigma_v=sigma_v, x0_mean=self.x0_mean,
                           sigma_0=self.sigma_0, h=self.h,
                           check_stability=self.check_stability)


TTC_MATRICES = dict(
    A=[[1.0, 0.1], [0.0, 1.0]],
    B=[[0.005], [0.1]],
    C=[[1.0, 0.0]],
    K=[[16.0302, 5.6622]],
    L=[[1.8721], [9.6532]],
    h=0.1,
)


def ttc_model(sigma_w=None, sigma_v=None, **overrides):
    """Trajectory tracking controller benchmark (deviation D, velocity V)."""
    kw = dict(TTC_MATRICES)
    kw["sigma_w"] = 1e-4 * np.eye(2) if sigma_w is None else sigma_w
    kw["sigma_v"] = 1e-4 * np.eye(1) if sigma_v is None else sigma_v
    kw.update(overrides)
    return SystemModel(**kw)


@dataclass(frozen=True)
class AttackVector:
    """False data added to the sensor (``a_y``) and actuator (``a_u``) channels."""

    a_y: np.ndarray
    a_u: np.ndarray

    @classmethod
    def zero(cls, model):
        return cls(np.zeros(model.m), np.zeros(model.p))

    def clipped(self, eps_y, eps_u):
        """Clip componentwise to ``[-eps, eps]`` (scalars or arrays)."""
        return AttackVector(np.clip(self.a_y, -np.asarray(eps_y), eps_y),
                            np.clip(self.a_u, -np.asarray(eps_u), eps_u))


@dataclass(frozen=True)
class SimState:
    """Loop state at step ``k``. ``y`` and ``r`` are set once measured."""

    k: int
    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    y: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None


def initial_state(model, x0, x_hat0=None):
    x0 = np.asarray(x0, dtype=float).reshape(model.n)
    x_hat0 = np.zeros(model.n) if x_hat0 is None else np.asarray(x_hat0, dtype=float).reshape(model.n)
    return SimState(0, x0, x_hat0, -model.K @ x_hat0)


def _check_dims(model, s, attack, w=None, v=None):
    if s.x.shape != (model.n,) or s.x_hat.shape != (model.n,) or s.u.shape != (model.p,):
        raise ConfigError("state dimensions do not match the model")
    if attack.a_y.shape != (model.m,) or attack.a_u.shape != (model.p,):
        raise ConfigError("attack dimensions do not match the model")
    if w is not None and np.shape(w) != (model.n,):
        raise ConfigError(f"process noise must have length {model.n}")
    if v is not None and np.shape(v) != (model.m,):
        raise ConfigError(f"measurement noise must have length {model.m}")


def measure(model, s, attack, v):
    """Return ``s`` with the (possibly forged) output and residue filled in."""
    _check_dims(model, s, attack, v=v)
    u_tilde = s.u + attack.a_u
    y = model.C @ s.x + model.D @ u_tilde + v + attack.a_y
    r = y - model.C @ s.x_hat
    return replace(s, y=y, r=r)


def advance(model, s, a_u, w):
    """Propagate a measured state one step. The returned state is unmeasured."""
    if s.r is None:
        raise ConfigError("advance() needs a measured state")
    x_next = model.A @ s.x + model.B @ (s.u + a_u) + w
    x_hat_next = model.A @ s.x_hat + model.B @ s.u + model.L @ s.r
    return SimState(s.k + 1, x_next, x_hat_next, -model.K @ x_hat_next)


def step(model, s, attack, w, v):
    """One loop update: measure at ``k`` with ``v`` and ``attack``, then advance."""
    _check_dims(model, s, attack, w, v)
    return advance(model, measure(model, s, attack, v), attack.a_u, w)


def steady_state_error_cov(model, tol=1e-12, max_iter=10**6):
    """Fixed point of ``S = F S F^T + sigma_w + L sigma_v L^T`` with ``F = A - LC``."""
    F = model.A - model.L @ model.C
    Q = model.sigma_w + model.L @ model.sigma_v @ model.L.T
    S = np.zeros_like(Q)
    for _ in range(max_iter):
        S_next = F @ S @ F.T + Q
        if np.max(np.abs(S_next - S)) < tol:
            return 0.5 * (S_next + S_next.T)
        S = S_next
    raise InstabilityError("estimation error covariance did not converge")


def residue_cov(model):
    """``C sigma_e C^T + sigma_v``."""
    S = model.C @ model.sigma_e @ model.C.T + model.sigma_v
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S).min() <= 0:
        raise ConfigError("residue covariance is singular")
    return S


@dataclass
class Observation:
    """What the loop exposes to a policy at one decision point.

    Fields not yet known at that point are ``None``: the attack policy sees
    ``y_clean`` (the true sensor value it intercepts) but not ``y``/``r``.
    """

    k: int
    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    y_clean: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    prev_th: Optional[float] = None
    prev_l: Optional[int] = None
    prev_alarm: bool = False
    attack_active: bool = False


@dataclass(frozen=True)
class TraceRow:
    k: int
    x: np.ndarray
    x_hat: np.ndarray
    y: np.ndarray
    u: np.ndarray
    r: np.ndarray
    a_y: np.ndarray
    a_u: np.ndarray
    g: float
    th: float
    win_l: int
    alarm: bool
    attack_active: bool
    controller_mode: bool


@dataclass
class SimTrace:
    rows: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    final_state: Optional[SimState] = None

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(row, name) for row in self.rows])


AttackPolicy = Callable[[Observation], Optional[AttackVector]]
DetectorPolicy = Callable[[Observation], tuple]
ControlPolicy = Callable[[Observation], Optional[np.ndarray]]


def constant_detector(th, l):
    return lambda obs: (th, l)


class Simulator:
    """Stepwise loop runner shared by :func:`simulate` and the RL environment.

    One call to :meth:`run_step` consumes exactly one ``standard_normal(n + m)``
    draw from ``rng``, so two runs from the same generator state see the same
    noise regardless of which policies are plugged in.
    """

    def __init__(self, model, rng, x0=None, x_hat0=None, window_max=64):
        self.model = model
        self.rng = rng
        if x0 is None:
            x0 = rng.multivariate_normal(model.x0_mean, model.sigma_0, method="eigh")
        self.state = initial_state(model, x0, x_hat0)
        self.controller_mode = False
        self.quad = deque(maxlen=window_max)
        self.window_max = window_max
        self.prev_th = None
        self.prev_l = None
        self.prev_alarm = False

    def draw_noise(self):
        n, m = self.model.n, self.model.m
        z = self.rng.standard_normal(n + m)
        sw, sv = self.model.noise_sqrt
        return sw @ z[:n], sv @ z[n:]

    def window_stat(self, l):
        l = min(int(l), len(self.quad))
        return float(sum(list(self.quad)[-l:])) if l > 0 else 0.0

    def run_step(self, attack_policy=None, detector_policy=None, control_policy=None):
        """Advance one step; returns ``(row, next_state)``."""
        model, s = self.model, self.state
        w, v = self.draw_noise()
        y_clean = model.C @ s.x + model.D @ s.u + v
        attack = None
        if attack_policy is not None:
            attack = attack_policy(Observation(s.k, s.x, s.x_hat, s.u, y_clean=y_clean,
                                               prev_th=self.prev_th, prev_l=self.prev_l,
                                               prev_alarm=self.prev_alarm, attack_active=True))
        active = attack is not None
        if attack is None:
            attack = AttackVector.zero(model)
        measured = measure(model, s, attack, v)
        r = measured.r
        self.quad.append(float(r @ model.sigma_r_inv @ r))
        if detector_policy is None:
            th, l = np.inf, 1
        else:
            th, l = detector_policy(Observation(s.k, s.x, s.x_hat, s.u, y_clean=y_clean,
                                                y=measured.y, r=r, prev_th=self.prev_th,
                                                prev_l=self.prev_l, prev_alarm=self.prev_alarm,
                                                attack_active=active))
            l = int(l)
            if not 1 <= l <= self.window_max:
                raise ConfigError(f"window length {l} outside [1, {self.window_max}]")
        g = self.window_stat(l)
        alarm = bool(g > th)
        nxt = advance(model, measured, attack.a_u, w)
        mode_next = False
        if control_policy is not None:
            override = control_policy(Observation(nxt.k, nxt.x, nxt.x_hat, nxt.u,
                                                  y=measured.y, r=r, prev_th=th, prev_l=l,
                                                  prev_alarm=alarm, attack_active=active))
            if override is not None:
                nxt = replace(nxt, u=np.asarray(override, dtype=float).reshape(model.p))
                mode_next = True
        row = TraceRow(s.k, s.x, s.x_hat, measured.y, s.u, r, attack.a_y, attack.a_u,
                       g, float(th), l, alarm, active, self.controller_mode)
        self.state = nxt
        self.controller_mode = mode_next
        self.prev_th, self.prev_l, self.prev_alarm = float(th), l, alarm
        return row, nxt

    @property
    def diverged(self):
        return bool(np.any(np.abs(self.state.x) > DIVERGENCE_LIMIT)) or not np.all(np.isfinite(self.state.x))


def simulate(model, T, attack_policy=None, detector_policy=None, control_policy=None,
             seed=0, x0=None, x_hat0=None, window_max=64):
    """Run ``T`` steps of the loop and return the trace.

    Policies are callables taking an :class:`Observation`; ``None`` means no
    attack, no alarms, and nominal ``u = -K xhat`` respectively. ``seed`` may
    be an int, a sequence of ints, or a ``numpy.random.Generator``.
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sim = Simulator(model, rng, x0=x0, x_hat0=x_hat0, window_max=window_max)
    trace = SimTrace()
    for _ in range(T):
        row, trace.final_state = sim.run_step(attack_policy, detector_policy, control_policy)
        trace.rows.append(row)
        if sim.diverged:
            trace.diverged = True
            trace.message = f"state magnitude exceeded {DIVERGENCE_LIMIT:g} after step {row.k}"
            break
    return trace
