"""Attacker / detector / controller environment, rewards, training and monitoring.

The three agents share one simulated loop. Within a step the attacker acts
first on the intercepted sensor value, then the detector picks ``(Th, l)``
from the forged output and residue, and the loop advances. The controller
agent replaces ``u = -K xhat`` at step ``k`` exactly when step ``k - 1``
raised an alarm and ``xhat_k`` lies in ``X_S`` but outside ``X_R``.
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chi2 import far_value
from .ddpg import DdpgAgent, DdpgConfig
from .errors import ConfigError, TrainingAborted
from .lti import AttackVector, SimTrace, Simulator, simulate
from .region import Box

log = logging.getLogger(__name__)

ROLES = ("attacker", "detector", "controller")


@dataclass
class AgentSpaces:
    """Observation features and action bounds for the three agents.

    Constant region bounds are not fed to the networks; they scale the
    features instead. Residues are whitened by the nominal residue standard
    deviation and compressed with ``asinh`` so attack-sized residues stay
    finite-scale.
    """

    model: object
    x_s: Box
    x_r: Box
    eps_y: np.ndarray
    eps_u: np.ndarray
    th_max: float = 50.0
    th_min: float = 0.1
    l_max: int = 10

    def __post_init__(self):
        m, p = self.model.m, self.model.p
        self.eps_y = np.broadcast_to(np.asarray(self.eps_y, dtype=float), (m,)).copy()
        self.eps_u = np.broadcast_to(np.asarray(self.eps_u, dtype=float), (p,)).copy()
        if np.any(self.eps_y <= 0) or np.any(self.eps_u <= 0):
            raise ConfigError("attack ranges must be positive")
        if not 0 < self.th_min < self.th_max:
            raise ConfigError("need 0 < th_min < th_max")
        if int(self.l_max) != self.l_max or self.l_max < 1:
            raise ConfigError("l_max must be a positive integer")
        if not self.x_s.contains_box(self.x_r):
            raise ConfigError("X_R must lie inside X_S")
        self.s_half = np.maximum(np.abs(self.x_s.lo), np.abs(self.x_s.hi))
        self.r_half = np.maximum(np.abs(self.x_r.lo), np.abs(self.x_r.hi))
        self.y_half = np.abs(self.model.C) @ self.s_half
        self.r_std = np.sqrt(np.diag(self.model.sigma_r))

    # observation features ------------------------------------------------
    def attacker_obs(self, obs):
        th = self.th_max if obs.prev_th is None or not math.isfinite(obs.prev_th) else obs.prev_th
        l = self.l_max if obs.prev_l is None else obs.prev_l
        return np.concatenate([obs.y_clean / self.y_half, obs.u / self.eps_u,
                               [th / self.th_max, l / self.l_max]])

    def detector_obs(self, obs):
        return np.concatenate([np.arcsinh(obs.r / self.r_std) / 4.0, obs.y / self.y_half])

    def controller_obs(self, obs):
        return np.concatenate([obs.x_hat / self.s_half, obs.y / self.y_half])

    @property
    def obs_dims(self):
        m, n, p = self.model.m, self.model.n, self.model.p
        return {"attacker": m + p + 2, "detector": 2 * m, "controller": n + m}

    # action bounds ---------------------------------------------------------
    @property
    def action_bounds(self):
        return {
            "attacker": (np.concatenate([-self.eps_y, -self.eps_u]), np.concatenate([self.eps_y, self.eps_u])),
            "detector": (np.array([self.th_min, 1.0]), np.array([self.th_max, float(self.l_max)])),
            "controller": (-self.eps_u, self.eps_u),
        }

    def attack_from_action(self, action):
        m = self.model.m
        a = np.asarray(action, dtype=float)
        return AttackVector(a[:m].copy(), a[m:].copy()).clipped(self.eps_y, self.eps_u)

    def detector_from_action(self, action):
        th = float(np.clip(action[0], self.th_min, self.th_max))
        l = int(np.clip(np.rint(action[1]), 1, self.l_max))
        return th, l

    def control_from_action(self, action):
        return np.clip(np.asarray(action, dtype=float), -self.eps_u, self.eps_u)

    def controller_triggered(self, prev_alarm, x_hat):
        return bool(prev_alarm and self.x_s.contains(x_hat) and not self.x_r.contains(x_hat))


@dataclass
class RewardSpec:
    w1: float = 1.0
    w2: float = 1.0
    w3: Optional[np.ndarray] = None
    epsilon: float = 0.05
    far_penalty: float = 1.0
    exit_bonus: float = 10.0
    exit_penalty: float = 10.0

    def __post_init__(self):
        if not (0 <= self.w1 <= 1 and 0 <= self.w2 <= 1) or self.w1 + self.w2 <= 0:
            raise ConfigError("w1, w2 must lie in [0, 1] and not both be zero")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.w3 is not None:
            self.w3 = np.asarray(self.w3, dtype=float).reshape(-1)
            if np.any(self.w3 <= 0):
                raise ConfigError("W3 diagonal entries must be positive")

    def weights(self, half_widths):
        """``W3`` diagonal; defaults to ``1 / S_j**2`` for the given half-widths."""
        if self.w3 is None:
            return 1.0 / np.asarray(half_widths, dtype=float) ** 2
        return self.w3


def reward_detector(alarm, attack_active, th, l, spec, m=1):
    r = 0.0
    if alarm and attack_active:
        r += spec.w1
    elif alarm:
        r -= spec.w2
    r -= spec.far_penalty * max(0.0, far_value(th, l, m) - spec.epsilon)
    return r


def safety_drive(x, s_half, w3):
    d = np.abs(x) - s_half
    return float(np.sum(np.sign(d) * w3 * d * d))


def reward_attacker(detected, false_alarm, x_next, s_half, w3, spec, exited=False):
    """Stealth terms with the detector's signs flipped plus the signed safety drive."""
    r = -spec.w1 * float(detected) + spec.w2 * float(false_alarm)
    r += safety_drive(x_next, s_half, w3)
    if exited:
        r += spec.exit_bonus
    return r


def reward_controller(x_hat_next, r_half, w3, spec, exited=False):
    """Hinged distance of the estimate to ``X_R``; zero anywhere inside."""
    d = np.maximum(0.0, np.abs(x_hat_next) - r_half)
    r = -float(np.sum(w3 * d * d))
    if exited:
        r -= spec.exit_penalty
    return r


@dataclass
class Schedule:
    episodes: int = 3000
    steps: int = 100
    rollouts_per_episode: int = 1
    onset_max: int = 50
    attack_every: int = 2
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.episodes < 0 or self.steps < 1 or self.rollouts_per_episode < 1:
            raise ConfigError("invalid episode schedule")
        if not 0 <= self.onset_max < self.steps:
            raise ConfigError("onset_max must lie in [0, steps)")

    def attack_present(self, episode):
        return self.attack_every > 0 and episode % self.attack_every == 0


@dataclass
class EpisodeResult:
    trace: SimTrace
    detections: int
    false_alarms: int
    attacked_steps: int
    unattacked_steps: int
    safety_violated: bool
    returned_to_xr_step: Optional[int]
    attack_onset: Optional[int] = None
    first_alarm_after_onset: Optional[int] = None
    rewards: dict = field(default_factory=dict)

    @property
    def tpr(self):
        return self.detections / self.attacked_steps if self.attacked_steps else float("nan")

    @property
    def far(self):
        return self.false_alarms / self.unattacked_steps if self.unattacked_steps else float("nan")

    @property
    def alarms(self):
        return self.detections + self.false_alarms

    @property
    def detection_latency(self):
        if self.attack_onset is None or self.first_alarm_after_onset is None:
            return None
        return self.first_alarm_after_onset - self.attack_onset


def summarize(trace, x_s, x_r, rewards=None):
    """Build the counters of an :class:`EpisodeResult` from trace flags."""
    alarm = trace.column("alarm").astype(bool) if len(trace) else np.zeros(0, bool)
    active = trace.column("attack_active").astype(bool) if len(trace) else np.zeros(0, bool)
    xs = trace.column("x") if len(trace) else np.zeros((0, x_s.dim))
    violated = trace.diverged or any(not x_s.contains(x) for x in xs)
    if trace.final_state is not None:
        violated = violated or not x_s.contains(trace.final_state.x)
    onset = int(np.argmax(active)) if active.any() else None
    first_alarm = None
    if onset is not None:
        hits = np.nonzero(alarm & active)[0]
        first_alarm = int(hits[0]) if hits.size else None
    returned = None
    if len(trace):
        outside = [not x_r.contains(x) for x in xs]
        if any(outside):
            last_out = max(i for i, o in enumerate(outside) if o)
            if last_out + 1 < len(xs):
                returned = int(trace.rows[last_out + 1].k)
    return EpisodeResult(
        trace=trace,
        detections=int(np.sum(alarm & active)),
        false_alarms=int(np.sum(alarm & ~active)),
        attacked_steps=int(np.sum(active)),
        unattacked_steps=int(np.sum(~active)),
        safety_violated=bool(violated),
        returned_to_xr_step=returned,
        attack_onset=onset,
        first_alarm_after_onset=first_alarm,
        rewards=rewards or {},
    )


# policies ------------------------------------------------------------------

def agent_attack_policy(agent, spaces, onset, explore=False, rng=None, record=None):
    """Attacker agent active from step ``onset`` on."""
    def policy(obs):
        if obs.k < onset:
            return None
        feat = spaces.attacker_obs(obs)
        a = agent.act_norm(feat, explore, rng)
        if record is not None:
            record.append((feat, a))
        return spaces.attack_from_action(agent.to_action(a))
    return policy


def scripted_attack_policy(onset, a_y, a_u, ramp=None, stop=None):
    """Constant (or ramped, if ``ramp`` steps) bias injection from ``onset``."""
    a_y = np.atleast_1d(np.asarray(a_y, dtype=float))
    a_u = np.atleast_1d(np.asarray(a_u, dtype=float))

    def policy(obs):
        if obs.k < onset or (stop is not None and obs.k >= stop):
            return None
        frac = 1.0 if not ramp else min(1.0, (obs.k - onset + 1) / ramp)
        return AttackVector(frac * a_y, frac * a_u)
    return policy


def agent_detector_policy(agent, spaces, explore=False, rng=None, record=None):
    def policy(obs):
        feat = spaces.detector_obs(obs)
        a = agent.act_norm(feat, explore, rng)
        if record is not None:
            record.append((feat, a))
        return spaces.detector_from_action(agent.to_action(a))
    return policy


def switching_control_policy(spaces, agent=None, explore=False, rng=None, record=None):
    """Controller agent under alarm in ``X_S \\ X_R``; ``None`` (nominal) otherwise.

    Without an agent the substitute action is the nominal ``-K xhat`` itself,
    so the switching decision is still recorded in the trace.
    """
    model = spaces.model

    def policy(obs):
        if not spaces.controller_triggered(obs.prev_alarm, obs.x_hat):
            if record is not None:
                record.append(None)
            return None
        feat = spaces.controller_obs(obs)
        if agent is None:
            if record is not None:
                record.append((feat, None))
            return -model.K @ obs.x_hat
        a = agent.act_norm(feat, explore, rng)
        if record is not None:
            record.append((feat, a))
        return spaces.control_from_action(agent.to_action(a))
    return policy


def online_monitor(model, spaces, T, detector=None, controller=None, attack_policy=None,
                   seed=0, x0=None, x_hat0=None, switching=True):
    """Run the online loop and summarize it.

    ``detector`` is a trained agent, a ``(th, l)`` pair for a constant
    detector, or a detector policy callable. ``x0`` defaults to a uniform
    draw from ``X_R`` and ``xhat_0`` to ``x0``.
    """
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0 = spaces.x_r.sample(rng)
    if x_hat0 is None:
        x_hat0 = x0
    if isinstance(detector, DdpgAgent):
        det_policy = agent_detector_policy(detector, spaces)
    elif isinstance(detector, tuple):
        th, l = detector
        det_policy = lambda obs: (th, l)
    else:
        det_policy = detector
    ctl_policy = switching_control_policy(spaces, controller) if switching else None
    trace = simulate(model, T, attack_policy, det_policy, ctl_policy, seed=rng, x0=x0,
                     x_hat0=x_hat0, window_max=spaces.l_max)
    return summarize(trace, spaces.x_s, spaces.x_r)


# training ------------------------------------------------------------------

def make_agents(spaces, ddpg_config, seed):
    agents = {}
    for i, role in enumerate(ROLES):
        low, high = spaces.action_bounds[role]
        rng = np.random.default_rng([seed, 1000 + i])
        agents[role] = DdpgAgent(spaces.obs_dims[role], low, high, ddpg_config, rng, role=role)
    return agents


@dataclass
class TrainLogRow:
    episode: int
    attack_present: bool
    attacker_return: float
    detector_return: float
    controller_return: float
    empirical_tpr: float
    empirical_far: float
    steps: int
    safety_violated: bool

    FIELDS = ("episode", "attacker_return", "detector_return", "controller_return",
              "empirical_TPR", "empirical_FAR")


class Trainer:
    """Sequential multi-agent DDPG training with resumable state.

    Every random stream is derived from ``(seed, episode, stream)`` so a run
    resumed from a checkpoint replays exactly like an uninterrupted one.
    """

    def __init__(self, model, spaces, reward_spec, schedule, ddpg_config=None, seed=0, agents=None):
        self.model = model
        self.spaces = spaces
        self.reward_spec = reward_spec
        self.schedule = schedule
        self.ddpg_config = ddpg_config or DdpgConfig()
        self.seed = int(seed)
        self.agents = agents if agents is not None else make_agents(spaces, self.ddpg_config, self.seed)
        self.episode = 0
        self.log = []
        self.last_trace = None

    def noise_level(self, episode):
        c = self.ddpg_config
        total = max(1, self.schedule.episodes - 1)
        return c.noise_start + (c.noise_end - c.noise_start) * min(1.0, episode / total)

    def run(self, until=None, checkpoint=None, progress=None):
        until = self.schedule.episodes if until is None else min(until, self.schedule.episodes)
        while self.episode < until:
            for r in range(self.schedule.rollouts_per_episode):
                row = self.run_episode(self.episode, r)
            self.log.append(row)
            self.episode += 1
            if progress is not None:
                progress(row)
            if checkpoint is not None and self.episode % self.schedule.checkpoint_every == 0:
                self.save_checkpoint(checkpoint)
        return self.agents, self.log

    def run_episode(self, episode, rollout=0):
        spaces, spec, sched = self.spaces, self.reward_spec, self.schedule
        att, det, ctl = (self.agents[r] for r in ROLES)
        noise = self.noise_level(episode)
        for agent in self.agents.values():
            agent.noise_std = noise
        env_rng = np.random.default_rng([self.seed, episode, rollout, 0])
        act_rng = np.random.default_rng([self.seed, episode, rollout, 1])
        learn_rng = np.random.default_rng([self.seed, episode, rollout, 2])
        attack_present = sched.attack_present(episode)
        onset = int(env_rng.integers(0, sched.onset_max + 1)) if attack_present else sched.steps + 1
        x0 = spaces.x_r.sample(env_rng)
        sim = Simulator(self.model, env_rng, x0=x0, x_hat0=x0, window_max=spaces.l_max)
        w3 = spec.weights(spaces.s_half)
        m = self.model.m

        att_rec, det_rec, ctl_rec = [], [], []
        att_policy = agent_attack_policy(att, spaces, onset, True, act_rng, att_rec)
        det_policy = agent_detector_policy(det, spaces, True, act_rng, det_rec)
        ctl_policy = switching_control_policy(spaces, ctl, True, act_rng, ctl_rec)
        pending = {"attacker": None, "detector": None}
        returns = {role: 0.0 for role in ROLES}
        trace = SimTrace()

        def push(role, next_obs, done):
            item = pending[role]
            if item is not None:
                obs, a, rew = item
                self.agents[role].buffer.add(obs, a, rew, obs if next_obs is None else next_obs, done)
            pending[role] = None

        applied_ctl = None  # controller decision in force at the current step
        for _ in range(sched.steps):
            n_att = len(att_rec)
            row, nxt = sim.run_step(att_policy, det_policy, ctl_policy)
            trace.rows.append(row)
            trace.final_state = nxt
            exited = sim.diverged or not spaces.x_s.contains(nxt.x)
            next_ctl = ctl_rec[-1]

            if len(att_rec) > n_att:
                feat_a, a_a = att_rec[-1]
                push("attacker", feat_a, False)
                r_att = reward_attacker(row.alarm, False, nxt.x, spaces.s_half, w3, spec, exited)
                pending["attacker"] = (feat_a, a_a, r_att)
                returns["attacker"] += r_att
            feat_d, a_d = det_rec[-1]
            push("detector", feat_d, False)
            r_det = reward_detector(row.alarm, row.attack_active, row.th, row.win_l, spec, m)
            pending["detector"] = (feat_d, a_d, r_det)
            returns["detector"] += r_det
            if row.controller_mode:
                feat_c, a_c = applied_ctl
                r_ctl = reward_controller(nxt.x_hat, spaces.r_half, w3, spec, exited)
                returns["controller"] += r_ctl
                # control hand-back ends the controller's episode
                keep = next_ctl is not None and not exited
                ctl.buffer.add(feat_c, a_c, r_ctl, next_ctl[0] if keep else feat_c, not keep)
            applied_ctl = next_ctl

            if exited:
                push("attacker", None, True)
                push("detector", None, True)
                trace.diverged = sim.diverged
                break
            for agent in self.agents.values():
                agent.learn(learn_rng)
        # time-limit truncation: trailing transitions lack a next observation and are dropped
        summary = summarize(trace, spaces.x_s, spaces.x_r, returns)
        self.last_trace = trace
        if episode % 100 == 0 and not all(a.parameters_finite() for a in self.agents.values()):
            raise TrainingAborted(f"non-finite parameters at episode {episode}",
                                  {r: a.snapshot() for r, a in self.agents.items()})
        return TrainLogRow(episode, attack_present, returns["attacker"], returns["detector"],
                           returns["controller"], summary.tpr, summary.far, len(trace),
                           summary.safety_violated)

    def save_checkpoint(self, path):
        with open(path, "wb") as fh:
            pickle.dump({"episode": self.episode, "log": self.log, "agents": self.agents,
                         "seed": self.seed}, fh)

    @classmethod
    def resume(cls, path, model, spaces, reward_spec, schedule, ddpg_config=None):
        with open(path, "rb") as fh:
            state = pickle.load(fh)
        trainer = cls(model, spaces, reward_spec, schedule, ddpg_config, state["seed"], state["agents"])
        trainer.episode = state["episode"]
        trainer.log = state["log"]
        return trainer


def train_multi_agent(model, spaces, reward_spec, agents=None, schedule=None, ddpg_config=None,
                      seed=0, checkpoint=None, progress=None):
    """Train attacker, detector and controller together; returns ``(agents, log)``."""
    trainer = Trainer(model, spaces, reward_spec, schedule or Schedule(), ddpg_config, seed, agents)
    return trainer.run(checkpoint=checkpoint, progress=progress)


# evaluation helpers ----------------------------------------------------------

def constant_detector_tpr(results, sigma_r_inv, th, l):
    """Per-step TPR of a fixed ``(th, l)`` detector replayed on recorded residues."""
    from .chi2 import sliding_chi2
    hits = total = 0
    for res in results:
        r = res.trace.column("r")
        active = res.trace.column("attack_active").astype(bool)
        g = sliding_chi2(r, sigma_r_inv, l)
        hits += int(np.sum((g > th) & active))
        total += int(np.sum(active))
    return hits / total if total else float("nan")


def best_constant_threshold(results, sigma_r_inv, l, epsilon, m=1, th_grid=None):
    """Best replayed TPR over constant thresholds whose analytic FAR is <= epsilon."""
    if th_grid is None:
        th_grid = np.round(np.arange(0.5, 50.0 + 1e-9, 0.25), 6)
    best = (float("-inf"), None)
    for th in th_grid:
        if far_value(th, l, m) > epsilon:
            continue
        t = constant_detector_tpr(results, sigma_r_inv, th, l)
        if t > best[0]:
            best = (t, float(th))
    return best


def pooled_rates(results):
    det = sum(r.detections for r in results)
    att = sum(r.attacked_steps for r in results)
    fa = sum(r.false_alarms for r in results)
    un = sum(r.unattacked_steps for r in results)
    alarms = sum(r.alarms for r in results)
    return {
        "tpr": det / att if att else float("nan"),
        "far_per_step": fa / un if un else float("nan"),
        "far_per_alarm": fa / alarms if alarms else float("nan"),
    }
