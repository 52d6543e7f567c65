"""Benchmark configuration: TOML file -> validated :class:`BenchmarkConfig`.

Grammar: a TOML document with the sections below. Matrices are nested
lists of numbers (row-major), boxes are ``{lo = [...], hi = [...]}`` tables.
Unknown sections or keys are rejected; omitted optional keys take the
defaults listed here and are echoed back in ``applied_defaults``.

    seed = 7
    [model]       A B C K L (required); D sigma_w sigma_v x0_mean sigma_0 h
    [regions]     x_s (required); x_r (optional, verified when given)
    [synthesis]   steps d_delta sigma_mult
    [detector]    l_max th_max th_min epsilon
    [attack]      eps_y eps_u
    [reward]      w1 w2 w3 far_penalty exit_bonus exit_penalty
    [ddpg]        hidden actor_lr critic_lr gamma tau buffer_size batch_size noise_start noise_end
    [schedule]    episodes steps rollouts_per_episode onset_max attack_every checkpoint_every
    [evaluation]  seeds steps onset_max baseline_th baseline_l scripted_onset scripted_a_y
                  scripted_a_u scripted_ramp
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .ddpg import DdpgConfig
from .env import AgentSpaces, RewardSpec, Schedule
from .errors import ConfigError
from .lti import SystemModel
from .region import Box

REQUIRED = object()

SCHEMA = {
    "seed": 0,
    "model": {
        "A": REQUIRED, "B": REQUIRED, "C": REQUIRED, "K": REQUIRED, "L": REQUIRED,
        "D": None, "sigma_w": None, "sigma_v": None, "x0_mean": None, "sigma_0": None, "h": 0.1,
    },
    "regions": {"x_s": REQUIRED, "x_r": None},
    "synthesis": {"steps": 50, "d_delta": 0.1, "sigma_mult": 3.0},
    "detector": {"l_max": 10, "th_max": 50.0, "th_min": 0.1, "epsilon": 0.05},
    "attack": {"eps_y": None, "eps_u": 20.0},
    "reward": {"w1": 1.0, "w2": 1.0, "w3": None, "far_penalty": 1.0,
               "exit_bonus": 10.0, "exit_penalty": 10.0},
    "ddpg": {"hidden": [64, 64, 64], "actor_lr": 1e-4, "critic_lr": 1e-3, "gamma": 0.99,
             "tau": 0.005, "buffer_size": 100_000, "batch_size": 64,
             "noise_start": 0.1, "noise_end": 0.01},
    "schedule": {"episodes": 3000, "steps": 100, "rollouts_per_episode": 1, "onset_max": 50,
                 "attack_every": 2, "checkpoint_every": 100},
    "evaluation": {"seeds": 100, "steps": 100, "onset_max": 50, "baseline_th": 12.0,
                   "baseline_l": 4, "scripted_onset": 50, "scripted_a_y": None,
                   "scripted_a_u": None, "scripted_ramp": 0},
}


@dataclass(frozen=True)
class SynthesisParams:
    steps: int = 50
    d_delta: float = 0.1
    sigma_mult: float = 3.0


@dataclass(frozen=True)
class EvaluationParams:
    seeds: int = 100
    steps: int = 100
    onset_max: int = 50
    baseline_th: float = 12.0
    baseline_l: int = 4
    scripted_onset: int = 50
    scripted_a_y: Optional[list] = None
    scripted_a_u: Optional[list] = None
    scripted_ramp: int = 0


@dataclass
class BenchmarkConfig:
    seed: int
    model: SystemModel
    x_s: Box
    x_r: Optional[Box]
    synthesis: SynthesisParams
    l_max: int
    th_max: float
    th_min: float
    epsilon: float
    eps_y: np.ndarray
    eps_u: np.ndarray
    reward: RewardSpec
    ddpg: DdpgConfig
    schedule: Schedule
    evaluation: EvaluationParams
    raw: dict = field(default_factory=dict)
    applied_defaults: list = field(default_factory=list)

    @property
    def config_hash(self):
        return config_hash(self.raw)

    def spaces(self, x_r):
        return AgentSpaces(self.model, self.x_s, x_r, self.eps_y, self.eps_u,
                           th_max=self.th_max, th_min=self.th_min, l_max=self.l_max)


def canonical(raw):
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


def config_hash(raw):
    return hashlib.sha256(canonical(raw).encode()).hexdigest()


def _merge(data, schema, path, applied):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    unknown = set(data) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or 'top level'}")
    out = {}
    for key, default in schema.items():
        name = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(data.get(key, {}), default, name, applied)
        elif key in data:
            out[key] = data[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required field {name}")
        else:
            out[key] = default
            applied.append(name)
    return out


def _box(name, spec):
    if not isinstance(spec, dict) or set(spec) != {"lo", "hi"}:
        raise ConfigError(f"{name} must be a table with exactly lo and hi")
    try:
        return Box(spec["lo"], spec["hi"])
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(data):
    """Validate a parsed config mapping and build every component."""
    applied = []
    raw = _merge(data, SCHEMA, "", applied)
    mdl = dict(raw["model"])
    A = np.asarray(mdl["A"], dtype=float)
    n = A.shape[0] if A.ndim == 2 else 0
    m = np.atleast_2d(np.asarray(mdl["C"], dtype=float)).shape[0]
    if mdl["sigma_w"] is None:
        mdl["sigma_w"] = (1e-4 * np.eye(n)).tolist()
    if mdl["sigma_v"] is None:
        mdl["sigma_v"] = (1e-4 * np.eye(m)).tolist()
    raw["model"] = mdl
    try:
        model = SystemModel(**{k: v for k, v in mdl.items() if v is not None})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from None

    regions = raw["regions"]
    x_s = _box("regions.x_s", regions["x_s"])
    if x_s.dim != model.n:
        raise ConfigError("regions.x_s dimension does not match the model")
    if not x_s.contains(np.zeros(model.n)):
        raise ConfigError("regions.x_s must contain the origin")
    x_r = None
    if regions["x_r"] is not None:
        x_r = _box("regions.x_r", regions["x_r"])
        if not x_s.contains_box(x_r):
            raise ConfigError("regions.x_r must lie inside regions.x_s")

    syn = raw["synthesis"]
    if int(syn["steps"]) < 1 or not 0 < syn["d_delta"] < 1 or not syn["sigma_mult"] > 0:
        raise ConfigError("synthesis needs steps >= 1, d_delta in (0, 1), sigma_mult > 0")
    synthesis = SynthesisParams(int(syn["steps"]), float(syn["d_delta"]), float(syn["sigma_mult"]))

    det = raw["detector"]
    if int(det["l_max"]) < 1 or not 0 < det["th_min"] < det["th_max"] or not 0 < det["epsilon"] < 1:
        raise ConfigError("detector needs l_max >= 1, 0 < th_min < th_max, epsilon in (0, 1)")

    att = raw["attack"]
    s_half = np.maximum(np.abs(x_s.lo), np.abs(x_s.hi))
    eps_y = np.abs(model.C) @ s_half if att["eps_y"] is None else np.broadcast_to(
        np.asarray(att["eps_y"], dtype=float), (model.m,))
    eps_u = np.broadcast_to(np.asarray(att["eps_u"], dtype=float), (model.p,))

    try:
        reward = RewardSpec(**raw["reward"], epsilon=float(det["epsilon"]))
        ddpg = DdpgConfig(**raw["ddpg"])
        schedule = Schedule(**raw["schedule"])
        evaluation = EvaluationParams(**raw["evaluation"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if not 1 <= evaluation.baseline_l <= int(det["l_max"]):
        raise ConfigError("evaluation.baseline_l must lie in [1, l_max]")

    cfg = BenchmarkConfig(
        seed=int(raw["seed"]), model=model, x_s=x_s, x_r=x_r, synthesis=synthesis,
        l_max=int(det["l_max"]), th_max=float(det["th_max"]), th_min=float(det["th_min"]),
        epsilon=float(det["epsilon"]), eps_y=np.array(eps_y), eps_u=np.array(eps_u),
        reward=reward, ddpg=ddpg, schedule=schedule, evaluation=evaluation,
        raw=raw, applied_defaults=applied,
    )
    # builds the agent spaces once so every cross-module precondition is checked now
    cfg.spaces(x_r if x_r is not None else x_s.scale(synthesis.d_delta))
    return cfg


def load_config(path, overrides=None):
    """Parse and validate a TOML benchmark config.

    ``overrides`` maps dotted keys (``"schedule.episodes"``) to values and is
    applied before validation.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, last = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[last] = value
    return from_dict(data)
