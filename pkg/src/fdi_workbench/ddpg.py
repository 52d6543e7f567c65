"""Small numpy DDPG: ReLU MLPs with hand-written backprop, Adam, replay, targets.

Every network keeps its parameters in one flat float64 vector; the per-layer
weight and bias arrays are views into it. Adam steps and soft target updates
are therefore single vector operations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingAborted

FORMAT_VERSION = 1
_MAGIC = b"FDIW"


class Mlp:
    """Multilayer perceptron, ReLU hidden layers, affine or tanh output.

    Weights have shape ``(fan_in, fan_out)`` and act on row-vector batches.
    """

    def __init__(self, sizes, output="linear", rng=None, final_scale=3e-3):
        if output not in ("linear", "tanh"):
            raise ConfigError(f"unknown output activation {output!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.params = np.zeros(sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:])))
        self._bind_views()
        if rng is not None:
            last = len(self.weights) - 1
            for i, W in enumerate(self.weights):
                bound = final_scale if i == last else 1.0 / np.sqrt(W.shape[0])
                W[...] = rng.uniform(-bound, bound, W.shape)
                self.biases[i][...] = rng.uniform(-bound, bound, W.shape[1]) if i == last else 0.0

    def _bind_views(self):
        """Point ``weights``/``biases`` into the flat parameter vector."""
        self.weights, self.biases = [], []
        offset = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.params[offset:offset + a * b].reshape(a, b))
            offset += a * b
            self.biases.append(self.params[offset:offset + b])
            offset += b

    def __getstate__(self):
        return {"sizes": self.sizes, "output": self.output, "params": self.params}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._bind_views()

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        net = Mlp(self.sizes, self.output)
        net.params[...] = self.params
        return net

    def forward(self, x, cache=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.shape[1] != self.sizes[0]:
            raise ConfigError(f"input width {h.shape[1]} != {self.sizes[0]}")
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite network input")
        acts = [h]
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < last:
                h = np.maximum(z, 0.0)
            else:
                h = np.tanh(z) if self.output == "tanh" else z
            acts.append(h)
        out = h[0] if single else h
        return (out, acts) if cache else out

    __call__ = forward

    def backward(self, acts, upstream, param_grads=True):
        """Reverse pass for ``sum(output * upstream)``.

        ``acts`` is the cache from ``forward(..., cache=True)``. Returns the
        flat parameter gradient (or ``None``) and the input gradient. At a
        ReLU pre-activation of exactly zero the subgradient 0 is used.
        """
        g = np.asarray(upstream, dtype=float).reshape(acts[-1].shape)
        if self.output == "tanh":
            g = g * (1.0 - acts[-1] ** 2)
        grad = np.zeros_like(self.params) if param_grads else None
        offset = self.params.size
        for i in range(self.n_layers - 1, -1, -1):
            W = self.weights[i]
            a, b = W.shape
            if param_grads:
                offset -= b
                grad[offset:offset + b] = g.sum(axis=0)
                offset -= a * b
                grad[offset:offset + a * b] = (acts[i].T @ g).ravel()
            g = g @ W.T
            if i > 0:
                g = g * (acts[i] > 0.0)
        return grad, g


def forward(net, x):
    return net.forward(x)


def gradients(net, x, upstream):
    """Gradients of ``output . upstream``: per-layer ``(dW, db)`` list and input gradient."""
    _, acts = net.forward(x, cache=True)
    flat, gin = net.backward(acts, upstream)
    shadow = Mlp(net.sizes, net.output)
    shadow.params[...] = flat
    per_layer = [(dW.copy(), db.copy()) for dW, db in zip(shadow.weights, shadow.biases)]
    return per_layer, (gin[0] if np.ndim(x) == 1 else gin)


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * np.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        params -= lr_t * self.m / (np.sqrt(self.v) + self.eps)


class ReplayBuffer:
    """Fixed-capacity ring of ``(obs, action, reward, next_obs, done)``."""

    def __init__(self, capacity, obs_dim, act_dim):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.rew = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, act, rew, next_obs, done):
        i = self.ptr
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch, rng):
        batch = min(batch, self.size)
        if self.size < 64 * batch:
            return rng.permutation(self.size)[:batch]
        idx = rng.integers(0, self.size, batch)
        # duplicates are rare once the buffer is large; redraw the whole batch
        while np.unique(idx).size != batch:
            idx = rng.integers(0, self.size, batch)
        return idx

    def sample(self, batch, rng):
        idx = self.sample_indices(batch, rng)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


@dataclass
class DdpgConfig:
    hidden: tuple = (64, 64, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    buffer_size: int = 100_000
    batch_size: int = 64
    noise_start: float = 0.1
    noise_end: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 <= self.gamma <= 1 or not 0 < self.tau <= 1:
            raise ConfigError("need gamma in [0, 1] and tau in (0, 1]")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ConfigError("need 1 <= batch_size <= buffer_size")


class DdpgAgent:
    """Deterministic actor, Q critic on ``[obs, normalized action]``, soft targets.

    The actor emits ``tanh`` outputs in ``[-1, 1]`` that map affinely onto
    ``[low, high]``; the buffer and critic work in that normalized space.
    ``noise_std`` is a fraction of the action range.
    """

    def __init__(self, obs_dim, low, high, config=None, rng=None, role="agent"):
        self.config = config or DdpgConfig()
        self.low = np.asarray(low, dtype=float).reshape(-1)
        self.high = np.asarray(high, dtype=float).reshape(-1)
        if self.low.shape != self.high.shape or not np.all(self.low < self.high):
            raise ConfigError("action bounds need low < high")
        self.obs_dim = int(obs_dim)
        self.act_dim = self.low.size
        self.role = role
        rng = np.random.default_rng(0) if rng is None else rng
        h = self.config.hidden
        self.actor = Mlp((self.obs_dim, *h, self.act_dim), "tanh", rng)
        self.critic = Mlp((self.obs_dim + self.act_dim, *h, 1), "linear", rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params.size, self.config.actor_lr)
        self.critic_opt = Adam(self.critic.params.size, self.config.critic_lr)
        self.buffer = ReplayBuffer(self.config.buffer_size, self.obs_dim, self.act_dim)
        self.noise_std = self.config.noise_start
        self.updates = 0

    @property
    def gamma(self):
        return self.config.gamma

    @property
    def tau(self):
        return self.config.tau

    def to_action(self, a_norm):
        return self.low + 0.5 * (np.asarray(a_norm) + 1.0) * (self.high - self.low)

    def to_norm(self, action):
        return 2.0 * (np.asarray(action) - self.low) / (self.high - self.low) - 1.0

    def act_norm(self, obs, explore=False, rng=None):
        a = self.actor.forward(obs)
        if explore:
            a = a + rng.normal(0.0, 2.0 * self.noise_std, a.shape)
        return np.clip(a, -1.0, 1.0)

    def act(self, obs, explore=False, rng=None):
        return self.to_action(self.act_norm(obs, explore, rng))

    def q_value(self, obs, action):
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(self.to_norm(action))], axis=1)
        return self.critic.forward(x)[:, 0]

    def critic_gradient(self, batch):
        """Mean squared TD error and its gradient w.r.t. the critic parameters."""
        obs, act, rew, next_obs, done = batch
        B = obs.shape[0]
        next_a = self.target_actor.forward(next_obs)
        q_next = self.target_critic.forward(np.hstack([next_obs, next_a]))[:, 0]
        target = rew + self.gamma * (1.0 - done) * q_next
        q, acts = self.critic.forward(np.hstack([obs, act]), cache=True)
        err = q[:, 0] - target
        grad, _ = self.critic.backward(acts, (2.0 / B) * err[:, None])
        return float(np.mean(err * err)), grad

    def actor_gradient(self, obs):
        """Mean ``Q(s, mu(s))`` and the gradient of its negative w.r.t. the actor."""
        B = obs.shape[0]
        a_pi, actor_acts = self.actor.forward(obs, cache=True)
        q_pi, critic_acts = self.critic.forward(np.hstack([obs, a_pi]), cache=True)
        _, g_in = self.critic.backward(critic_acts, np.full((B, 1), 1.0 / B), param_grads=False)
        agrad, _ = self.actor.backward(actor_acts, -g_in[:, self.obs_dim:])
        return float(np.mean(q_pi)), agrad

    def train_step(self, batch):
        """One critic regression and one actor ascent step, then soft target update."""
        if batch[0].shape[0] == 0:
            raise ConfigError("empty batch")
        with np.errstate(invalid="ignore", over="ignore"):
            critic_loss, grad = self.critic_gradient(batch)
        if not (np.isfinite(critic_loss) and np.all(np.isfinite(grad))):
            raise TrainingAborted(f"{self.role}: non-finite critic loss", self.snapshot())
        self.critic_opt.step(self.critic.params, grad)

        with np.errstate(invalid="ignore", over="ignore"):
            actor_objective, agrad = self.actor_gradient(batch[0])
        if not (np.isfinite(actor_objective) and np.all(np.isfinite(agrad))):
            raise TrainingAborted(f"{self.role}: non-finite actor objective", self.snapshot())
        self.actor_opt.step(self.actor.params, agrad)

        self.soft_update()
        self.updates += 1
        return critic_loss, actor_objective

    def soft_update(self, tau=None):
        tau = self.tau if tau is None else tau
        for target, main in ((self.target_actor, self.actor), (self.target_critic, self.critic)):
            target.params *= 1.0 - tau
            target.params += tau * main.params

    def learn(self, rng):
        if len(self.buffer) < self.config.batch_size:
            return None
        return self.train_step(self.buffer.sample(self.config.batch_size, rng))

    def parameters_finite(self):
        return all(np.all(np.isfinite(net.params)) for net in self.networks().values())

    def networks(self):
        return {"actor": self.actor, "critic": self.critic,
                "target_actor": self.target_actor, "target_critic": self.target_critic}

    def snapshot(self):
        return {name: net.params.copy() for name, net in self.networks().items()}


def save_agent(path, agent, seed=None):
    """Write a versioned flat binary: magic, header length, JSON header, float64 params."""
    nets = agent.networks()
    header = {
        "format_version": FORMAT_VERSION,
        "role": agent.role,
        "seed": seed,
        "obs_dim": agent.obs_dim,
        "low": agent.low.tolist(),
        "high": agent.high.tolist(),
        "hidden": list(agent.config.hidden),
        "networks": [{"name": k, "sizes": list(v.sizes), "output": v.output} for k, v in nets.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for net in nets.values():
            fh.write(net.params.astype("<f8").tobytes())


def read_weights(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12:12 + hlen])
    params = np.frombuffer(data[12 + hlen:], dtype="<f8")
    return header, params


def load_agent_weights(path, agent):
    """Load weights into an existing agent after checking every shape."""
    header, params = read_weights(path)
    nets = agent.networks()
    if header["role"] != agent.role:
        raise ConfigError(f"{path}: role {header['role']!r} != {agent.role!r}")
    offset = 0
    for spec in header["networks"]:
        net = nets.get(spec["name"])
        if net is None or tuple(spec["sizes"]) != net.sizes or spec["output"] != net.output:
            raise ConfigError(f"{path}: network {spec['name']} shape {spec['sizes']} does not match config")
        net.params[...] = params[offset:offset + net.params.size]
        offset += net.params.size
    if offset != params.size:
        raise ConfigError(f"{path}: trailing or missing parameters")
    return header
