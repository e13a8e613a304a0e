"""Soft actor-critic core: squashed-Gaussian actors, centralized critic, updates.

Actions live in ``(0, 1)``: a Gaussian pre-activation ``u`` is squashed by
``a = (tanh(u) + 1) / 2``. The log-density carries the change-of-variables
correction for that map.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .buffer import Batch
from .nets import Adam, DeviceSetNet, Mlp

_LOG2 = float(np.log(2.0))
_HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite or exceeds the divergence threshold."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SacConfig:
    alpha: float = 0.05
    beta: float = 0.99
    xi: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    batch_size: int = 128
    warmup_steps: int = 500
    buffer_capacity: int = 100_000
    hidden: tuple[int, ...] = (128, 128)
    architecture: str = "flat"
    updates_per_step: int = 1
    twin_critics: bool = False
    share_actor: bool = False
    log_std_bounds: tuple[float, float] = (-5.0, 1.0)
    init_log_std: float = -0.5
    grad_clip: float | None = 10.0
    divergence_threshold: float = 1e6

    def __post_init__(self) -> None:
        if not 0.0 < self.xi <= 1.0:
            raise ValueError(f"xi must lie in (0, 1], got {self.xi}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.warmup_steps < 0 or self.updates_per_step < 0:
            raise ValueError("batch_size, warmup_steps and updates_per_step out of range")
        lo, hi = self.log_std_bounds
        if not lo < hi:
            raise ValueError("log_std_bounds must be increasing")
        if not lo < self.init_log_std < hi:
            raise ValueError("init_log_std must lie strictly inside log_std_bounds")
        if self.architecture not in ("flat", "device_set"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _log_one_minus_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) without cancellation for large |u|
    return 2.0 * (_LOG2 - u - _softplus(-2.0 * u))


@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    eps: np.ndarray
    u: np.ndarray
    raw_std: np.ndarray
    acts: list = field(repr=False, default_factory=list)


@dataclass(frozen=True)
class GaussianPolicy:
    """Network head emitting ``act_dim`` means and ``act_dim`` log-std pre-activations.

    The log-std is squashed into ``log_std_bounds``; the lower bound is the
    variance floor that keeps ``log_prob`` finite when a head collapses.
    """

    net: Mlp | DeviceSetNet
    act_dim: int
    log_std_bounds: tuple[float, float] = (-5.0, 1.0)

    def __post_init__(self) -> None:
        if self.net.out_dim != 2 * self.act_dim:
            raise ValueError("policy net must output 2 * act_dim values")

    @classmethod
    def build(cls, obs_dim: int, act_dim: int, hidden: tuple[int, ...], log_std_bounds=(-5.0, 1.0)):
        return cls(Mlp((obs_dim, *hidden, 2 * act_dim)), act_dim, tuple(log_std_bounds))

    def init(self, rng: np.random.Generator, init_log_std: float = -0.5) -> np.ndarray:
        params = self.net.init(rng, out_scale=0.1)
        # bias the log-std outputs (second half of the head) so the initial spread is init_log_std
        lo, hi = self.log_std_bounds
        frac = (init_log_std - lo) / (hi - lo)
        bias = self.net.output_bias(params)
        bias[len(bias) // 2:] = np.arctanh(2.0 * frac - 1.0)
        return params

    def _log_std(self, raw: np.ndarray) -> np.ndarray:
        lo, hi = self.log_std_bounds
        return lo + 0.5 * (hi - lo) * (np.tanh(raw) + 1.0)

    def sample(self, params: np.ndarray, obs: np.ndarray, rng: np.random.Generator | None = None,
               deterministic: bool = False, eps: np.ndarray | None = None) -> PolicySample:
        out, acts = self.net.forward(params, obs)
        mean, raw = out[:, :self.act_dim], out[:, self.act_dim:]
        log_std = self._log_std(raw)
        if deterministic:
            eps = np.zeros_like(mean)
        elif eps is None:
            if rng is None:
                raise ValueError("stochastic sampling needs an rng or explicit noise")
            eps = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        action = 0.5 * (np.tanh(u) + 1.0)
        log_prob = np.sum(-0.5 * eps**2 - log_std - _HALF_LOG_2PI - _log_one_minus_tanh2(u) + _LOG2, axis=1)
        return PolicySample(action, log_prob, mean, log_std, eps, u, raw, acts)

    def backward(self, params: np.ndarray, s: PolicySample, g_action: np.ndarray, g_logp: np.ndarray) -> np.ndarray:
        """Parameter gradient of ``sum(g_action * action) + sum(g_logp * log_prob)``
        under the reparameterization (noise held fixed)."""
        t = np.tanh(s.u)
        sigma = np.exp(s.log_std)
        g_logp = np.asarray(g_logp, dtype=float)[:, None]
        du = g_action * 0.5 * (1.0 - t**2) + g_logp * 2.0 * t
        d_log_std = du * sigma * s.eps - g_logp
        lo, hi = self.log_std_bounds
        d_raw = d_log_std * 0.5 * (hi - lo) * (1.0 - np.tanh(s.raw_std) ** 2)
        grad, _ = self.net.backward(params, s.acts, np.concatenate([du, d_raw], axis=1))
        return grad


def policy_sample(policy: GaussianPolicy, params: np.ndarray, obs: np.ndarray, rng: np.random.Generator,
                  deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Single-call convenience returning ``(action, log_prob)``."""
    s = policy.sample(params, np.atleast_2d(obs), rng, deterministic)
    return s.action, s.log_prob


def soft_update(phi: np.ndarray, phi_bar: np.ndarray, xi: float) -> np.ndarray:
    """Polyak average ``xi * phi + (1 - xi) * phi_bar``."""
    if not 0.0 < xi <= 1.0:
        raise ValueError(f"xi must lie in (0, 1], got {xi}")
    return xi * phi + (1.0 - xi) * phi_bar


# keeps column shares finite when an action underflows to zero
_SHARE_EPS = 1e-9


@dataclass(frozen=True)
class SetLayout:
    """Where per-device blocks sit inside observation and state vectors."""

    n_devices: int
    n_agents: int
    obs_item_dim: int
    obs_global_dim: int
    state_item_dim: int
    state_global_dim: int
    x1_offset: int  # start of the +-1 seeding-association row inside a state item
    scale_index: int | None = None  # state entry multiplying the critic's per-device sum

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FlatCritic:
    """``Q(s, a)`` as one MLP over the concatenated state and joint action."""

    state_dim: int
    n_agents: int
    act_dim: int
    hidden: tuple[int, ...]

    @property
    def mlp(self) -> Mlp:
        return Mlp((self.state_dim + self.n_agents * self.act_dim, *self.hidden, 1))

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return self.mlp.init(rng)

    def forward(self, params, state, action):
        x = np.concatenate([state, action.reshape(len(state), -1)], axis=1)
        q, acts = self.mlp.forward(params, x)
        return q[:, 0], acts

    def __call__(self, params, state, action) -> np.ndarray:
        return self.forward(params, state, action)[0]

    def backward(self, params, acts, g_q):
        gp, gx = self.mlp.backward(params, acts, np.asarray(g_q, dtype=float)[:, None])
        return gp, gx[:, self.state_dim:].reshape(-1, self.n_agents, self.act_dim)


@dataclass(frozen=True)
class SetCritic:
    """``Q(s, a) = c(s) * sum_i q(device_i, y_i, z_i, server loads, globals)`` with one shared MLP.

    Server loads are the action column sums over the devices the
    channel-gain seeding places on each server; each device also sees its
    share of every column it would join, ``a / (load + a)`` off its seeded
    server and ``a / load`` on it. ``c(s)`` is the state entry
    at ``layout.scale_index`` (1 when unset).
    """

    layout: SetLayout
    hidden: tuple[int, ...]

    @property
    def in_dim(self) -> int:
        L = self.layout
        return L.state_item_dim + 6 * L.n_agents + L.state_global_dim

    @property
    def mlp(self) -> Mlp:
        return Mlp((self.in_dim, *self.hidden, 1))

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return self.mlp.init(rng)

    def _split(self, state, action):
        L = self.layout
        n, M, E, F = len(state), L.n_devices, L.n_agents, L.state_item_dim
        items = state[:, :M * F].reshape(n, M, F)
        glob = state[:, M * F:]
        X1 = 0.5 * (items[:, :, L.x1_offset:L.x1_offset + E] + 1.0)
        a = action.reshape(n, E, 2 * M)
        return items, glob, X1, a[:, :, :M].transpose(0, 2, 1), a[:, :, M:].transpose(0, 2, 1)

    def forward(self, params, state, action):
        items, glob, X1, Y, Z = self._split(state, action)
        n, M = items.shape[:2]
        cy = (X1 * Y).sum(axis=1, keepdims=True)
        cz = (X1 * Z).sum(axis=1, keepdims=True)
        Dy, Dz = cy + Y * (1.0 - X1) + _SHARE_EPS, cz + Z * (1.0 - X1) + _SHARE_EPS
        rep = lambda v: np.broadcast_to(v, (n, M, v.shape[-1]))  # noqa: E731
        x = np.concatenate([items, Y, Z, Y / Dy, Z / Dz, rep(cy), rep(cz), rep(glob[:, None, :])], axis=2)
        q, acts = self.mlp.forward(params, x.reshape(n * M, -1))
        scale = self._scale(state)
        return scale * q.reshape(n, M).sum(axis=1), (acts, X1, Y, Z, Dy, Dz, scale)

    def _scale(self, state) -> np.ndarray:
        i = self.layout.scale_index
        return np.ones(len(state)) if i is None else np.asarray(state[:, i], dtype=float)

    def __call__(self, params, state, action) -> np.ndarray:
        return self.forward(params, state, action)[0]

    def backward(self, params, cache, g_q):
        acts, X1, Y, Z, Dy, Dz, scale = cache
        n, M, E = X1.shape
        F = self.layout.state_item_dim
        g = np.repeat(np.asarray(g_q, dtype=float) * scale, M)[:, None]
        gp, gx = self.mlp.backward(params, acts, g)
        gx = gx.reshape(n, M, -1)
        blocks = [gx[:, :, F + k * E:F + (k + 1) * E] for k in range(6)]
        grads = []
        for g_raw, g_share, g_col, A, D in ((blocks[0], blocks[2], blocks[4], Y, Dy),
                                            (blocks[1], blocks[3], blocks[5], Z, Dz)):
            # share = a / (column sum over seeded devices + a if not seeded there)
            g_a = g_raw + g_share * (1.0 / D - A * (1.0 - X1) / D**2)
            g_c = g_col.sum(axis=1, keepdims=True) - (g_share * A / D**2).sum(axis=1, keepdims=True)
            grads.append(g_a + X1 * g_c)
        gY, gZ = grads
        return gp, np.concatenate([gY.transpose(0, 2, 1), gZ.transpose(0, 2, 1)], axis=2)


def td_target(critic, phi_bars: list[np.ndarray], batch: Batch, next_action: np.ndarray,
              next_logp: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """``r + beta (1 - done) (min_k Qbar_k(s', a') - alpha log pi(a'|s'))``."""
    q_next = np.min([critic(pb, batch.next_state, next_action) for pb in phi_bars], axis=0)
    return batch.reward + beta * (1.0 - batch.done) * (q_next - alpha * next_logp)


def critic_loss_grad(critic, phi: np.ndarray, batch: Batch, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared TD error and its gradient in ``phi``."""
    q, cache = critic.forward(phi, batch.state, batch.action)
    err = q - target
    loss = float(np.mean(err**2))
    grad, _ = critic.backward(phi, cache, 2.0 * err / len(err))
    return loss, grad


def policy_loss_grad(policies: list[GaussianPolicy], thetas: list[np.ndarray], critic, phi: np.ndarray,
                     obs: np.ndarray, state: np.ndarray, eps: np.ndarray, alpha: float):
    """Loss ``mean(alpha * sum_j log pi_j - Q(s, a))`` with every agent's action reparameterized.

    ``obs`` is ``(n, n_agents, obs_dim)`` and ``eps`` ``(n, n_agents, act_dim)``.
    Returns ``(loss, per-agent grads, samples)``.
    """
    n = len(state)
    samples = [p.sample(th, obs[:, j], eps=eps[:, j]) for j, (p, th) in enumerate(zip(policies, thetas))]
    joint = np.stack([s.action for s in samples], axis=1)
    q, cache = critic.forward(phi, state, joint)
    logp = np.sum([s.log_prob for s in samples], axis=0)
    loss = float(np.mean(alpha * logp - q))
    _, g_joint = critic.backward(phi, cache, np.full(n, -1.0 / n))
    grads = [p.backward(th, s, g_joint[:, j], np.full(n, alpha / n))
             for j, (p, th, s) in enumerate(zip(policies, thetas, samples))]
    return loss, grads, samples


class Masac:
    """One actor per agent plus a centralized critic over the joint observation-action."""

    def __init__(self, n_agents: int, obs_dim: int, state_dim: int, act_dim: int, cfg: SacConfig,
                 rng: np.random.Generator, layout: SetLayout | None = None):
        self.cfg = cfg
        self.layout = layout
        self.n_agents, self.obs_dim, self.state_dim, self.act_dim = n_agents, obs_dim, state_dim, act_dim
        if cfg.architecture == "device_set":
            if layout is None:
                raise ValueError("the device_set architecture needs a SetLayout")
            if 2 * layout.n_devices != act_dim:
                raise ValueError("device_set actions must hold one y and one z per device")
            net = DeviceSetNet(layout.n_devices, layout.obs_item_dim, layout.obs_global_dim, 4, cfg.hidden)
            self.policy = GaussianPolicy(net, act_dim, tuple(cfg.log_std_bounds))
            self.critic = SetCritic(layout, cfg.hidden)
        else:
            self.policy = GaussianPolicy.build(obs_dim, act_dim, cfg.hidden, cfg.log_std_bounds)
            self.critic = FlatCritic(state_dim, n_agents, act_dim, cfg.hidden)
        n_actor = 1 if cfg.share_actor else n_agents
        self.thetas = [self.policy.init(rng, cfg.init_log_std) for _ in range(n_actor)]
        n_critic = 2 if cfg.twin_critics else 1
        self.phis = [self.critic.init(rng) for _ in range(n_critic)]
        self.phi_bars = [p.copy() for p in self.phis]
        self.actor_opts = [Adam(self.policy.net.n_params, cfg.actor_lr, grad_clip=cfg.grad_clip) for _ in self.thetas]
        self.critic_opts = [Adam(self.critic.n_params, cfg.critic_lr, grad_clip=cfg.grad_clip) for _ in self.phis]

    def theta_of(self, j: int) -> np.ndarray:
        return self.thetas[0 if self.cfg.share_actor else j]

    def act(self, obs: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False):
        """``obs`` is ``(n_agents, obs_dim)``; returns ``(n_agents, act_dim)`` actions and log-probs."""
        actions, logps = [], []
        for j in range(self.n_agents):
            a, lp = policy_sample(self.policy, self.theta_of(j), obs[j], rng, deterministic)
            actions.append(a[0])
            logps.append(lp[0])
        return np.array(actions), np.array(logps)

    def _check(self, name: str, loss: float, grads: list[np.ndarray]) -> None:
        bad = not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads)
        if bad or abs(loss) > self.cfg.divergence_threshold:
            diag = {"loss": loss, "grad_norms": [float(np.linalg.norm(g)) for g in grads],
                    "param_norms": [float(np.linalg.norm(p)) for p in self.phis + self.thetas]}
            raise TrainingDiverged(f"{name} diverged (loss={loss!r})", diag)

    def _sample_joint(self, obs: np.ndarray, rng: np.random.Generator):
        n = obs.shape[0]
        eps = rng.standard_normal((n, self.n_agents, self.act_dim))
        samples = [self.policy.sample(self.theta_of(j), obs[:, j], eps=eps[:, j]) for j in range(self.n_agents)]
        return np.stack([s.action for s in samples], axis=1), np.sum([s.log_prob for s in samples], axis=0)

    def critic_update(self, batch: Batch, rng: np.random.Generator) -> float:
        cfg = self.cfg
        next_action, next_logp = self._sample_joint(batch.next_obs, rng)
        target = td_target(self.critic, self.phi_bars, batch, next_action, next_logp, cfg.alpha, cfg.beta)
        losses = []
        for k, phi in enumerate(self.phis):
            loss, grad = critic_loss_grad(self.critic, phi, batch, target)
            self._check("critic", loss, [grad])
            self.critic_opts[k].step(phi, grad)
            losses.append(loss)
        return float(np.mean(losses))

    def policy_update(self, batch: Batch, rng: np.random.Generator) -> tuple[float, float]:
        """Returns ``(policy loss, mean per-agent entropy estimate)``."""
        cfg = self.cfg
        eps = rng.standard_normal((len(batch), self.n_agents, self.act_dim))
        thetas = [self.theta_of(j) for j in range(self.n_agents)]
        policies = [self.policy] * self.n_agents
        loss, grads, samples = policy_loss_grad(policies, thetas, self.critic, self.phis[0], batch.obs,
                                                batch.state, eps, cfg.alpha)
        self._check("policy", loss, grads)
        if cfg.share_actor:
            self.actor_opts[0].step(self.thetas[0], np.sum(grads, axis=0))
        else:
            for j, g in enumerate(grads):
                self.actor_opts[j].step(self.thetas[j], g)
        entropy = -float(np.mean([s.log_prob.mean() for s in samples]))
        return loss, entropy

    def soft_update_targets(self) -> None:
        for k in range(len(self.phis)):
            self.phi_bars[k] = soft_update(self.phis[k], self.phi_bars[k], self.cfg.xi)
