"""Observation encoding and the environments the trainer drives.

Each environment exposes ``reset(seed) -> (obs, state)`` and
``step(actions) -> Step``, with ``obs`` shaped ``(n_agents, obs_dim)`` and
``state`` the flat centralized-critic input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..baselines import random_assoc, uniform_alloc
from ..mecmodel import Allocation, EnvState, objective_terms, step_env
from ..projection import project_work_conserving
from ..rngs import Streams, stream
from ..scenario import ScenarioConfig, initial_state
from ..tma import tma, tma_phase1
from .sac import SetLayout

# actions are log-scale multipliers on the priors: [1/Y_SPAN, Y_SPAN] and [Z_FLOOR, 1]
Y_SPAN = 2.0
Z_FLOOR = 0.25
# keeps compute priorities positive for devices with no remote work
PRIOR_FLOOR = 1e-6
# candidate bandwidth fractions searched by bandwidth_prior
Y_GRID = np.logspace(-3.0, 0.0, 256)


def _norm(x, lo, hi) -> np.ndarray:
    return np.clip(2.0 * (np.asarray(x, dtype=float) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class ObsBounds:
    """Min-max ranges used to map every feature onto [-1, 1]."""

    area_m: float
    srv_flops: tuple[float, float]
    dev_flops: tuple[float, float]
    gain_db: tuple[float, float]
    queue_max: float
    d_max: float
    f_md_max: float
    f_es_max: float
    tx_w: tuple[float, float]
    horizon: int
    w: tuple[float, float]

    @classmethod
    def from_scenario(cls, cfg: ScenarioConfig, w_range: tuple[float, float] | None = None) -> "ObsBounds":
        p = cfg.system
        pl = p.pathloss
        far = max(p.area_m * np.sqrt(2.0), pl.d0_m)
        worst = pl.pl0_db + 10.0 * pl.exponent * np.log10(far / pl.d0_m)
        tok = max(t.expected_tokens * (1.0 + t.spread) for t in p.task_profiles)
        dc = p.decode
        sf = [s.flops for s in cfg.server_profiles]
        df = [d.flops for d in cfg.device_profiles]
        lo_dbm, hi_dbm = cfg.tx_power_dbm
        return cls(
            area_m=p.area_m,
            srv_flops=(0.0, max(sf)),
            dev_flops=(0.0, max(df)),
            # Rayleigh power fades rarely leave [-30, +10] dB
            gain_db=(-worst - 30.0, -pl.pl0_db + 10.0),
            queue_max=max(1.0, p.queue_mean + 5.0 * np.sqrt(p.queue_mean)),
            d_max=tok * dc.bits_per_token,
            f_md_max=tok * dc.draft_flops_per_token,
            f_es_max=tok * dc.verify_flops_per_token,
            tx_w=(10 ** ((lo_dbm - 30) / 10), 10 ** ((hi_dbm - 30) / 10)),
            horizon=p.horizon,
            w=w_range if w_range is not None else (0.0, max(2.0 * p.w, 1.0)),
        )


def _gain_db(H: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(H, 1e-30))


# per-device features shared by observations and state
_DEVICE_FEATURES = 8


def _device_matrix(s: EnvState, b: ObsBounds) -> np.ndarray:
    """``(M, 8)``: position, task tuple, battery, local compute, transmit power."""
    return np.column_stack([
        _norm(s.dev_pos, 0.0, b.area_m),
        _norm(s.task_d, 0.0, b.d_max),
        _norm(s.task_f_md, 0.0, b.f_md_max),
        _norm(s.task_f_es, 0.0, b.f_es_max),
        _norm(s.battery, 0.0, 1.0),
        _norm(s.local_flops, *b.dev_flops),
        _norm(s.tx_power_w, *b.tx_w),
    ])


def _server_load(s: EnvState, X1: np.ndarray, b: ObsBounds) -> tuple[np.ndarray, np.ndarray]:
    """Device count and total server FLOPs per server under the gain seeding."""
    M, E = X1.shape
    count = _norm(X1.sum(axis=0), 0.0, M)
    load = _norm(X1.T @ s.task_f_es, 0.0, M * b.f_es_max / E)
    return count, load


def build_obs(s: EnvState, b: ObsBounds, reward_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent observations ``(E, obs_dim)`` and the global state vector.

    Agent ``j`` sees, per device: position, task tuple, battery, compute,
    power, its gain to ``j``, the best gain to any other server and whether
    the channel-gain seeding puts the device on ``j``. Its global block holds
    its own position, compute and queue, its seeded device count and load,
    the slot index and the energy weight. Both are laid out device-major
    (see :func:`layout_for`). The state ends with ``reward_scale``, the
    factor the critic multiplies its per-device sum by.
    """
    M, E = s.M, s.E
    gdb = _norm(_gain_db(s.H), *b.gain_db)
    X1 = tma_phase1(s.H)
    dev = _device_matrix(s, b)
    slot = _norm(s.t, 0.0, max(b.horizon - 1, 1))
    w = _norm(s.params.w, *b.w)
    srv_pos = _norm(s.srv_pos, 0.0, b.area_m)
    srv_f = _norm(s.srv_flops, *b.srv_flops)
    queue = _norm(s.queue_slots, 0.0, b.queue_max)
    count, load = _server_load(s, X1, b)
    obs = []
    for j in range(E):
        other = np.delete(gdb, j, axis=1).max(axis=1) if E > 1 else np.full(M, -1.0)
        items = np.column_stack([dev, gdb[:, j], other, 2.0 * X1[:, j] - 1.0])
        glob = np.concatenate([srv_pos[j], [srv_f[j], queue[j], count[j], load[j], slot, w]])
        obs.append(np.concatenate([items.ravel(), glob]))
    items = np.column_stack([dev, gdb, 2.0 * X1 - 1.0])
    glob = np.concatenate([srv_pos.ravel(), srv_f, queue, count, load, [slot, w, reward_scale]])
    return np.stack(obs), np.concatenate([items.ravel(), glob])


def layout_for(M: int, E: int) -> SetLayout:
    item = _DEVICE_FEATURES + 2 * E
    glob = 6 * E + 3
    return SetLayout(
        n_devices=M, n_agents=E,
        obs_item_dim=_DEVICE_FEATURES + 3, obs_global_dim=8,
        state_item_dim=item, state_global_dim=glob,
        x1_offset=_DEVICE_FEATURES + E, scale_index=M * item + glob - 1,
    )


def obs_dims(M: int, E: int) -> tuple[int, int]:
    L = layout_for(M, E)
    return M * L.obs_item_dim + L.obs_global_dim, M * L.state_item_dim + L.state_global_dim


def split_actions(actions: np.ndarray, M: int) -> tuple[np.ndarray, np.ndarray]:
    """``(E, 2M)`` agent actions in [0, 1] to ``(M, E)`` bandwidth and compute multipliers.

    Both halves are read on a log scale so exploration noise acts
    multiplicatively: ``Y_SPAN ** (2a - 1)`` for bandwidth, centred on 1 at
    ``a = 0.5``, and ``Z_FLOOR ** (1 - a)`` for compute.
    """
    a = np.clip(np.asarray(actions, dtype=float), 0.0, 1.0)
    return (Y_SPAN ** (2.0 * a[:, :M] - 1.0)).T.copy(), (Z_FLOOR ** (1.0 - a[:, M:])).T.copy()


def bandwidth_prior(state: EnvState) -> np.ndarray:
    """``(M, E)`` bandwidth fractions minimizing each device's own cost on every server.

    A device's share enters only its synchronization gap and its
    communication energy, so each pair is a one-dimensional search over
    ``Y_GRID`` at the state's current ``lam`` and ``w``. Server capacity is
    left to the projection.
    """
    p = state.params
    W = state.server_bandwidth
    per_hz = np.log1p(state.snr_matrix()) / np.log(p.log_base)
    rate = Y_GRID[None, None, :] * (W[None, :] * per_hz)[:, :, None]
    with np.errstate(divide="ignore"):
        uplink = np.minimum(state.task_d[:, None, None] / rate, p.sync_cap_s)
    local = (state.task_f_md / state.local_flops)[:, None, None]
    sync = p.lam * ((local - uplink) / p.time_unit_s) ** 2
    e_cm = p.delta_cm * Y_GRID[None, None, :] * W[None, :, None] / p.cm_bandwidth_unit * state.tx_power_w[:, None, None]
    cost = sync + p.w * e_cm / np.maximum(state.battery, p.battery_floor)[:, None, None]
    return Y_GRID[cost.argmin(axis=2)]


def compute_prior(state: EnvState) -> np.ndarray:
    """Per-device ``sqrt(f_es)`` scaled to a maximum of 1.

    Within one server, shares proportional to this vector minimize the summed
    remote compute delay, and compute shares enter no other term.
    """
    v = np.sqrt(np.maximum(state.task_f_es, 0.0))
    top = v.max()
    if not top > 0:
        return np.ones_like(v)
    return np.maximum(v / top, PRIOR_FLOOR)


def allocation_from_actions(state: EnvState, actions: np.ndarray, strategy: str = "first") -> Allocation:
    """Raw agent actions, then association on the raw fractions, then projection.

    The actions scale :func:`bandwidth_prior` and :func:`compute_prior`.
    Compute columns are work-conserving, so the whole server is handed out.
    """
    Y_act, Z_act = split_actions(actions, state.M)
    Y_raw = np.minimum(Y_act * bandwidth_prior(state), 1.0)
    Z_raw = Z_act * compute_prior(state)[:, None]
    X = tma(Y_raw, Z_raw, state, strategy=strategy, work_conserving=True)
    Y, Z = project_work_conserving(Y_raw, Z_raw, X)
    return Allocation(X, Y, Z)


def act(agent, state: EnvState, bounds: ObsBounds, rng: np.random.Generator | None = None,
        deterministic: bool = False) -> Allocation:
    """Sample every server-agent's columns and return a feasible allocation."""
    obs, _ = build_obs(state, bounds)
    actions, _ = agent.act(obs, rng, deterministic)
    return allocation_from_actions(state, actions)


def baseline_objective(state: EnvState, rng: np.random.Generator, draws: int = 1) -> float:
    """Mean objective of ``draws`` random associations with uniform resource splits."""
    vals = []
    for _ in range(draws):
        X = random_assoc(state, rng)
        Y, Z = uniform_alloc(X)
        vals.append(objective_terms(state, Allocation(X, Y, Z), check=False).value)
    return float(np.mean(vals))


def reward(value: float, baseline: float) -> float:
    """``-value / baseline``: maximizing reward minimizes the objective."""
    if not baseline > 0:
        raise ValueError(f"baseline objective must be positive, got {baseline}")
    return -float(value) / float(baseline)


@dataclass
class Step:
    obs: np.ndarray
    state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class MecEnv:
    """The MEC system as a multi-agent environment, one agent per edge server.

    ``w_choices`` lets one policy cover several energy weights: each episode
    draws its ``w`` from the list and the weight is part of every observation.

    The reward divides by a baseline averaged over a few random associations,
    which is noisy from slot to slot. The baseline is drawn before the agents
    act, so the state carries ``value_unit / baseline`` and the critic can
    factor the noise out instead of fitting it.
    """

    def __init__(self, scenario: ScenarioConfig, w_choices: tuple[float, ...] | None = None,
                 baseline_draws: int = 1):
        self.scenario = scenario
        self.w_choices = tuple(float(w) for w in w_choices) if w_choices else None
        wr = (min(self.w_choices), max(self.w_choices)) if self.w_choices else None
        if wr is not None and wr[0] == wr[1]:
            wr = (0.0, max(2.0 * wr[1], 1.0))
        self.bounds = ObsBounds.from_scenario(scenario, wr)
        self.baseline_draws = int(baseline_draws)
        self.n_agents = scenario.num_servers
        self.obs_dim, self.state_dim = obs_dims(scenario.num_devices, scenario.num_servers)
        self.layout = layout_for(scenario.num_devices, scenario.num_servers)
        self.act_dim = 2 * scenario.num_devices
        self.horizon = scenario.system.horizon
        self.s: EnvState | None = None
        self.base = float("nan")
        self.value_unit = self._value_unit()

    def _value_unit(self, n: int = 4) -> float:
        """Typical baseline objective (a fixed calibration, independent of any run seed)."""
        vals = [baseline_objective(initial_state(self.scenario, Streams(k)), stream(k, "calibration"),
                                   self.baseline_draws) for k in range(n)]
        return float(np.mean(vals))

    def _observe(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.s
        self.base = baseline_objective(s, self.streams.keyed("baseline", s.t), self.baseline_draws)
        return build_obs(s, self.bounds, self.value_unit / self.base)

    def reset(self, seed: int, w: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.scenario
        if w is None and self.w_choices:
            w = self.w_choices[int(stream(seed, "w-choice").integers(len(self.w_choices)))]
        if w is not None:
            cfg = cfg.with_overrides(w=float(w))
        self.streams = Streams(seed)
        self.s = initial_state(cfg, self.streams)
        return self._observe()

    def step(self, actions: np.ndarray) -> Step:
        s = self.s
        alloc = allocation_from_actions(s, actions)
        terms = objective_terms(s, alloc)
        base = self.base
        r = reward(terms.value, base)
        done = s.t >= self.horizon - 1
        info = {"alloc": alloc, "terms": terms, "baseline": base, "env_state": s}
        if not done:
            self.s = step_env(s, self.streams, terms.energy_j)
            obs, state = self._observe()
        else:
            obs, state = build_obs(s, self.bounds, self.value_unit / base)
        return Step(obs, state, r, done, info)


class BanditEnv:
    """Stateless two-armed bandit: an action above 1/2 pulls arm 1."""

    n_agents = 1
    obs_dim = 1
    state_dim = 1
    act_dim = 1
    layout = None

    def __init__(self, arm_rewards: tuple[float, float] = (0.5, 1.0), noise: float = 0.1, horizon: int = 50):
        self.arm_rewards = tuple(float(r) for r in arm_rewards)
        self.noise = float(noise)
        self.horizon = int(horizon)
        self.t = 0

    @property
    def optimum(self) -> float:
        return max(self.arm_rewards)

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        self.rng = stream(seed, "bandit")
        self.t = 0
        return np.zeros((1, 1)), np.zeros(1)

    def step(self, actions: np.ndarray) -> Step:
        arm = int(np.asarray(actions).ravel()[0] > 0.5)
        r = self.arm_rewards[arm] + self.noise * float(self.rng.standard_normal())
        self.t += 1
        return Step(np.zeros((1, 1)), np.zeros(1), r, self.t >= self.horizon, {"arm": arm, "expected": self.arm_rewards[arm]})
