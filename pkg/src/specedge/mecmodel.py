"""Time-slotted MEC system model: channels, rates, delays, energy and the joint objective.

Shapes: ``M`` devices, ``E`` servers. Association ``X`` is binary ``(M, E)``;
bandwidth shares ``Y`` and compute shares ``Z`` are real ``(M, E)`` in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .specdec import ContractError, DecodeConfig

KINDS = ("code", "summarize", "chat")


class InfeasibleAllocation(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"infeasible allocation: {lines}")


# ---------------------------------------------------------------------------
# parameters and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathLossParams:
    pl0_db: float = 20.0
    d0_m: float = 1.0
    exponent: float = 2.0
    fading: bool = True
    min_distance_m: float = 1.0


@dataclass(frozen=True)
class TaskProfile:
    kind: str
    expected_tokens: int
    # tokens drawn uniformly from expected * [1 - spread, 1 + spread]
    spread: float = 0.5


DEFAULT_PROFILES = (
    TaskProfile("code", 192),
    TaskProfile("summarize", 96),
    TaskProfile("chat", 48),
)


@dataclass(frozen=True)
class SystemParams:
    bandwidth_hz: float = 10e6
    noise_psd_dbm_hz: float = -174.0
    delta_cp: float = 1e9
    delta_cm: float = 2.6
    lam: float = 1e-2
    w: float = 20.0
    horizon: int = 50
    slot_s: float = 0.1
    kappa_s: float | None = None
    snr_mode: str = "full_band"
    log_base: float = 2.0
    # E_cp = delta_cp * f_md / cp_flops_unit ; E_cm = delta_cm * sum(x y W_j / cm_bandwidth_unit) * P
    cp_flops_unit: float = 1.0
    cm_bandwidth_unit: float = 1.0
    battery_floor: float = 1e-3
    # delays enter the objective in this unit (1e-3 -> milliseconds); ObjectiveTerms stay in seconds
    time_unit_s: float = 1.0
    pathloss: PathLossParams = field(default_factory=PathLossParams)
    area_m: float = 200.0
    max_speed_mps: float = 1.5
    queue_mean: float = 0.5
    task_profiles: tuple[TaskProfile, ...] = DEFAULT_PROFILES
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    @property
    def kappa(self) -> float:
        return self.slot_s if self.kappa_s is None else self.kappa_s

    @property
    def noise_psd_w_hz(self) -> float:
        return dbm_to_watts(self.noise_psd_dbm_hz)

    @property
    def sync_cap_s(self) -> float:
        return self.slot_s * self.horizon


@dataclass(frozen=True)
class MobileDevice:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    tx_power_w: float
    local_flops: float
    battery: float
    battery_capacity: float

    def __post_init__(self) -> None:
        if self.tx_power_w <= 0 or self.local_flops <= 0:
            raise ContractError("device power and flops must be positive")
        if not 0 < self.battery <= 1:
            raise ContractError("battery must lie in (0, 1]")


@dataclass(frozen=True)
class EdgeServer:
    id: int
    position: tuple[float, float]
    flops: float
    bandwidth_hz: float
    queue_slots: int = 0
    slot_seconds: float = 0.1

    def __post_init__(self) -> None:
        if self.flops <= 0:
            raise ContractError("server flops must be positive")
        if self.queue_slots < 0:
            raise ContractError("queue_slots must be >= 0")


@dataclass(frozen=True)
class Task:
    owner: int
    kind: str
    d: float
    f_md: float
    f_es: float


@dataclass(frozen=True)
class Allocation:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    @property
    def server_of(self) -> np.ndarray:
        return self.X.argmax(axis=1)


@dataclass(frozen=True)
class EnvState:
    """One time slot. Arrays are treated as immutable; ``step_env`` returns a new state."""

    t: int
    params: SystemParams
    seed: int
    dev_pos: np.ndarray
    dev_waypoint: np.ndarray
    dev_speed: np.ndarray
    tx_power_w: np.ndarray
    local_flops: np.ndarray
    battery: np.ndarray
    battery_capacity: np.ndarray
    srv_pos: np.ndarray
    srv_flops: np.ndarray
    queue_slots: np.ndarray
    H: np.ndarray
    task_kind: np.ndarray
    task_d: np.ndarray
    task_f_md: np.ndarray
    task_f_es: np.ndarray

    @property
    def M(self) -> int:
        return self.dev_pos.shape[0]

    @property
    def E(self) -> int:
        return self.srv_pos.shape[0]

    @property
    def server_bandwidth(self) -> np.ndarray:
        return np.full(self.E, self.params.bandwidth_hz / self.E)

    @property
    def dev_velocity(self) -> np.ndarray:
        return _velocity(self.dev_pos, self.dev_waypoint, self.dev_speed)

    def snr_matrix(self) -> np.ndarray:
        p = self.params
        band = self.server_bandwidth[None, :]
        return snr(self.H, self.tx_power_w[:, None], p.noise_psd_w_hz, band, p.snr_mode)

    def devices(self) -> list[MobileDevice]:
        vel = self.dev_velocity
        return [
            MobileDevice(i, tuple(self.dev_pos[i]), tuple(vel[i]), float(self.tx_power_w[i]),
                         float(self.local_flops[i]), float(max(self.battery[i], 1e-12)),
                         float(self.battery_capacity[i]))
            for i in range(self.M)
        ]

    def servers(self) -> list[EdgeServer]:
        bw = self.server_bandwidth
        return [
            EdgeServer(j, tuple(self.srv_pos[j]), float(self.srv_flops[j]), float(bw[j]),
                       int(self.queue_slots[j]), self.params.kappa)
            for j in range(self.E)
        ]

    def tasks(self) -> list[Task]:
        return [
            Task(i, KINDS[self.task_kind[i]], float(self.task_d[i]), float(self.task_f_md[i]), float(self.task_f_es[i]))
            for i in range(self.M)
        ]


# ---------------------------------------------------------------------------
# channel and rates
# ---------------------------------------------------------------------------


def _scalar_or_array(a):
    return float(a) if np.ndim(a) == 0 else a


def dbm_to_watts(dbm):
    return _scalar_or_array(10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0))


def path_loss_db(distance_m, pl: PathLossParams):
    d = np.maximum(distance_m, pl.min_distance_m)
    return pl.pl0_db + 10.0 * pl.exponent * np.log10(d / pl.d0_m)


def path_gain(distance_m, pl: PathLossParams, rng: np.random.Generator | None = None):
    """Linear gain ``10^(-PL/10) * fade`` with unit-mean exponential (Rayleigh power) fading."""
    gain = 10.0 ** (-path_loss_db(distance_m, pl) / 10.0)
    if pl.fading:
        if rng is None:
            raise ContractError("fading enabled but no rng given")
        gain = gain * rng.exponential(1.0, size=np.shape(distance_m))
    return gain


def channel_matrix(dev_pos: np.ndarray, srv_pos: np.ndarray, pl: PathLossParams, rng=None) -> np.ndarray:
    dist = np.linalg.norm(dev_pos[:, None, :] - srv_pos[None, :, :], axis=-1)
    return path_gain(dist, pl, rng)


def snr(h, P, N0, band=None, mode: str = "full_band"):
    """``h^2 P / (N0 * band)`` (full_band) or ``h^2 P / N0`` exactly as printed (psd_literal)."""
    if mode == "psd_literal":
        return np.square(h) * P / N0
    if mode != "full_band":
        raise ContractError(f"unknown snr mode {mode!r}")
    if band is None or np.any(np.asarray(band) <= 0):
        raise ContractError("full_band SNR needs a positive band")
    return np.square(h) * P / (N0 * band)


def _log(x, base: float):
    return np.log(x) if base == math.e else np.log(x) / np.log(base)


def data_rate(X, Y, W_j, snr_matrix, i: int | None = None, log_base: float = 2.0):
    """``R_i = sum_j x_ij y_ij W_j log(1 + SNR_ij)``; all devices when ``i`` is None."""
    per = np.asarray(X) * np.asarray(Y) * np.asarray(W_j)[None, :] * _log(1.0 + np.asarray(snr_matrix), log_base)
    rates = per.sum(axis=1)
    return rates if i is None else float(rates[i])


# ---------------------------------------------------------------------------
# delays and energy
# ---------------------------------------------------------------------------


def local_delay(f_md, F_md):
    return _scalar_or_array(np.asarray(f_md, dtype=float) / np.asarray(F_md, dtype=float))


def remote_delay(f_es, z, F_es, k, kappa):
    z = np.asarray(z, dtype=float)
    if np.any((z <= 0) & (np.asarray(f_es) > 0)):
        raise InfeasibleAllocation(["zero compute share for a task with remote work"])
    return _scalar_or_array(np.asarray(k) * kappa + np.asarray(f_es) / (z * np.asarray(F_es)))


def energy(f_md, X, Y, W_j, P, delta_cp, delta_cm, cp_flops_unit=1.0, cm_bandwidth_unit=1.0):
    """Per-device ``(E_cp, E_cm)``: ``delta_cp * f_md`` and ``delta_cm * sum_j(x y W_j) * P``."""
    e_cp = delta_cp * np.asarray(f_md, dtype=float) / cp_flops_unit
    band = (np.asarray(X) * np.asarray(Y) * np.asarray(W_j)[None, :]).sum(axis=-1) / cm_bandwidth_unit
    e_cm = delta_cm * band * np.asarray(P)
    return e_cp, e_cm


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    constraint: str  # "eq3" | "eq4" | "eq7" | "server_bandwidth" | "range"
    index: tuple[int, ...]
    magnitude: float
    extension: bool = False

    def __str__(self) -> str:
        tag = " (extension)" if self.extension else ""
        return f"{self.constraint}{tag} at {self.index}: {self.magnitude:.3g}"


def feasibility_check(alloc: Allocation, tol: float = 1e-9) -> list[Violation]:
    X, Y, Z = (np.asarray(a, dtype=float) for a in (alloc.X, alloc.Y, alloc.Z))
    out: list[Violation] = []
    if X.shape != Y.shape or X.shape != Z.shape or X.ndim != 2:
        return [Violation("shape", tuple(X.shape), float("nan"))]
    for i, j in zip(*np.nonzero((X != 0) & (X != 1))):
        out.append(Violation("eq3", (int(i), int(j)), float(X[i, j])))
    for i, s in enumerate(X.sum(axis=1)):
        if abs(s - 1.0) > tol:
            out.append(Violation("eq3", (i,), float(s - 1.0)))
    for name, A in (("eq4", Y), ("eq7", Z)):
        bad = (A < -tol) | (A > 1 + tol)
        for i, j in zip(*np.nonzero(bad)):
            out.append(Violation("range", (int(i), int(j)), float(A[i, j])))
    for i, s in enumerate(Y.sum(axis=1)):
        if s > 1 + tol:
            out.append(Violation("eq4", (i,), float(s - 1.0)))
    for j, s in enumerate(Z.sum(axis=0)):
        if s > 1 + tol:
            out.append(Violation("eq7", (j,), float(s - 1.0)))
    for j, s in enumerate((X * Y).sum(axis=0)):
        if s > 1 + tol:
            out.append(Violation("server_bandwidth", (j,), float(s - 1.0), extension=True))
    return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveTerms:
    """Per-device pieces of the objective. Delays in seconds; ``sync`` in objective units."""

    local_s: np.ndarray
    remote_s: np.ndarray
    uplink_s: np.ndarray
    sync: np.ndarray
    e_cp: np.ndarray
    e_cm: np.ndarray
    rate: np.ndarray
    energy_cost: np.ndarray
    value: float

    @property
    def latency_s(self) -> np.ndarray:
        """Raw per-device latency ``D_md + D_es`` (no synchronization penalty)."""
        return self.local_s + self.remote_s

    @property
    def energy_j(self) -> np.ndarray:
        return self.e_cp + self.e_cm


def objective_terms(state: EnvState, alloc: Allocation, lam: float | None = None, w: float | None = None,
                    check: bool = True) -> ObjectiveTerms:
    p = state.params
    lam = p.lam if lam is None else lam
    w = p.w if w is None else w
    X, Y, Z = alloc.X, alloc.Y, alloc.Z
    if check:
        violations = feasibility_check(alloc)
        if violations:
            raise InfeasibleAllocation(violations)
    W_j = state.server_bandwidth
    local = state.task_f_md / state.local_flops
    z_sel = (X * Z).sum(axis=1)
    if np.any((z_sel <= 0) & (state.task_f_es > 0)):
        raise InfeasibleAllocation([Violation("eq7", (int(i),), 0.0) for i in np.nonzero(z_sel <= 0)[0]])
    k_sel = X @ state.queue_slots.astype(float)
    F_sel = X @ state.srv_flops
    remote = k_sel * p.kappa + state.task_f_es / (z_sel * F_sel)
    rate = data_rate(X, Y, W_j, state.snr_matrix(), log_base=p.log_base)
    served = rate > 0
    uplink = np.where(served, state.task_d / np.where(served, rate, 1.0), np.inf)
    # an unserved (or barely served) device cannot take longer than the horizon
    tu = p.time_unit_s
    gap = (local - np.minimum(uplink, p.sync_cap_s)) / tu
    sync = lam * gap**2
    e_cp, e_cm = energy(state.task_f_md, X, Y, W_j, state.tx_power_w, p.delta_cp, p.delta_cm,
                        p.cp_flops_unit, p.cm_bandwidth_unit)
    e_cost = (e_cp + e_cm) / np.maximum(state.battery, p.battery_floor)
    value = float(np.sum((local + remote) / tu + sync) + w * np.sum(e_cost))
    return ObjectiveTerms(local, remote, uplink, sync, e_cp, e_cm, rate, e_cost, value)


def objective(state: EnvState, alloc: Allocation, lam: float | None = None, w: float | None = None) -> float:
    return objective_terms(state, alloc, lam, w).value


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def _velocity(pos, waypoint, speed):
    delta = waypoint - pos
    dist = np.linalg.norm(delta, axis=1, keepdims=True)
    unit = np.divide(delta, dist, out=np.zeros_like(delta), where=dist > 0)
    return unit * speed[:, None]


def _gen(rng, name: str) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else rng[name]


def draw_tasks(params: SystemParams, M: int, rng: np.random.Generator):
    """One task per device: kind uniform over profiles, token count spread around its expectation."""
    profiles = params.task_profiles
    kinds = rng.integers(0, len(profiles), size=M)
    u = rng.random(M)
    exp_tokens = np.array([profiles[k].expected_tokens for k in kinds], dtype=float)
    spread = np.array([profiles[k].spread for k in kinds])
    tokens = np.maximum(1.0, np.round(exp_tokens * (1.0 - spread + 2.0 * spread * u)))
    dc = params.decode
    kind_idx = np.array([KINDS.index(profiles[k].kind) for k in kinds])
    return kind_idx, tokens * dc.bits_per_token, tokens * dc.draft_flops_per_token, tokens * dc.verify_flops_per_token


def fading_rng(state_seed: int, t: int) -> np.random.Generator:
    from .rngs import stream

    return stream(state_seed, "fading", t)


def step_env(state: EnvState, rng, energy_spent: np.ndarray | None = None) -> EnvState:
    """Advance one slot.

    ``rng`` is a Generator or a mapping with ``mobility``, ``tasks`` and
    ``queue`` streams. ``energy_spent`` is the per-device energy of the slot
    just finished (defaults to zero).
    """
    p = state.params
    if not 0 <= state.t < p.horizon - 1:
        raise ContractError(f"slot {state.t} out of range for horizon {p.horizon}")
    mob, tasks_rng, queue_rng = _gen(rng, "mobility"), _gen(rng, "tasks"), _gen(rng, "queue")

    pos, waypoint, speed = state.dev_pos.copy(), state.dev_waypoint.copy(), state.dev_speed.copy()
    step = speed * p.slot_s
    delta = waypoint - pos
    dist = np.linalg.norm(delta, axis=1)
    arrived = dist <= step
    moving = ~arrived & (dist > 0)
    pos[moving] += delta[moving] / dist[moving, None] * step[moving, None]
    pos[arrived] = waypoint[arrived]
    # fresh waypoint and speed for devices that arrived (and are allowed to move)
    n_new = int(np.count_nonzero(arrived & (speed > 0)))
    draws_wp = mob.uniform(0.0, p.area_m, size=(state.M, 2))
    draws_sp = mob.uniform(0.0, p.max_speed_mps, size=state.M)
    if n_new:
        sel = arrived & (speed > 0)
        waypoint[sel] = draws_wp[sel]
        speed[sel] = draws_sp[sel]

    H = channel_matrix(pos, state.srv_pos, p.pathloss, fading_rng(state.seed, state.t + 1) if p.pathloss.fading else None)

    battery = state.battery.copy()
    if energy_spent is not None:
        battery = np.maximum(battery - np.asarray(energy_spent) / state.battery_capacity, 0.0)

    queue = queue_rng.poisson(p.queue_mean, size=state.E) if p.queue_mean > 0 else np.zeros(state.E, dtype=int)
    kind, d, f_md, f_es = draw_tasks(p, state.M, tasks_rng)
    return replace(
        state, t=state.t + 1, dev_pos=pos, dev_waypoint=waypoint, dev_speed=speed, battery=battery,
        H=H, queue_slots=queue.astype(int), task_kind=kind, task_d=d, task_f_md=f_md, task_f_es=f_es,
    )
