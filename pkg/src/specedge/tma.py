"""Two-phase matching-based association.

Phase 1 seeds every device on its highest-gain server. Phase 2 is a local
search over pairwise swaps of the servers of two devices, accepting a swap
only when it strictly lowers the joint objective.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .mecmodel import Allocation, EnvState, InfeasibleAllocation, Violation, _log, objective_terms
from .projection import project_actions, project_work_conserving

# swaps must beat the incumbent by this relative margin; guards against float-noise cycling
_REL_TOL = 1e-12


@dataclass(frozen=True)
class SwapRecord:
    pair: tuple[tuple[int, int], tuple[int, int]]
    objective_before: float
    objective_after: float
    iteration: int


def tma_phase1(H: np.ndarray) -> np.ndarray:
    """Row-wise argmax of the gain matrix; ties go to the lowest server id."""
    H = np.asarray(H, dtype=float)
    if np.isnan(H).any():
        raise ValueError("channel matrix contains NaN")
    X = np.zeros_like(H)
    X[np.arange(H.shape[0]), np.argmax(H, axis=1)] = 1.0
    return X


def _projector(work_conserving: bool):
    return project_work_conserving if work_conserving else project_actions


def evaluate_association(X, Y, Z, state: EnvState, lam=None, w=None, work_conserving: bool = False) -> float:
    """Objective of association ``X`` with ``Y, Z`` carried over and re-projected."""
    Yp, Zp = _projector(work_conserving)(Y, Z, X)
    try:
        return objective_terms(state, Allocation(X, Yp, Zp), lam, w, check=False).value
    except InfeasibleAllocation:
        return float("inf")


class _Evaluator:
    """:func:`evaluate_association` with the state-dependent arrays computed once.

    Swap search calls the objective thousands of times per slot; this keeps
    the arithmetic of ``objective_terms`` but skips its per-call setup.
    """

    def __init__(self, Y, Z, state: EnvState, lam, w, work_conserving: bool):
        p = state.params
        self.lam = p.lam if lam is None else lam
        self.w = p.w if w is None else w
        self.Y = np.clip(np.asarray(Y, dtype=float), 0.0, 1.0)
        self.Z = np.clip(np.asarray(Z, dtype=float), 0.0, 1.0)
        self.wc = work_conserving
        self.state = state
        self.W = state.server_bandwidth
        self.log_snr = _log(1.0 + state.snr_matrix(), p.log_base)
        self.local = state.task_f_md / state.local_flops
        self.queue = state.queue_slots.astype(float) * p.kappa
        self.e_cp = p.delta_cp * state.task_f_md / p.cp_flops_unit
        self.battery = np.maximum(state.battery, p.battery_floor)
        self.tu = p.time_unit_s
        self.cap = p.sync_cap_s
        self.p = p

    def __call__(self, X) -> float:
        st, p = self.state, self.p
        Y = self.Y * X
        Z = self.Z * X
        Y = Y / np.maximum(Y.sum(axis=1, keepdims=True), 1.0)
        Y = Y / np.maximum((X * Y).sum(axis=0, keepdims=True), 1.0)
        if self.wc:
            col = Z.sum(axis=0, keepdims=True)
            Z = np.divide(Z, col, out=np.zeros_like(Z), where=col > 0)
        else:
            Z = Z / np.maximum(Z.sum(axis=0, keepdims=True), 1.0)
        z_sel = (X * Z).sum(axis=1)
        if np.any((z_sel <= 0) & (st.task_f_es > 0)):
            return float("inf")
        remote = X @ self.queue + st.task_f_es / (z_sel * (X @ st.srv_flops))
        rate = (X * Y * self.W[None, :] * self.log_snr).sum(axis=1)
        served = rate > 0
        uplink = np.where(served, st.task_d / np.where(served, rate, 1.0), np.inf)
        gap = (self.local - np.minimum(uplink, self.cap)) / self.tu
        sync = self.lam * gap**2
        band = (X * Y * self.W[None, :]).sum(axis=-1) / p.cm_bandwidth_unit
        e_cm = p.delta_cm * band * st.tx_power_w
        e_cost = (self.e_cp + e_cm) / self.battery
        return float(np.sum((self.local + remote) / self.tu + sync) + self.w * np.sum(e_cost))


def _assoc_to_X(servers: np.ndarray, E: int) -> np.ndarray:
    X = np.zeros((len(servers), E))
    X[np.arange(len(servers)), servers] = 1.0
    return X


def tma_phase2(X, Y, Z, state: EnvState, lam=None, w=None, strategy: str = "first",
               max_passes: int = 10_000, work_conserving: bool = False) -> tuple[np.ndarray, list[SwapRecord]]:
    X = np.asarray(X, dtype=float)
    rows = X.sum(axis=1)
    if X.shape != (state.M, state.E) or np.any(np.abs(rows - 1.0) > 1e-9) or np.any((X != 0) & (X != 1)):
        raise InfeasibleAllocation([Violation("eq3", tuple(X.shape), float(np.max(np.abs(rows - 1.0))))])
    if strategy not in ("first", "best"):
        raise ValueError(f"unknown strategy {strategy!r}")
    servers = X.argmax(axis=1)
    E = state.E
    value_of = _Evaluator(Y, Z, state, lam, w, work_conserving)
    current = value_of(X)
    swaps: list[SwapRecord] = []
    for iteration in range(max_passes):
        best = None
        improved = False
        for m in range(state.M - 1):
            for m2 in range(m + 1, state.M):
                e, e2 = servers[m], servers[m2]
                if e == e2:
                    continue
                cand = servers.copy()
                cand[m], cand[m2] = e2, e
                value = value_of(_assoc_to_X(cand, E))
                if value < current - _REL_TOL * abs(current):
                    if strategy == "first":
                        swaps.append(SwapRecord(((m, int(e)), (m2, int(e2))), current, value, iteration))
                        servers, current, improved = cand, value, True
                    elif best is None or value < best[0]:
                        best = (value, cand, ((m, int(e)), (m2, int(e2))))
        if strategy == "best" and best is not None:
            swaps.append(SwapRecord(best[2], current, best[0], iteration))
            current, servers, improved = best[0], best[1], True
        if not improved:
            break
    return _assoc_to_X(servers, E), swaps


def tma(Y, Z, state: EnvState, lam=None, w=None, strategy: str = "first",
        work_conserving: bool = False) -> np.ndarray:
    return tma_with_trace(Y, Z, state, lam, w, strategy, work_conserving)[0]


def tma_with_trace(Y, Z, state: EnvState, lam=None, w=None, strategy: str = "first",
                   work_conserving: bool = False):
    return tma_phase2(tma_phase1(state.H), Y, Z, state, lam, w, strategy, work_conserving=work_conserving)


def dump_swap_trace(swaps: list[SwapRecord], path: str | Path) -> None:
    """One JSON record per accepted swap."""
    with open(path, "w") as fh:
        for rec in swaps:
            fh.write(json.dumps(asdict(rec)) + "\n")
