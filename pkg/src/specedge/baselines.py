"""Reference association rules and the uniform resource split."""

from __future__ import annotations

import numpy as np

from .mecmodel import EnvState

POLICIES = ("random", "max_sinr", "max_compute", "tma_masac")


def _one_hot(servers: np.ndarray, E: int) -> np.ndarray:
    X = np.zeros((len(servers), E))
    X[np.arange(len(servers)), servers] = 1.0
    return X


def random_assoc(state: EnvState, rng: np.random.Generator) -> np.ndarray:
    return _one_hot(rng.integers(0, state.E, size=state.M), state.E)


def sinr_scores(state: EnvState, ref_power_w: float = 1.0, interference: bool = True) -> np.ndarray:
    """``h^2 P_i / (N0 W_j + sum_{k != j} h_ik^2 P_ref)``.

    The interference term (other servers' reference power seen at the device)
    exists only for this baseline's ranking; it never enters the rate model.
    """
    p = state.params
    h2 = np.square(state.H)
    noise = p.noise_psd_w_hz * state.server_bandwidth[None, :]
    other = (h2.sum(axis=1, keepdims=True) - h2) * ref_power_w if interference else 0.0
    return h2 * state.tx_power_w[:, None] / (noise + other)


def max_sinr_assoc(state: EnvState, ref_power_w: float = 1.0, interference: bool = True) -> np.ndarray:
    return _one_hot(np.argmax(sinr_scores(state, ref_power_w, interference), axis=1), state.E)


def max_compute_assoc(state: EnvState) -> np.ndarray:
    best = int(np.argmax(state.srv_flops))
    return _one_hot(np.full(state.M, best), state.E)


def uniform_alloc(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Each server splits bandwidth and compute equally among its devices."""
    X = np.asarray(X, dtype=float)
    n = X.sum(axis=0)
    share = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
    Y = X * share[None, :]
    return Y, Y.copy()
