"""Fixed-capacity ring buffer of joint transitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray        # (n, n_agents, obs_dim)
    state: np.ndarray      # (n, state_dim)
    action: np.ndarray     # (n, n_agents, act_dim)
    reward: np.ndarray     # (n,)
    next_obs: np.ndarray
    next_state: np.ndarray
    done: np.ndarray       # (n,) float, 1 at terminal transitions

    def __len__(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """Overwrites the oldest transition once full; samples uniformly with replacement."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.state = np.zeros((capacity, state_dim))
        self.action = np.zeros((capacity, n_agents, act_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros_like(self.obs)
        self.next_state = np.zeros_like(self.state)
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, obs, state, action, reward, next_obs, next_state, done) -> None:
        k = self._next
        self.obs[k] = obs
        self.state[k] = state
        self.action[k] = action
        self.reward[k] = reward
        self.next_obs[k] = next_obs
        self.next_state[k] = next_state
        self.done[k] = float(done)
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        return Batch(self.obs[idx], self.state[idx], self.action[idx], self.reward[idx],
                     self.next_obs[idx], self.next_state[idx], self.done[idx])
