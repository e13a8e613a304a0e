"""Multi-agent soft actor-critic for bandwidth and compute allocation.

Each server is an agent that emits log-scale multipliers on closed-form
per-device bandwidth and compute priors (see :mod:`.env`).
"""

from .buffer import Batch, ReplayBuffer
from .env import BanditEnv, MecEnv, ObsBounds, act, allocation_from_actions, build_obs, reward
from .nets import Adam, Mlp, numerical_gradient, relative_error
from .sac import GaussianPolicy, Masac, SacConfig, TrainingDiverged, policy_sample, soft_update
from .trainer import CheckpointError, load_checkpoint, save_checkpoint, train, write_curve

__all__ = [
    "Adam", "BanditEnv", "Batch", "CheckpointError", "GaussianPolicy", "Masac", "MecEnv", "Mlp", "ObsBounds",
    "ReplayBuffer", "SacConfig", "TrainingDiverged", "act", "allocation_from_actions", "build_obs",
    "load_checkpoint", "numerical_gradient", "policy_sample", "relative_error", "reward", "save_checkpoint",
    "soft_update", "train", "write_curve",
]
