"""Training loop, training-curve CSV and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..rngs import Streams, stream
from .buffer import ReplayBuffer
from .sac import Masac, SacConfig, SetLayout

CHECKPOINT_VERSION = 1
CURVE_FIELDS = ("episode", "mean_reward", "critic_loss", "policy_loss", "entropy")


@dataclass
class CurveRow:
    episode: int
    mean_reward: float
    critic_loss: float
    policy_loss: float
    entropy: float


@dataclass
class TrainResult:
    agent: Masac
    curve: list[CurveRow] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def episode_seed(master_seed: int, episode: int) -> int:
    """Seed of training episode ``episode``; drawn so it never collides with small evaluation seeds in practice."""
    return int(stream(master_seed, "train-episode", episode).integers(2**32, 2**62))


def train(env, cfg: SacConfig, seed: int, episodes: int, on_episode: Callable[[CurveRow], None] | None = None,
          time_budget_s: float | None = None) -> TrainResult:
    """Run ``episodes`` episodes of act, store, update.

    Streams: ``nets`` initializes parameters, ``policy`` drives action and
    target sampling, ``replay`` drives mini-batch sampling.
    """
    streams = Streams(seed)
    agent = Masac(env.n_agents, env.obs_dim, env.state_dim, env.act_dim, cfg, streams["nets"],
                  getattr(env, "layout", None))
    buf = ReplayBuffer(cfg.buffer_capacity, env.n_agents, env.obs_dim, env.state_dim, env.act_dim)
    pol_rng, rep_rng = streams["policy"], streams["replay"]
    result = TrainResult(agent)
    start = time.perf_counter()
    for ep in range(episodes):
        obs, state = env.reset(episode_seed(seed, ep))
        rewards, c_losses, p_losses, ents = [], [], [], []
        done = False
        while not done:
            actions, _ = agent.act(obs, pol_rng)
            step = env.step(actions)
            done = step.done
            buf.add(obs, state, actions, step.reward, step.obs, step.state, done)
            obs, state = step.obs, step.state
            rewards.append(step.reward)
            result.steps += 1
            if result.steps >= cfg.warmup_steps and len(buf) >= cfg.batch_size:
                for _ in range(cfg.updates_per_step):
                    batch = buf.sample(cfg.batch_size, rep_rng)
                    c_losses.append(agent.critic_update(batch, pol_rng))
                    pl, ent = agent.policy_update(batch, pol_rng)
                    p_losses.append(pl)
                    ents.append(ent)
                    agent.soft_update_targets()
        row = CurveRow(ep, float(np.mean(rewards)), _mean(c_losses), _mean(p_losses), _mean(ents))
        result.curve.append(row)
        if on_episode is not None:
            on_episode(row)
        if time_budget_s is not None and time.perf_counter() - start > time_budget_s:
            break
    result.seconds = time.perf_counter() - start
    return result


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def curve_csv(curve: list[CurveRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for r in curve:
        w.writerow([r.episode] + [repr(float(getattr(r, k))) for k in CURVE_FIELDS[1:]])
    return out.getvalue()


def write_curve(curve: list[CurveRow], path: str | Path) -> None:
    Path(path).write_text(curve_csv(curve))


def save_checkpoint(agent: Masac, path: str | Path, meta: dict | None = None) -> None:
    """Flat parameter vectors plus a JSON header with the config and its hash."""
    header = {
        "version": CHECKPOINT_VERSION,
        "sac_config": agent.cfg.to_dict(),
        "config_hash": agent.cfg.digest(),
        "dims": [agent.n_agents, agent.obs_dim, agent.state_dim, agent.act_dim],
        "layout": agent.layout.to_dict() if agent.layout is not None else None,
        "meta": meta or {},
    }
    arrays = {f"theta_{k}": t for k, t in enumerate(agent.thetas)}
    arrays.update({f"phi_{k}": p for k, p in enumerate(agent.phis)})
    arrays.update({f"phi_bar_{k}": p for k, p in enumerate(agent.phi_bars)})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[Masac, dict]:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        raw = dict(header["sac_config"])
        for key in ("hidden", "log_std_bounds"):
            raw[key] = tuple(raw[key])
        cfg = SacConfig(**raw)
        if cfg.digest() != header["config_hash"]:
            raise CheckpointError("checkpoint config hash mismatch")
        n_agents, obs_dim, state_dim, act_dim = header["dims"]
        layout = SetLayout(**header["layout"]) if header.get("layout") else None
        agent = Masac(n_agents, obs_dim, state_dim, act_dim, cfg, np.random.default_rng(0), layout)
        agent.thetas = [np.array(data[f"theta_{k}"]) for k in range(len(agent.thetas))]
        agent.phis = [np.array(data[f"phi_{k}"]) for k in range(len(agent.phis))]
        agent.phi_bars = [np.array(data[f"phi_bar_{k}"]) for k in range(len(agent.phi_bars))]
    return agent, header["meta"]
