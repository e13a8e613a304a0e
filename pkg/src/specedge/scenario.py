"""Scenario configuration files and initial-state construction."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .mecmodel import (
    EnvState,
    PathLossParams,
    SystemParams,
    TaskProfile,
    channel_matrix,
    dbm_to_watts,
    draw_tasks,
    fading_rng,
)
from .rngs import Streams
from .specdec import ContractError, DecodeConfig, VerificationMode


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e9``-style floats (plain YAML 1.1 treats them as strings)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[0-9][0-9_]*[eE][-+]?[0-9]+|\.inf|\.Inf|\.INF|\.nan|\.NaN|\.NAN)$""", re.X),
    list("-+0123456789."),
)


def yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    flops: float


@dataclass(frozen=True)
class ServerProfile:
    name: str
    flops: float


# effective (memory-bound decoding) throughput, not peak datasheet numbers
DEFAULT_DEVICES = (
    DeviceProfile("galaxy-s23", 2.0e11),
    DeviceProfile("iphone-14", 1.5e11),
    DeviceProfile("mate-60", 1.0e11),
)
DEFAULT_SERVERS = (
    ServerProfile("rtx-2080", 1.0e12),
    ServerProfile("rtx-3090", 2.5e12),
    ServerProfile("rtx-4090", 5.0e12),
)


@dataclass(frozen=True)
class ScenarioConfig:
    num_devices: int = 12
    num_servers: int = 3
    system: SystemParams = field(default_factory=SystemParams)
    tx_power_dbm: tuple[float, float] = (16.0, 24.0)
    device_profiles: tuple[DeviceProfile, ...] = DEFAULT_DEVICES
    server_profiles: tuple[ServerProfile, ...] = DEFAULT_SERVERS
    server_positions: tuple[tuple[float, float], ...] | None = None
    battery_tiers: tuple[tuple[float, float], ...] = ((0.05, 0.2), (0.3, 0.7), (0.8, 1.0))
    battery_capacity: float = 100.0

    def __post_init__(self) -> None:
        if self.num_devices < 1 or self.num_servers < 1:
            raise ContractError("need at least one device and one server")
        lo, hi = self.tx_power_dbm
        if lo > hi:
            raise ContractError("tx_power_dbm range is inverted")
        if self.server_positions is not None and len(self.server_positions) < self.num_servers:
            raise ContractError("fewer server positions than servers")

    def with_overrides(self, **kw) -> "ScenarioConfig":
        sys_kw = {k: kw.pop(k) for k in list(kw) if k in _SYSTEM_FIELDS}
        cfg = dataclasses.replace(self, **kw)
        if sys_kw:
            cfg = dataclasses.replace(cfg, system=dataclasses.replace(cfg.system, **sys_kw))
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SYSTEM_FIELDS = {f.name for f in dataclasses.fields(SystemParams)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, VerificationMode):
        return obj.value
    return obj


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def scenario_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    raw = dict(raw)
    sys_raw = dict(raw.pop("system", {}) or {})
    if "pathloss" in sys_raw:
        sys_raw["pathloss"] = PathLossParams(**sys_raw["pathloss"])
    if "task_profiles" in sys_raw:
        sys_raw["task_profiles"] = tuple(TaskProfile(**p) for p in sys_raw["task_profiles"])
    if "decode" in sys_raw:
        dec = dict(sys_raw["decode"])
        if "prompt" in dec:
            dec["prompt"] = tuple(dec["prompt"])
        sys_raw["decode"] = DecodeConfig(**dec)
    unknown = set(sys_raw) - _SYSTEM_FIELDS
    if unknown:
        raise ContractError(f"unknown system keys: {sorted(unknown)}")
    kw: dict[str, Any] = {"system": SystemParams(**sys_raw)}
    if "device_profiles" in raw:
        kw["device_profiles"] = tuple(DeviceProfile(**d) for d in raw.pop("device_profiles"))
    if "server_profiles" in raw:
        kw["server_profiles"] = tuple(ServerProfile(**s) for s in raw.pop("server_profiles"))
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ContractError(f"unknown scenario keys: {sorted(unknown)}")
    for k, v in raw.items():
        kw[k] = _tuplify(v)
    return ScenarioConfig(**kw)


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        raw = yaml_load(fh.read()) or {}
    return scenario_from_dict(raw)


def dump_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def server_layout(cfg: ScenarioConfig) -> np.ndarray:
    E, area = cfg.num_servers, cfg.system.area_m
    if cfg.server_positions is not None:
        return np.asarray(cfg.server_positions[:E], dtype=float)
    side = math.ceil(math.sqrt(E))
    cells = [((c + 0.5) * area / side, (r + 0.5) * area / side) for r in range(side) for c in range(side)]
    return np.asarray(cells[:E], dtype=float)


def initial_state(cfg: ScenarioConfig, streams: Streams | int) -> EnvState:
    """Slot-0 state. Uses the ``init``, ``tasks`` and ``queue`` streams."""
    if not isinstance(streams, Streams):
        streams = Streams(int(streams))
    p = cfg.system
    M, E = cfg.num_devices, cfg.num_servers
    rng = streams["init"]
    pos = rng.uniform(0.0, p.area_m, size=(M, 2))
    waypoint = rng.uniform(0.0, p.area_m, size=(M, 2))
    speed = rng.uniform(0.0, p.max_speed_mps, size=M)
    lo, hi = cfg.tx_power_dbm
    tx = dbm_to_watts(rng.uniform(lo, hi, size=M))
    prof = rng.integers(0, len(cfg.device_profiles), size=M)
    flops = np.array([cfg.device_profiles[k].flops for k in prof])
    tier = np.arange(M) % len(cfg.battery_tiers)
    rng.shuffle(tier)
    bounds = np.asarray(cfg.battery_tiers, dtype=float)[tier]
    battery = rng.uniform(bounds[:, 0], bounds[:, 1])
    srv_pos = server_layout(cfg)
    srv_flops = np.array([cfg.server_profiles[j % len(cfg.server_profiles)].flops for j in range(E)])
    H = channel_matrix(pos, srv_pos, p.pathloss, fading_rng(streams.master_seed, 0) if p.pathloss.fading else None)
    queue = streams["queue"].poisson(p.queue_mean, size=E) if p.queue_mean > 0 else np.zeros(E, dtype=int)
    kind, d, f_md, f_es = draw_tasks(p, M, streams["tasks"])
    return EnvState(
        t=0, params=p, seed=streams.master_seed, dev_pos=pos, dev_waypoint=waypoint, dev_speed=speed,
        tx_power_w=np.asarray(tx), local_flops=flops, battery=battery,
        battery_capacity=np.full(M, cfg.battery_capacity), srv_pos=srv_pos, srv_flops=srv_flops,
        queue_slots=queue.astype(int), H=H, task_kind=kind, task_d=d, task_f_md=f_md, task_f_es=f_es,
    )
