"""Experiment specs and the runs behind each CLI subcommand."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import yaml

from ..baselines import POLICIES, max_compute_assoc, max_sinr_assoc, random_assoc, uniform_alloc
from ..masac.env import MecEnv, ObsBounds, act
from ..masac.sac import Masac, SacConfig
from ..masac.trainer import TrainResult, load_checkpoint, save_checkpoint, train, write_curve
from ..mecmodel import Allocation, EnvState, ObjectiveTerms, objective_terms, step_env
from ..rngs import Streams
from ..scenario import ScenarioConfig, initial_state, scenario_from_dict, yaml_load
from ..specdec import (
    ContractError,
    DecodeConfig,
    LinkTiming,
    SyntheticLM,
    VerificationMode,
    run_conventional,
    run_parallel,
)
from .metrics import MetricsRow, mean_ci, sort_key

BASELINES = ("random", "max_sinr", "max_compute")
ENGINES = ("conventional", "parallel")
HIGH_BATTERY, LOW_BATTERY = 0.8, 0.2


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeProfile:
    name: str
    smoothing: float
    max_tokens: int


@dataclass(frozen=True)
class DecodeStudyConfig:
    gammas: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    rates_bps: tuple[float, ...] = (1e6, 10e6, 50e6, 100e6)
    engines: tuple[str, ...] = ENGINES
    profiles: tuple[DecodeProfile, ...] = (
        DecodeProfile("code", 0.05, 192),
        DecodeProfile("summarize", 0.1, 96),
        DecodeProfile("chat", 0.3, 48),
    )
    seeds: tuple[int, ...] = tuple(range(10))
    device_flops: float = 1.5e11
    server_flops: float = 2.5e12
    bits_per_token: float = 2e4
    draft_flops_per_token: float = 2.7e8
    verify_flops_per_token: float = 3.2e9
    verify_fixed_flops: float = 1.6e10
    vocab_size: int = 64
    mode: str = "stochastic"

    def validate(self) -> None:
        for name in ("gammas", "rates_bps", "engines", "profiles", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"decode study grid axis {name!r} is empty")
        if min(self.gammas) < 1:
            raise ConfigError("gammas must be >= 1")
        if min(self.rates_bps) <= 0:
            raise ConfigError("rates must be positive")
        bad = set(self.engines) - set(ENGINES)
        if bad:
            raise ConfigError(f"unknown engines {sorted(bad)}")
        for p in self.profiles:
            if not 0 <= p.smoothing <= 1 or p.max_tokens < 1:
                raise ConfigError(f"bad profile {p}")
        for name in ("device_flops", "server_flops", "bits_per_token", "draft_flops_per_token",
                     "verify_flops_per_token"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        try:
            VerificationMode(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class TrainSpec:
    episodes: int = 500
    seed: int = 0
    w_choices: tuple[float, ...] | None = None
    baseline_draws: int = 1
    time_budget_s: float | None = None
    sac: SacConfig = field(default_factory=SacConfig)


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    policies: tuple[str, ...] = POLICIES
    seeds: tuple[int, ...] = tuple(range(10))
    w_values: tuple[float, ...] = (20.0, 60.0, 100.0)
    train: TrainSpec = field(default_factory=TrainSpec)
    decode_study: DecodeStudyConfig = field(default_factory=DecodeStudyConfig)
    workers: int = 1

    def validate(self) -> None:
        bad = set(self.policies) - set(POLICIES)
        if bad:
            raise ConfigError(f"unknown policies {sorted(bad)}; choose from {POLICIES}")
        if not self.seeds:
            raise ConfigError("no seeds given")
        if not self.w_values or min(self.w_values) < 0:
            raise ConfigError("w_values must be a non-empty list of non-negative weights")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.decode_study.validate()


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, list) else v


def _seeds(raw) -> tuple[int, ...]:
    if isinstance(raw, dict):
        return tuple(range(int(raw.get("start", 0)), int(raw["stop"])))
    return tuple(int(s) for s in raw)


def _build(cls, raw: dict, where: str, **nested):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kw = {k: _tuple(v) for k, v in raw.items()}
    kw.update(nested)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def spec_from_dict(raw: dict[str, Any], base_dir: Path | None = None) -> ExperimentSpec:
    raw = dict(raw or {})
    kw: dict[str, Any] = {}
    scen = raw.pop("scenario", {}) or {}
    if isinstance(scen, str):
        path = Path(scen) if base_dir is None else base_dir / scen
        scen = yaml_load(path.read_text()) or {}
    try:
        kw["scenario"] = scenario_from_dict(scen)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    if "train" in raw:
        tr = dict(raw.pop("train") or {})
        sac = _build(SacConfig, dict(tr.pop("sac", {}) or {}), "train.sac")
        kw["train"] = _build(TrainSpec, tr, "train", sac=sac)
    if "decode_study" in raw:
        ds = dict(raw.pop("decode_study") or {})
        profiles = ds.pop("profiles", None)
        nested = {}
        if profiles is not None:
            nested["profiles"] = tuple(_build(DecodeProfile, p, "decode_study.profiles") for p in profiles)
        if "seeds" in ds:
            ds["seeds"] = _seeds(ds["seeds"])
        kw["decode_study"] = _build(DecodeStudyConfig, ds, "decode_study", **nested)
    if "seeds" in raw:
        raw["seeds"] = _seeds(raw["seeds"])
    spec = _build(ExperimentSpec, raw, "experiment", **kw)
    spec.validate()
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = yaml_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return spec_from_dict(raw or {}, path.parent)


# ---------------------------------------------------------------------------
# decoding study
# ---------------------------------------------------------------------------


def _decode_point(cfg: DecodeStudyConfig, engine: str, prof: DecodeProfile, gamma: int, rate: float, seed: int):
    target = SyntheticLM(seed, cfg.vocab_size)
    draft = target.as_draft(prof.smoothing)
    dc = DecodeConfig(gamma=gamma, max_tokens=prof.max_tokens, bits_per_token=cfg.bits_per_token,
                      draft_flops_per_token=cfg.draft_flops_per_token,
                      verify_flops_per_token=cfg.verify_flops_per_token,
                      verification_mode=cfg.mode, verify_fixed_flops=cfg.verify_fixed_flops)
    timing = LinkTiming(cfg.device_flops, cfg.server_flops, rate)
    fn = run_conventional if engine == "conventional" else run_parallel
    _, bd = fn(draft, target, dc, timing, Streams(seed).keyed("verify", gamma, int(rate)))
    return bd


def run_decoding_study(cfg: DecodeStudyConfig) -> list[MetricsRow]:
    """One row per (engine, profile, gamma, rate, seed)."""
    cfg.validate()
    rows = []
    for engine, prof, gamma, rate, seed in product(cfg.engines, cfg.profiles, cfg.gammas, cfg.rates_bps, cfg.seeds):
        bd = _decode_point(cfg, engine, prof, int(gamma), float(rate), int(seed))
        rows.append(MetricsRow(
            run_id=f"decode-{engine}-{prof.name}-g{gamma}-r{rate:g}-s{seed}", experiment="decode",
            seed=int(seed), engine=engine, profile=prof.name, gamma=int(gamma), rate_bps=float(rate),
            latency_s=bd.total_s, tokens_per_s=bd.tokens_out / bd.total_s, idle_fraction=bd.idle_fraction,
            mobile_s=bd.mobile_compute_s, uplink_s=bd.uplink_s, server_s=bd.server_compute_s,
        ))
    return sorted(rows, key=sort_key)


# ---------------------------------------------------------------------------
# MEC rollouts
# ---------------------------------------------------------------------------


@dataclass
class PolicyRunner:
    """Maps (state, streams) to an allocation for one named policy."""

    name: str
    agent: Masac | None = None
    bounds: ObsBounds | None = None

    def __post_init__(self) -> None:
        if self.name not in POLICIES:
            raise ConfigError(f"unknown policy {self.name!r}")
        if self.name == "tma_masac" and self.agent is None:
            raise ConfigError("policy tma_masac needs a trained checkpoint")

    def __call__(self, s: EnvState, streams: Streams) -> Allocation:
        if self.name == "tma_masac":
            return act(self.agent, s, self.bounds, deterministic=True)
        if self.name == "random":
            X = random_assoc(s, streams.keyed("baseline", s.t))
        elif self.name == "max_sinr":
            X = max_sinr_assoc(s)
        else:
            X = max_compute_assoc(s)
        Y, Z = uniform_alloc(X)
        return Allocation(X, Y, Z)


def rollout(scenario: ScenarioConfig, runner: PolicyRunner, seed: int) -> Iterator[tuple[EnvState, Allocation, ObjectiveTerms]]:
    """Roll one seeded episode of ``horizon`` slots under ``runner``."""
    streams = Streams(seed)
    s = initial_state(scenario, streams)
    for t in range(scenario.system.horizon):
        alloc = runner(s, streams)
        terms = objective_terms(s, alloc)
        yield s, alloc, terms
        if t < scenario.system.horizon - 1:
            s = step_env(s, streams, terms.energy_j)


def _eval_rows(scenario: ScenarioConfig, runner: PolicyRunner, seed: int, experiment: str) -> list[MetricsRow]:
    rows = []
    tier_high = tier_low = None
    bits = scenario.system.decode.bits_per_token
    for s, _, terms in rollout(scenario, runner, seed):
        if tier_high is None:
            tier_high, tier_low = s.battery >= HIGH_BATTERY, s.battery <= LOW_BATTERY
        e = terms.energy_j
        lat = terms.latency_s
        rows.append(MetricsRow(
            run_id=f"{experiment}-{runner.name}-w{s.params.w:g}-s{seed}", experiment=experiment, seed=int(seed),
            policy=runner.name, slot=int(s.t), w=float(s.params.w), num_devices=s.M, num_servers=s.E,
            latency_s=float(lat.mean()), objective=terms.value, energy_j=float(e.sum()),
            energy_high_j=float(e[tier_high].sum()), energy_low_j=float(e[tier_low].sum()),
            tokens_per_s=float(np.mean(s.task_d / bits / lat)),
        ))
    return rows


def _eval_job(args) -> list[MetricsRow]:
    scenario, name, ckpt, seed, experiment = args
    runner = make_runner(name, scenario, ckpt)
    return _eval_rows(scenario, runner, seed, experiment)


def make_runner(name: str, scenario: ScenarioConfig, checkpoint: str | Path | None) -> PolicyRunner:
    if name != "tma_masac":
        return PolicyRunner(name)
    if checkpoint is None:
        raise ConfigError("policy tma_masac needs --checkpoint")
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    agent, meta = load_checkpoint(checkpoint)
    if (agent.n_agents, agent.act_dim) != (scenario.num_servers, 2 * scenario.num_devices):
        raise ConfigError(
            f"checkpoint was trained for E={agent.n_agents}, M={agent.act_dim // 2}; "
            f"scenario has E={scenario.num_servers}, M={scenario.num_devices}")
    w_range = tuple(meta["w_range"]) if meta.get("w_range") else None
    return PolicyRunner(name, agent, ObsBounds.from_scenario(scenario, w_range))


def _run_jobs(jobs: list, workers: int) -> list[MetricsRow]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_eval_job, jobs))
    else:
        chunks = [_eval_job(j) for j in jobs]
    return sorted((r for c in chunks for r in c), key=sort_key)


def run_uara_eval(spec: ExperimentSpec, checkpoint: str | Path | None = None,
                  policies: tuple[str, ...] | None = None) -> list[MetricsRow]:
    """Per-slot rows for every (policy, seed) at the scenario's own ``w``."""
    spec.validate()
    policies = policies or spec.policies
    for name in policies:
        make_runner(name, spec.scenario, checkpoint)  # fail fast on a missing checkpoint
    jobs = [(spec.scenario, name, checkpoint, seed, "eval") for name in policies for seed in spec.seeds]
    return _run_jobs(jobs, spec.workers)


def run_energy_sweep(spec: ExperimentSpec, checkpoint: str | Path | None = None,
                     policies: tuple[str, ...] | None = None) -> list[MetricsRow]:
    """Per-slot rows for every (w, policy, seed)."""
    spec.validate()
    policies = policies or ("tma_masac",)
    for name in policies:
        make_runner(name, spec.scenario, checkpoint)
    jobs = [(spec.scenario.with_overrides(w=float(w)), name, checkpoint, seed, "sweep_w")
            for w in spec.w_values for name in policies for seed in spec.seeds]
    return _run_jobs(jobs, spec.workers)


def run_training(spec: ExperimentSpec, out_dir: str | Path, on_episode=None) -> tuple[TrainResult, Path, Path]:
    """Train TMA-MASAC; writes ``masac.npz`` and ``training_curve.csv`` into ``out_dir``."""
    spec.validate()
    tr = spec.train
    env = MecEnv(spec.scenario, tr.w_choices, tr.baseline_draws)
    result = train(env, tr.sac, tr.seed, tr.episodes, on_episode=on_episode, time_budget_s=tr.time_budget_s)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, curve = out / "masac.npz", out / "training_curve.csv"
    meta = {"scenario_digest": spec.scenario.digest(), "w_range": list(env.bounds.w),
            "w_choices": list(tr.w_choices) if tr.w_choices else None, "episodes_run": len(result.curve)}
    save_checkpoint(result.agent, ckpt, meta)
    write_curve(result.curve, curve)
    return result, ckpt, curve


# ---------------------------------------------------------------------------
# aggregation and report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicySummary:
    experiment: str
    policy: str
    w: float | None
    n_seeds: int
    latency_mean: float
    latency_ci: float
    objective_mean: float
    energy_mean: float
    energy_high_mean: float
    energy_low_mean: float


def per_seed(rows: list[MetricsRow], attr: str) -> dict[tuple, dict[int, float]]:
    """``{(experiment, policy, w): {seed: episode value}}``.

    ``latency_s`` and ``objective`` are averaged over slots; energies are summed.
    """
    acc: dict[tuple, dict[int, list[float]]] = {}
    for r in rows:
        if r.policy is None:
            continue
        acc.setdefault((r.experiment, r.policy, r.w), {}).setdefault(r.seed, []).append(getattr(r, attr))
    reduce = np.sum if attr.startswith("energy") else np.mean
    return {k: {s: float(reduce(v)) for s, v in sorted(d.items())} for k, d in acc.items()}


def summarize(rows: list[MetricsRow]) -> list[PolicySummary]:
    eval_rows = [r for r in rows if r.policy is not None]
    if not eval_rows:
        return []
    tables = {a: per_seed(eval_rows, a) for a in ("latency_s", "objective", "energy_j", "energy_high_j", "energy_low_j")}
    out = []
    for key in sorted(tables["latency_s"], key=lambda k: (k[0], -1 if k[2] is None else k[2], k[1])):
        lat = list(tables["latency_s"][key].values())
        m, ci = mean_ci(lat)
        out.append(PolicySummary(key[0], key[1], key[2], len(lat), m, ci,
                                 float(np.mean(list(tables["objective"][key].values()))),
                                 float(np.mean(list(tables["energy_j"][key].values()))),
                                 float(np.mean(list(tables["energy_high_j"][key].values()))),
                                 float(np.mean(list(tables["energy_low_j"][key].values())))))
    return out


def improvement(baseline: float, ours: float) -> float:
    """Relative reduction ``(baseline - ours) / baseline``."""
    return (baseline - ours) / baseline


def report(rows: list[MetricsRow]) -> str:
    """Markdown summary: per-policy means with 95% CIs and improvement over the best baseline,
    plus mean latency per decoding-study grid point."""
    if not rows:
        raise ValueError("no rows to report")
    lines: list[str] = []
    summaries = summarize(rows)
    if summaries:
        lines += ["## Policy comparison", "",
                  "| experiment | w | policy | seeds | latency s (mean +- 95% CI) | objective | energy J "
                  "| energy J (B>=0.8) | energy J (B<=0.2) | vs best baseline |",
                  "|---|---|---|---|---|---|---|---|---|---|"]
        groups: dict[tuple, list[PolicySummary]] = {}
        for s in summaries:
            groups.setdefault((s.experiment, s.w), []).append(s)
        for (exp, w), group in groups.items():
            base = [s.latency_mean for s in group if s.policy in BASELINES]
            best = min(base) if base else None
            for s in group:
                imp = "" if best is None or s.policy in BASELINES else f"{100 * improvement(best, s.latency_mean):.1f}%"
                lines.append(f"| {exp} | {'' if w is None else f'{w:g}'} | {s.policy} | {s.n_seeds} "
                             f"| {s.latency_mean:.4f} +- {s.latency_ci:.4f} | {s.objective_mean:.4g} "
                             f"| {s.energy_mean:.4g} | {s.energy_high_mean:.4g} | {s.energy_low_mean:.4g} | {imp} |")
        lines.append("")
    dec = [r for r in rows if r.engine is not None]
    if dec:
        lines += ["## Decoding study", "", "| engine | profile | gamma | rate Mb/s | runs | latency s | idle fraction |",
                  "|---|---|---|---|---|---|---|"]
        grid: dict[tuple, list[MetricsRow]] = {}
        for r in dec:
            grid.setdefault((r.engine, r.profile, r.gamma, r.rate_bps), []).append(r)
        for (eng, prof, g, rate), rs in sorted(grid.items()):
            lines.append(f"| {eng} | {prof} | {g} | {rate / 1e6:g} | {len(rs)} "
                         f"| {np.mean([r.latency_s for r in rs]):.4f} | {np.mean([r.idle_fraction for r in rs]):.3f} |")
        lines.append("")
    if not lines:
        raise ValueError("rows contain neither policy nor decoding results")
    return "\n".join(lines)


__all__ = [
    "ConfigError", "ContractError", "DecodeProfile", "DecodeStudyConfig", "ExperimentSpec", "PolicyRunner",
    "PolicySummary", "TrainSpec", "improvement", "load_spec", "make_runner", "per_seed", "report", "rollout",
    "run_decoding_study", "run_energy_sweep", "run_training", "run_uara_eval", "spec_from_dict", "summarize",
]
