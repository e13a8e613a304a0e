"""Result rows, their CSV encoding and summary statistics."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MetricsRow:
    """One emitted measurement. Fields that do not apply to an experiment stay ``None``.

    Evaluation rows are per slot: ``latency_s`` is the mean raw device
    latency, energies are slot totals, ``energy_high_j``/``energy_low_j``
    cover the devices whose starting battery is >= 0.8 or <= 0.2. Decoding
    study rows are per decoded sequence.
    """

    run_id: str
    experiment: str
    seed: int
    policy: str | None = None
    slot: int | None = None
    w: float | None = None
    num_devices: int | None = None
    num_servers: int | None = None
    engine: str | None = None
    profile: str | None = None
    gamma: int | None = None
    rate_bps: float | None = None
    latency_s: float | None = None
    objective: float | None = None
    energy_j: float | None = None
    energy_high_j: float | None = None
    energy_low_j: float | None = None
    tokens_per_s: float | None = None
    idle_fraction: float | None = None
    mobile_s: float | None = None
    uplink_s: float | None = None
    server_s: float | None = None
    schema_version: int = SCHEMA_VERSION


FIELDS = tuple(f.name for f in dataclasses.fields(MetricsRow))
_INT_FIELDS = {"seed", "slot", "num_devices", "num_servers", "gamma", "schema_version"}
_STR_FIELDS = {"run_id", "experiment", "policy", "engine", "profile"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in FIELDS])
    return out.getvalue()


def write_rows(rows: Iterable[MetricsRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows))
    return path


def _parse(name: str, raw: str):
    if raw == "":
        return None
    if name in _STR_FIELDS:
        return raw
    if name in _INT_FIELDS:
        return int(raw)
    return float(raw)


def read_rows(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: not a metrics CSV (missing columns {sorted(missing)})")
        rows = [MetricsRow(**{f: _parse(f, rec[f]) for f in FIELDS}) for rec in reader]
    for r in rows:
        if r.schema_version != SCHEMA_VERSION:
            raise ValueError(f"{path}: schema version {r.schema_version}, expected {SCHEMA_VERSION}")
    return rows


def sort_key(r: MetricsRow):
    """Deterministic merge order for rows produced by parallel workers."""
    return (r.experiment, r.policy or "", r.engine or "", r.profile or "", -1 if r.w is None else r.w,
            -1 if r.gamma is None else r.gamma, -1.0 if r.rate_bps is None else r.rate_bps, r.seed,
            -1 if r.slot is None else r.slot)


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Sample mean and the half-width of its Student-t confidence interval."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no values")
    if x.size == 1:
        return float(x[0]), 0.0
    half = stats.t.ppf(0.5 + level / 2.0, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size)
    return float(x.mean()), float(half)
