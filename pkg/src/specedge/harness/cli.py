"""Command-line entry point: ``specedge <subcommand> ...``.

Exit status is 0 on success, 2 for configuration errors and 3 for contract
violations or training divergence; failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..masac.sac import TrainingDiverged
from ..masac.trainer import CheckpointError
from ..mecmodel import InfeasibleAllocation
from ..specdec import ContractError
from .experiments import (
    ConfigError,
    ExperimentSpec,
    load_spec,
    report,
    run_decoding_study,
    run_energy_sweep,
    run_training,
    run_uara_eval,
)
from .metrics import read_rows, write_rows

OUTPUT_ENV = "SPECEDGE_OUTPUT_DIR"
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"
log = logging.getLogger("specedge")


def _seed_list(text: str) -> tuple[int, ...]:
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-3,8"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def _out_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "results"))


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.config or DEFAULT_CONFIG)
    changes = {}
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    if changes:
        import dataclasses

        spec = dataclasses.replace(spec, **changes)
        spec.validate()
    return spec


def cmd_decode_study(args) -> int:
    spec = _spec(args)
    study = spec.decode_study
    if args.seeds:
        import dataclasses

        study = dataclasses.replace(study, seeds=args.seeds)
    path = write_rows(run_decoding_study(study), _out_dir(args) / "decode_study.csv")
    print(path)
    return 0


def cmd_train(args) -> int:
    import dataclasses

    spec = _spec(args)
    tr = spec.train
    if args.seed is not None:
        tr = dataclasses.replace(tr, seed=args.seed)
    if args.episodes is not None:
        tr = dataclasses.replace(tr, episodes=args.episodes)
    spec = dataclasses.replace(spec, train=tr)

    def progress(row):
        if row.episode % 10 == 0:
            log.info("episode %d reward %.4f critic %.4g policy %.4g entropy %.3g", row.episode, row.mean_reward,
                     row.critic_loss, row.policy_loss, row.entropy)

    _, ckpt, curve = run_training(spec, _out_dir(args), on_episode=progress)
    print(ckpt)
    print(curve)
    return 0


def cmd_eval(args) -> int:
    spec = _spec(args)
    policies = tuple(args.policy) if args.policy else None
    rows = run_uara_eval(spec, args.checkpoint, policies)
    path = write_rows(rows, _out_dir(args) / "eval.csv")
    print(path)
    return 0


def cmd_sweep_w(args) -> int:
    import dataclasses

    spec = _spec(args)
    if args.w:
        spec = dataclasses.replace(spec, w_values=tuple(args.w))
        spec.validate()
    policies = tuple(args.policy) if args.policy else None
    rows = run_energy_sweep(spec, args.checkpoint, policies)
    path = write_rows(rows, _out_dir(args) / "sweep_w.csv")
    print(path)
    return 0


def cmd_report(args) -> int:
    rows = []
    for p in args.inputs:
        try:
            rows.extend(read_rows(p))
        except OSError as exc:
            raise ConfigError(f"cannot read {p}: {exc}") from exc
    text = report(rows)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        print(out)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specedge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="experiment YAML (default: the packaged desk.yaml)")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./results)")
        if seeds:
            p.add_argument("--seeds", type=_seed_list, help="seed list, e.g. 0-9 or 1,3,5")
            p.add_argument("--workers", type=int, help="parallel worker processes")

    p = sub.add_parser("decode-study", help="sweep gamma and uplink rate for both decoding engines")
    common(p)
    p.set_defaults(func=cmd_decode_study)

    p = sub.add_parser("train", help="train TMA-MASAC and write a checkpoint")
    common(p, seeds=False)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--episodes", type=int, help="number of training episodes")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "compare policies on the scenario"),
                                 ("sweep-w", cmd_sweep_w, "sweep the energy weight w")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", help="trained TMA-MASAC checkpoint")
        p.add_argument("--policy", action="append",
                       choices=("random", "max_sinr", "max_compute", "tma_masac"),
                       help="policy to run (repeatable; default: all for eval, tma_masac for sweep-w)")
        if name == "sweep-w":
            p.add_argument("--w", type=float, action="append", help="energy weight (repeatable)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="summarize metrics CSVs as markdown")
    p.add_argument("inputs", nargs="+", help="metrics CSV files")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, exc: BaseException, code: int, details=None) -> int:
    payload = {"error": kind, "message": str(exc)}
    if details:
        payload["details"] = details
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        return _fail("config", exc, 2)
    except InfeasibleAllocation as exc:
        return _fail("contract", exc, 3, [str(v) for v in exc.violations])
    except ContractError as exc:
        return _fail("contract", exc, 3)
    except TrainingDiverged as exc:
        return _fail("diverged", exc, 3, exc.diagnostics)
    except ValueError as exc:
        return _fail("config", exc, 2)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
