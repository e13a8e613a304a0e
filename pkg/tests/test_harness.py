from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from specedge.harness import cli
from specedge.harness.experiments import (
    ConfigError,
    DecodeStudyConfig,
    DecodeProfile,
    ExperimentSpec,
    improvement,
    load_spec,
    make_runner,
    per_seed,
    report,
    rollout,
    run_decoding_study,
    run_energy_sweep,
    run_training,
    run_uara_eval,
    summarize,
)
from specedge.harness.metrics import FIELDS, MetricsRow, mean_ci, read_rows, rows_to_csv, write_rows

HEADER = ("run_id,experiment,seed,policy,slot,w,num_devices,num_servers,engine,profile,gamma,rate_bps,latency_s,"
          "objective,energy_j,energy_high_j,energy_low_j,tokens_per_s,idle_fraction,mobile_s,uplink_s,server_s,"
          "schema_version")

TINY = """
scenario:
  num_devices: 4
  num_servers: 2
  system:
    horizon: 4
    time_unit_s: 1.0e-3
    cp_flops_unit: 1.0e21
    cm_bandwidth_unit: 1.0e4
seeds: [0, 1]
w_values: [20.0, 100.0]
train:
  episodes: 2
  w_choices: [20.0, 100.0]
  sac: {architecture: device_set, hidden: [8], warmup_steps: 4, batch_size: 4}
decode_study:
  gammas: [1, 4]
  rates_bps: [1.0e6, 1.0e8]
  seeds: [0, 1]
  profiles: [{name: chat, smoothing: 0.3, max_tokens: 12}]
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    path = d / "tiny.yaml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def checkpoint(tiny, tmp_path_factory):
    _, ckpt, _ = run_training(load_spec(tiny), tmp_path_factory.mktemp("train"))
    return ckpt


def row(**kw):
    base = dict(run_id="r", experiment="eval", seed=0)
    base.update(kw)
    return MetricsRow(**base)


class TestMetrics:
    def test_golden_header(self):
        assert ",".join(FIELDS) == HEADER
        assert rows_to_csv([]).splitlines() == [HEADER]

    def test_roundtrip(self, tmp_path):
        rows = [row(policy="random", slot=3, w=20.0, latency_s=0.1 + 0.2, energy_j=1e-7),
                row(experiment="decode", engine="parallel", profile="chat", gamma=4, rate_bps=1e6)]
        path = write_rows(rows, tmp_path / "sub" / "m.csv")
        assert read_rows(path) == rows

    def test_bad_csv(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_rows(p)
        p.write_text(rows_to_csv([row()]).replace(",1\n", ",2\n"))
        with pytest.raises(ValueError):
            read_rows(p)

    def test_mean_ci_oracle(self):
        m, h = mean_ci([1.0, 2.0, 3.0])
        assert m == 2.0
        assert h == pytest.approx(stats.t.ppf(0.975, 2) / np.sqrt(3))
        assert h == pytest.approx(2.4841377, rel=1e-6)
        assert mean_ci([5.0]) == (5.0, 0.0)
        with pytest.raises(ValueError):
            mean_ci([])


class TestSpec:
    def test_packaged_configs_load(self):
        spec = load_spec(cli.DEFAULT_CONFIG)
        assert (spec.scenario.num_devices, spec.scenario.num_servers, spec.scenario.system.horizon) == (12, 3, 50)
        assert spec.seeds == tuple(range(10))
        big = load_spec(cli.DEFAULT_CONFIG.parent / "table1.yaml")
        assert big.scenario.num_devices >= spec.scenario.num_devices

    @pytest.mark.parametrize("text", [
        "seeds: [0]\npolicies: [random, greedy]\n",
        "unknown_key: 1\n",
        "train: {sac: {alpha: -1}}\n",
        "decode_study: {gammas: []}\n",
        "- just\n- a list\n",
        "a: [unclosed\n",
    ])
    def test_bad_specs(self, tmp_path, text):
        p = tmp_path / "bad.yaml"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_spec(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_spec(tmp_path / "nope.yaml")


class TestRuns:
    def test_rollout_length_and_feasible_slots(self, tiny):
        spec = load_spec(tiny)
        runner = make_runner("max_sinr", spec.scenario, None)
        slots = list(rollout(spec.scenario, runner, 0))
        assert [s.t for s, _, _ in slots] == [0, 1, 2, 3]

    def test_tma_masac_needs_checkpoint(self, tiny, tmp_path):
        spec = load_spec(tiny)
        with pytest.raises(ConfigError):
            make_runner("tma_masac", spec.scenario, None)
        with pytest.raises(ConfigError):
            make_runner("tma_masac", spec.scenario, tmp_path / "missing.npz")

    def test_checkpoint_shape_mismatch(self, tiny, checkpoint):
        spec = load_spec(tiny)
        with pytest.raises(ConfigError):
            make_runner("tma_masac", spec.scenario.with_overrides(num_devices=5), checkpoint)

    def test_eval_rows(self, tiny, checkpoint):
        rows = run_uara_eval(load_spec(tiny), checkpoint)
        assert {r.policy for r in rows} == {"random", "max_sinr", "max_compute", "tma_masac"}
        assert len(rows) == 4 * 2 * 4
        for r in rows:
            assert r.latency_s > 0 and r.energy_j >= r.energy_high_j + r.energy_low_j - 1e-15

    def test_eval_csv_byte_identical(self, tiny, checkpoint, tmp_path):
        spec = load_spec(tiny)
        a = rows_to_csv(run_uara_eval(spec, checkpoint))
        b = rows_to_csv(run_uara_eval(dataclasses.replace(spec, workers=2), checkpoint))
        assert a == b

    def test_sweep_rows(self, tiny, checkpoint):
        rows = run_energy_sweep(load_spec(tiny), checkpoint)
        assert {r.w for r in rows} == {20.0, 100.0} and {r.policy for r in rows} == {"tma_masac"}

    def test_decode_study(self, tiny):
        study = load_spec(tiny).decode_study
        rows = run_decoding_study(study)
        assert len(rows) == 2 * 1 * 2 * 2 * 2
        assert rows_to_csv(rows) == rows_to_csv(run_decoding_study(study))
        for r in rows:
            assert 0 <= r.idle_fraction <= 1 and r.latency_s > 0

    def test_decode_study_validation(self):
        with pytest.raises(ConfigError):
            DecodeStudyConfig(engines=("turbo",)).validate()
        with pytest.raises(ConfigError):
            DecodeStudyConfig(profiles=(DecodeProfile("x", 2.0, 5),)).validate()
        with pytest.raises(ConfigError):
            DecodeStudyConfig(mode="fuzzy").validate()

    def test_training_outputs(self, tiny, tmp_path):
        res, ckpt, curve = run_training(load_spec(tiny), tmp_path)
        assert ckpt.exists() and curve.read_text().count("\n") == 3
        _, _, curve2 = run_training(load_spec(tiny), tmp_path / "again")
        assert curve.read_bytes() == curve2.read_bytes()


class TestReport:
    def rows(self):
        out = []
        for policy, lat in (("random", [1.0, 1.2]), ("max_sinr", [0.8, 1.0]), ("tma_masac", [0.6, 0.7])):
            for seed, v in enumerate(lat):
                for slot in range(2):
                    out.append(row(policy=policy, seed=seed, slot=slot, w=20.0, latency_s=v, objective=2 * v,
                                   energy_j=1.0, energy_high_j=0.25, energy_low_j=0.5))
        return out

    def test_per_seed_reductions(self):
        rows = self.rows()
        assert per_seed(rows, "latency_s")[("eval", "max_sinr", 20.0)] == {0: 0.8, 1: 1.0}
        assert per_seed(rows, "energy_j")[("eval", "max_sinr", 20.0)] == {0: 2.0, 1: 2.0}

    def test_summary_and_improvement(self):
        s = {x.policy: x for x in summarize(self.rows())}
        assert s["tma_masac"].latency_mean == pytest.approx(0.65)
        assert s["max_sinr"].latency_ci == pytest.approx(stats.t.ppf(0.975, 1) * np.std([0.8, 1.0], ddof=1) / np.sqrt(2))
        assert improvement(0.9, 0.65) == pytest.approx(0.25 / 0.9)
        text = report(self.rows())
        assert f"{100 * 0.25 / 0.9:.1f}%" in text
        assert "| eval | 20 | tma_masac | 2 | 0.6500" in text

    def test_report_decode_section(self):
        rows = [row(experiment="decode", engine="parallel", profile="chat", gamma=2, rate_bps=1e7,
                    latency_s=v, idle_fraction=0.1) for v in (1.0, 2.0)]
        assert "| parallel | chat | 2 | 10 | 2 | 1.5000 | 0.100 |" in report(rows)

    def test_empty(self):
        with pytest.raises(ValueError):
            report([])


class TestCli:
    def test_decode_study_and_report(self, tiny, tmp_path, capsys):
        assert cli.main(["decode-study", "--config", str(tiny), "--out", str(tmp_path), "--seeds", "0"]) == 0
        out = tmp_path / "decode_study.csv"
        assert out.read_text().splitlines()[0] == HEADER
        assert cli.main(["report", str(out), "--out", str(tmp_path / "r.md")]) == 0
        assert "Decoding study" in (tmp_path / "r.md").read_text()

    def test_env_var_sets_output_dir(self, tiny, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["eval", "--config", str(tiny), "--policy", "random", "--seeds", "0"]) == 0
        assert (tmp_path / "env" / "eval.csv").exists()
        # an explicit --out wins over the environment
        assert cli.main(["eval", "--config", str(tiny), "--policy", "random", "--seeds", "0",
                         "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "eval.csv").exists()

    def test_train_eval_sweep(self, tiny, tmp_path):
        assert cli.main(["train", "--config", str(tiny), "--out", str(tmp_path), "--episodes", "1"]) == 0
        ck = str(tmp_path / "masac.npz")
        assert cli.main(["eval", "--config", str(tiny), "--out", str(tmp_path), "--checkpoint", ck]) == 0
        assert cli.main(["sweep-w", "--config", str(tiny), "--out", str(tmp_path), "--checkpoint", ck,
                         "--w", "5", "--w", "50"]) == 0
        assert {r.w for r in read_rows(tmp_path / "sweep_w.csv")} == {5.0, 50.0}

    def test_config_errors_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("policies: [nope]\n")
        assert cli.main(["eval", "--config", str(bad)]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"
        assert cli.main(["eval", "--config", str(bad.parent / "missing.yaml")]) == 2
        assert cli.main(["report", str(tmp_path / "missing.csv")]) == 2

    def test_missing_checkpoint_exit_2(self, tiny, tmp_path):
        assert cli.main(["sweep-w", "--config", str(tiny), "--out", str(tmp_path)]) == 2

    def test_divergence_exit_3(self, tiny, tmp_path, capsys):
        text = TINY.replace("batch_size: 4}", "batch_size: 4, divergence_threshold: 1.0e-12}")
        p = tmp_path / "div.yaml"
        p.write_text(text)
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 3
        assert json.loads(capsys.readouterr().err)["error"] == "diverged"

    def test_argparse_errors(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["frobnicate"])
        assert e.value.code == 2
        with pytest.raises(SystemExit):
            cli.main(["eval", "--seeds", "a-b"])

    def test_seed_lists(self):
        assert cli._seed_list("0-3,8") == (0, 1, 2, 3, 8)
        assert cli._seed_list("5") == (5,)
