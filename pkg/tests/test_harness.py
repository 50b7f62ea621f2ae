import numpy as np
import pytest

from gtesim import debiased, harness
from gtesim.harness import (
    ConfigFileError,
    StudyConfig,
    StudyError,
    parse_config_file,
    run_checks,
    run_study,
    study_config_from_dict,
)
from gtesim.nnet import TrainConfig
from gtesim.simulator import DgpConfig


def small_study_config(**kw):
    defaults = dict(
        dgp=DgpConfig(set_size=3, n_queries=300, n_items=100),
        replications=2,
        estimators=("ht-dim", "ha-dim", "ipw"),
        oracle_n=5000,
        train=TrainConfig(epochs=5),
    )
    defaults.update(kw)
    return StudyConfig(**defaults)


class TestRunStudy:
    def test_csv_columns_and_rows(self):
        report = run_study(small_study_config())
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == (
            "estimator,k,bias_mean,bias_se,mc_sd,est_se_mean,coverage"
        )
        assert len(lines) == 1 + 3
        names = [ln.split(",")[0] for ln in lines[1:]]
        assert names == ["ht-dim", "ha-dim", "ipw"]

    def test_deterministic(self):
        a = run_study(small_study_config())
        b = run_study(small_study_config())
        assert a.to_csv() == b.to_csv()

    def test_base_seed_changes_results(self):
        a = run_study(small_study_config(base_seed=0))
        b = run_study(small_study_config(base_seed=1))
        rows_a = {r["estimator"]: r["bias_mean"] for r in a.rows}
        rows_b = {r["estimator"]: r["bias_mean"] for r in b.rows}
        assert rows_a["ht-dim"] != rows_b["ht-dim"]

    def test_bias_roughly_matches_known_gap(self):
        # HT-DIM should be biased toward the full-exposure-shift value
        report = run_study(small_study_config(replications=5))
        row = {r["estimator"]: r for r in report.rows}["ht-dim"]
        assert row["bias_mean"] > 1.0

    def test_coverage_in_unit_interval(self):
        report = run_study(small_study_config(replications=3))
        for row in report.rows:
            assert 0.0 <= row["coverage"] <= 1.0

    def test_ipw_skipped_above_limit(self, monkeypatch):
        monkeypatch.setattr(harness, "IPW_MAX_K", 2)
        report = run_study(small_study_config())
        names = {r["estimator"] for r in report.rows}
        assert "ipw" not in names
        assert {"ht-dim", "ha-dim"} <= names

    def test_force_ipw_overrides_limit(self, monkeypatch):
        monkeypatch.setattr(harness, "IPW_MAX_K", 2)
        report = run_study(small_study_config(force_ipw=True))
        assert "ipw" in {r["estimator"] for r in report.rows}

    def test_failure_threshold(self, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("injected")

        monkeypatch.setattr(harness.baselines, "ht_dim", broken)
        with pytest.raises(StudyError):
            run_study(small_study_config(replications=5))

    def test_sparse_failures_recorded(self, monkeypatch):
        original = harness._run_replication
        calls = {"n": 0}

        def flaky(config, rep):
            calls["n"] += 1
            if rep == 0:
                raise RuntimeError("injected once")
            return original(config, rep)

        monkeypatch.setattr(harness, "_run_replication", flaky)
        report = run_study(small_study_config(replications=12))
        assert len(report.failures) == 1
        assert report.failures[0][0] == 0
        assert "injected once" in report.failures[0][2]

    def test_validation(self):
        with pytest.raises(ValueError):
            small_study_config(replications=0)
        with pytest.raises(ValueError):
            small_study_config(estimators=("nope",))
        with pytest.raises(ValueError):
            small_study_config(estimators=())

    def test_json_payload(self):
        import json

        report = run_study(small_study_config())
        payload = json.loads(report.to_json())
        assert payload["k"] == 3
        assert payload["replications"] == 2
        assert len(payload["rows"]) == 3


class TestRunChecks:
    def test_all_pass(self):
        ok, results = run_checks(seed=0)
        assert ok
        assert len(results) == len(harness.CHECKS)
        for name, passed, detail, check_seed in results:
            assert passed, f"{name}: {detail}"

    def test_seed_recorded_and_reproducible(self):
        _, a = run_checks(seed=3)
        _, b = run_checks(seed=3)
        assert a == b
        _, c = run_checks(seed=4)
        assert [r[3] for r in a] != [r[3] for r in c]

    def test_detects_injected_fault(self, monkeypatch):
        # corrupt one published derivative and expect exactly its check to trip
        monkeypatch.setattr(
            debiased, "grad_mu", lambda b: np.zeros(3 * b.k - 1)
        )
        ok, results = run_checks(seed=0)
        assert not ok
        failed = {name for name, passed, _, _ in results if not passed}
        assert "grad_mu finite differences" in failed
        assert "exposure_probs normalization" not in failed

    def test_exception_reported_not_raised(self, monkeypatch):
        def boom(rng):
            raise ZeroDivisionError("injected")

        monkeypatch.setattr(harness, "CHECKS", [("boom", boom)])
        ok, results = run_checks(seed=0)
        assert not ok
        assert "ZeroDivisionError" in results[0][2]


class TestConfigFiles:
    def test_parse_basic(self, tmp_path):
        path = tmp_path / "study.cfg"
        path.write_text(
            "# comment line\n"
            "dgp.set_size = 8   # trailing comment\n"
            "\n"
            "study.replications=25\n"
            "train.epochs = 40\n"
        )
        flat = parse_config_file(path)
        assert flat == {
            "dgp.set_size": "8",
            "study.replications": "25",
            "train.epochs": "40",
        }

    def test_parse_rejects_bare_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("this is not a setting\n")
        with pytest.raises(ConfigFileError):
            parse_config_file(path)

    def test_build_config(self):
        cfg = study_config_from_dict(
            {
                "dgp.set_size": "8",
                "dgp.treat_prob": "0.4",
                "net.hidden": "32,16",
                "train.epochs": "10",
                "hessian.mode": "monte-carlo",
                "study.replications": "7",
                "study.estimators": "db, ht-dim",
                "study.force_ipw": "true",
            }
        )
        assert cfg.dgp.set_size == 8
        assert cfg.dgp.treat_prob == 0.4
        assert cfg.net.hidden == (32, 16)
        assert cfg.train.epochs == 10
        assert cfg.hessian.mode == "monte-carlo"
        assert cfg.replications == 7
        assert cfg.estimators == ("db", "ht-dim")
        assert cfg.force_ipw is True

    def test_defaults_preserved(self):
        cfg = study_config_from_dict({"dgp.set_size": "5"})
        ref = StudyConfig()
        assert cfg.replications == ref.replications
        assert cfg.train.epochs == ref.train.epochs
        assert cfg.dgp.n_queries == ref.dgp.n_queries

    @pytest.mark.parametrize(
        "flat",
        [
            {"dgp.nope": "1"},
            {"net.nope": "1"},
            {"train.nope": "1"},
            {"study.nope": "1"},
            {"mystery.key": "1"},
            {"noname": "1"},
            {"study.force_ipw": "maybe"},
        ],
    )
    def test_bad_keys(self, flat):
        with pytest.raises(ConfigFileError):
            study_config_from_dict(flat)

    def test_bad_value_type(self):
        with pytest.raises(ValueError):
            study_config_from_dict({"dgp.set_size": "three"})
