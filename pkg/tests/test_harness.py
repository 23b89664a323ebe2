import csv
import json
import math

import numpy as np
import pytest
import yaml

import vbllbo.harness as harness
from vbllbo.acquisition import hypervolume
from vbllbo.cli import main
from vbllbo.harness import (
    ExperimentConfig,
    MissingMaxHv,
    RunRecord,
    export_curves,
    load_config,
    load_records,
    run_experiment,
    run_seed,
    sweep,
)

def cfg_problem_ref(name):
    from vbllbo.benchmarks import make_problem

    return make_problem(name).ref_point


TINY = {"width": 8, "depth": 2, "patience": 5, "max_epochs": 40}
FAST_ACQ = {"restarts": 2, "raw_samples": 16, "pop_size": 8, "generations": 3}
TIMING = ("cumulative_fit_seconds", "cumulative_acq_seconds")


def _cfg(tmp_path, **kw):
    d = dict(problem="branin", horizon=2, seeds=[0], surrogate=dict(TINY), acq_options=dict(FAST_ACQ),
             out_dir=str(tmp_path))
    d.update(kw)
    return ExperimentConfig(**d)


def _strip_timing(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    drop = [rows[0].index(c) for c in TIMING]
    return [[v for i, v in enumerate(r) if i not in drop] for r in rows]


class TestConfig:
    def test_defaults_filled(self, tmp_path):
        cfg = _cfg(tmp_path)
        assert cfg.surrogate["lr"] == 1e-3 and cfg.surrogate["wishart_scale"] == 0.01
        assert cfg.acq_options["restarts"] == 2
        assert cfg.name == "branin_ts_always"

    def test_incompatible_acquisition(self, tmp_path):
        with pytest.raises(ValueError):
            _cfg(tmp_path, acquisition="mo-ts")
        with pytest.raises(ValueError):
            _cfg(tmp_path, problem="branin_currin", acquisition="ts")

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            _cfg(tmp_path, horizon=0)
        with pytest.raises(ValueError):
            _cfg(tmp_path, seeds=[])
        with pytest.raises(ValueError):
            _cfg(tmp_path, surrogate={"widht": 3})
        with pytest.raises(ValueError):
            _cfg(tmp_path, policy={"kind": "never"})

    def test_hash_ignores_seeds_and_output(self, tmp_path):
        a = _cfg(tmp_path)
        b = _cfg(tmp_path / "x", seeds=[4, 5])
        c = _cfg(tmp_path, surrogate={**TINY, "wishart_scale": 1.0})
        assert a.config_hash() == b.config_hash() != c.config_hash()

    def test_yaml_and_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"problem": "ackley2d", "horizon": 3, "seeds": [1, 2]}))
        cfg = load_config(path, seeds=[7], out_dir=None)
        assert cfg.seeds == [7] and cfg.problem == "ackley2d"

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VBLLBO_OUT", str(tmp_path / "env"))
        assert ExperimentConfig(problem="branin", horizon=1, seeds=[0]).out_dir == str(tmp_path / "env")


class TestRunRecord:
    def test_monotonicity_enforced(self):
        rec = RunRecord(seed=0, dim=1, num_objectives=1)
        rec.append(0, [0.1], [1.0], 1.0, 0, 0, True)
        with pytest.raises(AssertionError):
            rec.append(1, [0.1], [0.5], 0.5, 0, 0, False)
        with pytest.raises(AssertionError):
            rec.append(0, [0.1], [2.0], 2.0, 0, 0, False)

    def test_csv_round_trip(self, tmp_path):
        rec = RunRecord(seed=3, dim=2, num_objectives=2)
        rec.append(-1, [0.1, 0.2], [1.0, 2.0], 0.3, 0.0, 0.0, False)
        rec.append(0, [1 / 3, 0.2], [math.pi, 2.0], 0.7, 0.25, 0.5, True)
        rec.write_csv(tmp_path / "r.csv")
        back = RunRecord.read_csv(tmp_path / "r.csv")
        assert back.rows == rec.rows and back.seed == 3 and back.metric == "hv_so_far"


class TestRun:
    def test_single_step_row_count(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, horizon=1), 0)
        assert rec.status == "ok"
        assert len(rec.rows) == 2 + 1
        assert [r["t"] for r in rec.rows] == [-2, -1, 0]
        assert rec.rows[-1]["reinit_flag"] == 1

    def test_rows_consistent(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, horizon=3), 1)
        best = np.maximum.accumulate(rec.column("y0"))
        np.testing.assert_array_equal(rec.column("best_so_far"), best)
        assert np.all(np.diff(rec.column("cumulative_fit_seconds")) >= 0)
        X = np.column_stack([rec.column("x0"), rec.column("x1")])
        assert np.all(X >= [-5, 0]) and np.all(X <= [10, 15])

    def test_reproducible_records(self, tmp_path):
        cfg_a = _cfg(tmp_path / "a", horizon=3, seeds=[2])
        cfg_b = _cfg(tmp_path / "b", horizon=3, seeds=[2])
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        pa = cfg_a.run_dir() / "seed_2.csv"
        pb = cfg_b.run_dir() / "seed_2.csv"
        assert _strip_timing(pa) == _strip_timing(pb)

    def test_periodic_reinit_count(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, horizon=7, policy={"kind": "periodic", "period": 3}), 0)
        flags = rec.column("reinit_flag")[rec.column("t") >= 0]
        assert flags.sum() == math.ceil(7 / 3)
        assert list(np.flatnonzero(flags)) == [0, 3, 6]

    def test_event_policy_runs(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, horizon=3, policy={"kind": "event", "threshold": 0.0}), 0)
        assert rec.status == "ok" and rec.rows[2]["reinit_flag"] == 1

    def test_logei(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, horizon=2, acquisition="logei"), 0)
        assert rec.status == "ok" and len(rec.rows) == 4

    def test_multi_objective(self, tmp_path):
        rec = run_seed(_cfg(tmp_path, problem="branin_currin", acquisition="mo-ts", horizon=2), 0)
        assert rec.status == "ok"
        assert len(rec.rows) == 6 + 2
        hv = rec.column("hv_so_far")
        assert np.all(np.diff(hv) >= 0)
        Y = np.column_stack([rec.column("y0"), rec.column("y1")])
        ref = cfg_problem_ref("branin_currin")
        for i in range(len(hv)):
            assert hv[i] == pytest.approx(hypervolume(Y[: i + 1], ref), abs=1e-12)

    def test_failed_seed_does_not_stop_siblings(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = harness.bo_step

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("boom")
            return real(*args, **kw)

        monkeypatch.setattr(harness, "bo_step", flaky)
        records = run_experiment(_cfg(tmp_path, horizon=1, seeds=[0, 1]))
        assert records[0].status == "failed" and records[1].status == "ok"
        assert len(records[0].rows) == 2  # initial design kept
        status = json.loads((_cfg(tmp_path).run_dir() / "seed_0.json").read_text())
        assert "boom" in status["error"]

    def test_meta_sidecar(self, tmp_path):
        cfg = _cfg(tmp_path, horizon=1)
        run_experiment(cfg)
        meta = json.loads((cfg.run_dir() / "meta.json").read_text())
        assert meta["config"]["surrogate"]["lr"] == 1e-3
        assert meta["config_hash"] == cfg.config_hash()
        assert "git" in meta

    def test_resume_skips_finished(self, tmp_path):
        cfg = _cfg(tmp_path, horizon=1)
        run_experiment(cfg)
        path = cfg.run_dir() / "seed_0.csv"
        path.write_text(path.read_text() + "")
        stamp = path.stat().st_mtime_ns
        run_experiment(cfg, resume=True)
        assert path.stat().st_mtime_ns == stamp
        changed = _cfg(tmp_path, horizon=1, surrogate={**TINY, "patience": 6})
        run_experiment(changed, resume=True)
        assert path.stat().st_mtime_ns != stamp

    def test_parallel_jobs_match_serial(self, tmp_path):
        a = _cfg(tmp_path / "s", horizon=1, seeds=[0, 1])
        b = _cfg(tmp_path / "p", horizon=1, seeds=[0, 1])
        run_experiment(a)
        run_experiment(b, jobs=2)
        for s in (0, 1):
            assert _strip_timing(a.run_dir() / f"seed_{s}.csv") == _strip_timing(b.run_dir() / f"seed_{s}.csv")


class TestSweep:
    def test_wishart_grid(self, tmp_path):
        cfg = _cfg(tmp_path, horizon=1, seeds=[0, 1, 2], name="sw")
        results = sweep(cfg, "wishart_scale", [1e-5, 0.01, 1.0])
        assert sum(len(r) for r in results.values()) == 9
        files = sorted((tmp_path / "sw").glob("*/seed_*.csv"))
        assert len(files) == 9
        assert {f.parent.name for f in files} == {"wishart_scale=1e-05", "wishart_scale=0.01", "wishart_scale=1.0"}

    def test_width_sweep(self, tmp_path):
        cfg = _cfg(tmp_path, horizon=1, name="w", surrogate={**TINY, "max_epochs": 5})
        results = sweep(cfg, "width", [64, 128, 512])
        assert all(r[0].status == "ok" for r in results.values())

    def test_unknown_axis(self, tmp_path):
        with pytest.raises(ValueError):
            sweep(_cfg(tmp_path), "colour", [1])


def _synthetic(values, metric="best_so_far"):
    recs = []
    for s, series in enumerate(values):
        K = 1 if metric == "best_so_far" else 2
        rec = RunRecord(seed=s, dim=1, num_objectives=K)
        for t, v in enumerate(series):
            rec.append(t, [0.0], [0.0] * K, v, 0.0, 0.0, False)
        recs.append(rec)
    return recs


class TestExport:
    def test_single_seed(self):
        out = export_curves(_synthetic([[1.0, 2.0, 2.5]]))
        np.testing.assert_array_equal(out["mean"], [1.0, 2.0, 2.5])
        np.testing.assert_array_equal(out["p10"], out["p90"])
        np.testing.assert_array_equal(out["p10"], out["mean"])

    def test_percentiles_vs_sort_oracle(self):
        rng = np.random.default_rng(0)
        series = np.sort(rng.normal(size=(5, 6)), axis=1)
        out = export_curves(_synthetic(series.tolist()))
        for t in range(6):
            s = np.sort(series[:, t])
            # linear interpolation between order statistics at position q (n - 1)
            for q, key in [(0.1, "p10"), (0.9, "p90")]:
                pos = q * (len(s) - 1)
                lo = int(math.floor(pos))
                oracle = s[lo] + (pos - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])
                assert out[key][t] == pytest.approx(oracle, rel=1e-12, abs=1e-15)
            assert out["mean"][t] == pytest.approx(s.mean())

    def test_logdiff_clamp(self):
        out = export_curves(_synthetic([[1.0, 2.0]], "hv_so_far"), "logdiff_hv", max_hv=2.0)
        assert out["mean"][0] == pytest.approx(0.0)
        assert out["mean"][1] == pytest.approx(math.log(1e-12))

    def test_missing_max_hv(self):
        with pytest.raises(MissingMaxHv):
            export_curves(_synthetic([[1.0]], "hv_so_far"), "logdiff_hv")

    def test_writes_csv(self, tmp_path):
        export_curves(_synthetic([[1.0, 2.0], [3.0, 4.0]]), path=tmp_path / "c.csv")
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["t", "mean", "p10", "p90", "n_seeds"]
        assert rows[1][1] == "2.0" and rows[2][4] == "2"


class TestCli:
    def _write(self, tmp_path, **kw):
        d = dict(problem="branin", horizon=1, seeds=[0], surrogate=dict(TINY), acq_options=dict(FAST_ACQ), name="c")
        d.update(kw)
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(d))
        return path

    def test_list_problems(self, capsys):
        assert main(["list-problems"]) == 0
        assert "branin_currin" in capsys.readouterr().out.split()

    def test_run_and_export(self, tmp_path, capsys):
        path = self._write(tmp_path)
        assert main(["run", str(path), "--out", str(tmp_path / "o"), "--seed", "3", "4"]) == 0
        run_dir = tmp_path / "o" / "c"
        assert sorted(load_records(run_dir)) == [3, 4]
        assert main(["export", str(run_dir), "--metric", "best"]) == 0
        assert (run_dir / "curves_best.csv").exists()

    def test_export_logdiff_uses_recorded_max(self, tmp_path):
        path = self._write(tmp_path, problem="branin_currin", acquisition="mo-ts")
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 0
        run_dir = tmp_path / "o" / "c"
        assert main(["export", str(run_dir), "--metric", "logdiff_hv"]) == 0
        rows = list(csv.reader(open(run_dir / "curves_logdiff_hv.csv")))
        assert len(rows) == 1 + 7

    def test_sweep_verb(self, tmp_path):
        path = self._write(tmp_path)
        code = main(["sweep", str(path), "--axis", "wishart_scale", "--values", "0.01", "1",
                     "--out", str(tmp_path / "o")])
        assert code == 0
        assert len(list((tmp_path / "o" / "c").glob("*/seed_0.csv"))) == 2

    def test_failed_seed_exit_code(self, tmp_path, monkeypatch):
        def broken(*args, **kw):
            raise RuntimeError("boom")

        monkeypatch.setattr(harness, "bo_step", broken)
        path = self._write(tmp_path)
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
