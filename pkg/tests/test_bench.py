import csv
import io
import json

import numpy as np
import pytest

from blindtd import bench
from blindtd.bench import (
    CSV_HEADER,
    ConfigError,
    load_scenario,
    load_settings,
    rmse_calibration,
    rmse_first_delay,
    run_monte_carlo,
    trial_streams,
    write_results,
)

from conftest import CONFIGS

SMOKE = CONFIGS / "smoke.ini"


class TestCalibrationMetric:
    def test_exact(self):
        g = np.array([1, 2j, -1, 0.5])
        assert rmse_calibration(g, g) == 0.0

    def test_scale_aligned(self):
        g = np.array([1, 2j, -1, 0.5])
        assert rmse_calibration(3 * np.exp(1j * np.pi / 7) * g, g) == pytest.approx(0, abs=1e-15)

    def test_unit_perturbation_closed_form(self):
        # g = 1, g_hat = g + e_1: beta = 5/7, residual (3, -2, -2, -2)/7
        g = np.ones(4)
        g_hat = g + np.eye(4)[0]
        assert rmse_calibration(g_hat, g) == pytest.approx(np.sqrt(21 / 196), rel=1e-14)

    def test_invalid(self):
        with pytest.raises(ValueError):
            rmse_calibration(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            rmse_calibration(np.zeros(4), np.ones(4))


class TestDelayMetric:
    def test_exact(self):
        assert rmse_first_delay([1.0, 3.0], [1.0, 3.0], 10.0) == 0.0

    def test_miss_costs_tau_max(self):
        assert rmse_first_delay([], [1.0], 10.0) == 10.0

    def test_adjacent_grid_point(self):
        step = 10.0 / 64
        assert rmse_first_delay([6 * step, 9 * step], [5 * step, 9 * step], 10.0) == pytest.approx(step)

    def test_uses_earliest(self):
        assert rmse_first_delay([3.0, 1.5], [1.0], 10.0) == pytest.approx(0.5)


class TestConfig:
    def test_defaults_file_overrides_precedence(self):
        s = load_settings(SMOKE, {"experiment.trials": "9"})
        assert s["experiment"]["trials"] == 9
        assert s["plan"]["subcarriers"] == 8
        assert s["solver"]["max_iters"] == 500

    @pytest.mark.parametrize("text,overrides", [
        ("[plan]\nsubcarrierz = 8\n", None),
        ("[planet]\nsubcarriers = 8\n", None),
        ("", {"solver.nope": "1"}),
        ("", {"solver": "1"}),
        ("[experiment]\ntrials = many\n", None),
        ("[experiment]\ntrials = 0\n", None),
        ("[experiment]\naxis = snr\nsnr_db = 0, 5\nsnapshots = 50, 100\n", None),
        ("[channel]\nplacement = fixed\ndelay_indices = 1\npaths = 3\n", None),
        ("[channel]\ngain_model = nakagami\n", None),
    ])
    def test_invalid(self, text, overrides):
        with pytest.raises(ConfigError):
            load_scenario(text=text, overrides=overrides)

    @pytest.mark.parametrize("name", ["snapshots.ini", "snr.ini", "smoke.ini", "full_scale.ini"])
    def test_shipped_configs_load(self, name):
        sc = load_scenario(CONFIGS / name)
        assert sc.trials >= 1

    def test_full_scale_dimensions(self):
        sc = load_scenario(CONFIGS / "full_scale.ini")
        assert (sc.plan.N, sc.plan.L, sc.channel.paths, sc.snapshots) == (64, 4, 8, (400,))
        assert sc.grid.M >= 512


class TestStreams:
    def test_independent_of_axis_and_reproducible(self):
        a = trial_streams(5, 3)["noise"].standard_normal(4)
        b = trial_streams(5, 3)["noise"].standard_normal(4)
        c = trial_streams(5, 4)["noise"].standard_normal(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestMonteCarlo:
    def test_noiseless_small_instance(self):
        sc = load_scenario(SMOKE, {
            "experiment.snr_db": "inf", "experiment.trials": "1", "experiment.snapshots": "200",
            "channel.paths": "1", "channel.placement": "fixed", "channel.delay_indices": "5",
            "calibration.db_low": "-0.1", "calibration.db_high": "0.1",
        })
        t = run_monte_carlo(sc)
        assert t.rmse("proposed", "calibration_rmse")[0] < 1e-3
        assert t.rmse("proposed", "delay_rmse")[0] == 0.0

    def test_deterministic(self, tmp_path):
        sc = load_scenario(SMOKE)
        a, b = run_monte_carlo(sc), run_monte_carlo(sc)
        assert a.to_csv() == b.to_csv()
        assert a.to_json(sc) == b.to_json(sc)

    def test_parallel_matches_serial(self):
        serial = run_monte_carlo(load_scenario(SMOKE))
        parallel = run_monte_carlo(load_scenario(SMOKE, {"experiment.workers": "2"}))
        assert serial.to_csv() == parallel.to_csv()

    def test_csv_and_json_layout(self, tmp_path):
        sc = load_scenario(SMOKE, {"baselines.alt_min": "true"})
        table = run_monte_carlo(sc)
        csv_path, json_path = write_results(table, sc, tmp_path)
        rows = list(csv.reader(io.StringIO(csv_path.read_text())))
        assert tuple(rows[0]) == CSV_HEADER
        assert len(rows) - 1 == len(sc.axis_values) * 4 * 2
        for r in rows[1:]:
            assert float(r[3]) >= 0
        doc = json.loads(json_path.read_text())
        assert doc["axis"] == "snapshots"
        assert doc["scenario"]["plan"]["subcarriers"] == 8
        assert np.array(doc["per_trial"]["proposed"]["delay_rmse"]).shape == (2, 2)

    def test_trend_in_snapshots(self):
        sc = load_scenario(CONFIGS / "snapshots.ini", {
            "experiment.snapshots": "50, 400", "experiment.trials": "10",
            "baselines.calibrated_oracle": "false", "baselines.uncalibrated": "false",
        })
        med = run_monte_carlo(sc).median("proposed", "calibration_rmse")
        assert med[1] <= med[0]

    def test_failures_are_counted_not_dropped(self, monkeypatch):
        real = bench.estimate
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                raise ValueError("injected failure")
            return real(*args, **kw)

        monkeypatch.setattr(bench, "estimate", flaky)
        sc = load_scenario(SMOKE, {"baselines.calibrated_oracle": "false", "baselines.uncalibrated": "false"})
        t = run_monte_carlo(sc)
        assert t.failures["proposed"] == [1, 0]
        assert t.counts("proposed", "delay_rmse").tolist() == [1, 2]
        assert "nan" in t.to_csv()  # ci of a single valid trial is undefined
