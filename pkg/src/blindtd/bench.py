"""Monte-Carlo benchmark harness: scenarios, metrics and result files."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from .covariance import LiftedOperator, sample_covariance, vectorize_and_denoise
from .model import (
    BandPlan,
    CalibrationBasis,
    DelayGrid,
    GainModel,
    GainResponse,
    MultipathChannel,
    build_chebyshev_basis,
    build_dictionary,
    synth_gain_response,
)
from .simulate import draw_path_gains, make_pilots, simulate_snapshots
from .solver import SolverConfig, alt_min_solve, estimate, support_to_delays

logger = logging.getLogger(__name__)

METHODS = ("proposed", "calibrated_oracle", "uncalibrated", "alt_min")
METRICS = ("calibration_rmse", "delay_rmse")
CSV_HEADER = ("axis", "method", "metric", "value", "ci_halfwidth", "trials")


class ConfigError(ValueError):
    """Invalid or unknown scenario setting."""


# --------------------------------------------------------------------------
# configuration


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return t

    return parse


# section -> key -> (parser, default as text)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "plan": {
        "subcarriers": (int, "16"),
        "bandwidth_hz": (float, "20e6"),
        "band_centers_hz": (_floats, "10e6, 70e6"),
    },
    "grid": {
        "size": (int, "64"),
        "tau_max": (_opt_float, "auto"),
    },
    "channel": {
        "paths": (int, "3"),
        "placement": (_choice("random", "fixed"), "random"),
        "delay_indices": (_ints, ""),
        "max_delay_fraction": (float, "0.5"),
        "min_separation": (int, "1"),
        "power_decay_db": (float, "3.0"),
        "gain_model": (_choice("gaussian", "rician"), "gaussian"),
        "k_factor": (float, "0.0"),
    },
    "calibration": {
        "basis_order": (int, "3"),
        "truth_order": (int, "3"),
        "db_low": (float, "-3.0"),
        "db_high": (float, "3.0"),
        "fixed_gain": (_bool, "true"),
        "gain_seed": (int, "7"),
    },
    "experiment": {
        "axis": (_choice("snapshots", "snr"), "snapshots"),
        "snapshots": (_ints, "50, 100, 200, 400"),
        "snr_db": (_floats, "5"),
        "trials": (int, "50"),
        "seed": (int, "1"),
        "workers": (int, "1"),
    },
    "solver": {
        "lambda": (_opt_float, "auto"),
        "lambda_scale": (float, "1.0"),
        "lambda_floor": (float, "0.0"),
        "max_iters": (int, "500"),
        "grad_tol": (float, "1e-6"),
        "step_init": (_opt_float, "auto"),
        "bb_memory": (int, "5"),
        "support_threshold": (float, "0.05"),
    },
    "baselines": {
        "calibrated_oracle": (_bool, "true"),
        "uncalibrated": (_bool, "true"),
        "alt_min": (_bool, "false"),
        "alt_min_iters": (int, "8"),
        "alt_min_lambda_scale": (float, "1.0"),
    },
}


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"override key must be section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    return section.strip().lower(), key.strip().lower()


def load_settings(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    text: str | None = None,
) -> dict[str, dict[str, Any]]:
    """Read an INI scenario file, apply ``section.key`` overrides, validate.

    Precedence: built-in defaults < file values < overrides. Unknown
    sections or keys raise :class:`ConfigError`.
    """
    raw: dict[str, dict[str, str]] = {
        s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()
    }
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        if text is not None:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in parser.sections():
        for key, value in parser.items(section):
            _put(raw, section.lower(), key.lower(), value)
    for dotted, value in (overrides or {}).items():
        section, key = _split_key(dotted)
        _put(raw, section, key, value)

    settings: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        settings[section] = {}
        for key, (conv, _) in keys.items():
            try:
                settings[section][key] = conv(raw[section][key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
    return settings


def _put(raw: dict[str, dict[str, str]], section: str, key: str, value: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    raw[section][key] = str(value)


@dataclass(frozen=True)
class ChannelSpec:
    """Rule for drawing the multipath channel of each trial."""

    paths: int
    placement: str = "random"
    delay_indices: tuple[int, ...] = ()
    max_delay_fraction: float = 0.5
    min_separation: int = 1
    power_decay_db: float = 3.0
    gain_model: GainModel = GainModel.ZERO_MEAN_GAUSSIAN
    k_factor: float = 0.0

    def powers(self) -> NDArray[np.float64]:
        return 10.0 ** (-self.power_decay_db * np.arange(self.paths) / 10.0)

    def draw(self, grid: DelayGrid, rng: np.random.Generator) -> MultipathChannel:
        if self.placement == "fixed":
            idx = np.asarray(self.delay_indices, dtype=int)
        else:
            idx = _draw_indices(
                self.paths, int(self.max_delay_fraction * grid.M), self.min_separation, rng
            )
        return MultipathChannel(
            grid.points[idx], self.powers(), self.gain_model, self.k_factor
        )


def _draw_indices(
    k: int, limit: int, min_sep: int, rng: np.random.Generator
) -> NDArray[np.int64]:
    """``k`` sorted grid indices in ``[0, limit)`` at least ``min_sep`` apart.

    Uses the gap-compression trick, so every admissible configuration is
    equally likely.
    """
    slack = limit - (k - 1) * (min_sep - 1)
    if slack < k:
        raise ConfigError("cannot place paths: grid range too small for min_separation")
    base = np.sort(rng.choice(slack, size=k, replace=False))
    return base + np.arange(k) * (min_sep - 1)


@dataclass(frozen=True)
class Baselines:
    calibrated_oracle: bool = True
    uncalibrated: bool = True
    alt_min: bool = False
    alt_min_iters: int = 8
    alt_min_lambda_scale: float = 1.0


@dataclass(frozen=True)
class Scenario:
    """A complete Monte-Carlo experiment.

    ``settings`` holds the validated flat configuration the scenario was
    built from and is echoed into result files.
    """

    plan: BandPlan
    grid: DelayGrid
    channel: ChannelSpec
    R: int
    truth_order: int
    db_range: tuple[float, float]
    fixed_gain: bool
    gain_seed: int
    axis: str
    snr_db: tuple[float, ...]
    snapshots: tuple[int, ...]
    trials: int
    seed: int
    solver: SolverConfig
    baselines: Baselines
    workers: int = 1
    settings: dict[str, dict[str, Any]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.snr_db or not self.snapshots:
            raise ConfigError("snr_db and snapshots lists must be nonempty")
        if any(p < 1 for p in self.snapshots):
            raise ConfigError("snapshot counts must be >= 1")
        other = self.snr_db if self.axis == "snapshots" else self.snapshots
        if len(other) != 1:
            raise ConfigError(
                f"axis is {self.axis}; the other list must hold exactly one value"
            )
        if not 1 <= self.R <= self.plan.nl or not 1 <= self.truth_order <= self.plan.nl:
            raise ConfigError("basis orders must lie in [1, NL]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def axis_values(self) -> tuple[float, ...]:
        return self.snapshots if self.axis == "snapshots" else self.snr_db

    def methods(self) -> tuple[str, ...]:
        b = self.baselines
        flags = {"proposed": True, "calibrated_oracle": b.calibrated_oracle,
                 "uncalibrated": b.uncalibrated, "alt_min": b.alt_min}
        return tuple(m for m in METHODS if flags[m])

    @classmethod
    def from_settings(cls, settings: dict[str, dict[str, Any]]) -> "Scenario":
        s = settings
        try:
            plan = BandPlan.from_centers_hz(
                s["plan"]["subcarriers"], s["plan"]["bandwidth_hz"], s["plan"]["band_centers_hz"]
            )
            tau_max = s["grid"]["tau_max"] or plan.unambiguous_delay
            grid = DelayGrid(s["grid"]["size"], tau_max)
            ch = s["channel"]
            channel = ChannelSpec(
                paths=ch["paths"],
                placement=ch["placement"],
                delay_indices=tuple(ch["delay_indices"]),
                max_delay_fraction=ch["max_delay_fraction"],
                min_separation=ch["min_separation"],
                power_decay_db=ch["power_decay_db"],
                gain_model=GainModel(ch["gain_model"]),
                k_factor=ch["k_factor"],
            )
            if channel.placement == "fixed":
                if len(channel.delay_indices) != channel.paths:
                    raise ConfigError("channel.delay_indices must list one index per path")
                if any(not 0 <= i < grid.M for i in channel.delay_indices):
                    raise ConfigError("channel.delay_indices out of grid range")
            sol = s["solver"]
            solver = SolverConfig(
                lam=sol["lambda"],
                lambda_scale=sol["lambda_scale"],
                lambda_floor=sol["lambda_floor"],
                max_iters=sol["max_iters"],
                grad_tol=sol["grad_tol"],
                step_init=sol["step_init"],
                bb_memory=sol["bb_memory"],
                support_threshold=sol["support_threshold"],
            )
            cal, ex = s["calibration"], s["experiment"]
            return cls(
                plan=plan,
                grid=grid,
                channel=channel,
                R=cal["basis_order"],
                truth_order=cal["truth_order"],
                db_range=(cal["db_low"], cal["db_high"]),
                fixed_gain=cal["fixed_gain"],
                gain_seed=cal["gain_seed"],
                axis=ex["axis"],
                snr_db=tuple(ex["snr_db"]),
                snapshots=tuple(ex["snapshots"]),
                trials=ex["trials"],
                seed=ex["seed"],
                solver=solver,
                baselines=Baselines(**s["baselines"]),
                workers=ex["workers"],
                settings=s,
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_scenario(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    text: str | None = None,
) -> Scenario:
    return Scenario.from_settings(load_settings(path, overrides, text))


# --------------------------------------------------------------------------
# metrics


def rmse_calibration(g_hat: NDArray, g_true: NDArray) -> float:
    """Per-entry RMSE after removing the complex scale ambiguity."""
    g_hat = np.asarray(g_hat, dtype=complex).reshape(-1)
    g_true = np.asarray(g_true, dtype=complex).reshape(-1)
    if g_hat.shape != g_true.shape:
        raise ValueError("g_hat and g_true must have equal length")
    energy = np.vdot(g_hat, g_hat).real
    if not energy > 0:
        raise ValueError("g_hat must be nonzero")
    beta = np.vdot(g_hat, g_true) / energy
    return float(np.sqrt(np.mean(np.abs(beta * g_hat - g_true) ** 2)))


def rmse_first_delay(tau_hat: NDArray, tau_true: NDArray, tau_max: float) -> float:
    """Absolute error of the earliest delay; a miss costs ``tau_max``."""
    tau_true = np.atleast_1d(np.asarray(tau_true, dtype=float))
    if tau_true.size == 0:
        raise ValueError("tau_true must be nonempty")
    tau_hat = np.atleast_1d(np.asarray(tau_hat, dtype=float))
    if tau_hat.size == 0:
        return float(tau_max)
    return float(abs(tau_hat.min() - tau_true.min()))


# --------------------------------------------------------------------------
# results


@dataclass
class RmseTable:
    """Per-trial errors and their aggregates for every method and metric.

    ``errors[method][metric]`` has shape ``(len(axis_values), trials)``;
    failed trials hold NaN and are counted in ``failures``.
    """

    axis: str
    axis_values: tuple[float, ...]
    methods: tuple[str, ...]
    errors: dict[str, dict[str, NDArray[np.float64]]]
    failures: dict[str, list[int]]

    def _valid(self, method: str, metric: str, i: int) -> NDArray[np.float64]:
        e = self.errors[method][metric][i]
        return e[np.isfinite(e)]

    def rmse(self, method: str, metric: str) -> NDArray[np.float64]:
        out = []
        for i in range(len(self.axis_values)):
            e = self._valid(method, metric, i)
            out.append(np.sqrt(np.mean(e**2)) if e.size else np.nan)
        return np.array(out)

    def median(self, method: str, metric: str) -> NDArray[np.float64]:
        out = []
        for i in range(len(self.axis_values)):
            e = self._valid(method, metric, i)
            out.append(np.median(e) if e.size else np.nan)
        return np.array(out)

    def ci_halfwidth(self, method: str, metric: str) -> NDArray[np.float64]:
        out = []
        for i in range(len(self.axis_values)):
            e = self._valid(method, metric, i)
            out.append(1.96 * np.std(e, ddof=1) / np.sqrt(e.size) if e.size > 1 else np.nan)
        return np.array(out)

    def counts(self, method: str, metric: str) -> NDArray[np.int64]:
        return np.array([self._valid(method, metric, i).size for i in range(len(self.axis_values))])

    def rows(self) -> list[tuple[float, str, str, float, float, int]]:
        rows = []
        for i, x in enumerate(self.axis_values):
            for method in self.methods:
                for metric in METRICS:
                    rows.append((
                        x, method, metric,
                        float(self.rmse(method, metric)[i]),
                        float(self.ci_halfwidth(method, metric)[i]),
                        int(self.counts(method, metric)[i]),
                    ))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for x, method, metric, value, ci, n in self.rows():
            writer.writerow((_fmt(x), method, metric, _fmt(value), _fmt(ci), n))
        return buf.getvalue()

    def to_json(self, scenario: Scenario | None = None) -> str:
        doc: dict[str, Any] = {
            "axis": self.axis,
            "axis_values": list(self.axis_values),
            "methods": list(self.methods),
            "metrics": list(METRICS),
            "rows": [
                dict(zip(CSV_HEADER, (x, m, k, _jnum(v), _jnum(c), n)))
                for x, m, k, v, c, n in self.rows()
            ],
            "failures": self.failures,
            "per_trial": {
                m: {k: [[_jnum(v) for v in row] for row in self.errors[m][k]] for k in METRICS}
                for m in self.methods
            },
        }
        if scenario is not None:
            doc["scenario"] = jsonable(scenario.settings)
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(x)


def _jnum(x: float) -> float | None:
    return None if not math.isfinite(x) else float(x)


def jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def write_results(table: RmseTable, scenario: Scenario, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "rmse.csv", out / "rmse.json"
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    json_path.write_text(table.to_json(scenario) + "\n", encoding="utf-8")
    return csv_path, json_path


# --------------------------------------------------------------------------
# trials


@dataclass
class _Setup:
    """Per-scenario quantities shared by every trial."""

    basis: CalibrationBasis
    flat: CalibrationBasis
    dictionary: NDArray[np.complex128]
    op: LiftedOperator
    op_flat: LiftedOperator
    truth_basis: CalibrationBasis


def _setup(scenario: Scenario) -> _Setup:
    nl = scenario.plan.nl
    basis = build_chebyshev_basis(nl, scenario.R)
    flat = build_chebyshev_basis(nl, 1)
    dictionary = build_dictionary(scenario.grid, scenario.plan)
    return _Setup(
        basis=basis,
        flat=flat,
        dictionary=dictionary,
        op=LiftedOperator(basis, dictionary),
        op_flat=LiftedOperator(flat, dictionary),
        truth_basis=build_chebyshev_basis(nl, scenario.truth_order),
    )


def trial_streams(seed: int, trial: int) -> dict[str, np.random.Generator]:
    """Independent generators for one trial, keyed only by ``(seed, trial)``.

    Every axis point and every method of a trial shares these draws.
    """
    names = ("gain", "channel", "paths", "pilots", "noise")
    children = np.random.SeedSequence(seed, spawn_key=(trial,)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def scenario_gain(scenario: Scenario, trial: int, truth_basis: CalibrationBasis) -> GainResponse:
    if scenario.fixed_gain:
        seed: Any = scenario.gain_seed
    else:
        seed = trial_streams(scenario.seed, trial)["gain"]
    return synth_gain_response(truth_basis, scenario.db_range, seed)


def run_trial(scenario: Scenario, trial: int, setup: _Setup | None = None) -> dict[str, Any]:
    """One Monte-Carlo trial over every axis point.

    Returns ``{method: {metric: [error per axis value]}}``; a failed
    estimate leaves NaN in place and is logged.
    """
    setup = setup or _setup(scenario)
    streams = trial_streams(scenario.seed, trial)
    gains = scenario_gain(scenario, trial, setup.truth_basis)
    g = gains.values
    channel = scenario.channel.draw(scenario.grid, streams["channel"])
    p_max = max(scenario.snapshots)
    draws = draw_path_gains(channel, p_max, streams["paths"])
    pilots = make_pilots(scenario.plan.N, streams["pilots"])
    noise_seed = int(streams["noise"].integers(2**63))

    methods = scenario.methods()
    n_axis = len(scenario.axis_values)
    errors = {m: {k: [np.nan] * n_axis for k in METRICS} for m in methods}
    oracle = CalibrationBasis(g[:, None])
    op_oracle = LiftedOperator(oracle, setup.dictionary)
    tau_true, tau_max = channel.delays, scenario.grid.tau_max

    for i, x in enumerate(scenario.axis_values):
        snr = x if scenario.axis == "snr" else scenario.snr_db[0]
        p = int(x) if scenario.axis == "snapshots" else scenario.snapshots[0]
        c_full, noise_power = simulate_snapshots(
            channel, gains, scenario.plan, draws, pilots, snr, noise_seed
        )
        c = c_full.values[:, :p]
        cov = vectorize_and_denoise(sample_covariance(c), noise_power)

        def score(method, fn):
            try:
                g_hat, tau_hat = fn()
                errors[method]["calibration_rmse"][i] = rmse_calibration(g_hat, g)
                errors[method]["delay_rmse"][i] = rmse_first_delay(tau_hat, tau_true, tau_max)
            except (ValueError, np.linalg.LinAlgError) as exc:
                logger.warning("trial %d, %s at %s=%s failed: %s", trial, method, scenario.axis, x, exc)

        def proposed():
            res = estimate(cov, setup.op, scenario.grid, setup.basis, scenario.solver)
            if res.empty and not np.all(np.isfinite(res.g_hat)):
                raise ValueError("solver returned Q = 0")
            return res.g_hat, res.tau_hat

        def calibrated():
            res = estimate(cov, op_oracle, scenario.grid, oracle, scenario.solver)
            return g, res.tau_hat

        def uncalibrated():
            res = estimate(cov, setup.op_flat, scenario.grid, setup.flat, scenario.solver)
            return np.ones_like(g), res.tau_hat

        def alt_min():
            return _alt_min_estimate(scenario, setup, c, g, noise_power)

        fns = {"proposed": proposed, "calibrated_oracle": calibrated,
               "uncalibrated": uncalibrated, "alt_min": alt_min}
        for m in methods:
            score(m, fns[m])
    return errors


def _alt_min_estimate(scenario: Scenario, setup: _Setup, c, g, noise_power):
    """Snapshot-domain alternating minimization, initialised from the
    least-squares fit of the true response onto the basis."""
    b = setup.basis.matrix
    p_init, *_ = np.linalg.lstsq(b, g, rcond=None)
    nl, p = c.shape
    lam = (
        scenario.baselines.alt_min_lambda_scale * 2.0 * np.sqrt(noise_power * nl)
        * (np.sqrt(p) + np.sqrt(2.0 * np.log(scenario.grid.M)))
    )
    p_hat, x_s, _ = alt_min_solve(
        c, setup.dictionary, setup.basis, scenario.solver,
        p_init=p_init, lam=lam, n_outer=scenario.baselines.alt_min_iters,
    )
    row_power = np.sum(np.abs(x_s) ** 2, axis=1) / p
    tau, _, _ = support_to_delays(row_power, scenario.grid, scenario.solver.support_threshold)
    return b @ p_hat, tau


def _run_trial_worker(args):
    scenario, trial = args
    return run_trial(scenario, trial)


def run_monte_carlo(scenario: Scenario, progress: Callable[[int], None] | None = None) -> RmseTable:
    """Run every trial and collect errors in trial-index order."""
    methods = scenario.methods()
    n_axis = len(scenario.axis_values)
    errors = {m: {k: np.full((n_axis, scenario.trials), np.nan) for k in METRICS} for m in methods}
    failures = {m: [0] * n_axis for m in methods}

    if scenario.workers > 1:
        with ProcessPoolExecutor(max_workers=scenario.workers) as pool:
            results = pool.map(_run_trial_worker, [(scenario, t) for t in range(scenario.trials)])
            results = list(results)
    else:
        setup = _setup(scenario)
        results = []
        for t in range(scenario.trials):
            results.append(run_trial(scenario, t, setup))
            if progress:
                progress(t)

    for t, res in enumerate(results):
        for m in methods:
            for k in METRICS:
                errors[m][k][:, t] = res[m][k]
    for m in methods:
        for i in range(n_axis):
            failures[m][i] = int(np.sum(~np.isfinite(errors[m]["delay_rmse"][i])))
    return RmseTable(
        axis=scenario.axis,
        axis_values=tuple(scenario.axis_values),
        methods=methods,
        errors=errors,
        failures=failures,
    )
