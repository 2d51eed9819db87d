"""Command-line entry point.

Usage::

    blindtd {simulate,estimate,bench,selftest} --config PATH --out DIR
            [--set section.key=value]... [-v]

Settings precedence: built-in defaults < config file < ``--set`` overrides.

Exit codes: 0 success, 1 selftest failure, 2 configuration error, 3 I/O
error, 4 empty delay support, 5 data/config dimension mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import (
    ConfigError,
    Scenario,
    jsonable,
    load_scenario,
    run_monte_carlo,
    scenario_gain,
    trial_streams,
    write_results,
)
from .container import ContainerError, read_container, write_container
from .covariance import LiftedOperator, estimate_noise_power, sample_covariance, vectorize_and_denoise
from .model import build_chebyshev_basis, build_dictionary
from .selftest import run_checks
from .simulate import draw_path_gains, make_pilots, simulate_snapshots
from .solver import estimate

logger = logging.getLogger("blindtd")

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EMPTY = 4
EXIT_DIMS = 5

DATASET_NAME = "dataset.btd"


class DimensionMismatch(ValueError):
    pass


def _parse_overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _scenario(args) -> Scenario:
    if args.config is None:
        raise ConfigError("--config is required")
    if not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    return load_scenario(args.config, _parse_overrides(args.set))


def cmd_simulate(args) -> int:
    """Simulate one dataset (trial 0, first snapshot count and SNR)."""
    sc = _scenario(args)
    streams = trial_streams(sc.seed, 0)
    truth_basis = build_chebyshev_basis(sc.plan.nl, sc.truth_order)
    gains = scenario_gain(sc, 0, truth_basis)
    channel = sc.channel.draw(sc.grid, streams["channel"])
    p, snr = sc.snapshots[0], sc.snr_db[0]
    draws = draw_path_gains(channel, p, streams["paths"])
    pilots = make_pilots(sc.plan.N, streams["pilots"])
    c, noise_power = simulate_snapshots(
        channel, gains, sc.plan, draws, pilots, snr, int(streams["noise"].integers(2**63))
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET_NAME
    meta = {
        "nl": sc.plan.nl,
        "N": sc.plan.N,
        "L": sc.plan.L,
        "P": p,
        "M": sc.grid.M,
        "tau_max": sc.grid.tau_max,
        "noise_power": noise_power,
        "snr_db": repr(snr),
        "seed": sc.seed,
        "scenario": jsonable(sc.settings),
    }
    write_container(
        path,
        {
            "C": c.values,
            "g": gains.values,
            "tau": channel.delays,
            "path_powers": channel.path_powers,
            "X": draws.values,
            "pilots": pilots.symbols,
        },
        meta,
    )
    print(f"simulate: wrote {path} ({sc.plan.nl} x {p} snapshots, K={channel.K}, "
          f"SNR={snr} dB, noise power {noise_power:.4g})")
    return EXIT_OK


def _complex_pairs(v) -> list[list[float]]:
    v = np.asarray(v, dtype=complex).reshape(-1)
    return [[float(z.real), float(z.imag)] for z in v]


def cmd_estimate(args) -> int:
    """Run the estimator on a dataset and write ``estimate.json``."""
    sc = _scenario(args)
    data_path = Path(args.data) if args.data else Path(args.out) / DATASET_NAME
    arrays, meta = read_container(data_path)
    if "C" not in arrays:
        raise ContainerError(f"{data_path}: no snapshot matrix 'C'")
    c = arrays["C"]
    if c.ndim != 2 or c.shape[0] != sc.plan.nl:
        raise DimensionMismatch(
            f"dataset has {c.shape[0] if c.ndim else 0} rows, config plan needs {sc.plan.nl}"
        )
    if "M" in meta and int(meta["M"]) != sc.grid.M:
        raise DimensionMismatch(f"dataset grid M={meta['M']}, config grid M={sc.grid.M}")

    r_hat = sample_covariance(c)
    if "noise_power" in meta:
        noise_power = float(meta["noise_power"])
        noise_source = "dataset"
    else:
        noise_power = estimate_noise_power(r_hat, sc.channel.paths)
        noise_source = "estimated"
    cov = vectorize_and_denoise(r_hat, noise_power)
    basis = build_chebyshev_basis(sc.plan.nl, sc.R)
    op = LiftedOperator(basis, build_dictionary(sc.grid, sc.plan))
    res = estimate(cov, op, sc.grid, basis, sc.solver)

    diag = {k: (v.item() if hasattr(v, "item") else v) for k, v in res.diagnostics.items()}
    finite = bool(np.all(np.isfinite(res.g_hat)))
    doc = {
        "tau_hat": [float(t) for t in res.tau_hat],
        "support": [int(i) for i in res.support],
        "sigma_alpha_hat": [float(s) for s in res.sigma_alpha_hat],
        "p_hat": _complex_pairs(res.p_hat) if finite else None,
        "g_hat": _complex_pairs(res.g_hat) if finite else None,
        "noise_power": noise_power,
        "noise_power_source": noise_source,
        "diagnostics": diag,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "estimate.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if res.empty:
        print(f"estimate: empty delay support, wrote {path}")
        return EXIT_EMPTY
    taus = ", ".join(f"{t * 1e9:.3f}" for t in res.tau_hat)
    print(f"estimate: {res.support.size} paths at [{taus}] ns, wrote {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    sc = _scenario(args)
    t0 = time.perf_counter()
    table = run_monte_carlo(sc, progress=lambda t: logger.info("trial %d/%d", t + 1, sc.trials))
    csv_path, json_path = write_results(table, sc, args.out)
    print(f"bench: {sc.trials} trials x {len(sc.axis_values)} {sc.axis} points "
          f"in {time.perf_counter() - t0:.1f} s, wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_checks(corrupt_operator=args.corrupt_operator)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selftest: {len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_SELFTEST
    print("selftest: all checks passed")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blindtd",
        description="Joint blind calibration and multipath delay estimation.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="scenario file (INI)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a setting, e.g. --set solver.lambda_scale=30")
    parser.add_argument("--data", help="dataset for estimate (default OUT/dataset.btd)")
    parser.add_argument("--corrupt-operator", action="store_true",
                        help="selftest negative control: break the operator adjoint")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionMismatch as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMS
    except (OSError, ContainerError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
