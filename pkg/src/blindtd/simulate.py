"""Synthetic multiband channel probing at the post-DFT level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import BandPlan, GainModel, GainResponse, MultipathChannel, build_steering

PILOT_TOL = 1e-9


@dataclass(frozen=True)
class PilotSymbols:
    symbols: NDArray[np.complex128]

    def __post_init__(self) -> None:
        s = np.atleast_1d(np.asarray(self.symbols, dtype=complex))
        _check_unit_modulus(s)
        object.__setattr__(self, "symbols", s)


@dataclass(frozen=True)
class SnapshotMatrix:
    """Stacked deconvolved measurements ``C`` (NL x P)."""

    values: NDArray[np.complex128]
    plan: BandPlan

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=complex)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError("snapshot matrix must be 2-D with P >= 1 columns")
        if v.shape[0] != self.plan.nl:
            raise ValueError(f"expected {self.plan.nl} rows, got {v.shape[0]}")
        object.__setattr__(self, "values", v)

    @property
    def P(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GainDraws:
    """Path gains ``X`` (K x P), one column per snapshot."""

    values: NDArray[np.complex128]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=complex)
        if v.ndim != 2:
            raise ValueError("gain draws must be a K x P matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("gain draws must be finite")
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def P(self) -> int:
        return self.values.shape[1]


def _check_unit_modulus(s: NDArray) -> None:
    mag = np.abs(s)
    if np.any(np.abs(mag - 1.0) > PILOT_TOL):
        raise ValueError("pilot symbols must have unit modulus")


def _complex_normal(rng: np.random.Generator, shape) -> NDArray[np.complex128]:
    """Circular complex Gaussian samples with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def make_pilots(n: int, seed: int | np.random.Generator | None = None) -> PilotSymbols:
    """Random QPSK pilots ``exp(1j*pi*(2q+1)/4)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    q = rng.integers(0, 4, size=n)
    return PilotSymbols(np.exp(1j * np.pi * (2 * q + 1) / 4))


def draw_path_gains(
    channel: MultipathChannel, p: int, seed: int | np.random.Generator | None = None
) -> GainDraws:
    """Draw per-snapshot path gains.

    In the zero-mean Gaussian mode the draws are i.i.d. across paths and
    snapshots, so the path-gain covariance is exactly
    ``diag(channel.path_powers)``. The Rician mode adds a fixed line-of-sight
    component per path (random phase, power ``k/(1+k)``), which breaks the
    zero-mean assumption of the covariance model.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(channel.path_powers)[:, None]
    scatter = _complex_normal(rng, (channel.K, p))
    if channel.gain_model is GainModel.ZERO_MEAN_GAUSSIAN:
        return GainDraws(sigma * scatter)

    k = channel.k_factor
    if np.isinf(k):
        los_w, nlos_w = 1.0, 0.0
    else:
        los_w, nlos_w = np.sqrt(k / (1 + k)), np.sqrt(1 / (1 + k))
    phase = np.exp(2j * np.pi * rng.random((channel.K, 1)))
    return GainDraws(sigma * (los_w * phase + nlos_w * scatter))


def deconvolve(y: NDArray, pilots: PilotSymbols) -> NDArray[np.complex128]:
    """Divide out the pilots entrywise (along the first axis)."""
    s = pilots.symbols
    _check_unit_modulus(s)
    y = np.asarray(y, dtype=complex)
    if y.shape[0] != s.size:
        raise ValueError(f"expected {s.size} entries, got {y.shape[0]}")
    return y / s.reshape((-1,) + (1,) * (y.ndim - 1))


def noiseless_snapshots(
    channel: MultipathChannel, gains: GainResponse, plan: BandPlan, draws: GainDraws
) -> NDArray[np.complex128]:
    """``diag(g) @ A(tau) @ X``."""
    if draws.K != channel.K:
        raise ValueError(f"channel has {channel.K} paths but draws have {draws.K} rows")
    g = gains.values
    if g.size != plan.nl:
        raise ValueError(f"gain response has {g.size} entries, plan needs {plan.nl}")
    a = build_steering(channel.delays, plan)
    return g[:, None] * (a @ draws.values)


def noise_power_for_snr(
    channel: MultipathChannel, gains: GainResponse, snr_db: float
) -> float:
    """Per-entry noise variance giving the requested average per-entry SNR.

    Expected signal power of entry ``n`` is ``|g_n|^2 * sum(path_powers)``
    (unit-modulus steering, uncorrelated paths); the average is taken over
    all stacked entries.
    """
    if np.isposinf(snr_db):
        return 0.0
    signal = np.mean(np.abs(gains.values) ** 2) * np.sum(channel.path_powers)
    return float(signal / 10.0 ** (snr_db / 10.0))


def simulate_snapshots(
    channel: MultipathChannel,
    gains: GainResponse,
    plan: BandPlan,
    draws: GainDraws,
    pilots: PilotSymbols,
    snr_db: float,
    seed: int | np.random.Generator | None = None,
) -> tuple[SnapshotMatrix, float]:
    """Simulate pilot-modulated received snapshots and deconvolve them.

    Returns the stacked matrix ``C`` and the per-entry noise variance, which
    deconvolution by unit-modulus pilots leaves unchanged. ``snr_db=inf``
    disables noise.
    """
    if pilots.symbols.size != plan.N:
        raise ValueError(f"need {plan.N} pilots, got {pilots.symbols.size}")
    clean = noiseless_snapshots(channel, gains, plan, draws)
    noise_power = noise_power_for_snr(channel, gains, snr_db)
    rng = np.random.default_rng(seed)

    s = np.tile(pilots.symbols, plan.L)[:, None]
    y = s * clean
    if noise_power > 0:
        y = y + np.sqrt(noise_power) * _complex_normal(rng, y.shape)
    N = plan.N
    c = np.vstack([deconvolve(y[i * N:(i + 1) * N], pilots) for i in range(plan.L)])
    return SnapshotMatrix(c, plan), noise_power
