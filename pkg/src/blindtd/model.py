"""Deterministic problem structure: band geometry, delay grids, steering
matrices and the Chebyshev calibration basis."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class BandPlan:
    """Subcarrier and band geometry of a multiband probing setup.

    Band ``i`` is centred on ``base_freq_rad + band_indices[i] * spacing``;
    all bands share the same ``N`` subcarriers.

    Args:
        N: Subcarriers per band (even).
        L: Number of bands.
        bandwidth_hz: Bandwidth of one band in Hz.
        band_indices: Integer subcarrier offset of each band from the
            lowest band, starting at 0 and strictly increasing.
        base_freq_rad: Angular frequency of the lowest band (rad/s).
    """

    N: int
    L: int
    bandwidth_hz: float
    band_indices: tuple[int, ...]
    base_freq_rad: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "band_indices", tuple(int(n) for n in self.band_indices))
        if self.N < 2 or self.N % 2:
            raise ValueError(f"N must be even and >= 2, got {self.N}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be positive")
        idx = self.band_indices
        if len(idx) != self.L:
            raise ValueError(f"expected {self.L} band indices, got {len(idx)}")
        if idx[0] != 0:
            raise ValueError("band_indices[0] must be 0")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("band_indices must be strictly increasing")

    @classmethod
    def from_centers_hz(
        cls, N: int, bandwidth_hz: float, centers_hz: Sequence[float]
    ) -> "BandPlan":
        """Build a plan from band center frequencies given in Hz.

        Centers must sit on the subcarrier grid of the lowest band.
        """
        centers = np.asarray(centers_hz, dtype=float)
        spacing_hz = bandwidth_hz / N
        offsets = (centers - centers[0]) / spacing_hz
        idx = np.rint(offsets)
        if not np.allclose(offsets, idx, atol=1e-6):
            raise ValueError("band centers are not aligned to the subcarrier grid")
        return cls(
            N=N,
            L=len(centers),
            bandwidth_hz=bandwidth_hz,
            band_indices=tuple(int(i) for i in idx),
            base_freq_rad=2 * np.pi * float(centers[0]),
        )

    @property
    def subcarrier_spacing_rad(self) -> float:
        return 2 * np.pi * self.bandwidth_hz / self.N

    @property
    def nl(self) -> int:
        return self.N * self.L

    @property
    def unambiguous_delay(self) -> float:
        """Delay period of the subcarrier grid, ``2*pi / spacing`` (seconds)."""
        return 2 * np.pi / self.subcarrier_spacing_rad

    def stacked_indices(self) -> NDArray[np.int64]:
        """Global subcarrier index ``n_i + n`` of every stacked entry."""
        n = np.arange(self.N)
        return np.concatenate([ni + n for ni in self.band_indices])


@dataclass(frozen=True)
class DelayGrid:
    """Uniform grid ``t_m = m * tau_max / M`` for ``m = 0..M-1``."""

    M: int
    tau_max: float

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not (np.isfinite(self.tau_max) and self.tau_max > 0):
            raise ValueError("tau_max must be positive and finite")

    @property
    def step(self) -> float:
        return self.tau_max / self.M

    @property
    def points(self) -> NDArray[np.float64]:
        return np.arange(self.M) * self.step


class GainModel(enum.Enum):
    ZERO_MEAN_GAUSSIAN = "gaussian"
    RICIAN = "rician"


@dataclass(frozen=True)
class MultipathChannel:
    """Ground-truth multipath channel.

    Args:
        delays: Path delays in seconds, strictly increasing.
        path_powers: Per-path average power, strictly positive.
        gain_model: Distribution of the per-snapshot path gains.
        k_factor: Rician K-factor (linear), used only for ``RICIAN``.
    """

    delays: NDArray[np.float64]
    path_powers: NDArray[np.float64]
    gain_model: GainModel = GainModel.ZERO_MEAN_GAUSSIAN
    k_factor: float = 0.0

    def __post_init__(self) -> None:
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        powers = np.atleast_1d(np.asarray(self.path_powers, dtype=float))
        if delays.shape != powers.shape:
            raise ValueError("delays and path_powers must have equal length")
        if delays.size == 0:
            raise ValueError("at least one path is required")
        if not np.all(np.isfinite(delays)) or np.any(delays < 0):
            raise ValueError("delays must be finite and nonnegative")
        if np.any(np.diff(delays) <= 0):
            raise ValueError("delays must be strictly increasing")
        if np.any(powers <= 0):
            raise ValueError("path_powers must be strictly positive")
        if self.k_factor < 0:
            raise ValueError("k_factor must be nonnegative")
        object.__setattr__(self, "delays", _frozen(delays))
        object.__setattr__(self, "path_powers", _frozen(powers))
        object.__setattr__(self, "gain_model", GainModel(self.gain_model))

    @property
    def K(self) -> int:
        return self.delays.size

    def check_grid(self, grid: DelayGrid) -> None:
        if self.delays[-1] >= grid.tau_max:
            raise ValueError("channel delays exceed the grid's tau_max")


@dataclass(frozen=True)
class CalibrationBasis:
    """NL x R matrix whose columns span the admissible RF-chain responses."""

    matrix: NDArray[np.complex128]

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[1] < 1:
            raise ValueError("basis matrix must be 2-D with at least one column")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def num_functions(self) -> int:
        return self.matrix.shape[1]

    @property
    def nl(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GainResponse:
    """Stacked complex RF-chain response ``g`` (band-major, frequency order)."""

    values: NDArray[np.complex128]

    def __post_init__(self) -> None:
        v = np.atleast_1d(np.asarray(self.values, dtype=complex))
        if v.ndim != 1:
            raise ValueError("gain response must be a vector")
        if np.any(np.abs(v) <= 0):
            raise ValueError("gain magnitudes must be strictly positive")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def db(self) -> NDArray[np.float64]:
        return 20 * np.log10(np.abs(self.values))


def _check_delays(delays) -> NDArray[np.float64]:
    tau = np.atleast_1d(np.asarray(delays, dtype=float))
    if tau.ndim != 1:
        raise ValueError("delays must be a 1-D sequence")
    if not np.all(np.isfinite(tau)):
        raise ValueError("delays must be finite")
    if np.any(tau < 0):
        raise ValueError("delays must be nonnegative")
    return tau


def build_vandermonde(delays, plan: BandPlan) -> NDArray[np.complex128]:
    """N x K Vandermonde matrix with entries ``exp(-1j * n * w_sc * tau_k)``."""
    tau = _check_delays(delays)
    n = np.arange(plan.N)[:, None]
    return np.exp(-1j * plan.subcarrier_spacing_rad * n * tau[None, :])


def build_steering(delays, plan: BandPlan) -> NDArray[np.complex128]:
    """NL x K steering matrix: band ``i`` is ``M @ diag(theta_i)``."""
    tau = _check_delays(delays)
    vander = build_vandermonde(tau, plan)
    w = plan.subcarrier_spacing_rad
    blocks = [vander * np.exp(-1j * ni * w * tau)[None, :] for ni in plan.band_indices]
    return np.vstack(blocks)


def build_dictionary(grid: DelayGrid, plan: BandPlan) -> NDArray[np.complex128]:
    """NL x M dictionary whose columns are steering vectors of the grid delays."""
    return build_steering(grid.points, plan)


def chebyshev_nodes(nl: int) -> NDArray[np.float64]:
    """Stacked indices mapped affinely onto [-1, 1]."""
    return -1.0 + 2.0 * np.arange(nl) / (nl - 1)


def build_chebyshev_basis(nl: int, r: int) -> CalibrationBasis:
    """First ``r`` Chebyshev polynomials of the first kind on ``nl`` points.

    One global curve over the stacked (band-major) index, not one per band.
    """
    if nl < 2:
        raise ValueError("nl must be >= 2")
    if not 1 <= r <= nl:
        raise ValueError(f"need 1 <= r <= nl, got r={r}, nl={nl}")
    x = chebyshev_nodes(nl)
    cols = np.empty((nl, r))
    cols[:, 0] = 1.0
    if r > 1:
        cols[:, 1] = x
    for k in range(2, r):
        cols[:, k] = 2 * x * cols[:, k - 1] - cols[:, k - 2]
    return CalibrationBasis(cols.astype(complex))


def synth_gain_response(
    basis: CalibrationBasis,
    db_range: tuple[float, float] = (-3.0, 3.0),
    seed: int | np.random.Generator | None = None,
) -> GainResponse:
    """Draw a smooth, phase-free RF-chain response.

    Random basis coefficients with a ``1/(1+r)`` envelope give a smooth
    curve, which is mapped affinely onto ``db_range`` (in dB) and converted
    to linear magnitude. The result is ``10**(poly/20)``, so it lies close
    to, not exactly in, the span of ``basis``.
    """
    lo, hi = map(float, db_range)
    if lo > hi:
        raise ValueError("db_range must satisfy lo <= hi")
    rng = np.random.default_rng(seed)
    r = basis.num_functions
    coeffs = rng.standard_normal(r) / (1.0 + np.arange(r))
    curve = np.real(basis.matrix @ coeffs)
    span = curve.max() - curve.min()
    if span > 1e-12 * max(1.0, np.abs(curve).max()):
        unit = (curve - curve.min()) / span
    else:
        unit = np.full_like(curve, 0.5)
    db = lo + (hi - lo) * unit
    return GainResponse(10.0 ** (db / 20.0))
