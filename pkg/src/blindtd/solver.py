"""Group-Lasso recovery of the lifted unknown and extraction of calibration
coefficients, delays and path powers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .covariance import CovarianceData, LiftedOperator, lifted_residual
from .model import CalibrationBasis, DelayGrid

logger = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SolverConfig:
    """Settings for :func:`group_lasso_solve` and :func:`estimate`.

    Args:
        lam: Group-Lasso weight. ``None`` selects
            ``lambda_scale * noise_power * sqrt(log M)`` at solve time.
        lambda_scale: Multiplier of the automatic weight.
        lambda_floor: Lower bound on the automatic weight as a fraction of
            ``lambda_max``, the smallest weight giving ``Q = 0``. Guards the
            noise-proportional rule when the noise power is (near) zero but
            the covariance still carries finite-sample error.
        max_iters: Iteration cap.
        grad_tol: Stop once the proximal-gradient map norm drops below this
            fraction of its value at the starting point.
        step_init: First step size; ``None`` uses ``1 / ||Gamma||^2``.
        bb_memory: Window of the nonmonotone acceptance test.
        support_threshold: Relative column-norm threshold for the support.
        warm_start: Optional initial ``Q``.
    """

    lam: float | None = None
    lambda_scale: float = 1.0
    lambda_floor: float = 0.0
    max_iters: int = 500
    grad_tol: float = 1e-6
    step_init: float | None = None
    bb_memory: int = 5
    support_threshold: float = 0.05
    warm_start: NDArray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lambda_scale < 0:
            raise ValueError("lambda_scale must be nonnegative")
        if not 0 <= self.lambda_floor <= 1:
            raise ValueError("lambda_floor must lie in [0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.bb_memory < 1:
            raise ValueError("bb_memory must be >= 1")
        if not 0 <= self.support_threshold < 1:
            raise ValueError("support_threshold must lie in [0, 1)")

    def resolve_lambda(self, noise_power: float, m: int, lam_max: float = 0.0) -> float:
        if self.lam is not None:
            return float(self.lam)
        lam = self.lambda_scale * noise_power * np.sqrt(np.log(max(m, 2)))
        return float(max(lam, self.lambda_floor * lam_max))


def lambda_max(op: LiftedOperator, cov: CovarianceData) -> float:
    """Smallest weight for which ``Q = 0`` is optimal: ``2 max_m ||(Gamma^H r)_m||``."""
    return float(2.0 * group_norms(op.adjoint(cov.r_tilde)).max())


@dataclass
class LiftedSolution:
    q: NDArray[np.complex128]
    objective_trace: list[float]
    iterations: int
    converged: bool
    lam: float


@dataclass
class EstimationResult:
    p_hat: NDArray[np.complex128]
    g_hat: NDArray[np.complex128]
    sigma_alpha_hat: NDArray[np.float64]
    tau_hat: NDArray[np.float64]
    support: NDArray[np.int64]
    diagnostics: dict[str, Any]

    @property
    def empty(self) -> bool:
        return self.support.size == 0


def group_norms(q_mat: NDArray) -> NDArray[np.float64]:
    return np.linalg.norm(q_mat, axis=0)


def prox_group_columns(q_mat: NDArray, threshold: float) -> NDArray[np.complex128]:
    """Columnwise group soft-thresholding.

    Solves ``min_X 0.5 ||X - Q||_F^2 + threshold * sum_m ||X[:, m]||_2``.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    q_mat = np.asarray(q_mat)
    if threshold == 0:
        return q_mat.copy()
    norms = group_norms(q_mat)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > threshold, 1.0 - threshold / norms, 0.0)
    return q_mat * shrink[None, :]


def _objective(res_norm: float, q: NDArray, lam: float) -> float:
    return res_norm**2 + lam * float(np.sum(group_norms(q)))


def group_lasso_solve(
    op: LiftedOperator, cov: CovarianceData, config: SolverConfig, lam: float | None = None
) -> LiftedSolution:
    """Minimize ``||r_tilde - Gamma vec(Q)||^2 + lam * sum_m ||Q[:, m]||``.

    Proximal gradient on the half-scaled objective with Barzilai-Borwein
    steps and a nonmonotone (max over the last ``bb_memory`` values)
    sufficient-decrease test, started from ``Q = 0`` unless a warm start is
    given.
    """
    if lam is None:
        lam_max = lambda_max(op, cov) if config.lambda_floor > 0 else 0.0
        lam = config.resolve_lambda(cov.noise_power, op.M, lam_max)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    r = cov.r_tilde
    thr_scale = lam / 2.0

    if config.step_init is not None:
        t_ref = float(config.step_init)
    else:
        nrm = op.norm_estimate()
        t_ref = 1.0 / max(nrm**2, _EPS)
    t_min, t_max = t_ref * 1e-6, t_ref * 1e6

    if config.warm_start is not None:
        q = np.array(config.warm_start, dtype=complex).reshape(op.q_shape)
    else:
        q = np.zeros(op.q_shape, dtype=complex)
    res_norm, res = lifted_residual(op, q, cov)
    grad = -op.adjoint(res)
    f = _objective(res_norm, q, lam)
    trace = [f]

    def grad_map_norm(q, grad):
        return np.linalg.norm(q - prox_group_columns(q - t_ref * grad, t_ref * thr_scale)) / t_ref

    gm0 = grad_map_norm(q, grad)
    converged = gm0 <= _EPS * max(1.0, np.linalg.norm(r))
    t = t_ref
    it = 0
    sigma = 1e-4
    while not converged and it < config.max_iters:
        it += 1
        ref = max(trace[-config.bb_memory:])
        for _ in range(60):
            q_new = prox_group_columns(q - t * grad, t * thr_scale)
            step = q_new - q
            new_norm, new_res = lifted_residual(op, q_new, cov)
            f_new = _objective(new_norm, q_new, lam)
            # objective is twice the half-scaled one, hence sigma / t
            if f_new <= ref - sigma / t * np.vdot(step, step).real or t <= t_min:
                break
            t = max(t / 2.0, t_min)
        grad_new = -op.adjoint(new_res)
        s_vec = step.reshape(-1)
        y_vec = (grad_new - grad).reshape(-1)
        sy = np.vdot(s_vec, y_vec).real
        ss = np.vdot(s_vec, s_vec).real
        t = min(max(ss / sy, t_min), t_max) if sy > 0 else t_max
        q, grad, f = q_new, grad_new, f_new
        trace.append(f)
        if ss == 0:
            converged = True
            break
        if grad_map_norm(q, grad) <= config.grad_tol * gm0:
            converged = True
    logger.debug("group lasso: %d iterations, converged=%s, objective=%.4g", it, converged, f)
    return LiftedSolution(q=q, objective_trace=trace, iterations=it, converged=converged, lam=lam)


@dataclass
class RankOneFactors:
    z_hat: NDArray[np.complex128]
    r_s_hat: NDArray[np.float64]
    singular_values: NDArray[np.float64]

    @property
    def spectral_gap_ratio(self) -> float:
        """Second over first singular value; near 1 flags a degenerate split."""
        s = self.singular_values
        return float(s[1] / s[0]) if s.size > 1 and s[0] > 0 else 0.0

    def __iter__(self):
        return iter((self.z_hat, self.r_s_hat))


def _phase_of_largest(v: NDArray) -> complex:
    k = int(np.argmax(np.abs(v)))
    return v[k] / abs(v[k])


def rank1_extract(q_mat: NDArray) -> RankOneFactors:
    """Best rank-one split ``Q ~ z r^T`` with ``r`` real and nonnegative.

    The right factor is rotated so its largest entry is real positive and the
    opposite phase goes into ``z``; ``r`` keeps the magnitudes and entries
    below ``1e-12`` of its maximum are zeroed.
    """
    q_mat = np.asarray(q_mat, dtype=complex)
    if not np.any(q_mat):
        raise ValueError("cannot extract factors from an all-zero matrix")
    u, s, vh = np.linalg.svd(q_mat, full_matrices=False)
    r_col = vh[0]  # Q ~ u s r_col, so r ~ r_col up to phase
    c = _phase_of_largest(r_col)
    root = np.sqrt(s[0])
    z_hat = u[:, 0] * root * c
    r_s = root * np.abs(r_col)
    r_s[r_s < 1e-12 * r_s.max()] = 0.0
    return RankOneFactors(z_hat=z_hat, r_s_hat=r_s, singular_values=s)


def calib_extract(z_hat: NDArray) -> NDArray[np.complex128]:
    """Calibration coefficients from ``z = kron(conj(p), p)``, up to scale.

    ``unvec(z)`` is ``p p^H``; its right principal singular vector is
    returned with the largest-magnitude entry made real positive.
    """
    z_hat = np.asarray(z_hat, dtype=complex).reshape(-1)
    r = int(round(np.sqrt(z_hat.size)))
    if r * r != z_hat.size:
        raise ValueError("z_hat length must be a perfect square")
    if not np.any(z_hat):
        raise ValueError("z_hat must be nonzero")
    zmat = z_hat.reshape(r, r, order="F")
    _, _, vh = np.linalg.svd(zmat)
    p = vh[0].conj()
    return p / _phase_of_largest(p)


def support_to_delays(
    r_s_hat: NDArray, grid: DelayGrid, rel_threshold: float = 0.05
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int64]]:
    """Grid support of the recovered power profile.

    Returns ``(tau_hat, sigma_alpha_hat, support)``; all empty when nothing
    exceeds ``rel_threshold * max(r_s_hat)``.
    """
    if not 0 <= rel_threshold < 1:
        raise ValueError("rel_threshold must lie in [0, 1)")
    r_s_hat = np.asarray(r_s_hat, dtype=float)
    if r_s_hat.size != grid.M:
        raise ValueError(f"expected {grid.M} grid weights, got {r_s_hat.size}")
    peak = r_s_hat.max(initial=0.0)
    if peak <= 0:
        empty = np.array([], dtype=float)
        return empty, empty.copy(), np.array([], dtype=np.int64)
    support = np.flatnonzero(r_s_hat > rel_threshold * peak)
    return grid.points[support], r_s_hat[support], support


def estimate(
    cov: CovarianceData,
    op: LiftedOperator,
    grid: DelayGrid,
    basis: CalibrationBasis,
    config: SolverConfig = SolverConfig(),
) -> EstimationResult:
    """Joint blind calibration and delay estimation from a covariance."""
    if op.M != grid.M or op.R != basis.num_functions or op.nl != basis.nl:
        raise ValueError("operator, grid and basis dimensions disagree")
    sol = group_lasso_solve(op, cov, config)
    res_norm, _ = lifted_residual(op, sol.q, cov)
    diag: dict[str, Any] = {
        "lambda": sol.lam,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "objective": sol.objective_trace[-1],
        "residual_norm": res_norm,
        "relative_residual": res_norm / max(np.linalg.norm(cov.r_tilde), _EPS),
    }
    r = basis.num_functions
    if not np.any(sol.q):
        diag.update(support_size=0, empty_support=True, spectral_gap_ratio=0.0)
        nan_p = np.full(r, np.nan, dtype=complex)
        empty = np.array([], dtype=float)
        return EstimationResult(
            p_hat=nan_p,
            g_hat=np.full(basis.nl, np.nan, dtype=complex),
            sigma_alpha_hat=empty,
            tau_hat=empty.copy(),
            support=np.array([], dtype=np.int64),
            diagnostics=diag,
        )
    factors = rank1_extract(sol.q)
    p_hat = calib_extract(factors.z_hat)
    g_hat = basis.matrix @ p_hat
    tau, sig, support = support_to_delays(factors.r_s_hat, grid, config.support_threshold)
    diag.update(
        support_size=int(support.size),
        empty_support=support.size == 0,
        spectral_gap_ratio=factors.spectral_gap_ratio,
    )
    return EstimationResult(
        p_hat=p_hat,
        g_hat=g_hat,
        sigma_alpha_hat=sig,
        tau_hat=tau,
        support=support,
        diagnostics=diag,
    )


def alt_min_solve(
    c: NDArray,
    dictionary: NDArray,
    basis: CalibrationBasis | NDArray,
    config: SolverConfig = SolverConfig(),
    p_init: NDArray | None = None,
    lam: float | None = None,
    n_outer: int = 8,
) -> tuple[NDArray[np.complex128], NDArray[np.complex128], list[float]]:
    """Alternating minimization of the biconvex snapshot-domain problem

        ||C - diag(B p) A_D X||_F^2 + lam * sum_m ||X[m, :]||_2

    alternating a row-sparse group-Lasso step in ``X`` with a least-squares
    step in ``p``. No convergence guarantee; ``n_outer`` caps the sweeps.

    Returns ``(p_hat, x_s_hat, objective_trace)``; the trace holds the
    objective after every half-step.
    """
    c = np.asarray(getattr(c, "values", c), dtype=complex)
    a = np.asarray(dictionary, dtype=complex)
    b = basis.matrix if isinstance(basis, CalibrationBasis) else np.asarray(basis, dtype=complex)
    nl, p_count = c.shape
    if a.shape[0] != nl or b.shape[0] != nl:
        raise ValueError("data, dictionary and basis row counts disagree")
    r = b.shape[1]
    m = a.shape[1]
    p = np.zeros(r, dtype=complex)
    if p_init is None:
        p[0] = 1.0
    else:
        p[:] = np.asarray(p_init, dtype=complex)
    if lam is None:
        lam = config.lam if config.lam is not None else 0.0

    def objective(p, x):
        res = c - (b @ p)[:, None] * (a @ x)
        return float(np.vdot(res, res).real + lam * np.sum(np.linalg.norm(x, axis=1)))

    x = np.zeros((m, p_count), dtype=complex)
    trace = [objective(p, x)]
    for _ in range(n_outer):
        x = _row_group_lasso(c, (b @ p)[:, None] * a, lam, x, config)
        trace.append(objective(p, x))
        y = a @ x
        if not np.any(y):
            trace.append(trace[-1])
            break
        # C[a, t] = sum_r B[a, r] p_r Y[a, t]  ->  linear least squares in p
        design = (b[:, None, :] * y[:, :, None]).reshape(nl * p_count, r)
        p_new, *_ = np.linalg.lstsq(design, c.reshape(-1), rcond=None)
        if objective(p_new, x) <= trace[-1]:
            p = p_new
        trace.append(objective(p, x))
    return p, x, trace


def _row_group_lasso(
    c: NDArray, op: NDArray, lam: float, x0: NDArray, config: SolverConfig
) -> NDArray[np.complex128]:
    """Row-sparse group Lasso ``||C - op X||_F^2 + lam sum ||X[m, :]||``,
    accelerated proximal gradient with a fixed ``1/L`` step; never returns a
    point worse than ``x0``."""
    lip = np.linalg.norm(op, 2) ** 2
    if lip == 0:
        return x0
    t = 1.0 / lip

    def obj(x):
        res = c - op @ x
        return float(np.vdot(res, res).real + lam * np.sum(np.linalg.norm(x, axis=1)))

    x = x0.copy()
    yk = x.copy()
    tk = 1.0
    for _ in range(config.max_iters):
        grad = op.conj().T @ (op @ yk - c)
        x_new = prox_group_columns((yk - t * grad).T, t * lam / 2.0).T
        tk_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        yk = x_new + (tk - 1) / tk_new * (x_new - x)
        delta = np.linalg.norm(x_new - x)
        x, tk = x_new, tk_new
        if delta <= config.grad_tol * max(np.linalg.norm(x), _EPS):
            break
    return x if obj(x) <= obj(x0) else x0
