"""Built-in oracle checks run by ``blindtd selftest``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .covariance import LiftedOperator, vec, vectorize_and_denoise
from .model import (
    BandPlan,
    CalibrationBasis,
    DelayGrid,
    build_chebyshev_basis,
    build_dictionary,
    build_steering,
)
from .solver import SolverConfig, estimate

ADJOINT_TOL = 1e-10
IDENTITY_TOL = 1e-12
DENSE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _crandn(rng: np.random.Generator, *shape: int) -> NDArray[np.complex128]:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_operator(
    rng: np.random.Generator, n: int = 4, bands: int = 2, r: int = 2, m: int = 5
) -> LiftedOperator:
    """Small operator with a random complex basis and a random-delay dictionary."""
    plan = BandPlan(n, bands, 20e6, tuple(3 * n * i for i in range(bands)))
    tau = np.sort(rng.uniform(0, plan.unambiguous_delay, m))
    return LiftedOperator(_crandn(rng, plan.nl, r), build_steering(tau, plan))


def adjoint_mismatch(op: LiftedOperator, rng: np.random.Generator, pairs: int = 20) -> float:
    """Largest relative gap between ``<Gq, y>`` and ``<q, G^H y>``."""
    worst = 0.0
    for _ in range(pairs):
        q = _crandn(rng, *op.q_shape)
        y = _crandn(rng, op.shape[0])
        lhs = np.vdot(y, op.forward(q))
        rhs = np.vdot(op.adjoint(y), q)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return float(worst)


def vec_identity_error(rng: np.random.Generator, n: int = 4, bands: int = 2, k: int = 3) -> float:
    """``vec(diag(g) A S A^H diag(g)^H)`` against the Khatri-Rao form."""
    plan = BandPlan(n, bands, 20e6, tuple(5 * i for i in range(bands)))
    tau = np.sort(rng.uniform(0, plan.unambiguous_delay, k))
    a = build_steering(tau, plan)
    g = _crandn(rng, plan.nl)
    s = rng.uniform(0.1, 2.0, k)
    lhs = vec((g[:, None] * a) @ np.diag(s) @ (g[:, None] * a).conj().T)
    kr = np.einsum("bk,ak->bak", a.conj(), a).reshape(-1, k)
    rhs = np.kron(g.conj(), g) * (kr @ s)
    return float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)))


def lifting_identity_error(rng: np.random.Generator, op: LiftedOperator) -> float:
    """``diag(D z) K_D r`` against ``forward(z r^T)``."""
    z = _crandn(rng, op.R * op.R)
    r = rng.uniform(0, 1, op.M)
    d = np.kron(op.basis.conj(), op.basis)
    kd = np.einsum("bm,am->bam", op.dictionary.conj(), op.dictionary).reshape(-1, op.M)
    lhs = (d @ z) * (kd @ r)
    rhs = op.forward(np.outer(z, r))
    return float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)))


def dense_mismatch(op: LiftedOperator, rng: np.random.Generator, trials: int = 3) -> float:
    dense = op.to_dense()
    worst = 0.0
    for _ in range(trials):
        q = _crandn(rng, *op.q_shape)
        y = _crandn(rng, op.shape[0])
        fwd = np.max(np.abs(dense @ vec(q) - op.forward(q))) / np.max(np.abs(dense @ vec(q)))
        adj = np.max(np.abs(dense.conj().T @ y - vec(op.adjoint(y)))) / np.max(np.abs(dense.conj().T @ y))
        worst = max(worst, fwd, adj)
    return float(worst)


@dataclass
class NoiselessInstance:
    plan: BandPlan
    grid: DelayGrid
    basis: CalibrationBasis
    g: NDArray[np.complex128]
    support: NDArray[np.int64]
    powers: NDArray[np.float64]
    covariance: NDArray[np.complex128]


def noiseless_instance(
    n: int = 8,
    bands: int = 2,
    r: int = 2,
    m: int = 16,
    support=(3, 9),
    powers=(1.0, 0.6),
    coeffs=(1.0, 0.3),
    band_indices=(0, 12),
) -> NoiselessInstance:
    """Population covariance of an on-grid channel with ``g`` in the basis span."""
    plan = BandPlan(n, bands, 20e6, band_indices)
    grid = DelayGrid(m, plan.unambiguous_delay)
    basis = build_chebyshev_basis(plan.nl, r)
    g = basis.matrix @ np.asarray(coeffs, dtype=complex)
    support = np.asarray(support)
    powers = np.asarray(powers, dtype=float)
    a = g[:, None] * build_steering(grid.points[support], plan)
    cov = (a * powers) @ a.conj().T
    return NoiselessInstance(plan, grid, basis, g, support, powers, cov)


def recover_noiseless(inst: NoiselessInstance, op: LiftedOperator | None = None):
    op = op or LiftedOperator(inst.basis, build_dictionary(inst.grid, inst.plan))
    cov = vectorize_and_denoise(inst.covariance, 0.0)
    config = SolverConfig(lam=1e-6 * np.linalg.norm(cov.r_tilde), max_iters=5000, grad_tol=1e-10)
    res = estimate(cov, op, inst.grid, inst.basis, config)
    corr = 0.0
    if np.all(np.isfinite(res.g_hat)):
        corr = abs(np.vdot(res.g_hat, inst.g)) / (np.linalg.norm(res.g_hat) * np.linalg.norm(inst.g))
    return res, float(corr)


class _CorruptedOperator(LiftedOperator):
    """Negative control: adjoint misses a conjugation."""

    def adjoint(self, y):
        return super().adjoint(np.conj(y))


def run_checks(corrupt_operator: bool = False, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cls: Callable[..., LiftedOperator] = _CorruptedOperator if corrupt_operator else LiftedOperator

    def make(**kw) -> LiftedOperator:
        base = random_operator(rng, **kw)
        return cls(base.basis, base.dictionary)

    results = []
    err = adjoint_mismatch(make(), rng)
    results.append(CheckResult("adjoint", bool(err < ADJOINT_TOL), f"max rel err {err:.2e} (tol {ADJOINT_TOL:g})"))
    err = vec_identity_error(rng)
    results.append(CheckResult("vec_identity", bool(err < IDENTITY_TOL), f"max rel err {err:.2e} (tol {IDENTITY_TOL:g})"))
    err = lifting_identity_error(rng, make(r=3))
    results.append(CheckResult("lifting_identity", bool(err < IDENTITY_TOL), f"max rel err {err:.2e} (tol {IDENTITY_TOL:g})"))
    err = dense_mismatch(make(), rng)
    results.append(CheckResult("dense_equivalence", bool(err < DENSE_TOL), f"max rel err {err:.2e} (tol {DENSE_TOL:g})"))

    inst = noiseless_instance()
    op = cls(inst.basis, build_dictionary(inst.grid, inst.plan))
    res, corr = recover_noiseless(inst, op)
    ok = np.array_equal(res.support, inst.support) and corr >= 0.999
    results.append(CheckResult(
        "noiseless_recovery", bool(ok),
        f"support {res.support.tolist()} vs {inst.support.tolist()}, correlation {corr:.6f}",
    ))
    return results
