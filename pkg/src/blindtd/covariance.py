"""Sample covariance, noise removal and the lifted measurement operator.

Vectorization is column-major throughout: stacked index ``n`` of a vectorized
NL x NL matrix maps to ``(a, b) = (n % NL, n // NL)``.

The lifted unknown ``Q`` has shape ``(R*R, M)``. Row ``i*R + j`` of ``Q``
pairs with ``conj(B[:, i]) * B[:, j]``, so a rank-one ``Q = z r^T`` with
``z = kron(conj(p), p)`` reproduces the covariance of data with gain
``B @ p``; column ``m`` reshaped column-major to R x R is ``p p^H``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import CalibrationBasis
from .simulate import SnapshotMatrix

DENSE_MAX_ROWS = 4096


def vec(mat: NDArray) -> NDArray:
    return np.asarray(mat).reshape(-1, order="F")


def unvec(v: NDArray, rows: int) -> NDArray:
    return np.asarray(v).reshape(rows, -1, order="F")


@dataclass(frozen=True)
class CovarianceData:
    r_hat: NDArray[np.complex128]
    noise_power: float
    r_tilde: NDArray[np.complex128]

    @property
    def nl(self) -> int:
        return int(round(np.sqrt(self.r_hat.size)))


def sample_covariance(c: SnapshotMatrix | NDArray) -> NDArray[np.complex128]:
    """``(1/P) C C^H``."""
    values = c.values if isinstance(c, SnapshotMatrix) else np.asarray(c, dtype=complex)
    p = values.shape[1]
    if p < 1:
        raise ValueError("need at least one snapshot")
    r = values @ values.conj().T / p
    # exact Hermitian symmetry regardless of BLAS rounding
    return 0.5 * (r + r.conj().T)


def vectorize_and_denoise(r_hat_mat: NDArray, noise_power: float) -> CovarianceData:
    if noise_power < 0:
        raise ValueError("noise_power must be nonnegative")
    r_hat_mat = np.asarray(r_hat_mat, dtype=complex)
    nl = r_hat_mat.shape[0]
    r_hat = vec(r_hat_mat).copy()
    r_tilde = r_hat.copy()
    r_tilde[:: nl + 1] -= noise_power
    return CovarianceData(r_hat=r_hat, noise_power=float(noise_power), r_tilde=r_tilde)


def estimate_noise_power(r_hat_mat: NDArray, k_hat: int) -> float:
    """Average of the ``NL - k_hat`` smallest eigenvalues, clamped at zero."""
    r_hat_mat = np.asarray(r_hat_mat, dtype=complex)
    nl = r_hat_mat.shape[0]
    if not 1 <= k_hat < nl:
        raise ValueError(f"need 1 <= k_hat < {nl}, got {k_hat}")
    eig = np.linalg.eigvalsh(0.5 * (r_hat_mat + r_hat_mat.conj().T))
    return max(float(np.mean(eig[: nl - k_hat])), 0.0)


class LiftedOperator:
    """Matrix-free ``Gamma`` mapping ``vec(Q)`` to a vectorized covariance.

    ``forward(q)[n] = d_n^T Q k_n`` with ``d_n = kron(conj(B[b]), B[a])`` and
    ``k_n = conj(A_D[b]) * A_D[a]``. Evaluated as

        Y = sum_m diag(A_D[:, m]) B Z_m B^H diag(A_D[:, m])^H

    through two GEMMs, so the (NL)^2 x R^2 M matrix is never formed.
    """

    def __init__(self, basis: CalibrationBasis | NDArray, dictionary: NDArray):
        b = basis.matrix if isinstance(basis, CalibrationBasis) else np.asarray(basis)
        a = np.asarray(dictionary, dtype=complex)
        if b.ndim != 2 or a.ndim != 2:
            raise ValueError("basis and dictionary must be 2-D")
        if b.shape[0] != a.shape[0]:
            raise ValueError(
                f"basis has {b.shape[0]} rows but dictionary has {a.shape[0]}"
            )
        self.basis = np.asarray(b, dtype=complex)
        self.dictionary = a
        self.nl, self.R = self.basis.shape
        self.M = a.shape[1]
        # V[b, m, i] = A_D[b, m] * B[b, i]
        self._v = (a[:, :, None] * self.basis[:, None, :]).reshape(self.nl, -1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nl * self.nl, self.R * self.R * self.M

    @property
    def q_shape(self) -> tuple[int, int]:
        return self.R * self.R, self.M

    def forward(self, q: NDArray) -> NDArray[np.complex128]:
        """Apply ``Gamma`` to ``Q`` (R^2 x M matrix, or its column-major vec)."""
        q3 = self._as_q(q).reshape(self.R, self.R, self.M)
        # U[a, m, i] = A_D[a, m] * sum_j B[a, j] Q[i*R + j, m]
        u = np.einsum("aj,ijm->ami", self.basis, q3) * self.dictionary[:, :, None]
        y = u.reshape(self.nl, -1) @ self._v.conj().T
        return vec(y)

    def adjoint(self, y: NDArray) -> NDArray[np.complex128]:
        """Apply ``Gamma^H``; returns an R^2 x M matrix."""
        y = np.asarray(y, dtype=complex)
        if y.size != self.nl * self.nl:
            raise ValueError(f"expected {self.nl ** 2} entries, got {y.size}")
        t = (unvec(y.reshape(-1), self.nl) @ self._v).reshape(self.nl, self.M, self.R)
        t = t * self.dictionary.conj()[:, :, None]
        q3 = np.einsum("aj,ami->ijm", self.basis.conj(), t)
        return q3.reshape(self.R * self.R, self.M)

    def _as_q(self, q: NDArray) -> NDArray:
        q = np.asarray(q, dtype=complex)
        rr, m = self.q_shape
        if q.shape == (rr, m):
            return q
        if q.size == rr * m:
            return q.reshape(rr, m, order="F")
        raise ValueError(f"expected Q of shape {(rr, m)}, got {q.shape}")

    def row(self, n: int) -> NDArray[np.complex128]:
        """Row ``n`` of ``Gamma``, ``kron(k_n, d_n)``."""
        a, b = n % self.nl, n // self.nl
        d = np.kron(self.basis[b].conj(), self.basis[a])
        k = self.dictionary[b].conj() * self.dictionary[a]
        return np.kron(k, d)

    def to_dense(self) -> NDArray[np.complex128]:
        """Materialize ``Gamma``; only allowed for small operators."""
        rows, cols = self.shape
        if rows > DENSE_MAX_ROWS:
            raise ValueError(
                f"refusing to materialize {rows} rows (limit {DENSE_MAX_ROWS})"
            )
        d = np.einsum("bi,aj->abij", self.basis.conj(), self.basis)
        d = d.reshape(self.nl, self.nl, -1)
        k = self.dictionary.conj()[None, :, :] * self.dictionary[:, None, :]
        # rows indexed column-major over (a, b)
        dense = np.einsum("abr,abm->bamr", d, k)
        return dense.reshape(rows, cols)

    def norm_estimate(self, iters: int = 30, seed: int = 0) -> float:
        """Power-iteration estimate of the spectral norm."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.q_shape) + 1j * rng.standard_normal(self.q_shape)
        x /= np.linalg.norm(x)
        s = 0.0
        for _ in range(iters):
            x = self.adjoint(self.forward(x))
            s = np.linalg.norm(x)
            if s == 0:
                return 0.0
            x /= s
        return float(np.sqrt(s))


def build_lifted_operator(
    basis: CalibrationBasis | NDArray, dictionary: NDArray
) -> LiftedOperator:
    return LiftedOperator(basis, dictionary)


def lifted_residual(
    op: LiftedOperator, q: NDArray, cov: CovarianceData
) -> tuple[float, NDArray[np.complex128]]:
    """Residual ``r_tilde - Gamma q`` and its l2 norm."""
    res = cov.r_tilde - op.forward(q)
    return float(np.linalg.norm(res)), res
