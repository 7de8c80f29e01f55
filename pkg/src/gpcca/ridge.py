"""Ridge estimators of the error correlation and covariance matrices.

The error covariance factorizes as Ψ = Ψ_d^{1/2} R Ψ_d^{1/2} with Ψ_d its
diagonal and R the error correlation matrix. Shrinking R toward the
identity, R_ridge = λR + (1-λ)I, is equivalent on the covariance scale to
inflating the diagonal, Ψ_ridge = Ψ + (1/λ - 1)Ψ_d. The matching penalty
added to the monitored objective is -(c/2)tr(R⁻¹) with c = n(1-λ).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .blocks import BlockSpd
from .errors import DataError, DegenerateCovarianceError

__all__ = [
    "RidgeSpec",
    "correlation_decompose",
    "ridge_correlation",
    "ridge_covariance",
    "ridge_penalty",
]


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (0.0 < lam <= 1.0):
        raise DataError("ridge lambda must lie in (0, 1]")
    return lam


@dataclass(frozen=True)
class RidgeSpec:
    """Shrinkage weight λ ∈ (0, 1] and the induced penalty weight c = n(1-λ).

    λ = 1 (c = 0) is the unpenalized maximum-likelihood limit.
    """

    lam: float
    n: int

    def __post_init__(self):
        object.__setattr__(self, "lam", _check_lambda(self.lam))
        if self.n < 1:
            raise DataError("sample count must be >= 1")

    @property
    def c(self) -> float:
        return self.n * (1.0 - self.lam)


def correlation_decompose(psi: BlockSpd):
    """Split Ψ into its diagonal Ψ_d and correlation matrix R.

    Returns ``(psi_d, r)`` where ``psi_d`` is the concatenated positive
    diagonal and ``r`` is a unit-diagonal BlockSpd with
    Ψ = Ψ_d^{1/2} R Ψ_d^{1/2}.
    """
    psi_d = psi.diagonal()
    if psi_d.min(initial=np.inf) <= 0.0:
        raise DegenerateCovarianceError("non-positive covariance diagonal entry")
    r_blocks = []
    for b in psi.blocks:
        s = np.sqrt(np.diag(b))
        r_blocks.append(b / np.outer(s, s))
    return psi_d, BlockSpd(r_blocks)


def ridge_correlation(r_hat: np.ndarray, lam: float) -> np.ndarray:
    """Shrink a correlation matrix toward the identity: λR + (1-λ)I."""
    lam = _check_lambda(lam)
    r_hat = np.asarray(r_hat, dtype=float)
    if r_hat.ndim != 2 or r_hat.shape[0] != r_hat.shape[1]:
        raise DataError("correlation matrix must be square")
    if np.abs(np.diag(r_hat) - 1.0).max(initial=0.0) > 1e-10:
        raise DataError("correlation matrix must have unit diagonal")
    if np.abs(r_hat - r_hat.T).max(initial=0.0) > 1e-10:
        raise DataError("correlation matrix must be symmetric")
    out = lam * r_hat + (1.0 - lam) * np.eye(r_hat.shape[0])
    np.fill_diagonal(out, 1.0)
    return out


def ridge_covariance(psi_hat: BlockSpd, lam: float) -> BlockSpd:
    """Diagonal-inflated covariance: Ψ + (1/λ - 1)Ψ_d, blockwise."""
    lam = _check_lambda(lam)
    bump = 1.0 / lam - 1.0
    out = []
    for b in psi_hat.blocks:
        b = b.copy()
        b[np.diag_indices_from(b)] *= 1.0 + bump
        out.append(b)
    return BlockSpd(out)


def ridge_penalty(r: BlockSpd, c: float) -> float:
    """Penalty term -(c/2) tr(R⁻¹), via blockwise Cholesky solves.

    For a Cholesky factor L of a block, tr(block⁻¹) = ||L⁻¹||_F².
    """
    c = float(c)
    if c < 0.0:
        raise DataError("penalty weight c must be >= 0")
    if c == 0.0:
        return 0.0
    trace = 0.0
    for idx, b in enumerate(r.blocks):
        if b.shape[0] == 0:
            continue
        fac = r.cholesky_factor(idx)
        linv = solve_triangular(
            fac[0], np.eye(b.shape[0]), lower=True, check_finite=False
        )
        trace += float(np.sum(linv * linv))
    return -0.5 * c * trace
