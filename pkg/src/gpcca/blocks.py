"""Block-structured dense linear algebra used by the EM engine.

The error covariance is block diagonal by modality, so factorizations,
solves and log-determinants decompose into independent per-block
operations; nothing here ever assembles the full (m x m) matrix.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DataError, DegenerateCovarianceError
from .model import ModalityLayout

__all__ = ["BlockSpd", "block_solve", "woodbury_posterior", "block_logdet", "bdiag_project"]


class BlockSpd:
    """A block-diagonal SPD matrix with cached per-block Cholesky factors."""

    def __init__(self, blocks):
        self.blocks = [np.ascontiguousarray(b, dtype=float) for b in blocks]
        self.sizes = tuple(b.shape[0] for b in self.blocks)
        self._factors = []
        for r, b in enumerate(self.blocks):
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise DataError(f"block {r + 1} is not square")
            if b.shape[0] == 0:
                self._factors.append(None)
                continue
            try:
                self._factors.append(cho_factor(b, lower=True, check_finite=False))
            except np.linalg.LinAlgError:
                raise DegenerateCovarianceError(
                    f"covariance degenerate: block {r + 1} is not positive definite"
                ) from None

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    def slices(self) -> list[slice]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(slice(acc, acc + s))
            acc += s
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros((self.total, self.total))
        for sl, b in zip(self.slices(), self.blocks):
            out[sl, sl] = b
        return out

    def diagonal(self) -> np.ndarray:
        return np.concatenate([np.diag(b) for b in self.blocks])

    def cholesky_factor(self, r: int):
        """The cached scipy (c, lower) factor pair of block ``r``."""
        return self._factors[r]


def block_solve(psi: BlockSpd, rhs: np.ndarray) -> np.ndarray:
    """Solve psi @ x = rhs blockwise, without forming the inverse."""
    rhs = np.asarray(rhs, dtype=float)
    one_d = rhs.ndim == 1
    if one_d:
        rhs = rhs[:, None]
    if rhs.shape[0] != psi.total:
        raise DataError("rhs row count does not match block sizes")
    out = np.empty_like(rhs)
    for sl, fac in zip(psi.slices(), psi._factors):
        if fac is None:
            continue
        out[sl] = cho_solve(fac, rhs[sl], check_finite=False)
    return out[:, 0] if one_d else out


def woodbury_posterior(w_partial: np.ndarray, psi_partial: BlockSpd):
    """Posterior covariance of the latent variables for one observation mask.

    Returns ``(M, half)`` with M = (I + WᵀΨ⁻¹W)⁻¹ (the d x d posterior
    covariance) and half = M Wᵀ Ψ⁻¹ so that the posterior mean of a sample
    with centered observed vector r is ``half @ r``.
    """
    w_partial = np.asarray(w_partial, dtype=float)
    if w_partial.ndim != 2:
        raise DataError("partial loadings must be 2-d")
    d = w_partial.shape[1]
    if d < 1:
        raise DataError("latent dimension must be >= 1")
    y = block_solve(psi_partial, w_partial)  # Ψ⁻¹ W
    a = np.eye(d) + w_partial.T @ y
    try:
        fac = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("covariance degenerate") from None
    m = cho_solve(fac, np.eye(d), check_finite=False)
    m = (m + m.T) / 2.0
    half = cho_solve(fac, y.T, check_finite=False)
    return m, half


def block_logdet(psi: BlockSpd) -> float:
    """log-determinant as the sum of per-block Cholesky log-determinants."""
    total = 0.0
    for fac in psi._factors:
        if fac is None:
            continue
        total += 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
    return total


def bdiag_project(g: np.ndarray, layout: ModalityLayout) -> list[np.ndarray]:
    """Project a square matrix onto the block-diagonal support of Ψ.

    Keeps within-block entries, drops everything else, and symmetrizes each
    block as (B + Bᵀ)/2. Returns the list of blocks.
    """
    g = np.asarray(g, dtype=float)
    m = layout.total
    if g.shape != (m, m):
        raise DataError(f"matrix shape {g.shape} does not match layout total {m}")
    out = []
    for sl in layout.block_slices():
        b = g[sl, sl]
        out.append((b + b.T) / 2.0)
    return out
