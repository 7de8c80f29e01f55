"""Domain types for masked multi-modality data and model parameters.

Conventions used throughout the package: features are rows and samples are
columns, so a dataset stacking R modalities with m_1..m_R features over n
samples is an (m x n) matrix with m = sum(m_r). Entries flagged as missing
by the mask are stored as 0 and must never be read directly; every
algorithm consults the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateCovarianceError

__all__ = [
    "ModalityLayout",
    "ObservedDataset",
    "ModelParams",
    "LatentPosterior",
    "FitReport",
    "validate_dataset",
    "stack_modalities",
]

_SYM_TOL = 1e-10


@dataclass(frozen=True)
class ModalityLayout:
    """Feature layout of stacked modalities: per-modality sizes and offsets."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2:
            raise DataError("R >= 2 required: need at least two modalities")
        if any(s < 1 for s in sizes):
            raise DataError("empty modality: every modality needs >= 1 feature")

    @property
    def n_modalities(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return tuple(out)

    def block_slices(self) -> list[slice]:
        return [slice(o, o + s) for o, s in zip(self.offsets, self.sizes)]


@dataclass(frozen=True)
class ObservedDataset:
    """Stacked multi-modality matrix with an observation mask.

    ``values`` is (m x n) with zeros at unobserved positions, ``mask`` is the
    boolean (m x n) observation indicator. Construct through
    :func:`validate_dataset` or :func:`stack_modalities`.
    """

    values: np.ndarray
    mask: np.ndarray
    layout: ModalityLayout

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def observed_counts(self) -> np.ndarray:
        """Number of observed entries per sample, m_(k)."""
        return self.mask.sum(axis=0)

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())

    def blocks(self) -> list[np.ndarray]:
        """Per-modality value matrices (views into the stacked matrix)."""
        return [self.values[sl] for sl in self.layout.block_slices()]

    def block_masks(self) -> list[np.ndarray]:
        return [self.mask[sl] for sl in self.layout.block_slices()]


def validate_dataset(values, mask, layout: ModalityLayout) -> ObservedDataset:
    """Validate and normalize a masked dataset.

    Checks shapes against the layout, rejects samples with no observed entry,
    features observed in fewer than 2 samples and non-finite observed values,
    and zeroes out masked positions so downstream reads are deterministic.
    """
    values = np.array(values, dtype=float, copy=True)
    mask_arr = np.asarray(mask)
    if mask_arr.dtype != np.bool_:
        uniq = np.unique(mask_arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise DataError("mask entries must be 0 or 1")
        mask_arr = mask_arr.astype(bool)
    mask_arr = np.array(mask_arr, copy=True)

    if values.ndim != 2 or mask_arr.shape != values.shape:
        raise DataError("values and mask must be 2-d arrays of equal shape")
    m, n = values.shape
    if layout.total != m:
        raise DataError(
            f"layout total {layout.total} does not match feature count {m}"
        )
    if n < 2:
        raise DataError("need at least 2 samples")

    obs_per_sample = mask_arr.sum(axis=0)
    bad = np.flatnonzero(obs_per_sample == 0)
    if bad.size:
        raise DataError(f"sample {bad[0] + 1} has no observed entries")
    obs_per_feature = mask_arr.sum(axis=1)
    bad = np.flatnonzero(obs_per_feature == 0)
    if bad.size:
        raise DataError(f"feature {bad[0] + 1} has no observed entries")
    bad = np.flatnonzero(obs_per_feature < 2)
    if bad.size:
        raise DataError(
            f"feature {bad[0] + 1} is observed in fewer than 2 samples"
        )
    if not np.isfinite(values[mask_arr]).all():
        i, k = np.argwhere(mask_arr & ~np.isfinite(values))[0]
        raise DataError(
            f"non-finite observed value at feature {i + 1}, sample {k + 1}"
        )

    values[~mask_arr] = 0.0
    values.flags.writeable = False
    mask_arr.flags.writeable = False
    return ObservedDataset(values=values, mask=mask_arr, layout=layout)


def stack_modalities(blocks, masks=None) -> ObservedDataset:
    """Row-concatenate per-modality (m_r x n) matrices into one dataset.

    ``masks`` may be omitted, in which case non-finite entries (NaN) are
    treated as missing.
    """
    blocks = [np.asarray(b, dtype=float) for b in blocks]
    if len(blocks) < 2:
        raise DataError("R >= 2 required: need at least two modalities")
    if any(b.ndim != 2 for b in blocks):
        raise DataError("every modality must be a 2-d matrix")
    n = blocks[0].shape[1]
    if any(b.shape[1] != n for b in blocks):
        raise DataError("sample count mismatch across modalities")

    if masks is None:
        masks = [np.isfinite(b) for b in blocks]
    else:
        masks = [np.asarray(mk) for mk in masks]
        if len(masks) != len(blocks):
            raise DataError("one mask per modality required")
        if any(mk.shape != b.shape for mk, b in zip(masks, blocks)):
            raise DataError("mask shape mismatch with its modality")

    layout = ModalityLayout(tuple(b.shape[0] for b in blocks))
    values = np.vstack(blocks)
    mask = np.vstack([np.asarray(mk, dtype=bool) for mk in masks])
    values = np.where(mask, values, 0.0)
    return validate_dataset(values, mask, layout)


def _check_spd_block(block: np.ndarray, r: int) -> None:
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise DataError(f"covariance block {r + 1} is not square")
    scale = max(1.0, float(np.abs(block).max(initial=0.0)))
    if np.abs(block - block.T).max(initial=0.0) > _SYM_TOL * scale:
        raise DegenerateCovarianceError(
            f"covariance block {r + 1} is not symmetric"
        )
    try:
        np.linalg.cholesky(block)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError(
            f"covariance degenerate: block {r + 1} is not positive definite"
        ) from None


@dataclass(frozen=True)
class ModelParams:
    """Loadings, means, block-diagonal error covariance and ridge weight."""

    loadings: np.ndarray  # (m, d)
    means: np.ndarray  # (m,)
    psi_blocks: list[np.ndarray]  # one SPD (m_r, m_r) per modality
    layout: ModalityLayout
    ridge_lambda: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.loadings, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        blocks = [np.asarray(b, dtype=float) for b in self.psi_blocks]
        object.__setattr__(self, "loadings", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "psi_blocks", blocks)
        if w.ndim != 2:
            raise DataError("loadings must be an (m x d) matrix")
        m, d = w.shape
        if mu.shape != (m,):
            raise DataError("means length must match feature count")
        if self.layout.total != m:
            raise DataError("layout total does not match loading rows")
        sizes = self.layout.sizes
        if len(blocks) != len(sizes) or any(
            b.shape != (s, s) for b, s in zip(blocks, sizes)
        ):
            raise DataError("psi block shapes must match the layout")
        if not (1 <= d <= min(sizes)):
            raise DataError(
                f"latent dimension {d} out of range [1, {min(sizes)}]"
            )
        if not (0.0 < self.ridge_lambda <= 1.0):
            raise DataError("ridge lambda must lie in (0, 1]")
        if not (np.isfinite(w).all() and np.isfinite(mu).all()):
            raise DataError("non-finite parameter values")
        for r, b in enumerate(blocks):
            _check_spd_block(b, r)

    @property
    def d(self) -> int:
        return self.loadings.shape[1]

    @property
    def m(self) -> int:
        return self.loadings.shape[0]

    def psi_dense(self) -> np.ndarray:
        """Assemble the full block-diagonal error covariance (for small m)."""
        m = self.m
        out = np.zeros((m, m))
        for sl, b in zip(self.layout.block_slices(), self.psi_blocks):
            out[sl, sl] = b
        return out


_POSTERIOR_EIG_SLACK = 1e-8


@dataclass(frozen=True)
class LatentPosterior:
    """Per-sample posterior of the latent variables given observed entries.

    ``means`` is (d x n); ``covariances`` is (n x d x d), one posterior
    covariance matrix per sample. Posterior covariances can never be wider
    than the standard-normal prior, so every eigenvalue is in (0, 1].
    """

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covariances, dtype=float)
        object.__setattr__(self, "means", z)
        object.__setattr__(self, "covariances", c)
        if z.ndim != 2:
            raise DataError("posterior means must be (d x n)")
        d, n = z.shape
        if c.shape != (n, d, d):
            raise DataError("posterior covariances must be (n x d x d)")
        scale = max(1.0, float(np.abs(c).max(initial=0.0)))
        if np.abs(c - np.transpose(c, (0, 2, 1))).max(initial=0.0) > 1e-8 * scale:
            raise DataError("posterior covariance not symmetric")
        eig = np.linalg.eigvalsh(c)
        if eig.min(initial=np.inf) <= 0.0:
            raise DegenerateCovarianceError("posterior covariance not positive definite")
        if eig.max(initial=-np.inf) > 1.0 + _POSTERIOR_EIG_SLACK:
            raise DataError("posterior covariance wider than the prior")

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def d(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class FitReport:
    """Outcome of one EM run.

    ``loglik_trace`` holds the monitored objective (penalized observed-data
    log-likelihood, one value per parameter state visited);
    ``loglik_trace_unpenalized`` drops the ridge penalty term. At
    ridge_lambda = 1 the trace is provably non-decreasing (exact EM); for
    lambda < 1 the per-step diagonal inflation is a shrinkage step rather
    than a maximizer of the penalized surrogate, and the trace can dip even
    though the iteration converges.
    """

    loglik_trace: np.ndarray
    loglik_trace_unpenalized: np.ndarray
    iterations: int
    converged: bool
    final_params: ModelParams
    posterior: LatentPosterior

    def __post_init__(self):
        t = np.asarray(self.loglik_trace, dtype=float)
        u = np.asarray(self.loglik_trace_unpenalized, dtype=float)
        object.__setattr__(self, "loglik_trace", t)
        object.__setattr__(self, "loglik_trace_unpenalized", u)
        if t.ndim != 1 or t.shape != u.shape or t.size == 0:
            raise DataError("traces must be equal-length non-empty vectors")
        if not np.isfinite(t).all():
            raise DataError("non-finite log-likelihood trace")

    @property
    def final_loglik(self) -> float:
        return float(self.loglik_trace[-1])
