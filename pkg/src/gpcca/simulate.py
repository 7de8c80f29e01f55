"""Synthetic three-modality, six-cluster data generator.

Each modality splits into informative features (1 part in 5, leading rows
of the block) whose distribution depends on the cluster, and noisy features
drawn independently of cluster membership. Informative features follow one
of two multivariate distributions f_u / f_v per (cluster, modality) cell of
a fixed 6 x 3 assignment table; their covariance is D * AR1(rho) * D with
feature scales D drawn from 4*Beta(1,1).

Cases:
  A  normal data, entry-wise missing completely at random
  B  multivariate/univariate t with 3 degrees of freedom, MCAR
  C  normal data, modality-wise missingness driven by a hidden variable
     (probability p if H_k >= 0, else 2p; full loss redrawn)
  D  normal data, MCAR, with a fraction of within-modality correlation
     entries swapped against zero cross-modality entries
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from .cluster import Partition
from .errors import DataError
from .model import ModalityLayout, ObservedDataset, validate_dataset

__all__ = ["SimSpec", "SimOutput", "ar1_correlation", "generate", "mvnormal_sample", "mvt_sample"]

logger = logging.getLogger(__name__)

# (cluster, modality) -> which of the two informative distributions applies
_ASSIGNMENT = (
    ("u", "u", "u"),
    ("v", "v", "u"),
    ("u", "v", "u"),
    ("v", "u", "v"),
    ("v", "u", "u"),
    ("u", "v", "v"),
)

_INFORMATIVE_SHARE = 5  # 1 informative : 4 noisy
_SWAP_FRACTION = 6  # 1/6 of within-modality correlation entries swap in Case D


@dataclass(frozen=True)
class SimSpec:
    """Scenario parameters for the synthetic generator."""

    case: str
    rho: float
    missing_rate: float = 0.0  # Cases A, B, D: entry-wise MCAR rate
    p: float | None = None  # Case C: baseline modality-missing probability
    dims: tuple[int, ...] = (60, 120, 180)
    cluster_size: int = 100
    clusters: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.case not in ("A", "B", "C", "D"):
            raise DataError(f"unknown simulation case {self.case!r}")
        if not (0.0 <= self.rho < 1.0):
            raise DataError("rho must lie in [0, 1)")
        if self.case == "C":
            if self.p is None or not (0.0 <= self.p < 0.5):
                raise DataError("Case C takes p in [0, 0.5)")
        else:
            if not (0.0 <= self.missing_rate < 1.0):
                raise DataError("missing rate must lie in [0, 1)")
        if len(self.dims) < 2 or any(d < _INFORMATIVE_SHARE for d in self.dims):
            raise DataError("every modality needs at least 5 features")
        if any(d % _INFORMATIVE_SHARE for d in self.dims):
            raise DataError("modality sizes must be divisible by 5 (1:4 signal ratio)")
        if self.clusters != len(_ASSIGNMENT):
            raise DataError("the design table defines exactly 6 clusters")
        if self.cluster_size < 1:
            raise DataError("cluster size must be >= 1")

    @property
    def n(self) -> int:
        return self.clusters * self.cluster_size

    @property
    def informative_counts(self) -> tuple[int, ...]:
        return tuple(d // _INFORMATIVE_SHARE for d in self.dims)


@dataclass(frozen=True)
class SimOutput:
    dataset: ObservedDataset
    truth: Partition
    complete_values: np.ndarray  # stacked (m x n) values before masking
    hidden: np.ndarray | None  # Case C hidden variable H_k, else None
    n_redraws: int = 0


def ar1_correlation(size: int, rho: float) -> np.ndarray:
    """Order-1 autoregressive correlation matrix: entry (i,j) = rho^|i-j|."""
    if size < 1:
        raise DataError("size must be >= 1")
    if not (abs(rho) < 1.0):
        raise DataError("|rho| < 1 required")
    return toeplitz(rho ** np.arange(size, dtype=float))


def mvnormal_sample(mean, cov_cholesky, count: int, seed) -> np.ndarray:
    """Multivariate normal draws as columns: mu + L g with g standard normal."""
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    l = np.asarray(cov_cholesky, dtype=float)
    g = rng.standard_normal((mean.size, count))
    return mean[:, None] + l @ g


def mvt_sample(mean, cov_cholesky, dof: int = 3, count: int = 1, seed=None) -> np.ndarray:
    """Multivariate t draws via the scale-mixture construction:
    mu + L g / sqrt(chi2_dof / dof), one mixing draw per sample."""
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    l = np.asarray(cov_cholesky, dtype=float)
    g = rng.standard_normal((mean.size, count))
    u = rng.chisquare(dof, count)
    return mean[:, None] + (l @ g) / np.sqrt(u / dof)


def _informative_correlation(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    """Joint correlation of all informative features; block AR1 per modality,
    optionally with Case D within/cross swaps and SPD repair."""
    counts = spec.informative_counts
    total = sum(counts)
    corr = np.zeros((total, total))
    off = 0
    for c in counts:
        corr[off : off + c, off : off + c] = ar1_correlation(c, spec.rho)
        off += c
    if spec.case != "D":
        return corr

    within, cross = [], []
    offs = np.cumsum((0,) + counts)
    for r, c in enumerate(counts):
        a, b = offs[r], offs[r + 1]
        for i in range(a, b):
            for j in range(i + 1, b):
                within.append((i, j))
    for r1 in range(len(counts)):
        for r2 in range(r1 + 1, len(counts)):
            for i in range(offs[r1], offs[r1 + 1]):
                for j in range(offs[r2], offs[r2 + 1]):
                    cross.append((i, j))
    n_swap = len(within) // _SWAP_FRACTION
    pick_w = rng.choice(len(within), size=n_swap, replace=False)
    pick_c = rng.choice(len(cross), size=n_swap, replace=False)
    for wi, ci in zip(pick_w, pick_c):
        i, j = within[wi]
        a, b = cross[ci]
        corr[a, b] = corr[b, a] = corr[i, j]
        corr[i, j] = corr[j, i] = 0.0

    try:
        np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        eigval, eigvec = np.linalg.eigh(corr)
        eigval = np.maximum(eigval, 1e-8)
        corr = (eigvec * eigval) @ eigvec.T
        corr = (corr + corr.T) / 2.0
        logger.info("Case D correlation projected to SPD (eigenvalue clipping)")
    return corr


def _mcar_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Entry-wise MCAR observation mask; redrawn wholesale if it would leave
    a sample empty or a feature observed fewer than twice."""
    if rate == 0.0:
        return np.ones(shape, dtype=bool)
    for _ in range(100):
        mask = rng.random(shape) >= rate
        if mask.any(axis=0).all() and (mask.sum(axis=1) >= 2).all():
            return mask
    raise DataError("could not draw a valid MCAR mask; rate too high for shape")


def _modality_mask(spec: SimSpec, rng: np.random.Generator):
    """Case C mask: whole modalities drop per sample with probability p
    (H_k >= 0) or 2p (H_k < 0); full-loss draws are redrawn."""
    n = spec.n
    nmod = len(spec.dims)
    hidden = rng.standard_normal(n)
    prob = np.where(hidden >= 0.0, spec.p, 2.0 * spec.p)
    drops = np.zeros((n, nmod), dtype=bool)
    redraws = 0
    for k in range(n):
        while True:
            d = rng.random(nmod) < prob[k]
            if not d.all():
                drops[k] = d
                break
            redraws += 1
    if redraws:
        logger.info("Case C: redrew %d full-loss samples", redraws)
    mask = np.ones((sum(spec.dims), n), dtype=bool)
    off = 0
    for r, m_r in enumerate(spec.dims):
        mask[off : off + m_r][:, drops[:, r]] = False
        off += m_r
    return mask, hidden, redraws


def generate(spec: SimSpec) -> SimOutput:
    """Draw one synthetic dataset according to ``spec``.

    Informative rows lead each modality block. Cluster c occupies sample
    columns [c*cluster_size, (c+1)*cluster_size).
    """
    rng = np.random.default_rng(spec.seed)
    counts = spec.informative_counts
    heavy_tailed = spec.case == "B"

    mu_u, mu_v, scales = [], [], []
    for c in counts:
        mu_u.append(rng.uniform(1.0, 2.0, size=c))
        mu_v.append(rng.uniform(-2.0, -1.0, size=c))
        scales.append(4.0 * rng.beta(1.0, 1.0, size=c))

    corr = _informative_correlation(spec, rng)
    d_scale = np.concatenate(scales)
    sigma_joint = corr * np.outer(d_scale, d_scale)
    chol_joint = np.linalg.cholesky(sigma_joint)
    offs = np.cumsum((0,) + counts)
    chol_per_mod = None
    if heavy_tailed:
        chol_per_mod = [
            np.linalg.cholesky(sigma_joint[offs[r] : offs[r + 1], offs[r] : offs[r + 1]])
            for r in range(len(counts))
        ]

    n = spec.n
    informative = np.zeros((sum(counts), n))
    for c, pattern in enumerate(_ASSIGNMENT):
        cols = slice(c * spec.cluster_size, (c + 1) * spec.cluster_size)
        mean = np.concatenate(
            [mu_u[r] if pattern[r] == "u" else mu_v[r] for r in range(len(counts))]
        )
        if heavy_tailed:
            for r in range(len(counts)):
                informative[offs[r] : offs[r + 1], cols] = mvt_sample(
                    mean[offs[r] : offs[r + 1]],
                    chol_per_mod[r],
                    dof=3,
                    count=spec.cluster_size,
                    seed=rng,
                )
        else:
            informative[:, cols] = mvnormal_sample(
                mean, chol_joint, spec.cluster_size, rng
            )

    blocks = []
    for r, m_r in enumerate(spec.dims):
        n_noise = m_r - counts[r]
        if heavy_tailed:
            noise = rng.standard_t(3, size=(n_noise, n))
        else:
            noise = rng.standard_normal((n_noise, n))
        blocks.append(np.vstack([informative[offs[r] : offs[r + 1]], noise]))
    complete = np.vstack(blocks)

    hidden = None
    redraws = 0
    if spec.case == "C":
        mask, hidden, redraws = _modality_mask(spec, rng)
    else:
        mask = _mcar_mask(complete.shape, spec.missing_rate, rng)

    layout = ModalityLayout(tuple(spec.dims))
    dataset = validate_dataset(np.where(mask, complete, 0.0), mask, layout)
    truth = Partition(np.repeat(np.arange(spec.clusters), spec.cluster_size))
    return SimOutput(
        dataset=dataset,
        truth=truth,
        complete_values=complete,
        hidden=hidden,
        n_redraws=redraws,
    )
