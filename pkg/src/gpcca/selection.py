"""Consensus-based selection of the latent dimension.

For each candidate dimension the model is fit from B random starts, each
embedding is clustered, and the B label vectors are summarized by an n x n
consensus matrix C of co-clustering fractions. The consensus score
H = sum_{i<j} C_ij log2(C_ij) is 0 exactly when all B runs induce the same
partition and negative otherwise; the candidate with the largest score
wins. Within the winning candidate, the initialization whose binary
connectivity matrix is closest to the consensus (smallest RMSE over the
upper triangle) is selected.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .cluster import knn_graph, louvain
from .em import EmConfig, fit
from .errors import DataError, NumericalError
from .model import FitReport, ObservedDataset

__all__ = [
    "CandidateResult",
    "consensus_matrix",
    "consensus_score",
    "init_rmse",
    "select_latent_dim",
    "derive_seed",
]

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed from a base seed and integer key path."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1)[0])


def consensus_matrix(labels: np.ndarray) -> np.ndarray:
    """Co-clustering fractions: C_ij = #{b : labels[i,b] == labels[j,b]} / B."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] < 1:
        raise DataError("labels must be an (n x B) matrix with B >= 1")
    n, b = labels.shape
    c = np.zeros((n, n))
    for col in range(b):
        lab = labels[:, col]
        c += lab[:, None] == lab[None, :]
    return c / b


def consensus_score(c: np.ndarray) -> float:
    """H = sum_{i<j} C_ij log2(C_ij), with 0*log2(0) = 0; at most 0."""
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError("consensus matrix must be square")
    if c.min(initial=0.0) < 0.0 or c.max(initial=0.0) > 1.0 + 1e-12:
        raise DataError("consensus entries must lie in [0, 1]")
    iu = np.triu_indices(c.shape[0], k=1)
    vals = c[iu]
    pos = vals > 0.0
    return float(np.sum(vals[pos] * np.log2(vals[pos])))


def init_rmse(connectivity: np.ndarray, consensus: np.ndarray) -> float:
    """RMSE between one run's binary connectivity and the consensus, over
    the strict upper triangle."""
    connectivity = np.asarray(connectivity, dtype=float)
    consensus = np.asarray(consensus, dtype=float)
    if connectivity.shape != consensus.shape or connectivity.ndim != 2:
        raise DataError("connectivity and consensus shapes must match")
    n = connectivity.shape[0]
    if n < 2:
        raise DataError("need at least 2 samples")
    iu = np.triu_indices(n, k=1)
    diff = connectivity[iu] - consensus[iu]
    return float(np.sqrt(2.0 / (n * (n - 1)) * np.sum(diff * diff)))


def _connectivity(labels: np.ndarray) -> np.ndarray:
    lab = np.asarray(labels)
    return (lab[:, None] == lab[None, :]).astype(float)


def _pick_candidate(scores) -> int:
    """Index of the largest score; ties resolve to the earliest (smallest d)."""
    scores = np.asarray(scores, dtype=float)
    if not np.isfinite(scores).any():
        raise NumericalError("every candidate dimension was disqualified")
    return int(np.nanargmax(np.where(np.isfinite(scores), scores, -np.inf)))


@dataclass
class CandidateResult:
    """Per-candidate consensus diagnostics.

    For non-winning candidates the memory-heavy n x n matrices are released
    (set to None); scores, labels and fit reports persist.
    """

    d: int
    labels: np.ndarray | None  # (n, B_successful)
    init_indices: list  # original b indices of successful fits
    consensus: np.ndarray | None
    score: float
    connectivity: list | None  # per successful fit, n x n binary
    rmse: np.ndarray | None  # per successful fit
    fits: list  # FitReport or None per original init index
    disqualified: bool = False


def _fit_one(data, d, b, config: EmConfig):
    cfg = replace(config, seed=derive_seed(config.seed, d, b))
    return fit(data, d, cfg)


def select_latent_dim(
    data: ObservedDataset,
    candidates,
    inits: int,
    config: EmConfig,
    neighbors: int = 20,
    resolution: float = 0.8,
    workers: int = 1,
):
    """Choose the latent dimension by consensus over multi-start fits.

    Runs ``inits`` seeded fits per candidate (seeds derived from
    ``config.seed`` and the init index), clusters each fit's own
    posterior-mean embedding, scores the stability of the resulting
    partitions, and picks argmax score (ties toward the smaller dimension)
    plus the initialization with the smallest connectivity RMSE (ties toward
    the smaller index). Candidates with at least half of their fits failing
    numerically are disqualified.

    Returns ``(chosen_d, chosen_init_index, results)``.
    """
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise DataError("need at least one candidate dimension")
    if any(b >= a for a, b in zip(candidates[1:], candidates)):
        raise DataError("candidate dimensions must be strictly increasing")
    if candidates[-1] > min(data.layout.sizes):
        raise DataError("candidate dimension exceeds the smallest modality size")
    if inits < 2:
        raise DataError("B >= 2 required: need at least two initializations")

    k_eff = min(neighbors, data.n - 1)
    results: list[CandidateResult] = []
    for d in candidates:
        fits: list[FitReport | None] = [None] * inits
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {
                    b: pool.submit(_fit_one, data, d, b, config) for b in range(inits)
                }
            for b, fut in futures.items():
                try:
                    fits[b] = fut.result()
                except NumericalError as exc:
                    logger.warning("fit failed for d=%d init=%d: %s", d, b, exc)
        else:
            for b in range(inits):
                try:
                    fits[b] = _fit_one(data, d, b, config)
                except NumericalError as exc:
                    logger.warning("fit failed for d=%d init=%d: %s", d, b, exc)

        ok = [b for b in range(inits) if fits[b] is not None]
        n_failed = inits - len(ok)
        if n_failed * 2 >= inits:
            results.append(
                CandidateResult(
                    d=d,
                    labels=None,
                    init_indices=ok,
                    consensus=None,
                    score=float("-inf"),
                    connectivity=None,
                    rmse=None,
                    fits=fits,
                    disqualified=True,
                )
            )
            continue

        label_cols = []
        for b in ok:
            graph = knn_graph(fits[b].posterior.means, k_eff)
            part = louvain(
                graph, resolution=resolution, seed=derive_seed(config.seed, d, b, 1)
            )
            label_cols.append(part.labels)
        labels = np.stack(label_cols, axis=1)
        consensus = consensus_matrix(labels)
        score = consensus_score(consensus)
        connectivity = [_connectivity(labels[:, j]) for j in range(labels.shape[1])]
        rmse = np.array([init_rmse(cb, consensus) for cb in connectivity])
        results.append(
            CandidateResult(
                d=d,
                labels=labels,
                init_indices=ok,
                consensus=consensus,
                score=score,
                connectivity=connectivity,
                rmse=rmse,
                fits=fits,
            )
        )

    win = _pick_candidate([r.score for r in results])
    winner = results[win]
    chosen_init = winner.init_indices[int(np.argmin(winner.rmse))]
    for r in results:
        if r is not winner:
            r.consensus = None
            r.connectivity = None
    return winner.d, chosen_init, results
