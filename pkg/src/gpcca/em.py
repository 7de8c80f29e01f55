"""EM estimation of the latent factor model on masked multi-modality data.

Model: x_k = W z_k + mu + eps_k with z_k ~ N(0, I_d) and eps_k ~ N(0, Psi),
Psi block diagonal by modality. Each sample k may have an arbitrary subset
of observed entries; the E-step conditions on exactly those entries and the
M-step performs sequential conditional maximization of the expected
complete-data log-likelihood, with ridge shrinkage of the error
correlation matrix (off-diagonals scaled by lambda) applied inside every
M-step.

All per-sample E-step quantities derive from the Woodbury posterior matrix
M_k = (I + W_oᵀ Psi_oo⁻¹ W_o)⁻¹; the observed-data likelihood uses the
matrix-determinant lemma ln|W_o W_oᵀ + Psi_oo| = ln|Psi_oo| - ln|M_k|, so
the (m_(k) x m_(k)) marginal covariance is never assembled.

Missing entries that share a correlated Psi block with observed entries
also receive information through the residuals. With
T = Psi_oo⁻¹ Psi_om, What = W_m - Tᵀ W_o and Psihat = Psi_mm - Psi_mo T,
the conditional moments are

    E(x_m | x_o)      = mu_m + Tᵀ r_o + What E(z | x_o)
    cov(x_m, z | x_o) = What M_k
    cov(x_m | x_o)    = What M_k Whatᵀ + Psihat

which reduce to the familiar factor-model expressions whenever a sample's
missingness never splits a correlated block.

Two interchangeable E-step kernels cover the two missingness regimes:

* grouped   — samples are grouped by identical mask columns; each group
              shares one restricted Cholesky and one posterior covariance.
              Fast when few distinct patterns exist (complete data,
              modality-wise missingness).
* scattered — per-block batched computation driven by the inverse-side
              identity (Psi_oo)⁻¹ = Lam_oo - Lam_om Lam_mm⁻¹ Lam_mo with
              Lam = Psi⁻¹, so the per-sample factorizations are of size
              (number missing) instead of (number observed). Fast for
              entry-wise missingness at moderate rates.

Both produce identical statistics up to floating-point roundoff.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .blocks import BlockSpd, block_logdet, block_solve
from .errors import (
    DataError,
    DegenerateCovarianceError,
    NumericalError,
    SingularMomentError,
)
from .model import (
    FitReport,
    LatentPosterior,
    ModalityLayout,
    ModelParams,
    ObservedDataset,
)
from .ridge import RidgeSpec, correlation_decompose, ridge_penalty

__all__ = [
    "EmConfig",
    "EStepBuffers",
    "init_params",
    "e_step",
    "m_step",
    "fit",
    "fit_complete",
    "transform",
    "impute",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class EmConfig:
    """Iteration controls, ridge weight, seeding and kernel selection."""

    max_iterations: int = 1000
    rel_tolerance: float = 1e-6
    ridge_lambda: float = 0.5
    seed: int = 0
    init_strategy: str = "random-orthonormal"
    estep_mode: str = "auto"  # auto | grouped | scattered
    update_order: str = "sequential"  # sequential | simultaneous

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DataError("max_iterations must be >= 1")
        if not (self.rel_tolerance > 0.0):
            raise DataError("rel_tolerance must be > 0")
        if not (0.0 < self.ridge_lambda <= 1.0):
            raise DataError("ridge lambda must lie in (0, 1]")
        if self.init_strategy not in ("random-orthonormal", "mean-imputed-svd"):
            raise DataError(f"unknown init strategy {self.init_strategy!r}")
        if self.estep_mode not in ("auto", "grouped", "scattered"):
            raise DataError(f"unknown estep mode {self.estep_mode!r}")
        if self.update_order not in ("sequential", "simultaneous"):
            raise DataError(f"unknown update order {self.update_order!r}")


@dataclass
class EStepBuffers:
    """Conditional expectations from one E-step.

    Per-sample latent moments and the completed data matrix are stored
    densely; the cross and second moments are kept as the accumulated sums
    the M-step consumes, with per-sample accessors that reconstruct the full
    matrices on demand (intended for inspection and testing at small m).
    """

    data: ObservedDataset
    params: ModelParams
    z_mean: np.ndarray  # (d, n)
    z_cov: np.ndarray  # (n, d, d), posterior covariance per sample
    completed: np.ndarray  # (m, n), E(x_k | observed)
    sum_z: np.ndarray  # (d,)
    sum_zz: np.ndarray  # (d, d)
    sum_xz: np.ndarray  # (m, d)
    sum_xx_blocks: list  # per modality (m_r, m_r)
    loglik: float  # penalized observed-data log-likelihood
    loglik_unpenalized: float

    def z_second_moment(self, k: int) -> np.ndarray:
        z = self.z_mean[:, k]
        return self.z_cov[k] + np.outer(z, z)

    def cross_moment(self, k: int) -> np.ndarray:
        """E(x_k z_kᵀ | observed) as an (m, d) matrix."""
        z = self.z_mean[:, k]
        out = np.outer(self.completed[:, k], z)
        obs = self.data.mask[:, k]
        for sl, cond in zip(
            self.data.layout.block_slices(), _sample_conditionals(self.data, self.params, k)
        ):
            if cond is None:
                continue
            miss_idx, what, _, _ = cond
            out[sl][miss_idx] += what @ self.z_cov[k]
        return out

    def second_moment_blocks(self, k: int) -> list:
        """E(x_k x_kᵀ | observed) restricted to the block support of Psi."""
        out = []
        x = self.completed[:, k]
        for sl, cond in zip(
            self.data.layout.block_slices(), _sample_conditionals(self.data, self.params, k)
        ):
            xb = x[sl]
            blk = np.outer(xb, xb)
            if cond is not None:
                miss_idx, what, psihat, _ = cond
                blk[np.ix_(miss_idx, miss_idx)] += what @ self.z_cov[k] @ what.T + psihat
            out.append(blk)
        return out


def _sample_conditionals(data: ObservedDataset, params: ModelParams, k: int):
    """Per-block conditional-residual pieces (miss_idx, What, Psihat, shift)
    for sample k; None for fully observed blocks."""
    out = []
    for sl, psi_b in zip(data.layout.block_slices(), params.psi_blocks):
        obs = data.mask[sl, k]
        miss_idx = np.flatnonzero(~obs)
        if miss_idx.size == 0:
            out.append(None)
            continue
        obs_idx = np.flatnonzero(obs)
        w_m = params.loadings[sl][miss_idx]
        if obs_idx.size == 0:
            out.append((miss_idx, w_m, psi_b[np.ix_(miss_idx, miss_idx)], np.zeros(miss_idx.size)))
            continue
        fac = cho_factor(psi_b[np.ix_(obs_idx, obs_idx)], lower=True, check_finite=False)
        t = cho_solve(fac, psi_b[np.ix_(obs_idx, miss_idx)], check_finite=False)
        what = w_m - t.T @ params.loadings[sl][obs_idx]
        psihat = psi_b[np.ix_(miss_idx, miss_idx)] - psi_b[np.ix_(miss_idx, obs_idx)] @ t
        resid = data.values[sl, k][obs_idx] - params.means[sl][obs_idx]
        shift = t.T @ resid
        out.append((miss_idx, what, psihat, shift))
    return out


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_params(data: ObservedDataset, d: int, config: EmConfig) -> ModelParams:
    """Initial parameters: observed means, floored observed variances on the
    Psi diagonal, and loadings per the configured strategy."""
    sizes = data.layout.sizes
    if not (1 <= d <= min(sizes)):
        raise DataError(f"latent dimension {d} out of range [1, {min(sizes)}]")

    nobs = data.mask.sum(axis=1).astype(float)
    mu = data.values.sum(axis=1) / nobs
    sq = (data.values**2).sum(axis=1)
    var = (sq - nobs * mu**2) / (nobs - 1.0)
    var = np.maximum(var, 0.0)
    if (var < _VAR_FLOOR).any():
        warnings.warn(
            "feature variance below floor; clamping Psi diagonal to 1e-6",
            stacklevel=2,
        )
    var = np.maximum(var, _VAR_FLOOR)
    sd = np.sqrt(var)

    rng = np.random.default_rng(config.seed)
    if config.init_strategy == "random-orthonormal":
        g = rng.standard_normal((data.m, d))
        q, _ = np.linalg.qr(g)
        w = q * sd[:, None]
    else:  # mean-imputed-svd
        xc = np.where(data.mask, data.values - mu[:, None], 0.0)
        u, s, _ = np.linalg.svd(xc, full_matrices=False)
        w = u[:, :d] * (s[:d] / np.sqrt(data.n))

    psi_blocks = [np.diag(var[sl]) for sl in data.layout.block_slices()]
    return ModelParams(
        loadings=w,
        means=mu,
        psi_blocks=psi_blocks,
        layout=data.layout,
        ridge_lambda=config.ridge_lambda,
    )


# ---------------------------------------------------------------------------
# E-step kernels
# ---------------------------------------------------------------------------


class _Stats:
    """Raw kernel output prior to penalty bookkeeping."""

    __slots__ = (
        "z_mean",
        "z_cov",
        "completed",
        "sum_z",
        "sum_zz",
        "sum_xz",
        "sum_xx_blocks",
        "loglik_obs",
    )

    def __init__(self, m, n, d, n_blocks):
        self.z_mean = np.zeros((d, n))
        self.z_cov = np.zeros((n, d, d))
        self.completed = np.zeros((m, n))
        self.sum_z = np.zeros(d)
        self.sum_zz = np.zeros((d, d))
        self.sum_xz = np.zeros((m, d))
        self.sum_xx_blocks = [None] * n_blocks
        self.loglik_obs = 0.0


def _finalize_base_sums(stats: _Stats, layout: ModalityLayout):
    """Outer-product parts of the moment sums, shared by all kernels."""
    stats.sum_z = stats.z_mean.sum(axis=1)
    stats.sum_zz = stats.z_cov.sum(axis=0) + stats.z_mean @ stats.z_mean.T
    stats.sum_xz += stats.completed @ stats.z_mean.T
    for r, sl in enumerate(layout.block_slices()):
        xb = stats.completed[sl]
        base = xb @ xb.T
        if stats.sum_xx_blocks[r] is None:
            stats.sum_xx_blocks[r] = base
        else:
            stats.sum_xx_blocks[r] += base


def _estep_complete(data: ObservedDataset, params: ModelParams, psi: BlockSpd) -> _Stats:
    """Fast path for fully observed data: one shared posterior covariance."""
    m, n = data.values.shape
    d = params.d
    w = params.loadings
    stats = _Stats(m, n, d, data.layout.n_modalities)

    xc = data.values - params.means[:, None]
    y = block_solve(psi, w)  # Psi⁻¹ W
    a = np.eye(d) + w.T @ y
    try:
        fac = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("covariance degenerate") from None
    m_post = cho_solve(fac, np.eye(d), check_finite=False)
    m_post = (m_post + m_post.T) / 2.0

    u = y.T @ xc  # Wᵀ Psi⁻¹ (x - mu), (d, n)
    ez = cho_solve(fac, u, check_finite=False)
    quad = np.einsum("ik,ik->k", xc, block_solve(psi, xc)) - np.einsum(
        "dk,dk->k", u, ez
    )
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
    ld = block_logdet(psi) + logdet_a
    stats.loglik_obs = -0.5 * (n * m * _LOG_2PI + n * ld + float(quad.sum()))

    stats.z_mean = ez
    stats.z_cov = np.broadcast_to(m_post, (n, d, d)).copy()
    stats.completed = np.array(data.values)
    _finalize_base_sums(stats, data.layout)
    return stats


def _estep_grouped(data: ObservedDataset, params: ModelParams, psi: BlockSpd) -> _Stats:
    """Group samples by identical mask columns; restricted solves per group."""
    m, n = data.values.shape
    d = params.d
    w = params.loadings
    mu = params.means
    slices = data.layout.block_slices()
    stats = _Stats(m, n, d, data.layout.n_modalities)
    xz_corr = np.zeros((m, d))
    xx_corr = [np.zeros((s, s)) for s in data.layout.sizes]

    patterns, inverse = _mask_patterns(data)

    for g in range(patterns.shape[1]):
        idx = np.flatnonzero(inverse == g)
        ng = idx.size
        obs_full = patterns[:, g]
        m_obs = int(obs_full.sum())

        c_sum = np.zeros((d, d))
        u_sum = np.zeros((d, ng))
        quad = np.zeros(ng)
        ld = 0.0
        conds = []  # per block: (r, local miss idx, What, Psihat, shift (mz, ng))

        for r, (sl, psi_b) in enumerate(zip(slices, psi.blocks)):
            obs_b = obs_full[sl]
            o_idx = np.flatnonzero(obs_b)
            z_idx = np.flatnonzero(~obs_b)
            w_b = w[sl]
            if o_idx.size == 0:
                if z_idx.size:
                    conds.append(
                        (
                            r,
                            z_idx,
                            w_b[z_idx],
                            psi_b[np.ix_(z_idx, z_idx)],
                            np.zeros((z_idx.size, ng)),
                        )
                    )
                continue
            try:
                fac = cho_factor(
                    psi_b[np.ix_(o_idx, o_idx)], lower=True, check_finite=False
                )
            except np.linalg.LinAlgError:
                raise DegenerateCovarianceError("covariance degenerate") from None
            resid = data.values[sl][o_idx][:, idx] - mu[sl][o_idx][:, None]
            w_o = w_b[o_idx]
            if z_idx.size:
                rhs = np.concatenate(
                    [w_o, resid, psi_b[np.ix_(o_idx, z_idx)]], axis=1
                )
            else:
                rhs = np.concatenate([w_o, resid], axis=1)
            sol = cho_solve(fac, rhs, check_finite=False)
            y = sol[:, :d]
            yr = sol[:, d : d + ng]
            c_sum += w_o.T @ y
            u_sum += y.T @ resid
            quad += np.einsum("ik,ik->k", resid, yr)
            ld += 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
            if z_idx.size:
                t = sol[:, d + ng :]
                what = w_b[z_idx] - t.T @ w_o
                psihat = psi_b[np.ix_(z_idx, z_idx)] - psi_b[np.ix_(z_idx, o_idx)] @ t
                shift = t.T @ resid
                conds.append((r, z_idx, what, psihat, shift))

        a = np.eye(d) + c_sum
        try:
            fac_a = cho_factor(a, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise DegenerateCovarianceError("covariance degenerate") from None
        m_post = cho_solve(fac_a, np.eye(d), check_finite=False)
        m_post = (m_post + m_post.T) / 2.0
        ez = cho_solve(fac_a, u_sum, check_finite=False)
        quad -= np.einsum("dk,dk->k", u_sum, ez)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(fac_a[0]))))
        stats.loglik_obs += -0.5 * (
            ng * m_obs * _LOG_2PI + ng * (ld + logdet_a) + float(quad.sum())
        )

        stats.z_mean[:, idx] = ez
        stats.z_cov[idx] = m_post
        cols = stats.completed[:, idx]
        cols[obs_full] = data.values[obs_full][:, idx]
        for r, local, what, psihat, shift in conds:
            miss_global = local + slices[r].start
            cols[miss_global] = mu[miss_global][:, None] + what @ ez + shift
            xz_corr[miss_global] += ng * (what @ m_post)
            xx_corr[r][np.ix_(local, local)] += ng * (what @ m_post @ what.T + psihat)
        stats.completed[:, idx] = cols

    stats.sum_xz = xz_corr
    stats.sum_xx_blocks = xx_corr
    _finalize_base_sums(stats, data.layout)
    return stats


_SCATTER_CHUNKS = 4


def _mask_cache(data: ObservedDataset) -> dict:
    cache = getattr(data, "_estep_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(data, "_estep_cache", cache)
    return cache


def _mask_patterns(data: ObservedDataset):
    """Unique mask columns and the sample -> pattern map, cached."""
    cache = _mask_cache(data)
    if "patterns" not in cache:
        patterns, inverse = np.unique(data.mask, axis=1, return_inverse=True)
        cache["patterns"] = (patterns, np.asarray(inverse).ravel())
    return cache["patterns"]


def _block_chunks(data: ObservedDataset, r: int, sl: slice):
    """Samples with missing entries in block r, bucketed by missing count to
    bound padding waste. Cached per dataset; masks are immutable.

    Each chunk is (sample idx, midx, flat_mm) with midx listing that
    sample's missing rows, padded with the sentinel index m_r: all per-block
    matrices are extended by one zero row/column (identity on the diagonal)
    so padded slots contribute nothing and need no masking. flat_mm are the
    raveled (m_r+1)² gather positions for the missing-by-missing submatrix.
    """
    cache = _mask_cache(data)
    key = ("chunks", r)
    if key in cache:
        return cache[key]
    miss = ~data.mask[sl]
    m_r = miss.shape[0]
    cnt = miss.sum(axis=0)
    affected = np.flatnonzero(cnt > 0)
    chunks = []
    p_max = 0
    if affected.size:
        order = affected[np.argsort(cnt[affected], kind="stable")]
        n_chunks = min(_SCATTER_CHUNKS, max(1, order.size // 64))
        parts = [part for part in np.array_split(order, n_chunks) if part.size]
        p_max = int(cnt[order[-1]])
        ext = m_r + p_max
        for part in parts:
            p = int(cnt[part].max())
            sub = miss[:, part]
            midx = np.argsort(~sub, axis=0, kind="stable")[:p].T  # (g, p)
            valid = np.take_along_axis(sub.T, midx, axis=1)
            # one sentinel per pad slot, so gathered pads form an identity
            midx = np.where(valid, midx, m_r + np.arange(p)[None, :])
            flat_mm = (midx[:, :, None] * ext + midx[:, None, :]).ravel()
            chunks.append((part, midx, flat_mm))
    cache[key] = (p_max, chunks)
    return cache[key]


def _extend(mat: np.ndarray, extra: int, cols: bool = False) -> np.ndarray:
    """Append ``extra`` zero rows (and optionally columns): padding slots."""
    r, c = mat.shape
    out = np.zeros((r + extra, c + extra if cols else c))
    out[:r, :c] = mat
    return out


def _estep_scattered_numpy(data: ObservedDataset, params: ModelParams, psi: BlockSpd) -> _Stats:
    """Batched per-sample E-step using missing-side Schur complements."""
    m, n = data.values.shape
    d = params.d
    w = params.loadings
    mu = params.means
    slices = data.layout.block_slices()
    stats = _Stats(m, n, d, data.layout.n_modalities)

    c_all = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    u_all = np.zeros((n, d))
    quad = np.zeros(n)
    ld = np.zeros(n)
    block_ctx = [[] for _ in slices]  # per block: chunk contexts for phase 2

    for r, (sl, psi_b) in enumerate(zip(slices, psi.blocks)):
        m_r = psi_b.shape[0]
        fac = psi.cholesky_factor(r)
        lam = cho_solve(fac, np.eye(m_r), check_finite=False)
        lam = (lam + lam.T) / 2.0
        logdet_psi = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))

        w_b = w[sl]
        obs = data.mask[sl]
        r0 = np.where(obs, data.values[sl] - mu[sl][:, None], 0.0)
        lam_w = lam @ w_b
        lam_r = lam @ r0
        wtlw = w_b.T @ lam_w
        wtlr = w_b.T @ lam_r  # (d, n)
        rlr = np.einsum("ik,ik->k", r0, lam_r)

        c_all += wtlw
        u_all += wtlr.T
        quad += rlr
        ld += logdet_psi

        p_max, chunks = _block_chunks(data, r, sl)
        if not chunks:
            continue
        # extended (padded) views: rows/cols >= m_r are zero except for an
        # identity on the padded diagonal slots
        lam_ext = _extend(lam, p_max, cols=True)
        lam_ext[range(m_r, m_r + p_max), range(m_r, m_r + p_max)] = 1.0
        w_ext = _extend(w_b, p_max)
        lam_w_ext = _extend(lam_w, p_max)
        lam_r_ext = _extend(lam_r, p_max)

        for idx, midx, flat_mm in chunks:
            p = midx.shape[1]
            g = idx.size
            a0 = lam_ext.ravel()[flat_mm].reshape(g, p, p)
            wm = w_ext[midx]  # (g, p, d), zero at padded slots
            wm_t = wm.transpose(0, 2, 1)
            lam_w_m = lam_w_ext[midx]
            awm = a0 @ wm
            s = lam_w_m - awm
            t = lam_r_ext[midx, idx[:, None]]  # (g, p)

            try:
                la = np.linalg.cholesky(a0)
            except np.linalg.LinAlgError:
                raise DegenerateCovarianceError("covariance degenerate") from None
            ld[idx] += 2.0 * np.log(np.diagonal(la, axis1=1, axis2=2)).sum(axis=1)

            qmat = np.linalg.inv(a0)
            qs = qmat @ s
            qt = (qmat @ t[:, :, None])[:, :, 0]

            g1 = wm_t @ lam_w_m
            g2 = wm_t @ awm
            c_all[idx] += g2 - g1 - g1.transpose(0, 2, 1) - s.transpose(0, 2, 1) @ qs
            u_all[idx] -= (wm_t @ t[:, :, None])[:, :, 0] + (
                s.transpose(0, 2, 1) @ qt[:, :, None]
            )[:, :, 0]
            quad[idx] -= np.sum(t * qt, axis=1)

            what = wm + qs
            block_ctx[r].append((idx, midx, flat_mm, qs, qt, qmat, what))

    try:
        la = np.linalg.cholesky(c_all)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("covariance degenerate") from None
    logdet_a = 2.0 * np.log(np.diagonal(la, axis1=1, axis2=2)).sum(axis=1)
    m_post = np.linalg.inv(c_all)
    m_post = (m_post + np.transpose(m_post, (0, 2, 1))) / 2.0
    ez = (m_post @ u_all[:, :, None])[:, :, 0]  # (n, d)
    quad -= np.sum(u_all * ez, axis=1)
    m_k = data.mask.sum(axis=0)
    stats.loglik_obs = -0.5 * float(np.sum(m_k * _LOG_2PI + ld + logdet_a + quad))

    stats.z_mean = ez.T
    stats.z_cov = m_post

    fill = w @ stats.z_mean + mu[:, None]
    for r, sl in enumerate(slices):
        m_r = sl.stop - sl.start
        if not block_ctx[r]:
            continue
        p_max = _block_chunks(data, r, sl)[0]
        ext = m_r + p_max  # indices >= m_r are the discarded padding sink
        view = np.zeros((n, ext))
        xz_flat = np.zeros(ext * d)
        xx_flat = np.zeros(ext * ext)
        col = np.arange(d)
        for idx, midx, flat_mm, qs, qt, qmat, what in block_ctx[r]:
            delta = (qs @ ez[idx][:, :, None])[:, :, 0] - qt
            tmp = np.zeros((idx.size, ext))
            np.put_along_axis(tmp, midx, delta, axis=1)
            view[idx] = tmp

            wm_post = what @ m_post[idx]  # (g, p, d)
            flat_xz = (midx[:, :, None] * d + col).ravel()
            xz_flat += np.bincount(
                flat_xz, weights=wm_post.ravel(), minlength=ext * d
            )

            dmat = wm_post @ what.transpose(0, 2, 1) + qmat
            xx_flat += np.bincount(flat_mm, weights=dmat.ravel(), minlength=ext * ext)
        fill[sl] += view[:, :m_r].T
        stats.sum_xz[sl] += xz_flat.reshape(ext, d)[:m_r]
        stats.sum_xx_blocks[r] = xx_flat.reshape(ext, ext)[:m_r, :m_r]
    stats.completed = np.where(data.mask, data.values, fill)

    _finalize_base_sums(stats, data.layout)
    return stats


def _estep_scattered_numba(data: ObservedDataset, params: ModelParams, psi: BlockSpd) -> _Stats:
    """Compiled one-pass variant of the scattered kernel."""
    from . import _kernels

    _kernels.pin_blas_single_threaded()
    m, n = data.values.shape
    d = params.d
    w = np.ascontiguousarray(params.loadings)
    mu = params.means
    slices = data.layout.block_slices()
    stats = _Stats(m, n, d, data.layout.n_modalities)

    lam_blocks = []
    ld_base = 0.0
    for r, psi_b in enumerate(psi.blocks):
        fac = psi.cholesky_factor(r)
        lam = cho_solve(fac, np.eye(psi_b.shape[0]), check_finite=False)
        lam_blocks.append((lam + lam.T) / 2.0)
        ld_base += 2.0 * float(np.sum(np.log(np.diag(fac[0]))))

    obs = data.mask
    r0 = np.where(obs, data.values - mu[:, None], 0.0)
    lam_w = np.vstack([lam @ w[sl] for lam, sl in zip(lam_blocks, slices)])
    lam_r = np.vstack([lam @ r0[sl] for lam, sl in zip(lam_blocks, slices)])
    wtlw_sum = w.T @ lam_w
    wtlr_t = np.ascontiguousarray((w.T @ lam_r).T)
    rlr = np.einsum("ik,ik->k", r0, lam_r)

    lam_flat = np.concatenate([lam.ravel() for lam in lam_blocks])
    lam_off = np.zeros(len(lam_blocks) + 1, dtype=np.int64)
    np.cumsum([lam.size for lam in lam_blocks], out=lam_off[1:])
    block_off = np.zeros(len(slices) + 1, dtype=np.int64)
    np.cumsum(data.layout.sizes, out=block_off[1:])
    max_miss = np.array(
        [int((~obs[sl]).sum(axis=0).max(initial=0)) for sl in slices], dtype=np.int64
    )

    out = _kernels._estep_sample_kernel(
        np.ascontiguousarray(data.values.T),
        np.ascontiguousarray(obs.T).astype(np.uint8),
        mu,
        w,
        lam_flat,
        lam_off,
        block_off,
        np.ascontiguousarray(lam_w),
        np.ascontiguousarray(lam_r.T),
        np.ascontiguousarray(wtlw_sum),
        wtlr_t,
        rlr,
        ld_base,
        max_miss,
        _kernels.get_num_threads(),
    )
    z_mean, z_cov, completed_t, loglik, xz_acc, xx_acc, fail = out
    if fail.any():
        raise DegenerateCovarianceError("covariance degenerate")

    stats.z_mean = np.ascontiguousarray(z_mean.T)
    stats.z_cov = z_cov
    stats.completed = np.ascontiguousarray(completed_t.T)
    stats.loglik_obs = float(loglik.sum())
    stats.sum_xz = xz_acc.sum(axis=0)
    xx_flat = xx_acc.sum(axis=0)
    base = 0
    for r, sl in enumerate(slices):
        size = sl.stop - sl.start
        stats.sum_xx_blocks[r] = xx_flat[base : base + size * size].reshape(size, size)
        base += size * size
    _finalize_base_sums(stats, data.layout)
    return stats


def _estep_scattered(data: ObservedDataset, params: ModelParams, psi: BlockSpd) -> _Stats:
    from . import _kernels

    if _kernels.NUMBA_AVAILABLE:
        return _estep_scattered_numba(data, params, psi)
    return _estep_scattered_numpy(data, params, psi)


_GROUPED_PATTERN_CAP = 32


def _resolve_mode(data: ObservedDataset, mode: str) -> str:
    if mode != "auto":
        return mode
    n_patterns = _mask_patterns(data)[0].shape[1]
    if n_patterns <= min(_GROUPED_PATTERN_CAP, max(8, data.n // 16)):
        return "grouped"
    return "scattered"


def _run_estep(data: ObservedDataset, params: ModelParams, mode: str, psi: BlockSpd) -> _Stats:
    mode = _resolve_mode(data, mode)
    if mode == "complete":
        return _estep_complete(data, params, psi)
    if mode == "grouped":
        return _estep_grouped(data, params, psi)
    return _estep_scattered(data, params, psi)


def e_step(data: ObservedDataset, params: ModelParams, mode: str = "auto"):
    """One E-step: conditional expectations plus the monitored objective.

    Returns ``(EStepBuffers, loglik)`` where ``loglik`` is the observed-data
    log-likelihood plus the ridge penalty -(c/2) tr(R⁻¹), c = n(1 - lambda),
    evaluated at the current parameters.
    """
    if params.layout.sizes != data.layout.sizes:
        raise DataError("parameter layout does not match dataset layout")
    psi = BlockSpd(params.psi_blocks)
    stats = _run_estep(data, params, mode, psi)

    spec = RidgeSpec(params.ridge_lambda, data.n)
    penalty = 0.0
    if spec.c > 0.0:
        _, corr = correlation_decompose(psi)
        penalty = ridge_penalty(corr, spec.c)

    buffers = EStepBuffers(
        data=data,
        params=params,
        z_mean=stats.z_mean,
        z_cov=stats.z_cov,
        completed=stats.completed,
        sum_z=stats.sum_z,
        sum_zz=stats.sum_zz,
        sum_xz=stats.sum_xz,
        sum_xx_blocks=stats.sum_xx_blocks,
        loglik=stats.loglik_obs + penalty,
        loglik_unpenalized=stats.loglik_obs,
    )
    return buffers, buffers.loglik


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def m_step(
    data: ObservedDataset,
    buffers: EStepBuffers,
    params: ModelParams,
    lam: float,
    update_order: str = "sequential",
) -> ModelParams:
    """Parameter updates from accumulated E-step moments.

    Sequential order (default): mu' uses the previous loadings, W' uses the
    fresh mu', Psi' uses both fresh values; each is a conditional
    maximization of the expected complete log-likelihood (the mu and W
    maximizers do not depend on Psi). The covariance update is then
    ridge-shrunk on the correlation scale,

        Psi_ridge = Psi_d^{1/2} (lambda R + (1-lambda) I) Psi_d^{1/2}
                  = lambda Psi + (1-lambda) diag(Psi),

    which scales off-diagonals by lambda and keeps the diagonal. Without
    this shrinkage (lambda = 1) the free within-block covariance can absorb
    shared structure that belongs in the loadings.

    Note: for lambda < 1 the shrunk covariance is an estimator choice, not
    the maximizer of the penalized surrogate objective, so the penalized
    log-likelihood monitored by :func:`fit` is not guaranteed to ascend on
    every iteration; the iteration is a fixed-point scheme whose trace
    typically increases and whose steps vanish at convergence. With
    lambda = 1 the update is exact EM and the trace is provably monotone.
    """
    lam = float(lam)
    if not (0.0 < lam <= 1.0):
        raise DataError("ridge lambda must lie in (0, 1]")
    n = data.n
    w_old = params.loadings
    sum_x = buffers.completed.sum(axis=1)

    mu_new = (sum_x - w_old @ buffers.sum_z) / n
    mu_for_w = mu_new if update_order == "sequential" else params.means
    rhs = buffers.sum_xz - np.outer(mu_for_w, buffers.sum_z)
    try:
        w_new = np.linalg.solve(buffers.sum_zz, rhs.T).T
    except np.linalg.LinAlgError:
        raise SingularMomentError(
            "singular latent second-moment sum: latent dimension too large "
            "or posterior collapsed"
        ) from None

    if update_order == "sequential":
        mu_eff, w_eff = mu_new, w_new
    else:
        mu_eff, w_eff = params.means, w_old

    psi_blocks = []
    for r, sl in enumerate(data.layout.block_slices()):
        sxx = buffers.sum_xx_blocks[r]
        sxz = buffers.sum_xz[sl]
        sx = sum_x[sl]
        w_r = w_eff[sl]
        mu_r = mu_eff[sl]
        wz = w_r @ buffers.sum_z
        g = (
            sxx
            - sxz @ w_r.T
            - w_r @ sxz.T
            + w_r @ buffers.sum_zz @ w_r.T
            - np.outer(sx, mu_r)
            - np.outer(mu_r, sx)
            + np.outer(wz, mu_r)
            + np.outer(mu_r, wz)
            + n * np.outer(mu_r, mu_r)
        )
        blk = g / n
        blk = (blk + blk.T) / 2.0
        if lam < 1.0:
            diag = np.diag(blk).copy()
            blk *= lam
            blk[np.diag_indices_from(blk)] = diag
        psi_blocks.append(blk)

    return ModelParams(
        loadings=w_new,
        means=mu_new,
        psi_blocks=psi_blocks,
        layout=data.layout,
        ridge_lambda=lam,
    )


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _em_loop(data: ObservedDataset, d: int, config: EmConfig, mode: str) -> FitReport:
    if mode != "complete":
        mode = _resolve_mode(data, mode)
    params = init_params(data, d, config)
    buffers, ll = e_step(data, params, mode)
    trace = [ll]
    trace_u = [buffers.loglik_unpenalized]
    converged = False
    iterations = 0
    for it in range(1, config.max_iterations + 1):
        try:
            params = m_step(
                data, buffers, params, config.ridge_lambda, config.update_order
            )
            buffers, ll = e_step(data, params, mode)
        except NumericalError as exc:
            raise type(exc)(f"iteration {it}: {exc}") from exc
        iterations = it
        trace.append(ll)
        trace_u.append(buffers.loglik_unpenalized)
        prev = trace[-2]
        if abs(ll - prev) / (abs(prev) + 1.0) < config.rel_tolerance:
            converged = True
            break
    posterior = LatentPosterior(means=buffers.z_mean, covariances=buffers.z_cov)
    return FitReport(
        loglik_trace=np.array(trace),
        loglik_trace_unpenalized=np.array(trace_u),
        iterations=iterations,
        converged=converged,
        final_params=params,
        posterior=posterior,
    )


def fit(data: ObservedDataset, d: int, config: EmConfig) -> FitReport:
    """Run EM to convergence on arbitrarily masked data."""
    return _em_loop(data, d, config, config.estep_mode)


def fit_complete(data: ObservedDataset, d: int, config: EmConfig) -> FitReport:
    """Complete-data fast path: requires an all-ones mask.

    One shared d x d Woodbury inversion per iteration instead of one per
    sample; numerically equivalent to :func:`fit` on the same inputs.
    """
    if not data.complete:
        raise DataError("fit_complete requires fully observed data")
    return _em_loop(data, d, config, "complete")


def transform(params: ModelParams, data: ObservedDataset, mode: str = "auto") -> np.ndarray:
    """Posterior-mean embedding, one (d,) column per sample."""
    buffers, _ = e_step(data, params, mode)
    return buffers.z_mean.copy()


def impute(params: ModelParams, data: ObservedDataset, mode: str = "auto") -> np.ndarray:
    """Model-based completion: observed entries verbatim, missing entries
    replaced by their conditional means."""
    buffers, _ = e_step(data, params, mode)
    return buffers.completed.copy()
