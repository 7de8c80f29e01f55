"""Compiled per-sample E-step kernel for scattered missingness.

One pass over samples: for each sample and block, the missing-side Schur
pieces are built at their exact sizes (no padding), the d x d posterior is
formed and inverted, and every completed-data moment is accumulated into
per-thread buffers. Mathematically identical to the numpy kernel in
``em._estep_scattered``; the numpy path remains the fallback when numba is
unavailable.

Small dense routines (Cholesky, triangular solves, inverses) are
hand-rolled: the matrices involved are tiny (missing counts and the latent
dimension), where LAPACK call overhead would dominate.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import get_num_threads, get_thread_id, njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range

    def get_num_threads():
        return 1

    def get_thread_id():
        return 0


_BLAS_LIMITER = None


def pin_blas_single_threaded() -> None:
    """Cap BLAS pools at one thread for the life of the process.

    The compiled kernel and a multi-threaded BLAS otherwise fight over the
    same cores (BLAS workers busy-wait between calls), which slows the
    E-step several-fold. Our BLAS calls are small, so a single thread there
    costs nothing. No-op if threadpoolctl is unavailable.
    """
    global _BLAS_LIMITER
    if _BLAS_LIMITER is not None:
        return
    try:
        from threadpoolctl import threadpool_limits

        _BLAS_LIMITER = threadpool_limits(limits=1, user_api="blas")
    except Exception:  # pragma: no cover - best effort
        _BLAS_LIMITER = False


@njit(cache=True, inline="always")
def _cholesky_inplace(a):
    """Lower Cholesky factor of a in place; returns 0 on success."""
    p = a.shape[0]
    for j in range(p):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= 0.0:
            return 1
        a[j, j] = np.sqrt(s)
        inv = 1.0 / a[j, j]
        for i in range(j + 1, p):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s * inv
    return 0


@njit(cache=True, inline="always")
def _chol_solve_mat(l, b):
    """Solve (L Lᵀ) X = B in place of B, L lower triangular."""
    p, q = b.shape
    for col in range(q):
        for i in range(p):
            s = b[i, col]
            for k in range(i):
                s -= l[i, k] * b[k, col]
            b[i, col] = s / l[i, i]
        for i in range(p - 1, -1, -1):
            s = b[i, col]
            for k in range(i + 1, p):
                s -= l[k, i] * b[k, col]
            b[i, col] = s / l[i, i]


@njit(cache=True, inline="always")
def _chol_inverse(l, out):
    """out = (L Lᵀ)⁻¹ from the lower factor L."""
    p = l.shape[0]
    for i in range(p):
        for j in range(p):
            out[i, j] = 1.0 if i == j else 0.0
    _chol_solve_mat(l, out)


@njit(cache=True, parallel=True)
def _estep_sample_kernel(
    values_t,  # (n, m) data, zeros at missing
    obs_t,  # (n, m) uint8 mask
    mu,  # (m,)
    w,  # (m, d)
    lam_flat,  # concatenated per-block Psi^-1, row-major
    lam_off,  # (R+1,) offsets into lam_flat
    block_off,  # (R+1,) feature offsets of the blocks
    lam_w,  # (m, d) per-block Psi^-1 W, stacked
    lam_r_t,  # (n, m) per-block Psi^-1 r0, stacked, transposed
    wtlw_sum,  # (d, d) sum_r Wᵀ Psi^-1 W
    wtlr_t,  # (n, d) per-sample base Wᵀ Psi^-1 r
    rlr,  # (n,) base quadratic forms
    ld_base,  # scalar: sum_r ln|Psi_r|
    max_miss,  # (R,) largest missing count per block
    n_threads,
):
    n, m = values_t.shape
    d = w.shape[1]
    n_blocks = block_off.shape[0] - 1
    xx_len = 0
    for r in range(n_blocks):
        size = block_off[r + 1] - block_off[r]
        xx_len += size * size

    z_mean = np.zeros((n, d))
    z_cov = np.zeros((n, d, d))
    completed_t = np.zeros((n, m))
    loglik = np.zeros(n)
    xz_acc = np.zeros((n_threads, m, d))
    xx_acc = np.zeros((n_threads, xx_len))
    fail = np.zeros(n, dtype=np.uint8)

    cmax = 0
    for r in range(n_blocks):
        if max_miss[r] > cmax:
            cmax = max_miss[r]

    log2pi = np.log(2.0 * np.pi)

    for k in prange(n):
        tid = get_thread_id()
        a = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                a[i, j] = wtlw_sum[i, j] + (1.0 if i == j else 0.0)
        u = wtlr_t[k].copy()
        quad = rlr[k]
        ld = ld_base
        m_obs = 0

        # per-block conditional pieces kept for the moment pass
        mi_all = np.empty((n_blocks, cmax), dtype=np.int64)
        cnt_all = np.zeros(n_blocks, dtype=np.int64)
        what_all = np.empty((n_blocks, cmax, d))
        qt_all = np.empty((n_blocks, cmax))
        qmat_all = np.empty((n_blocks, cmax, cmax))

        for r in range(n_blocks):
            lo, hi = block_off[r], block_off[r + 1]
            size = hi - lo
            c = 0
            for i in range(lo, hi):
                if obs_t[k, i]:
                    m_obs += 1
                else:
                    mi_all[r, c] = i
                    c += 1
            cnt_all[r] = c
            if c == 0:
                continue

            lam = lam_flat[lam_off[r] : lam_off[r + 1]].reshape(size, size)
            a0 = np.empty((c, c))
            for i in range(c):
                gi = mi_all[r, i] - lo
                for j in range(c):
                    a0[i, j] = lam[gi, mi_all[r, j] - lo]
            wm = np.empty((c, d))
            lwm = np.empty((c, d))
            t_vec = np.empty(c)
            for i in range(c):
                gi = mi_all[r, i]
                for e in range(d):
                    wm[i, e] = w[gi, e]
                    lwm[i, e] = lam_w[gi, e]
                t_vec[i] = lam_r_t[k, gi]

            awm = a0 @ wm
            s = lwm - awm
            if _cholesky_inplace(a0) != 0:
                fail[k] = 1
                break
            for i in range(c):
                ld += 2.0 * np.log(a0[i, i])

            qmat = np.empty((c, c))
            _chol_inverse(a0, qmat)
            qs = qmat @ s
            qt = qmat @ t_vec
            for i in range(c):
                for j in range(c):
                    qmat_all[r, i, j] = qmat[i, j]

            # A += WMᵀ A0 WM - G1 - G1ᵀ - Sᵀ QS ; G1 = WMᵀ (ΛW)_M
            g1 = wm.T @ lwm
            g2 = wm.T @ awm
            sqs = s.T @ qs
            for i in range(d):
                for j in range(d):
                    a[i, j] += g2[i, j] - g1[i, j] - g1[j, i] - sqs[i, j]
            wmt = wm.T @ t_vec
            sqt = s.T @ qt
            for e in range(d):
                u[e] -= wmt[e] + sqt[e]
            for i in range(c):
                quad -= t_vec[i] * qt[i]

            for i in range(c):
                qt_all[r, i] = qt[i]
                for e in range(d):
                    what_all[r, i, e] = wm[i, e] + qs[i, e]

        if fail[k]:
            continue

        la = a.copy()
        if _cholesky_inplace(la) != 0:
            fail[k] = 1
            continue
        ln_a = 0.0
        for i in range(d):
            ln_a += 2.0 * np.log(la[i, i])
        m_post = np.empty((d, d))
        _chol_inverse(la, m_post)
        for i in range(d):
            for j in range(i + 1, d):
                v = 0.5 * (m_post[i, j] + m_post[j, i])
                m_post[i, j] = v
                m_post[j, i] = v
        ez = m_post @ u
        for e in range(d):
            quad -= u[e] * ez[e]
        loglik[k] = -0.5 * (m_obs * log2pi + ld + ln_a + quad)
        for e in range(d):
            z_mean[k, e] = ez[e]
        for i in range(d):
            for j in range(d):
                z_cov[k, i, j] = m_post[i, j]

        # completed data: observed verbatim, missing by conditional mean
        for i in range(m):
            if obs_t[k, i]:
                completed_t[k, i] = values_t[k, i]
        xx_base = 0
        for r in range(n_blocks):
            lo = block_off[r]
            size = block_off[r + 1] - lo
            c = cnt_all[r]
            if c == 0:
                xx_base += size * size
                continue
            what = what_all[r, :c]
            wpost = what @ m_post  # (c, d)
            for i in range(c):
                gi = mi_all[r, i]
                val = mu[gi] - qt_all[r, i]
                for e in range(d):
                    val += what[i, e] * ez[e]
                completed_t[k, gi] = val
                for e in range(d):
                    xz_acc[tid, gi, e] += wpost[i, e]
            for i in range(c):
                li = mi_all[r, i] - lo
                for j in range(c):
                    dij = qmat_all[r, i, j]
                    for e in range(d):
                        dij += wpost[i, e] * what[j, e]
                    xx_acc[tid, xx_base + li * size + (mi_all[r, j] - lo)] += dij
            xx_base += size * size

    return z_mean, z_cov, completed_t, loglik, xz_acc, xx_acc, fail
