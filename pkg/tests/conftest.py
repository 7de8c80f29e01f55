"""Shared helpers: random model instances, masked datasets and the dense
conditional-Gaussian oracle used to pin E-step expectations."""

import numpy as np
import pytest

from gpcca import ModalityLayout, ModelParams, validate_dataset


def random_spd(rng, size, jitter=0.3):
    a = rng.standard_normal((size, size + 2))
    return a @ a.T / (size + 2) + jitter * np.eye(size)


def random_params(rng, m_sizes, d, ridge_lambda=1.0, w_scale=1.0):
    layout = ModalityLayout(tuple(m_sizes))
    m = layout.total
    w = w_scale * rng.standard_normal((m, d))
    mu = rng.standard_normal(m)
    blocks = [random_spd(rng, s) for s in m_sizes]
    return ModelParams(w, mu, blocks, layout, ridge_lambda=ridge_lambda)


def random_mask(rng, m, n, miss_rate, tries=200):
    """Mask with every sample partially observed and every feature seen
    at least twice."""
    if miss_rate == 0.0:
        return np.ones((m, n), dtype=bool)
    for _ in range(tries):
        mask = rng.random((m, n)) >= miss_rate
        if mask.any(axis=0).all() and (mask.sum(axis=1) >= 2).all():
            return mask
    raise AssertionError("could not draw a valid mask")


def draw_dataset(rng, params, n, miss_rate=0.0):
    """Sample a dataset from the model and mask it."""
    m = params.m
    z = rng.standard_normal((params.d, n))
    eps = np.linalg.cholesky(params.psi_dense()) @ rng.standard_normal((m, n))
    x = params.loadings @ z + params.means[:, None] + eps
    mask = random_mask(rng, m, n, miss_rate)
    return validate_dataset(np.where(mask, x, 0.0), mask, params.layout)


def dense_conditional_oracle(data, params, k):
    """Condition the assembled joint Gaussian on sample k's observed
    entries; returns every conditional moment the E-step must reproduce."""
    w, mu = params.loadings, params.means
    d = params.d
    c = w @ w.T + params.psi_dense()
    obs = data.mask[:, k]
    mis = ~obs
    ro = data.values[obs, k] - mu[obs]
    coo = c[np.ix_(obs, obs)]
    sol = np.linalg.solve(coo, ro)

    ez = w[obs].T @ sol
    zcov = np.eye(d) - w[obs].T @ np.linalg.solve(coo, w[obs])
    ex = np.array(data.values[:, k])
    ex[mis] = mu[mis] + c[np.ix_(mis, obs)] @ sol
    cxz = np.zeros((data.m, d))
    cxz[mis] = w[mis] - c[np.ix_(mis, obs)] @ np.linalg.solve(coo, w[obs])
    exz = cxz + np.outer(ex, ez)
    cxx = np.zeros((data.m, data.m))
    cxx[np.ix_(mis, mis)] = c[np.ix_(mis, mis)] - c[np.ix_(mis, obs)] @ np.linalg.solve(
        coo, c[np.ix_(obs, mis)]
    )
    exx = cxx + np.outer(ex, ex)
    sign, logdet = np.linalg.slogdet(coo)
    loglik = -0.5 * (obs.sum() * np.log(2 * np.pi) + logdet + ro @ sol)
    return {
        "z_mean": ez,
        "z_cov": zcov,
        "completed": ex,
        "cross": exz,
        "second": exx,
        "loglik": loglik,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20240810)
