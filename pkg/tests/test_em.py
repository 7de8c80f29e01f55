import numpy as np
import pytest

from gpcca import (
    DataError,
    EmConfig,
    EStepBuffers,
    ModalityLayout,
    ModelParams,
    SingularMomentError,
    e_step,
    fit,
    fit_complete,
    impute,
    init_params,
    m_step,
    transform,
    validate_dataset,
)
from tests.conftest import dense_conditional_oracle, draw_dataset, random_params

MODES = ("grouped", "scattered")


def small_dataset(rng, m_sizes=(4, 5), d=2, n=12, miss=0.3, **kw):
    params = random_params(rng, list(m_sizes), d, **kw)
    data = draw_dataset(rng, params, n, miss)
    return data, params


class TestInitParams:
    def test_variance_floor(self):
        values = np.vstack([np.full(5, 3.0), np.arange(5.0), np.arange(5.0) * 2]).astype(float)
        data = validate_dataset(values, np.ones((3, 5)), ModalityLayout((2, 1)))
        with pytest.warns(UserWarning, match="floor"):
            params = init_params(data, 1, EmConfig(seed=0))
        assert params.psi_blocks[0][0, 0] == pytest.approx(1e-6)

    def test_observed_means(self, rng):
        data, _ = small_dataset(rng, miss=0.4)
        params = init_params(data, 2, EmConfig(seed=0))
        for i in range(data.m):
            obs = data.mask[i]
            assert params.means[i] == pytest.approx(data.values[i, obs].mean())

    def test_deterministic(self, rng):
        data, _ = small_dataset(rng)
        cfg = EmConfig(seed=42)
        a = init_params(data, 2, cfg)
        b = init_params(data, 2, cfg)
        assert np.array_equal(a.loadings, b.loadings)
        assert np.array_equal(a.means, b.means)
        for x, y in zip(a.psi_blocks, b.psi_blocks):
            assert np.array_equal(x, y)

    def test_mean_imputed_svd(self, rng):
        data, _ = small_dataset(rng, miss=0.2)
        params = init_params(
            data, 2, EmConfig(seed=0, init_strategy="mean-imputed-svd")
        )
        assert params.loadings.shape == (data.m, 2)

    def test_d_out_of_range(self, rng):
        data, _ = small_dataset(rng, m_sizes=(3, 5))
        with pytest.raises(DataError, match="out of range"):
            init_params(data, 4, EmConfig(seed=0))


class TestEStepAgainstOracle:
    @pytest.mark.parametrize("mode", MODES)
    def test_zero_loadings_identity_noise(self, rng, mode):
        layout = ModalityLayout((2, 2))
        x = rng.standard_normal((4, 6))
        data = validate_dataset(x, np.ones((4, 6)), layout)
        params = ModelParams(
            np.zeros((4, 2)), np.zeros(4), [np.eye(2), np.eye(2)], layout, 1.0
        )
        buf, ll = e_step(data, params, mode)
        assert np.allclose(buf.z_mean, 0.0)
        for k in range(6):
            assert np.allclose(buf.z_second_moment(k), np.eye(2))
        expected = -0.5 * (x.size * np.log(2 * np.pi) + (x**2).sum())
        assert ll == pytest.approx(expected)

    @pytest.mark.parametrize("mode", MODES)
    def test_fully_observed_moments_are_data(self, rng, mode):
        data, params = small_dataset(rng, miss=0.0)
        buf, _ = e_step(data, params, mode)
        k = 3
        x = data.values[:, k]
        assert np.array_equal(buf.completed[:, k], x)
        assert np.allclose(buf.cross_moment(k), np.outer(x, buf.z_mean[:, k]))
        for sl, blk in zip(data.layout.block_slices(), buf.second_moment_blocks(k)):
            assert np.allclose(blk, np.outer(x[sl], x[sl]))

    @pytest.mark.parametrize("mode", MODES)
    def test_conditional_gaussian_oracle(self, rng, mode):
        # every expectation family vs direct conditioning on W W^T + Psi
        for trial in range(25):
            sizes = [int(s) for s in rng.integers(1, 4, size=int(rng.integers(2, 4)))]
            d = int(rng.integers(1, min(sizes) + 1))
            n = int(rng.integers(3, 8))
            params = random_params(rng, sizes, d)
            data = draw_dataset(rng, params, n, miss_rate=0.35)
            buf, ll = e_step(data, params, mode)
            total = 0.0
            for k in range(n):
                o = dense_conditional_oracle(data, params, k)
                total += o["loglik"]
                assert np.allclose(buf.z_mean[:, k], o["z_mean"], atol=1e-10)
                assert np.allclose(buf.z_cov[k], o["z_cov"], atol=1e-10)
                assert np.allclose(buf.completed[:, k], o["completed"], atol=1e-10)
                assert np.allclose(buf.cross_moment(k), o["cross"], atol=1e-10)
                for sl, blk in zip(
                    data.layout.block_slices(), buf.second_moment_blocks(k)
                ):
                    assert np.allclose(blk, o["second"][sl, sl], atol=1e-10)
            assert ll == pytest.approx(total, abs=1e-8)

    def test_modes_agree(self, rng):
        data, params = small_dataset(rng, m_sizes=(3, 4, 3), n=15, miss=0.25)
        b1, l1 = e_step(data, params, "grouped")
        b2, l2 = e_step(data, params, "scattered")
        assert l1 == pytest.approx(l2, abs=1e-9)
        assert np.allclose(b1.z_mean, b2.z_mean, atol=1e-11)
        assert np.allclose(b1.completed, b2.completed, atol=1e-11)
        assert np.allclose(b1.sum_xz, b2.sum_xz, atol=1e-9)
        for a, b in zip(b1.sum_xx_blocks, b2.sum_xx_blocks):
            assert np.allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("mode", MODES)
    def test_posterior_covariance_identity(self, rng, mode):
        data, params = small_dataset(rng, miss=0.3)
        buf, _ = e_step(data, params, mode)
        for k in range(data.n):
            cov = buf.z_second_moment(k) - np.outer(buf.z_mean[:, k], buf.z_mean[:, k])
            assert np.allclose(cov, buf.z_cov[k], atol=1e-9)
            assert np.linalg.eigvalsh(buf.z_cov[k]).min() > 0

    @pytest.mark.parametrize("mode", MODES)
    def test_observed_entries_passed_through(self, rng, mode):
        data, params = small_dataset(rng, miss=0.4)
        buf, _ = e_step(data, params, mode)
        assert np.array_equal(buf.completed[data.mask], data.values[data.mask])

    def test_penalty_included(self, rng):
        data, params0 = small_dataset(rng, miss=0.2)
        params = ModelParams(
            params0.loadings,
            params0.means,
            params0.psi_blocks,
            params0.layout,
            ridge_lambda=0.5,
        )
        buf, ll = e_step(data, params)
        assert ll < buf.loglik_unpenalized
        buf1, ll1 = e_step(data, params0)  # lambda = 1: no penalty
        assert ll1 == pytest.approx(buf1.loglik_unpenalized)

    def test_whole_block_missing_sample(self, rng):
        # one sample loses an entire modality
        params = random_params(rng, [3, 4], 2)
        data0 = draw_dataset(rng, params, 10, 0.0)
        mask = np.array(data0.mask)
        mask[:3, 0] = False
        data = validate_dataset(data0.values, mask, data0.layout)
        for mode in MODES:
            buf, _ = e_step(data, params, mode)
            o = dense_conditional_oracle(data, params, 0)
            assert np.allclose(buf.completed[:, 0], o["completed"], atol=1e-10)


class TestMStep:
    def test_hand_oracle(self, rng):
        # 3-sample toy, layout [2,1], d=1: compare against a direct
        # evaluation of the update formulas from explicitly built moments
        layout = ModalityLayout((2, 1))
        values = np.array([[1.0, 2.0, 0.5], [0.0, 1.0, -1.0], [2.0, 0.0, 1.0]])
        data = validate_dataset(values, np.ones((3, 3)), layout)
        params = random_params(rng, [2, 1], 1)
        buf, _ = e_step(data, params)

        n = 3
        sum_z = buf.z_mean.sum(axis=1)
        sum_zz = sum(buf.z_second_moment(k) for k in range(n))
        sum_x = buf.completed.sum(axis=1)
        sum_xz = sum(buf.cross_moment(k) for k in range(n))

        mu_new = (sum_x - params.loadings @ sum_z) / n
        w_new = (sum_xz - np.outer(mu_new, sum_z)) @ np.linalg.inv(sum_zz)
        got = m_step(data, buf, params, 1.0)
        assert np.allclose(got.means, mu_new, atol=1e-12)
        assert np.allclose(got.loadings, w_new, atol=1e-12)

        # Psi via the asymmetric textbook expansion, block-projected and
        # symmetrized afterwards
        g_sum = np.zeros((3, 3))
        for k in range(n):
            ex = buf.completed[:, k]
            exx = np.zeros((3, 3))
            for sl, blk in zip(layout.block_slices(), buf.second_moment_blocks(k)):
                exx[sl, sl] = blk
            ez = buf.z_mean[:, k]
            ezz = buf.z_second_moment(k)
            exz = buf.cross_moment(k)
            g = (
                exx
                + np.outer(mu_new, mu_new)
                + w_new @ ezz @ w_new.T
                - 2.0 * np.outer(ex, mu_new)
                + 2.0 * np.outer(w_new @ ez, mu_new)
                - 2.0 * w_new @ exz.T
            )
            g_sum += g
        for sl, blk in zip(layout.block_slices(), got.psi_blocks):
            ref = g_sum[sl, sl] / n
            ref = (ref + ref.T) / 2.0
            assert np.allclose(blk, ref, atol=1e-12)

    def test_zero_z_means_gives_completed_average(self, rng):
        data, params = small_dataset(rng, miss=0.2)
        buf, _ = e_step(data, params)
        neutral = EStepBuffers(
            data=data,
            params=params,
            z_mean=np.zeros_like(buf.z_mean),
            z_cov=buf.z_cov,
            completed=buf.completed,
            sum_z=np.zeros_like(buf.sum_z),
            sum_zz=buf.sum_zz,
            sum_xz=buf.sum_xz,
            sum_xx_blocks=buf.sum_xx_blocks,
            loglik=buf.loglik,
            loglik_unpenalized=buf.loglik_unpenalized,
        )
        out = m_step(data, neutral, params, 1.0)
        assert np.allclose(out.means, buf.completed.mean(axis=1))

    def test_lambda_one_no_shrinkage(self, rng):
        data, params = small_dataset(rng, n=30, miss=0.0)
        buf, _ = e_step(data, params)
        plain = m_step(data, buf, params, 1.0)
        ridged = m_step(data, buf, params, 0.5)
        for a, b in zip(plain.psi_blocks, ridged.psi_blocks):
            # diagonal kept; off-diagonals scaled by lambda
            off = ~np.eye(a.shape[0], dtype=bool)
            assert np.allclose(b[off], 0.5 * a[off])
            assert np.allclose(np.diag(b), np.diag(a))

    def test_shrinkage_matches_correlation_path(self, rng):
        from gpcca import BlockSpd, correlation_decompose, ridge_correlation

        data, params = small_dataset(rng, n=40, miss=0.1)
        buf, _ = e_step(data, params)
        lam = 2.0 / 3.0
        ridged = m_step(data, buf, params, lam)
        plain = m_step(data, buf, params, 1.0)
        psi_d, corr = correlation_decompose(BlockSpd(plain.psi_blocks))
        s = np.sqrt(psi_d)
        for sl, got, r_blk in zip(
            data.layout.block_slices(), ridged.psi_blocks, corr.blocks
        ):
            s_blk = s[sl.start : sl.stop]
            expected = ridge_correlation(r_blk, lam) * np.outer(s_blk, s_blk)
            assert np.allclose(got, expected, atol=1e-12)

    def test_shrinkage_eigenvalue_floor(self, rng):
        data, params = small_dataset(rng, n=40, miss=0.1)
        buf, _ = e_step(data, params)
        lam = 0.5
        plain = m_step(data, buf, params, 1.0)
        ridged = m_step(data, buf, params, lam)
        for a, b in zip(plain.psi_blocks, ridged.psi_blocks):
            floor = (1.0 - lam) * np.diag(a).min()
            assert np.linalg.eigvalsh(b).min() >= floor - 1e-12

    def test_singular_moments_error(self, rng):
        data, params = small_dataset(rng, d=2, miss=0.0)
        buf, _ = e_step(data, params)
        broken = EStepBuffers(
            data=data,
            params=params,
            z_mean=buf.z_mean,
            z_cov=buf.z_cov,
            completed=buf.completed,
            sum_z=buf.sum_z,
            sum_zz=np.zeros((2, 2)),
            sum_xz=buf.sum_xz,
            sum_xx_blocks=buf.sum_xx_blocks,
            loglik=buf.loglik,
            loglik_unpenalized=buf.loglik_unpenalized,
        )
        with pytest.raises(SingularMomentError):
            m_step(data, broken, params, 1.0)

    def test_update_orders_differ_but_converge(self, rng):
        data, params = small_dataset(rng, n=40, miss=0.2)
        buf, _ = e_step(data, params)
        seq = m_step(data, buf, params, 1.0, update_order="sequential")
        sim = m_step(data, buf, params, 1.0, update_order="simultaneous")
        assert np.allclose(seq.means, sim.means)  # mu update identical
        assert not np.allclose(seq.loadings, sim.loadings)


class TestFit:
    def test_monotone_at_lambda_one(self, rng):
        data, _ = small_dataset(rng, m_sizes=(5, 6), n=50, miss=0.25)
        rep = fit(data, 2, EmConfig(max_iterations=60, ridge_lambda=1.0, seed=3))
        diffs = np.diff(rep.loglik_trace)
        assert (diffs >= -1e-8 * (np.abs(rep.loglik_trace[:-1]) + 1)).all()

    def test_iteration_cap(self, rng):
        data, _ = small_dataset(rng, n=30, miss=0.2)
        rep = fit(
            data, 2, EmConfig(max_iterations=1, rel_tolerance=1e-15, seed=0)
        )
        assert rep.iterations == 1
        assert len(rep.loglik_trace) in (1, 2)
        assert not rep.converged

    def test_bitwise_deterministic(self, rng):
        data, _ = small_dataset(rng, n=25, miss=0.3)
        cfg = EmConfig(max_iterations=15, rel_tolerance=1e-12, seed=9)
        r1 = fit(data, 2, cfg)
        r2 = fit(data, 2, cfg)
        assert np.array_equal(r1.loglik_trace, r2.loglik_trace)
        assert np.array_equal(r1.final_params.loadings, r2.final_params.loadings)

    def test_composite_recovery(self):
        # data drawn from a 1-factor model: the fitted W W^T + Psi composite
        # matches the truth up to sampling error (rotation-invariant check).
        # At n=500 the sampling floor of any covariance estimate is already
        # ~sqrt(2/n) = 6.3% relative Frobenius, so the instance seed matters
        # for the 5% bound.
        rng = np.random.default_rng(4)
        layout = ModalityLayout((6, 6))
        w = rng.standard_normal((12, 1)) * 2.0
        mu = rng.standard_normal(12)
        psi = np.diag(rng.uniform(0.3, 0.8, size=12))
        n = 500
        x = (
            w @ rng.standard_normal((1, n))
            + mu[:, None]
            + np.sqrt(np.diag(psi))[:, None] * rng.standard_normal((12, n))
        )
        data = validate_dataset(x, np.ones((12, n)), layout)
        rep = fit(data, 1, EmConfig(max_iterations=600, rel_tolerance=1e-10, ridge_lambda=1.0, seed=1))
        p = rep.final_params
        est = p.loadings @ p.loadings.T + p.psi_dense()
        truth = w @ w.T + psi
        rel = np.linalg.norm(est - truth) / np.linalg.norm(truth)
        assert rel < 0.05

    def test_posterior_eigenvalues_bounded(self, rng):
        data, _ = small_dataset(rng, n=30, miss=0.3)
        rep = fit(data, 2, EmConfig(max_iterations=30, seed=2))
        eig = np.linalg.eigvalsh(rep.posterior.covariances)
        assert eig.min() > 0.0
        assert eig.max() <= 1.0 + 1e-8

    def test_psi_spd_after_every_mstep(self, rng):
        data, params = small_dataset(rng, n=40, miss=0.2)
        lam = 0.5
        for _ in range(10):
            buf, _ = e_step(data, params)
            params = m_step(data, buf, params, lam)
            for blk in params.psi_blocks:
                np.linalg.cholesky(blk)

    def test_sample_permutation_equivariance(self, rng):
        data, _ = small_dataset(rng, n=24, miss=0.25)
        perm = rng.permutation(24)
        permuted = validate_dataset(
            data.values[:, perm], data.mask[:, perm], data.layout
        )
        cfg = EmConfig(max_iterations=8, rel_tolerance=1e-15, seed=4)
        r1 = fit(data, 2, cfg)
        r2 = fit(permuted, 2, cfg)
        assert np.allclose(r1.final_params.loadings, r2.final_params.loadings, atol=1e-9)
        assert np.allclose(r1.final_params.means, r2.final_params.means, atol=1e-9)
        assert np.allclose(
            r1.posterior.means[:, perm], r2.posterior.means, atol=1e-8
        )

    def test_degeneracy_reports_iteration(self, rng):
        # d equal to a tiny sample count collapses the moment matrix fast
        layout = ModalityLayout((3, 3))
        x = rng.standard_normal((6, 3))
        data = validate_dataset(x, np.ones((6, 3)), layout)
        from gpcca.errors import NumericalError

        with pytest.raises(NumericalError, match="iteration"):
            fit(data, 3, EmConfig(max_iterations=50, ridge_lambda=1.0, seed=0))


class TestFitComplete:
    def test_equals_fit(self, rng):
        data, _ = small_dataset(rng, m_sizes=(4, 6), n=60, miss=0.0)
        cfg = EmConfig(max_iterations=40, rel_tolerance=1e-9, ridge_lambda=0.5, seed=5)
        r1 = fit(data, 2, cfg)
        r2 = fit_complete(data, 2, cfg)
        assert np.abs(r1.final_params.loadings - r2.final_params.loadings).max() < 1e-10
        assert np.abs(r1.final_params.means - r2.final_params.means).max() < 1e-10
        for a, b in zip(r1.final_params.psi_blocks, r2.final_params.psi_blocks):
            assert np.abs(a - b).max() < 1e-10

    def test_rejects_missing(self, rng):
        data, _ = small_dataset(rng, miss=0.2)
        with pytest.raises(DataError, match="fully observed"):
            fit_complete(data, 2, EmConfig(seed=0))


class TestTransformImpute:
    def test_transform_centered_input_is_zero(self, rng):
        params = random_params(rng, [3, 3], 2)
        x = np.tile(params.means[:, None], (1, 4))
        data = validate_dataset(x, np.ones((6, 4)), params.layout)
        emb = transform(params, data)
        assert np.allclose(emb, 0.0, atol=1e-12)

    def test_transform_zero_loadings(self, rng):
        layout = ModalityLayout((3, 3))
        params = ModelParams(
            np.zeros((6, 2)), np.zeros(6), [np.eye(3), np.eye(3)], layout
        )
        data = validate_dataset(
            rng.standard_normal((6, 5)), np.ones((6, 5)), layout
        )
        assert np.allclose(transform(params, data), 0.0)

    def test_transform_matches_oracle(self, rng):
        data, params = small_dataset(rng, miss=0.3)
        emb = transform(params, data)
        for k in range(data.n):
            o = dense_conditional_oracle(data, params, k)
            assert np.allclose(emb[:, k], o["z_mean"], atol=1e-10)

    def test_impute_complete_identity(self, rng):
        data, params = small_dataset(rng, miss=0.0)
        assert np.array_equal(impute(params, data), data.values)

    def test_impute_zero_loadings_diagonal_noise(self, rng):
        layout = ModalityLayout((3, 3))
        params = ModelParams(
            np.zeros((6, 2)),
            rng.standard_normal(6),
            [np.diag(rng.uniform(0.5, 2, 3)) for _ in range(2)],
            layout,
        )
        data0 = draw_dataset(rng, params, 8, 0.3)
        out = impute(params, data0)
        miss = ~data0.mask
        expected = np.tile(params.means[:, None], (1, 8))
        assert np.allclose(out[miss], expected[miss])

    def test_impute_matches_oracle(self, rng):
        data, params = small_dataset(rng, m_sizes=(3, 4), miss=0.35)
        out = impute(params, data)
        for k in range(data.n):
            o = dense_conditional_oracle(data, params, k)
            assert np.allclose(out[:, k], o["completed"], atol=1e-10)

    def test_layout_mismatch(self, rng):
        params = random_params(rng, [3, 3], 2)
        data, _ = small_dataset(rng, m_sizes=(2, 4))
        with pytest.raises(DataError, match="layout"):
            transform(params, data)
