import numpy as np
import pytest

from mrfvae import diffcore as dc
from mrfvae import gmrf
from mrfvae.errors import (
    ConditioningError,
    ContractError,
    DimensionError,
    NotPositiveDefinite,
)

from helpers import assert_grads_close, grad_of


def random_block_gaussian(rng, dims, coupling=0.5):
    layout = gmrf.BlockLayout(tuple(dims))
    D = layout.total
    a = rng.standard_normal((D, D)) * coupling
    sigma = a @ a.T + np.eye(D) * (1.0 + rng.random())
    mu = rng.standard_normal(D)
    return gmrf.BlockGaussian(mu, gmrf.cholesky(sigma), layout)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(gmrf.cholesky(np.eye(3)), np.eye(3))

    def test_reconstructs_2x2(self):
        sigma = np.array([[4.0, 2.0], [2.0, 3.0]])
        L = gmrf.cholesky(sigma)
        np.testing.assert_allclose(L, [[2, 0], [1, np.sqrt(2)]], atol=1e-12)
        np.testing.assert_allclose(L @ L.T, sigma, atol=1e-12)

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            gmrf.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            gmrf.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestSample:
    def test_zero_noise_returns_mu(self):
        g = random_block_gaussian(np.random.default_rng(0), (2, 3))
        out = gmrf.gmrf_sample(g, np.zeros(5))
        np.testing.assert_allclose(out.data, g.mu.data, atol=1e-15)

    def test_identity_chol_returns_u(self):
        g = gmrf.BlockGaussian.standard(gmrf.BlockLayout((2, 2)))
        u = np.array([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(gmrf.gmrf_sample(g, u).data, u)

    def test_length_mismatch(self):
        g = gmrf.BlockGaussian.standard(gmrf.BlockLayout((2, 2)))
        with pytest.raises(DimensionError):
            gmrf.gmrf_sample(g, np.zeros(3))

    def test_empirical_covariance_matches(self):
        rng = np.random.default_rng(1)
        g = random_block_gaussian(rng, (2, 2))
        u = rng.standard_normal((100_000, 4))
        z = gmrf.gmrf_sample(g, u).data
        emp = np.cov(z.T)
        sigma = g.sigma()
        rel = np.linalg.norm(emp - sigma) / np.linalg.norm(sigma)
        assert rel <= 0.05

    def test_mean_within_mc_error(self):
        rng = np.random.default_rng(2)
        g = random_block_gaussian(rng, (3, 2))
        n = 100_000
        z = gmrf.gmrf_sample(g, rng.standard_normal((n, 5))).data
        se = np.sqrt(np.diag(g.sigma()) / n)
        assert np.all(np.abs(z.mean(axis=0) - g.mu.data) <= 4 * se)


class TestConditional:
    def test_independent_blocks(self):
        layout = gmrf.BlockLayout((2, 2))
        L = np.diag([1.0, 2.0, 0.5, 1.5])
        g = gmrf.BlockGaussian(np.arange(4.0), L, layout)
        mu_hat, sig_hat = gmrf.conditional(g, 0, 1, np.array([9.0, 9.0]))
        np.testing.assert_allclose(mu_hat, [0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(sig_hat, np.diag([1.0, 4.0]), atol=1e-12)

    def test_scalar_correlated_pair(self):
        rho = 0.7
        layout = gmrf.BlockLayout((1, 1))
        sigma = np.array([[1.0, rho], [rho, 1.0]])
        g = gmrf.BlockGaussian(np.zeros(2), gmrf.cholesky(sigma), layout)
        mu_hat, sig_hat = gmrf.conditional(g, 0, 1, np.array([1.0]))
        np.testing.assert_allclose(mu_hat, [rho], atol=1e-12)
        np.testing.assert_allclose(sig_hat, [[1 - rho**2]], atol=1e-12)

    def test_same_block_rejected(self):
        g = random_block_gaussian(np.random.default_rng(0), (2, 2))
        with pytest.raises(ContractError):
            gmrf.conditional(g, 1, 1, np.zeros(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_precision_inversion_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = random_block_gaussian(rng, (2, 3, 2))
        z_j = rng.standard_normal(3)
        mu_hat, sig_hat = gmrf.conditional(g, 0, 1, z_j)
        # oracle: brute-force dense inversion of Sigma_jj
        sigma = g.sigma()
        i_idx, j_idx = np.arange(0, 2), np.arange(2, 5)
        s_jj_inv = np.linalg.inv(sigma[np.ix_(j_idx, j_idx)])
        s_ij = sigma[np.ix_(i_idx, j_idx)]
        mu_o = g.mu.data[i_idx] + s_ij @ s_jj_inv @ (z_j - g.mu.data[j_idx])
        sig_o = sigma[np.ix_(i_idx, i_idx)] - s_ij @ s_jj_inv @ s_ij.T
        np.testing.assert_allclose(mu_hat, mu_o, atol=1e-10)
        np.testing.assert_allclose(sig_hat, sig_o, atol=1e-10)

    def test_matches_epsilon_ball_monte_carlo(self):
        rng = np.random.default_rng(10)
        g = random_block_gaussian(rng, (1, 1, 1), coupling=0.6)
        z_j = np.array([0.3])
        mu_hat, sig_hat = gmrf.conditional(g, 0, 1, z_j)
        n = 1_000_000
        z = gmrf.gmrf_sample(g, rng.standard_normal((n, 3))).data
        keep = np.abs(z[:, 1] - z_j[0]) < 0.02
        sel = z[keep, 0]
        assert sel.size >= 5_000
        se_mean = sel.std(ddof=1) / np.sqrt(sel.size)
        assert abs(sel.mean() - mu_hat[0]) <= 5 * se_mean
        se_var = sel.var(ddof=1) * np.sqrt(2.0 / (sel.size - 1))
        assert abs(sel.var(ddof=1) - sig_hat[0, 0]) <= 5 * se_var


class TestConditionalMulti:
    def test_uncoupled_block_marginal_unchanged(self):
        layout = gmrf.BlockLayout((2, 2))
        L = np.diag([1.0, 1.0, 2.0, 0.5])
        g = gmrf.BlockGaussian(np.arange(4.0), L, layout)
        out = gmrf.conditional_multi(g, {0: np.array([5.0, 5.0])})
        np.testing.assert_allclose(out.mu.data, [2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(out.sigma(), np.diag([4.0, 0.25]), atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_equals_iterated_pairwise_conditioning(self, seed):
        # observing all-but-one block: multi == condition on the merged block
        rng = np.random.default_rng(seed + 20)
        g = random_block_gaussian(rng, (2, 1, 2))
        obs = {1: rng.standard_normal(1), 2: rng.standard_normal(2)}
        out = gmrf.conditional_multi(g, obs)

        # direct formula with a merged observed block
        sigma = g.sigma()
        f, o = np.arange(0, 2), np.arange(2, 5)
        s_oo_inv = np.linalg.inv(sigma[np.ix_(o, o)])
        s_fo = sigma[np.ix_(f, o)]
        z_o = np.concatenate([obs[1], obs[2]])
        mu_o = g.mu.data[f] + s_fo @ s_oo_inv @ (z_o - g.mu.data[o])
        sig_o = sigma[np.ix_(f, f)] - s_fo @ s_oo_inv @ s_fo.T
        np.testing.assert_allclose(out.mu.data, mu_o, atol=1e-9)
        np.testing.assert_allclose(out.sigma(), sig_o, atol=1e-9)

    def test_chained_equals_multi(self):
        rng = np.random.default_rng(33)
        g = random_block_gaussian(rng, (1, 1, 1, 1))
        za, zb = rng.standard_normal(1), rng.standard_normal(1)
        multi = gmrf.conditional_multi(g, {2: za, 3: zb})
        step1 = gmrf.conditional_multi(g, {3: zb})
        step2 = gmrf.conditional_multi(step1, {2 - 0: za})  # block 2 is index 2 in step1
        np.testing.assert_allclose(step2.mu.data, multi.mu.data, atol=1e-9)
        np.testing.assert_allclose(step2.sigma(), multi.sigma(), atol=1e-9)

    def test_four_block_matches_epsilon_ball(self):
        rng = np.random.default_rng(44)
        g = random_block_gaussian(rng, (1, 1, 1, 1), coupling=0.5)
        z_obs = np.array([0.2])
        out = gmrf.conditional_multi(g, {3: z_obs})
        n = 1_000_000
        z = gmrf.gmrf_sample(g, rng.standard_normal((n, 4))).data
        keep = np.abs(z[:, 3] - z_obs[0]) < 0.02
        sel = z[keep, :3]
        assert sel.shape[0] >= 5_000
        se = sel.std(axis=0, ddof=1) / np.sqrt(sel.shape[0])
        assert np.all(np.abs(sel.mean(axis=0) - out.mu.data) <= 5 * se)

    def test_contract_errors(self):
        g = random_block_gaussian(np.random.default_rng(0), (1, 1))
        with pytest.raises(ContractError):
            gmrf.conditional_multi(g, {})
        with pytest.raises(ContractError):
            gmrf.conditional_multi(g, {0: np.zeros(1), 1: np.zeros(1)})


class TestLogDensity:
    def test_standard_normal_at_zero(self):
        g = gmrf.BlockGaussian.standard(gmrf.BlockLayout((1,)))
        assert np.isclose(
            float(gmrf.log_density(g, np.zeros(1)).data), -0.5 * np.log(2 * np.pi)
        )

    def test_integrates_to_one_2d(self):
        rng = np.random.default_rng(5)
        g = random_block_gaussian(rng, (1, 1), coupling=0.3)
        xs = np.linspace(-8, 8, 401) * np.sqrt(g.sigma().max()) + g.mu.data[0]
        ys = np.linspace(-8, 8, 401) * np.sqrt(g.sigma().max()) + g.mu.data[1]
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        dens = np.exp(gmrf.log_density(g, pts).data).reshape(gx.shape)
        total = np.trapezoid(np.trapezoid(dens, ys, axis=1), xs)
        assert abs(total - 1.0) < 1e-4

    def test_rotation_invariance(self):
        rng = np.random.default_rng(6)
        g = random_block_gaussian(rng, (2, 1))
        q_mat, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        z = rng.standard_normal(3)
        ld = float(gmrf.log_density(g, z).data)
        sigma_rot = q_mat @ g.sigma() @ q_mat.T
        g_rot = gmrf.BlockGaussian(
            q_mat @ g.mu.data, gmrf.cholesky(sigma_rot), g.layout
        )
        ld_rot = float(gmrf.log_density(g_rot, q_mat @ z).data)
        assert abs(ld - ld_rot) < 1e-10


class TestKl:
    def test_standard_zero(self):
        g = gmrf.BlockGaussian.standard(gmrf.BlockLayout((2, 2)))
        assert float(gmrf.kl_to_standard(g).data) == pytest.approx(0.0, abs=1e-14)

    def test_mean_shift_closed_form(self):
        m = 1.7
        g = gmrf.BlockGaussian(np.array([m]), np.eye(1), gmrf.BlockLayout((1,)))
        assert float(gmrf.kl_to_standard(g).data) == pytest.approx(m * m / 2)

    def test_quadrature_2d(self):
        rng = np.random.default_rng(7)
        q = random_block_gaussian(rng, (1, 1), coupling=0.4)
        xs = np.linspace(-10, 10, 501)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        lq = gmrf.log_density(q, pts).data
        p = gmrf.BlockGaussian.standard(q.layout)
        lp = gmrf.log_density(p, pts).data
        integrand = (np.exp(lq) * (lq - lp)).reshape(gx.shape)
        kl_quad = np.trapezoid(np.trapezoid(integrand, xs, axis=1), xs)
        assert abs(float(gmrf.kl_to_standard(q).data) - kl_quad) < 1e-4

    def test_kl_between_same_is_zero(self):
        g = random_block_gaussian(np.random.default_rng(8), (2, 2))
        assert float(gmrf.kl_between(g, g).data) == pytest.approx(0.0, abs=1e-12)

    def test_kl_between_diagonal_closed_form(self):
        layout = gmrf.BlockLayout((1, 1))
        q = gmrf.BlockGaussian(np.array([1.0, -0.5]), np.diag([0.8, 1.3]), layout)
        p = gmrf.BlockGaussian(np.array([0.2, 0.0]), np.diag([1.1, 0.9]), layout)
        want = 0.0
        for k in range(2):
            s_q, s_p = q.chol.data[k, k] ** 2, p.chol.data[k, k] ** 2
            dm = q.mu.data[k] - p.mu.data[k]
            want += 0.5 * (s_q / s_p + dm * dm / s_p - 1.0 + np.log(s_p / s_q))
        assert float(gmrf.kl_between(q, p).data) == pytest.approx(want, abs=1e-12)

    def test_kl_between_quadrature_2d(self):
        rng = np.random.default_rng(9)
        q = random_block_gaussian(rng, (1, 1), coupling=0.3)
        p = random_block_gaussian(rng, (1, 1), coupling=0.3)
        xs = np.linspace(-12, 12, 601)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        lq = gmrf.log_density(q, pts).data
        lp = gmrf.log_density(p, pts).data
        integrand = (np.exp(lq) * (lq - lp)).reshape(gx.shape)
        kl_quad = np.trapezoid(np.trapezoid(integrand, xs, axis=1), xs)
        assert abs(float(gmrf.kl_between(q, p).data) - kl_quad) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_kl_nonnegative_random(self, seed):
        rng = np.random.default_rng(seed + 100)
        g = random_block_gaussian(rng, (2, 1))
        assert float(gmrf.kl_to_standard(g).data) >= -1e-12


class TestNaturalParams:
    def test_identity_sigma(self):
        mu = np.array([0.3, -1.2])
        g = gmrf.BlockGaussian(mu, np.eye(2), gmrf.BlockLayout((1, 1)))
        eta, lam = gmrf.natural_params(g)
        np.testing.assert_allclose(eta, mu, atol=1e-12)
        np.testing.assert_allclose(lam, np.eye(2), atol=1e-12)

    def test_roundtrip(self):
        g = random_block_gaussian(np.random.default_rng(12), (2, 2))
        eta, lam = gmrf.natural_params(g)
        back = gmrf.moments_from_natural(eta, lam, g.layout)
        np.testing.assert_allclose(back.mu.data, g.mu.data, atol=1e-9)
        np.testing.assert_allclose(back.sigma(), g.sigma(), atol=1e-9)

    def test_vs_dense_inverse_oracle(self):
        g = random_block_gaussian(np.random.default_rng(13), (3, 2))
        eta, lam = gmrf.natural_params(g)
        lam_oracle = np.linalg.inv(g.sigma())
        np.testing.assert_allclose(lam, lam_oracle, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(eta, lam_oracle @ g.mu.data, rtol=1e-8, atol=1e-10)

    def test_symmetry(self):
        g = random_block_gaussian(np.random.default_rng(14), (2, 2, 2))
        _, lam = gmrf.natural_params(g)
        assert np.abs(lam - lam.T).max() < 1e-10


class TestGradients:
    def test_sample_and_density_grads(self):
        rng = np.random.default_rng(15)
        layout = gmrf.BlockLayout((2, 1))
        L0 = np.tril(rng.standard_normal((3, 3))) * 0.2 + np.eye(3)
        params = {"mu": rng.standard_normal(3), "L": L0}
        u = rng.standard_normal(3)
        z = rng.standard_normal(3)

        def build_sample(v):
            g = gmrf.BlockGaussian(v["mu"], v["L"], layout, validate=False)
            return dc.vsum(dc.square(gmrf.gmrf_sample(g, u)))

        auto, fd = grad_of(build_sample, params)
        assert_grads_close(auto, fd)

        def build_ld(v):
            g = gmrf.BlockGaussian(v["mu"], v["L"], layout, validate=False)
            return gmrf.log_density(g, z)

        auto, fd = grad_of(build_ld, params)
        # fd probes perturb strictly-upper entries the op ignores; compare lower part
        auto["L"], fd["L"] = np.tril(auto["L"]), np.tril(fd["L"])
        assert_grads_close(auto, fd)

    def test_kl_grads(self):
        rng = np.random.default_rng(16)
        layout = gmrf.BlockLayout((1, 1))
        params = {
            "mu_q": rng.standard_normal(2),
            "L_q": np.tril(rng.standard_normal((2, 2))) * 0.1 + np.eye(2),
            "mu_p": rng.standard_normal(2),
            "L_p": np.tril(rng.standard_normal((2, 2))) * 0.1 + np.eye(2),
        }

        def build(v):
            q = gmrf.BlockGaussian(v["mu_q"], v["L_q"], layout, validate=False)
            p = gmrf.BlockGaussian(v["mu_p"], v["L_p"], layout, validate=False)
            return dc.add(gmrf.kl_between(q, p), gmrf.kl_to_standard(q))

        auto, fd = grad_of(build, params)
        for k in ("L_q", "L_p"):
            auto[k], fd[k] = np.tril(auto[k]), np.tril(fd[k])
        assert_grads_close(auto, fd, rtol=2e-4)


class TestValidation:
    def test_nonpositive_diag_rejected(self):
        with pytest.raises(ContractError):
            gmrf.BlockGaussian(np.zeros(2), np.diag([1.0, -1.0]), gmrf.BlockLayout((1, 1)))

    def test_upper_entries_rejected(self):
        L = np.eye(2)
        L[0, 1] = 0.5
        with pytest.raises(ContractError):
            gmrf.BlockGaussian(np.zeros(2), L, gmrf.BlockLayout((1, 1)))

    def test_masked_entries_enforced(self):
        L = np.eye(2)
        L[1, 0] = 0.3
        mask = np.zeros((2, 2), dtype=bool)  # no off-diagonals permitted
        with pytest.raises(ContractError):
            gmrf.BlockGaussian(np.zeros(2), L, gmrf.BlockLayout((1, 1)), mask=mask)

    def test_singular_p_raises_conditioning_error(self):
        layout = gmrf.BlockLayout((1, 1))
        q = gmrf.BlockGaussian.standard(layout)
        p = gmrf.BlockGaussian(
            np.zeros(2), np.diag([1.0, 1e-13]), layout, validate=False
        )
        with pytest.raises(ConditioningError):
            gmrf.kl_between(q, p)
