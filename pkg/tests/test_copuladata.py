import math

import numpy as np
import pytest
from scipy import stats

from mrfvae import copuladata as cd
from mrfvae.errors import ContractError, DomainError, NotPositiveDefinite, ParseError


class TestBuildCorrelation:
    def test_equicorrelation_eigenvalues(self):
        r = cd.build_correlation(2, 4, 0.9)
        assert np.all(r[~np.eye(4, dtype=bool)] == 0.9)
        np.testing.assert_allclose(
            np.sort(np.linalg.eigvalsh(r)), [0.1, 0.1, 0.1, 1 + 3 * 0.9], atol=1e-12
        )

    def test_alternating_is_similarity_transform(self):
        r1 = cd.build_correlation(1, 4, 0.9)
        r2 = cd.build_correlation(2, 4, 0.9)
        d = np.diag([(-1.0) ** k for k in range(4)])
        np.testing.assert_allclose(r1, d @ r2 @ d, atol=1e-14)
        assert np.linalg.eigvalsh(r1).min() > 0

    def test_sign_pattern(self):
        r1 = cd.build_correlation(1, 4, 0.9)
        for k in range(4):
            for l in range(4):
                if k != l:
                    assert r1[k, l] == (-1.0) ** (k + l) * 0.9

    def test_rho_zero_identity(self):
        np.testing.assert_array_equal(cd.build_correlation(1, 4, 0.0), np.eye(4))

    def test_not_pd_rejected(self):
        # equicorrelation needs rho > -1/(m-1); below that it loses PD
        with pytest.raises(NotPositiveDefinite):
            cd.build_correlation(2, 4, -0.5)

    def test_domain(self):
        with pytest.raises(DomainError):
            cd.build_correlation(3, 4, 0.9)
        with pytest.raises(DomainError):
            cd.build_correlation(2, 4, 1.0)


class TestSample:
    def test_shape_and_open_interval(self):
        spec = cd.CopulaSpec(n=5000, seed=1)
        x = cd.sample(spec)
        assert x.shape == (5000, 8)
        assert np.all(x > 0.0) and np.all(x < 1.0)

    def test_marginals_uniform_ks(self):
        spec = cd.CopulaSpec(n=10_000, seed=2)
        x = cd.sample(spec)
        for c in range(8):
            assert stats.kstest(x[:, c], "uniform").pvalue > 0.01

    def test_spearman_matches_gaussian_copula_formula(self):
        spec = cd.CopulaSpec(n=100_000, seed=3)
        x = cd.sample(spec)
        want = (6.0 / math.pi) * math.asin(0.45)
        # same-coordinate pairs across modalities; sign from the copula pattern
        for k in range(4):
            for l in range(k + 1, 4):
                rho2, _ = stats.spearmanr(x[:, 2 * k + 1], x[:, 2 * l + 1])
                assert rho2 == pytest.approx(want, abs=0.02)
                rho1, _ = stats.spearmanr(x[:, 2 * k], x[:, 2 * l])
                assert rho1 == pytest.approx((-1.0) ** (k + l) * want, abs=0.02)

    def test_rho_zero_independent(self):
        spec = cd.CopulaSpec(n=50_000, rho=0.0, seed=4)
        x = cd.sample(spec)
        se = 1.0 / math.sqrt(x.shape[0])
        c = np.corrcoef(x.T)
        off = c[~np.eye(8, dtype=bool)]
        assert np.all(np.abs(off) <= 4 * se)

    def test_coordinates_mutually_independent(self):
        spec = cd.CopulaSpec(n=50_000, seed=5)
        x = cd.sample(spec)
        se = 1.0 / math.sqrt(x.shape[0])
        c = np.corrcoef(x.T)
        for k in range(4):
            for l in range(4):
                assert abs(c[2 * k, 2 * l + 1]) <= 4 * se

    def test_bit_identical_for_fixed_seed(self):
        a = cd.sample(cd.CopulaSpec(n=9000, seed=6))
        b = cd.sample(cd.CopulaSpec(n=9000, seed=6))
        assert np.array_equal(a, b)
        c = cd.sample(cd.CopulaSpec(n=9000, seed=7))
        assert not np.array_equal(a, c)

    def test_block_boundaries_seamless(self):
        # KS on the rows straddling the internal block boundary; regression
        # guard against per-block stream reuse
        spec = cd.CopulaSpec(n=20_000, seed=8)
        x = cd.sample(spec)
        lo, hi = x[:10_000], x[10_000:]
        for c in range(8):
            assert stats.ks_2samp(lo[:, c], hi[:, c]).pvalue > 0.005

    def test_split(self):
        x = cd.sample(cd.CopulaSpec(n=300, seed=9))
        tr, te = cd.split(x, 100)
        assert tr.shape == (100, 8) and te.shape == (200, 8)
        with pytest.raises(ContractError):
            cd.split(x, 300)

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            cd.CopulaSpec(m=1)
        with pytest.raises(DomainError):
            cd.CopulaSpec(sigmas=(1.0, 0.0))
        with pytest.raises(DomainError):
            cd.CopulaSpec(n=0)


class TestSaveLoad:
    def test_round_trip_bit_equal(self, tmp_path):
        x = cd.sample(cd.CopulaSpec(n=500, seed=10))
        p = tmp_path / "data.csv"
        cd.save(x, p)
        y = cd.load(p)
        assert np.array_equal(x, y)

    def test_header_fixed_and_validated(self, tmp_path):
        x = cd.sample(cd.CopulaSpec(n=5, seed=11))
        p = tmp_path / "data.csv"
        cd.save(x, p)
        first = p.read_text().splitlines()[0]
        assert first == "mod1_dim1,mod1_dim2,mod2_dim1,mod2_dim2,mod3_dim1,mod3_dim2,mod4_dim1,mod4_dim2"
        p.write_text(first.replace("mod1", "modX") + "\n0,0,0,0,0,0,0,0\n")
        with pytest.raises(ParseError) as err:
            cd.load(p)
        assert err.value.line == 1

    def test_truncated_row_names_line(self, tmp_path):
        x = cd.sample(cd.CopulaSpec(n=3, seed=12))
        p = tmp_path / "data.csv"
        cd.save(x, p)
        lines = p.read_text().splitlines()
        lines[2] = lines[2].rsplit(",", 1)[0]  # drop last field of row 2
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            cd.load(p)
        assert err.value.line == 3

    def test_non_numeric_field(self, tmp_path):
        p = tmp_path / "data.csv"
        cd.save(cd.sample(cd.CopulaSpec(n=2, seed=13)), p)
        lines = p.read_text().splitlines()
        parts = lines[1].split(",")
        parts[3] = "oops"
        lines[1] = ",".join(parts)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            cd.load(p)
        assert err.value.line == 2

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text(",".join(cd.column_names()) + "\n")
        with pytest.raises(ParseError):
            cd.load(p)

    def test_save_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ContractError):
            cd.save(np.zeros((3, 5)), tmp_path / "x.csv")
