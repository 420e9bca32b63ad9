import numpy as np
import pytest

from ltitwin.prior import EllipticOperator, PriorError, PriorSpec, alpha2_for_range, prior_sample
from ltitwin.wave import GridSpec

G1 = GridSpec(1, 12, 1, 4, 500.0, 500.0, 250.0)
G2 = GridSpec(2, 6, 5, 3, 500.0, 400.0, 250.0)


class TestOperator:
    def test_laplacian_suppressed(self):
        op = EllipticOperator(G1, PriorSpec(2.0, 1e-12))
        v = np.random.default_rng(0).standard_normal(12)
        # the Robin term sqrt(alpha1 alpha2)/h ~ 3e-9 is all that remains
        np.testing.assert_allclose(op.cov_apply(v), v / 4, rtol=1e-8)

    @pytest.mark.parametrize("grid", [G1, G2])
    def test_constant_in_neumann_nullspace(self, grid):
        op = EllipticOperator(grid, PriorSpec(1.5, 3e5, robin_coeff=0.0))
        np.testing.assert_allclose(op.apply(np.ones(op.n)), 1.5, rtol=1e-12)

    @pytest.mark.parametrize("grid", [G1, G2])
    def test_symmetric(self, grid):
        M = EllipticOperator(grid, PriorSpec()).matrix
        assert abs(M - M.T).max() <= 1e-14 * abs(M).max()

    def test_default_robin(self):
        assert PriorSpec(2.0, 8.0).beta == 4.0
        assert PriorSpec(2.0, 8.0, robin_coeff=0.5).beta == 0.5

    def test_bandwidth(self):
        assert EllipticOperator(G1, PriorSpec()).bandwidth == 1
        assert EllipticOperator(G2, PriorSpec()).bandwidth == 6

    @pytest.mark.parametrize("kw", [{"alpha1": 0.0}, {"alpha2": -1.0}, {"robin_coeff": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(PriorError):
            PriorSpec(**kw)

    def test_correlation_length(self):
        spec = PriorSpec(1.0, alpha2_for_range(2000.0, 1))
        assert spec.correlation_length(1) == pytest.approx(2000.0)


class TestApply:
    @pytest.mark.parametrize("grid", [G1, G2])
    def test_round_trip(self, grid):
        op = EllipticOperator(grid, PriorSpec(1.0, 2e5))
        v = np.random.default_rng(1).standard_normal(op.n)
        assert np.linalg.norm(op.precision_apply(op.cov_apply(v)) - v) <= 1e-10 * np.linalg.norm(v)
        assert np.linalg.norm(op.cov_apply(op.precision_apply(v)) - v) <= 1e-10 * np.linalg.norm(v)

    def test_zero(self):
        op = EllipticOperator(G1, PriorSpec())
        assert not op.cov_apply(np.zeros(12)).any()

    def test_smoothing(self):
        op = EllipticOperator(G1, PriorSpec(1.0, 2e5))
        osc = (-1.0) ** np.arange(12)
        one = np.ones(12)
        assert np.linalg.norm(op.cov_apply(osc)) / np.linalg.norm(osc) < np.linalg.norm(op.cov_apply(one)) / np.sqrt(12)

    def test_spd(self):
        C = EllipticOperator(G2, PriorSpec()).dense_cov()
        np.testing.assert_allclose(C, C.T, atol=1e-14 * np.abs(C).max())
        assert np.linalg.eigvalsh(C).min() > 0

    def test_per_slice_bitwise(self):
        op = EllipticOperator(G1, PriorSpec(1.0, 2e5))
        v = np.random.default_rng(2).standard_normal((7, 12))
        full = op.cov_apply(v)
        for t in range(7):
            np.testing.assert_array_equal(full[t], op.cov_apply(v[t]))

    def test_batched_layout(self):
        op = EllipticOperator(G1, PriorSpec(1.0, 2e5))
        v = np.random.default_rng(3).standard_normal((4, 12, 3))
        out = op.cov_apply(v)
        np.testing.assert_allclose(out[:, :, 1], op.cov_apply(v[:, :, 1]), rtol=1e-14, atol=1e-16)

    def test_shape_mismatch(self):
        with pytest.raises(PriorError):
            EllipticOperator(G1, PriorSpec()).cov_apply(np.ones(5))

    def test_pointwise_variance(self):
        op = EllipticOperator(G1, PriorSpec(1.0, 2e5))
        np.testing.assert_allclose(op.pointwise_variance(), np.diag(op.dense_cov()))


class TestSampling:
    def test_reproducible(self):
        op = EllipticOperator(G1, PriorSpec())
        np.testing.assert_array_equal(op.sample(5, 3), op.sample(5, 3))
        f = prior_sample(op, 5, 3, 0.5)
        assert f.dt == 0.5
        np.testing.assert_array_equal(f.values, op.sample(5, 3))

    def test_monte_carlo_covariance(self):
        op = EllipticOperator(G1, PriorSpec(1.0, 2e5))
        n = 100_000
        s = op.sample(np.random.default_rng(11), n)
        C = op.dense_cov()
        emp = s.T @ s / n
        np.testing.assert_allclose(np.diag(emp), np.diag(C), rtol=0.05)
        mean = s.mean(axis=0)
        assert np.linalg.norm(mean) <= 4 * np.sqrt(np.trace(C) / n)
