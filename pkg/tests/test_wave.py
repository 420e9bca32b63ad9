import math

import numpy as np
import pytest

from ltitwin.wave import (DiscreteState, GridSpec, IntegrationError, ObservationSpec, PhysicalConstants, WaveModel,
                          cfl_max_dt, default_observation)

from conftest import tiny_model


def desk_model(**obs_kw):
    grid = GridSpec()
    return WaveModel(grid, PhysicalConstants(), default_observation(grid, **obs_kw))


def dot_rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


class TestConstants:
    def test_sound_speed_and_impedance(self):
        c = PhysicalConstants()
        assert c.sound_speed == pytest.approx(1500.0, rel=1e-14)
        assert c.impedance == pytest.approx(1000.0 * 1500.0, rel=1e-14)

    @pytest.mark.parametrize("field", ["rho", "bulk_modulus", "gravity"])
    def test_positive(self, field):
        with pytest.raises(ValueError):
            PhysicalConstants(**{field: 0.0})


class TestGrid:
    def test_desk_extent(self):
        g = GridSpec()
        assert g.extent == (16250.0, 0.0, 1125.0)
        assert g.state_size == 65 * 9 + 64 * 9 + 65 * 9 + 65

    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec(nx=2)
        with pytest.raises(ValueError):
            GridSpec(seafloor_dim=1, ny=3)
        with pytest.raises(ValueError):
            GridSpec(dx=-1.0)
        with pytest.raises(ValueError):
            GridSpec(nx=1000, nz=1000, max_state=10**5)

    def test_observation_validation(self):
        g = GridSpec(nx=8, nz=3)
        with pytest.raises(ValueError):
            ObservationSpec((1, 1), (2,)).validate(g)
        with pytest.raises(ValueError):
            ObservationSpec((8,), (2,)).validate(g)
        with pytest.raises(ValueError):
            ObservationSpec((1,), (2,), n_steps=5, qoi_subsample=2).validate(g)


class TestCFL:
    def test_doubling_c_halves_dt(self):
        g = GridSpec()
        c1 = PhysicalConstants()
        c2 = PhysicalConstants(bulk_modulus=4 * c1.bulk_modulus)
        assert cfl_max_dt(g, c2) == pytest.approx(cfl_max_dt(g, c1) / 2, rel=1e-14)

    def test_halving_h_halves_dt(self):
        c = PhysicalConstants()
        g1 = GridSpec(dx=250.0, dz=125.0)
        g2 = GridSpec(dx=250.0, dz=62.5)
        assert cfl_max_dt(g2, c) == pytest.approx(cfl_max_dt(g1, c) / 2, rel=1e-14)

    def test_substeps_divide_data_step(self):
        m = desk_model()
        assert m.substeps * m.dt == pytest.approx(m.obs.data_dt, rel=1e-14)
        assert m.dt <= 0.5 * cfl_max_dt(m.grid, m.constants) * (1 + 1e-12)

    def test_spectral_radius_inside_rk4_region(self):
        m = tiny_model()
        lam = np.linalg.eigvals(m.L.toarray()) * m.dt
        z = lam
        amp = np.abs(1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24)
        assert amp.max() <= 1 + 1e-12

    def test_long_run_stability(self):
        m = desk_model()
        rng = np.random.default_rng(0)
        w = rng.standard_normal(m.n_state) * np.concatenate(
            [np.full(m.n_state - 65, 1.0), np.full(65, 1e-6)])
        e0 = m.energy(w)
        zero = np.zeros(m.n_param)
        for _ in range(2000):
            w = m.step(w, zero)
        assert m.energy(w) <= 1e3 * e0


class TestStep:
    def test_homogeneous(self):
        m = tiny_model()
        w = np.zeros(m.n_state)
        for _ in range(200):
            w = m.step(w, np.zeros(m.n_param))
        assert np.abs(w).max(initial=0.0) == 0.0

    def test_linearity(self):
        m = tiny_model()
        rng = np.random.default_rng(1)
        w1, w2 = rng.standard_normal((2, m.n_state))
        a, b = rng.standard_normal((2, m.n_param))
        lhs = m.step(w1 + w2, a + b)
        rhs = m.step(w1, a) + m.step(w2, b) - m.step(np.zeros(m.n_state), np.zeros(m.n_param))
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)

    def test_matches_explicit_rk4_stages(self):
        m = tiny_model()
        rng = np.random.default_rng(2)
        w = rng.standard_normal(m.n_state)
        mk = rng.standard_normal(m.n_param)
        L, f, h = m.L, m.Bsrc @ mk, m.dt
        k1 = L @ w + f
        k2 = L @ (w + h / 2 * k1) + f
        k3 = L @ (w + h / 2 * k2) + f
        k4 = L @ (w + h * k3) + f
        ref = w + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out = m.step(w, mk)
        assert np.linalg.norm(out - ref) <= 1e-12 * np.linalg.norm(ref)

    def test_state_round_trip(self):
        m = tiny_model()
        w = np.random.default_rng(3).standard_normal(m.n_state)
        s = m.unpack(w)
        assert isinstance(s, DiscreteState)
        np.testing.assert_array_equal(m.pack(s), w)
        np.testing.assert_array_equal(m.pack(m.step(s, np.zeros(m.n_param))), m.step(w, np.zeros(m.n_param)))

    def test_nan_raises(self):
        m = tiny_model()
        w = np.zeros(m.n_state)
        w[0] = np.nan
        with pytest.raises(IntegrationError):
            m.step(w, np.zeros(m.n_param))

    def test_causal_cone(self):
        m = desk_model()
        c, dx = m.constants.sound_speed, m.grid.dx
        x = (np.arange(m.grid.nx) + 0.5) * dx
        dist = np.abs(x - x[32])
        mk = np.zeros(m.n_param)
        mk[32] = 1.0
        w = m.step(np.zeros(m.n_state), mk)
        for n in range(1, 51):
            w = m.step(w, np.zeros(m.n_param))
            p = np.abs(m.unpack(w).pressure).max(axis=(0, 1))
            # RK4 applies the 1-cell stencil 4 times per step: hard support limit
            assert not p[dist > 4 * (n + 1) * dx + dx].any()
            # beyond c*t plus one RK4 stencil width only dispersive precursors remain
            outside = dist > c * (n + 1) * m.dt + 4 * dx
            if outside.any():
                assert p[outside].max() <= 1e-3 * p.max()


class TestTransposes:
    @pytest.mark.parametrize("seed", range(5))
    def test_dot_products(self, seed):
        m = tiny_model()
        rng = np.random.default_rng(seed)
        w, lam = rng.standard_normal((2, m.n_state))
        mk = rng.standard_normal(m.n_param)
        assert dot_rel(m.apply_A(w) @ lam, w @ m.apply_AT(lam)) <= 1e-12
        assert dot_rel(m.apply_C(mk) @ lam, mk @ m.apply_CT(lam)) <= 1e-12
        y = rng.standard_normal(m.n_data)
        assert dot_rel(m.observe(w) @ y, w @ m.observe_transpose(y)) <= 1e-14
        yq = rng.standard_normal(m.n_qoi)
        assert dot_rel(m.observe_qoi(w) @ yq, w @ m.observe_qoi_transpose(yq)) <= 1e-14

    def test_zero_adjoint(self):
        m = tiny_model()
        assert not m.step_transpose(np.zeros(m.n_state)).any()
        assert not m.collect_source_transpose(np.zeros(m.n_state)).any()

    def test_observe_unit_pressure(self):
        m = tiny_model()
        for j, idx in enumerate(m.obs.sensor_indices):
            w = np.zeros(m.n_state)
            w[idx] = 1.0  # bottom-cell pressure of seafloor node idx
            np.testing.assert_array_equal(m.observe(w), np.eye(m.n_data)[j])
        assert not m.observe(np.zeros(m.n_state)).any()

    @pytest.mark.parametrize("seed", range(3))
    def test_global_march_adjoint(self, seed):
        m = tiny_model()
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((24, m.n_param))
        y = rng.standard_normal((24, m.n_data))
        yq = rng.standard_normal((12, m.n_qoi))
        assert dot_rel(np.sum(m.simulate_p2o(x) * y), np.sum(x * m.simulate_p2o_transpose(y))) <= 1e-12
        assert dot_rel(np.sum(m.simulate_p2q(x) * yq), np.sum(x * m.simulate_p2q_transpose(yq))) <= 1e-12

    def test_zero_transpose_input(self):
        m = tiny_model()
        assert not m.simulate_p2o_transpose(np.zeros((24, m.n_data))).any()


class TestSimulate:
    def test_zero(self):
        m = tiny_model()
        d, q = m.simulate_both(np.zeros((24, m.n_param)))
        assert not d.any() and not q.any()

    def test_shift_invariance(self):
        m = tiny_model()
        rng = np.random.default_rng(4)
        x = rng.standard_normal((24, m.n_param))
        k = 5
        xs = np.zeros_like(x)
        xs[k:] = x[:-k]
        d, ds = m.simulate_p2o(x), m.simulate_p2o(xs)
        assert not ds[:k].any()
        assert np.abs(ds[k:] - d[:-k]).max() <= 1e-12 * np.abs(d).max()

    def test_causality_bitwise(self):
        m = tiny_model()
        rng = np.random.default_rng(5)
        x = rng.standard_normal((24, m.n_param))
        x2 = x.copy()
        x2[10] += 1.0
        np.testing.assert_array_equal(m.simulate_p2o(x)[:10], m.simulate_p2o(x2)[:10])

    def test_superposition(self):
        m = tiny_model()
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal((2, 24, m.n_param))
        lhs = m.simulate_p2o(2 * a - 3 * b)
        rhs = 2 * m.simulate_p2o(a) - 3 * m.simulate_p2o(b)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)

    def test_counter_increments(self):
        m = tiny_model()
        m.simulate_p2o(np.zeros((24, m.n_param)))
        assert m.counters.steps == 24 * m.substeps
        assert m.counters.forward_marches == 1
        m.simulate_p2o_transpose(np.ones((24, m.n_data)))
        assert m.counters.transposed_steps == 24 * m.substeps

    def test_qoi_subsampling(self):
        m = tiny_model()
        x = np.random.default_rng(7).standard_normal((24, m.n_param))
        d, q = m.simulate_both(x)
        np.testing.assert_array_equal(q, m.simulate_p2q(x))
        assert q.shape == (12, m.n_qoi)

    def test_three_dimensional_adjoint(self):
        grid = GridSpec(2, 5, 4, 3, 400.0, 400.0, 200.0)
        m = WaveModel(grid, PhysicalConstants(), default_observation(grid, 1.0, 6, 2, (0.3, 0.7), (0.5,)))
        rng = np.random.default_rng(8)
        x = rng.standard_normal((6, m.n_param))
        y = rng.standard_normal((6, m.n_data))
        assert dot_rel(np.sum(m.simulate_p2o(x) * y), np.sum(x * m.simulate_p2o_transpose(y))) <= 1e-12
        lam = np.linalg.eigvals(m.L.toarray()) * m.dt
        assert np.abs(1 + lam + lam**2 / 2 + lam**3 / 6 + lam**4 / 24).max() <= 1 + 1e-12


def test_sensor_placement_desk():
    obs = default_observation(GridSpec())
    assert obs.sensor_indices == (8, 16, 24, 32, 40, 48, 56)
    assert obs.qoi_indices == (32, 40, 48, 56)
    assert math.isclose(obs.data_dt, 0.5)
