import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vpflow.flows import (
    FlowChain,
    FlowError,
    PlanarFlowChain,
    PlanarFlowParams,
    chain_forward,
    ensure_invertible,
    export_density_grid,
    planar_forward,
    standard_normal_log_density,
    transformed_log_density,
    write_density_grid_csv,
)


def random_unit(d, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return ensure_invertible(
        PlanarFlowParams(
            rng.normal(scale=scale, size=d), rng.normal(scale=scale, size=d), rng.normal()
        )
    )


def fd_log_det(z, params, step=1e-5):
    d = len(z)
    jac = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        zp, _ = planar_forward(z + e, params)
        zm, _ = planar_forward(z - e, params)
        jac[:, j] = (zp - zm) / (2 * step)
    return np.log(abs(np.linalg.det(jac)))


def e1(d):
    v = np.zeros(d)
    v[0] = 1.0
    return v


class TestEnsureInvertible:
    def test_already_valid_unchanged(self):
        # w.u = 1 >= -1: no reparameterization applied
        params = PlanarFlowParams(e1(3), e1(3), 0.0)
        out = ensure_invertible(params)
        assert np.array_equal(out.u, params.u)

    def test_violating_params_projected(self):
        params = PlanarFlowParams(-3.0 * e1(2), e1(2), 0.0)
        out = ensure_invertible(params)
        expected = -1.0 + np.log1p(np.exp(-3.0))
        assert out.w @ out.u == pytest.approx(expected, abs=1e-12)
        assert out.w @ out.u > -1.0

    def test_zero_w_unchanged(self):
        params = PlanarFlowParams(np.array([1.0, 2.0]), np.zeros(2), 0.5)
        out = ensure_invertible(params)
        assert out is params

    @given(st.integers(0, 10_000), st.integers(1, 8))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, seed, d):
        rng = np.random.default_rng(seed)
        params = PlanarFlowParams(
            rng.normal(scale=3, size=d), rng.normal(scale=3, size=d), rng.normal()
        )
        once = ensure_invertible(params)
        twice = ensure_invertible(once)
        assert np.abs(twice.u - once.u).max() <= 1e-9

    def test_constraint_always_satisfied(self):
        for seed in range(200):
            p = random_unit(4, seed, scale=4.0)
            assert p.w @ p.u >= -1.0


class TestPlanarForward:
    def test_zero_u_is_identity(self):
        params = PlanarFlowParams(np.zeros(3), np.ones(3), 0.7)
        z = np.array([0.1, -0.2, 0.3])
        z_out, log_det = planar_forward(z, params)
        assert np.array_equal(z_out, z)
        assert log_det == 0.0

    def test_zero_w_keeps_z_with_zero_b(self):
        params = PlanarFlowParams(np.ones(2), np.zeros(2), 0.0)
        z = np.array([0.4, -1.1])
        z_out, log_det = planar_forward(z, params)
        assert np.allclose(z_out, z)
        assert log_det == 0.0

    def test_log_det_matches_finite_differences_d3(self):
        params = random_unit(3, 42)
        z = np.random.default_rng(7).normal(size=3)
        _, analytic = planar_forward(z, params)
        assert analytic == pytest.approx(fd_log_det(z, params), abs=1e-6)

    @given(st.integers(0, 5000), st.sampled_from([1, 2, 4, 16]))
    @settings(max_examples=60, deadline=None)
    def test_log_det_fd_property(self, seed, d):
        params = random_unit(d, seed)
        z = np.random.default_rng(seed + 1).normal(size=d)
        _, analytic = planar_forward(z, params)
        assert abs(analytic - fd_log_det(z, params)) < 1e-5

    def test_batched_matches_single(self):
        params = random_unit(4, 3)
        batch = np.random.default_rng(0).normal(size=(5, 4))
        z_out, log_det = planar_forward(batch, params)
        for i in range(5):
            zi, ldi = planar_forward(batch[i], params)
            assert np.allclose(z_out[i], zi)
            assert log_det[i] == pytest.approx(ldi)

    def test_dimension_mismatch(self):
        with pytest.raises(FlowError):
            planar_forward(np.zeros(3), random_unit(2, 0))


class TestChainForward:
    def test_empty_chain(self):
        chain = FlowChain((), 3)
        z0 = np.array([1.0, 2.0, 3.0])
        state = chain_forward(z0, chain)
        assert np.array_equal(state.z_final, z0)
        assert state.sum_log_det == 0.0

    def test_identity_units(self):
        unit = PlanarFlowParams(np.zeros(2), np.ones(2), 0.0)
        chain = FlowChain((unit,) * 3, 2)
        state = chain_forward(np.array([0.5, -0.5]), chain)
        assert np.array_equal(state.z_final, state.z0)
        assert state.sum_log_det == 0.0

    def test_two_unit_manual_composition(self):
        u1, u2 = random_unit(2, 10), random_unit(2, 11)
        chain = FlowChain((u1, u2), 2)
        z0 = np.array([0.3, -0.7])
        z1, ld1 = planar_forward(z0, u1)
        z2, ld2 = planar_forward(z1, u2)
        state = chain_forward(z0, chain)
        assert np.allclose(state.z_final, z2)
        assert state.sum_log_det == pytest.approx(ld1 + ld2, abs=1e-12)

    def test_split_composition_property(self):
        units = tuple(random_unit(3, s) for s in range(5))
        chain_a = FlowChain(units[:2], 3)
        chain_b = FlowChain(units[2:], 3)
        full = FlowChain(units, 3)
        z0 = np.random.default_rng(1).normal(size=3)
        s_full = chain_forward(z0, full)
        s_a = chain_forward(z0, chain_a)
        s_b = chain_forward(s_a.z_final, chain_b)
        assert np.abs(s_full.z_final - s_b.z_final).max() < 1e-12
        assert s_full.sum_log_det == pytest.approx(
            s_a.sum_log_det + s_b.sum_log_det, abs=1e-12
        )

    def test_unit_index_in_error(self):
        with pytest.raises(FlowError, match="unit 1"):
            FlowChain((random_unit(2, 0), random_unit(3, 0)), 2)
        bad = PlanarFlowParams(np.zeros(2), np.ones(2), 0.0)
        with pytest.raises(FlowError, match="unit 0"):
            chain_forward(np.zeros(3), FlowChain((bad,), 2))


class TestTransformedLogDensity:
    def test_identity_chain_standard_normal(self):
        chain = FlowChain((), 2)
        log_q = transformed_log_density(np.zeros(2), standard_normal_log_density(np.zeros(2)), chain)
        assert log_q == pytest.approx(-np.log(2 * np.pi))

    def test_one_dimensional_closed_form(self):
        params = ensure_invertible(PlanarFlowParams(np.array([0.5]), np.array([1.0]), 0.2))
        chain = FlowChain((params,), 1)
        z0 = np.array([0.4])
        # change of variables by hand
        pre = params.w[0] * z0[0] + params.b
        det = 1.0 + params.u[0] * (1.0 - np.tanh(pre) ** 2) * params.w[0]
        expected = standard_normal_log_density(z0) - np.log(abs(det))
        got = transformed_log_density(z0, standard_normal_log_density(z0), chain)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_mass_conservation_quadrature(self):
        # integrate the transformed density over its support by pulling the
        # integral back to the base grid: sum q0(z0) dz0 restricted to where
        # the analytic transformed density is finite must be ~1, and the
        # pointwise density must agree with the warped-cell geometry below.
        chain = FlowChain(tuple(random_unit(2, s, scale=1.5) for s in range(2)), 2)
        n = 161
        axis = np.linspace(-6, 6, n)
        dz = (axis[1] - axis[0]) ** 2
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        z0 = np.column_stack([gx.ravel(), gy.ravel()])
        state = chain_forward(z0, chain)
        # base mass (sanity that the grid covers the support)
        base_mass = np.exp(standard_normal_log_density(z0)).sum() * dz
        assert base_mass == pytest.approx(1.0, abs=1e-2)
        # warped mass: density at transformed points times warped cell areas
        density = np.exp(standard_normal_log_density(z0) - state.sum_log_det)
        zf = state.z_final.reshape(n, n, 2)
        dens = density.reshape(n, n)
        ex = zf[1:, :-1] - zf[:-1, :-1]
        ey = zf[:-1, 1:] - zf[:-1, :-1]
        areas = np.abs(ex[..., 0] * ey[..., 1] - ex[..., 1] * ey[..., 0])
        mass = (dens[:-1, :-1] * areas).sum()
        assert mass == pytest.approx(1.0, abs=1e-2)


class TestExportDensityGrid:
    def test_identity_chain_equals_base_gaussian(self):
        grid = export_density_grid(FlowChain((), 2), (-3, 3), 21)
        z = grid[:, :2]
        expected = np.exp(standard_normal_log_density(z))
        assert np.abs(grid[:, 2] - expected).max() < 1e-12

    def test_resolution_one(self):
        grid = export_density_grid(FlowChain((), 2), (-1, 1), 1)
        assert grid.shape == (1, 3)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(FlowError):
            export_density_grid(FlowChain((), 3))

    def test_five_unit_chain_mass(self):
        chain = FlowChain(tuple(random_unit(2, 100 + s) for s in range(5)), 2)
        n = 401
        grid = export_density_grid(chain, (-6, 6), n)
        zf = grid[:, :2].reshape(n, n, 2)
        dens = grid[:, 2].reshape(n, n)
        ex = zf[1:, :-1] - zf[:-1, :-1]
        ey = zf[:-1, 1:] - zf[:-1, :-1]
        areas = np.abs(ex[..., 0] * ey[..., 1] - ex[..., 1] * ey[..., 0])
        mass = (dens[:-1, :-1] * areas).sum()
        assert mass == pytest.approx(1.0, abs=2e-2)

    def test_csv_export(self, tmp_path):
        grid = export_density_grid(FlowChain((), 2), (-1, 1), 3)
        path = tmp_path / "grid.csv"
        write_density_grid_csv(grid, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "zx,zy,density"
        assert len(lines) == 10


class TestMonteCarloConsistency:
    def test_binned_mass_matches_quadrature(self):
        chain = FlowChain(tuple(random_unit(2, 7 + s, scale=1.5) for s in range(3)), 2)
        rng = np.random.default_rng(0)
        samples = rng.standard_normal((1_000_000, 2))
        transformed = chain_forward(samples, chain).z_final
        box = np.array([[-1.0, 1.5], [-2.0, 0.5]])  # [x-range, y-range]
        inside = (
            (transformed[:, 0] >= box[0, 0])
            & (transformed[:, 0] <= box[0, 1])
            & (transformed[:, 1] >= box[1, 0])
            & (transformed[:, 1] <= box[1, 1])
        )
        mc_mass = inside.mean()
        # pull the box back through the forward map on a quadrature grid
        n = 401
        axis = np.linspace(-6, 6, n)
        dz = (axis[1] - axis[0]) ** 2
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        z0 = np.column_stack([gx.ravel(), gy.ravel()])
        state = chain_forward(z0, chain)
        in_box = (
            (state.z_final[:, 0] >= box[0, 0])
            & (state.z_final[:, 0] <= box[0, 1])
            & (state.z_final[:, 1] >= box[1, 0])
            & (state.z_final[:, 1] <= box[1, 1])
        )
        quad_mass = (np.exp(standard_normal_log_density(z0)) * in_box).sum() * dz
        assert mc_mass == pytest.approx(quad_mass, abs=1e-2)


class TestTorchChain:
    def test_matches_functional_chain(self):
        torch.manual_seed(0)
        module = PlanarFlowChain(3, 4)
        with torch.no_grad():
            module.u.normal_(0, 1.0)
            module.w.normal_(0, 1.0)
            module.b.normal_(0, 1.0)
        chain = module.to_flow_chain()
        z = torch.randn(6, 3, dtype=torch.float64)
        z_out, log_det = module.double()(z)
        state = chain_forward(z.numpy(), chain)
        assert np.abs(z_out.detach().numpy() - state.z_final).max() < 1e-12
        assert np.abs(log_det.detach().numpy() - state.sum_log_det).max() < 1e-12

    def test_near_identity_init(self):
        torch.manual_seed(1)
        module = PlanarFlowChain(4, 5)
        z = torch.randn(10, 4)
        z_out, log_det = module(z)
        assert (z_out - z).abs().max() < 0.05
        assert log_det.abs().max() < 0.05
