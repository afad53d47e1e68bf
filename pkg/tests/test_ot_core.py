"""Tests for the transport solvers, c-transforms, and map assembly."""

import numpy as np
import pytest

from otlab import ot_core as oc
from otlab.cost import power_cost
from otlab.errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    InputError,
    ParameterError,
    RangeError,
)
from otlab.geometry import Grid, as_density, random_smooth_density


def four_point_grid():
    # cell centers at 0, 1, 2, 3
    return Grid(1, -0.5, 3.5, 4)


def random_pair(n=64, seeds=(3, 11), bounds=(0.0, 1.0)):
    grid = Grid(1, bounds[0], bounds[1], n)
    return grid, random_smooth_density(grid, seeds[0]), random_smooth_density(grid, seeds[1])


class TestCTransform:
    def test_zero_potential_gives_zero(self):
        # minimizer is y = x, where h(0) - 0 = 0
        grid = four_point_grid()
        cost = power_cost(2.0, grid.cost_radius)
        phi = oc.c_transform(cost, np.zeros(4), grid)
        np.testing.assert_allclose(phi, np.zeros(4))

    def test_exhaustive_four_point_minimum(self):
        # psi = (0, -1, 0, 0), h(z) = z^2/2 on centers {0,1,2,3}:
        # phi(0) = min(0, 1.5, 2, 4.5) = 0, phi(1) = min(0.5, 1, 0.5, 2) = 0.5,
        # phi(2) = min(2, 1.5, 0, 0.5) = 0, phi(3) = min(4.5, 3, 0.5, 0) = 0
        grid = four_point_grid()
        cost = power_cost(2.0, grid.cost_radius)
        phi = oc.c_transform(cost, np.array([0.0, -1.0, 0.0, 0.0]), grid)
        np.testing.assert_allclose(phi, [0.0, 0.5, 0.0, 0.0])

    def test_double_transform_is_idempotent(self):
        grid, rho, g = random_pair()
        cost = power_cost(1.5, grid.cost_radius)
        rng = np.random.default_rng(0)
        raw = rng.normal(size=grid.shape)
        phi1, psi1 = oc.canonical_pair(cost, raw, grid, grid)
        phi2, psi2 = oc.canonical_pair(cost, phi1, grid, grid)
        np.testing.assert_allclose(phi2, phi1, atol=1e-12)
        np.testing.assert_allclose(psi2, psi1, atol=1e-12)

    def test_monotone_in_argument(self):
        # pointwise smaller psi leaves more room: c_transform flips the order
        grid, rho, g = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        rng = np.random.default_rng(5)
        psi2 = rng.normal(size=grid.shape) * 0.1
        psi1 = psi2 - np.abs(rng.normal(size=grid.shape))
        phi1 = oc.c_transform(cost, psi1, grid)
        phi2 = oc.c_transform(cost, psi2, grid)
        assert np.all(phi1 >= phi2 - 1e-14)


class TestExact1D:
    def test_identity_pair(self):
        grid, rho, _ = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        result, map_field = oc.solve_exact_1d(rho, rho, cost)
        assert result.primal == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(
            map_field.points[:, 0], grid.cell_centers()[:, 0], atol=1e-10
        )

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_shifted_uniform_quantile_map(self, p):
        # rho uniform on [0,1/2], g uniform on [1/2,1]: T(x) = x + 1/2
        grid = Grid(1, 0.0, 1.0, 64)
        cost = power_cost(p, grid.cost_radius)
        xs = grid.cell_centers()[:, 0]
        rho = as_density(grid, np.where(xs < 0.5, 2.0, 0.0))
        g = as_density(grid, np.where(xs >= 0.5, 2.0, 0.0))
        result, map_field = oc.solve_exact_1d(rho, g, cost)
        mask = map_field.mask
        err = np.abs(map_field.points[mask, 0] - (xs[mask] + 0.5))
        assert err.max() <= grid.spacing[0]

    def test_coupling_mass_is_one(self):
        grid, rho, g = random_pair()
        cost = power_cost(1.5, grid.cost_radius)
        result, _ = oc.solve_exact_1d(rho, g, cost)
        assert result.coupling.sum() == pytest.approx(1.0, abs=1e-10)

    def test_rejects_2d(self):
        grid = Grid(2, 0.0, 1.0, 8)
        rho = random_smooth_density(grid, 1)
        cost = power_cost(2.0, grid.cost_radius)
        with pytest.raises(DomainError):
            oc.solve_exact_1d(rho, rho, cost)

    def test_translation_equivariance_in_the_interior(self):
        # both densities shifted by one cell => T shifts by one cell
        grid = Grid(1, 0.0, 1.0, 64)
        xs = grid.cell_centers()[:, 0]
        bump = np.exp(-80.0 * (xs - 0.4) ** 2) + 0.5 * np.exp(-60.0 * (xs - 0.55) ** 2)
        bump[xs < 0.15] = 0.0
        bump[xs > 0.85] = 0.0
        target = np.exp(-50.0 * (xs - 0.5) ** 2)
        target[xs < 0.15] = 0.0
        target[xs > 0.85] = 0.0
        cost = power_cost(2.0, grid.cost_radius)
        rho1 = as_density(grid, bump).normalized()
        g1 = as_density(grid, target).normalized()
        rho2 = as_density(grid, np.roll(bump, 1)).normalized()
        g2 = as_density(grid, np.roll(target, 1)).normalized()
        _, m1 = oc.solve_exact_1d(rho1, g1, cost)
        _, m2 = oc.solve_exact_1d(rho2, g2, cost)
        dx = grid.spacing[0]
        inner = m1.mask & np.roll(m2.mask, -1)
        inner[:5] = inner[-5:] = False
        shift = m2.points[1:, 0][inner[:-1]] - m1.points[:-1, 0][inner[:-1]]
        np.testing.assert_allclose(shift, dx, atol=1e-8)


class TestSolveLP:
    def test_identity_uniform_is_diagonal(self):
        grid = four_point_grid()
        cost = power_cost(1.5, grid.cost_radius)
        uniform = as_density(grid, np.ones(4)).normalized()
        result = oc.solve_lp(uniform, uniform, cost)
        np.testing.assert_allclose(result.coupling, np.eye(4) * 0.25, atol=1e-12)
        assert result.primal == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_oracle_equivalence(self, p):
        grid, rho, g = random_pair()
        cost = power_cost(p, grid.cost_radius)
        lp = oc.solve_lp(rho, g, cost)
        exact, _ = oc.solve_exact_1d(rho, g, cost)
        assert lp.primal == pytest.approx(exact.primal, rel=1e-6)
        assert lp.gap <= 1e-8 * (1.0 + abs(lp.primal))

    def test_swap_transposes_coupling(self):
        grid, rho, g = random_pair(seeds=(9, 4))
        cost = power_cost(2.0, grid.cost_radius)
        fwd = oc.solve_lp(rho, g, cost)
        bwd = oc.solve_lp(g, rho, cost)
        np.testing.assert_allclose(bwd.coupling, fwd.coupling.T, atol=1e-12)
        assert bwd.primal == pytest.approx(fwd.primal, rel=1e-12)
        # potentials swap modulo the additive gauge on supported cells
        diff = bwd.phi - fwd.psi
        support = fwd.coupling.sum(axis=0) > 1e-6
        assert np.ptp(diff[support]) <= 1e-8

    def test_complementary_slackness(self):
        grid, rho, g = random_pair()
        cost = power_cost(1.5, grid.cost_radius)
        result = oc.solve_lp(rho, g, cost)
        cmat = oc._cost_matrix(cost, grid.cell_centers(), grid.cell_centers())
        pairs = result.coupling > 1e-6
        slack = cmat - result.phi.reshape(-1)[:, None] - result.psi.reshape(-1)[None, :]
        assert slack.min() >= -1e-9
        assert np.abs(slack[pairs]).max() <= 1e-6

    def test_capacity_limit(self):
        grid, rho, g = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        with pytest.raises(CapacityError):
            oc.solve_lp(rho, g, cost, capacity=100)

    def test_mass_mismatch_rejected(self):
        grid, rho, g = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        heavier = as_density(grid, g.values * 1.5)
        with pytest.raises(InputError):
            oc.solve_lp(rho, heavier, cost)


class TestSolveEntropic:
    def test_identity_small_eps_is_near_diagonal(self):
        grid, rho, _ = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        result = oc.solve_entropic(rho, rho, cost, eps_final=3e-5)
        dx = grid.spacing[0]
        assert result.primal <= float(cost.profile(np.array([2 * dx]))[0])

    def test_oracle_equivalence_small_eps(self):
        grid, rho, g = random_pair(n=128)
        cost = power_cost(1.5, grid.cost_radius)
        exact, _ = oc.solve_exact_1d(rho, g, cost)
        result = oc.solve_entropic(rho, g, cost, eps_final=3e-5)
        assert result.primal == pytest.approx(exact.primal, rel=1e-3)

    def test_marginals_are_exact_after_rounding(self):
        grid, rho, g = random_pair(n=128)
        cost = power_cost(1.5, grid.cost_radius)
        result = oc.solve_entropic(rho, g, cost, eps_final=1e-4)
        a = rho.values * grid.cell_volume
        b = g.values * grid.cell_volume
        assert np.abs(result.coupling.sum(axis=1) - a).sum() <= 1e-12
        assert np.abs(result.coupling.sum(axis=0) - b).sum() <= 1e-12

    def test_decreasing_eps_tightens_primal(self):
        grid, rho, g = random_pair(n=128)
        cost = power_cost(1.5, grid.cost_radius)
        lp = oc.solve_lp(rho, g, cost)
        excess = []
        for eps in (4e-4, 1e-4, 3e-5):
            r = oc.solve_entropic(rho, g, cost, eps_final=eps)
            excess.append(r.primal - lp.primal)
        assert excess[0] > excess[1] > excess[2] > 0

    def test_nonconvergence_raises_with_residual(self):
        grid, rho, g = random_pair(n=128)
        cost = power_cost(1.5, grid.cost_radius)
        with pytest.raises(ConvergenceError) as err:
            oc.solve_entropic(rho, g, cost, eps_final=3e-5, max_iterations=3)
        assert np.isfinite(err.value.residual)

    def test_parameter_validation(self):
        grid, rho, g = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        with pytest.raises(ParameterError):
            oc.solve_entropic(rho, g, cost, eps_final=0.0)
        with pytest.raises(ParameterError):
            oc.solve_entropic(rho, g, cost, eps_final=1e-3, schedule=[1e-4, 1e-3])
        with pytest.raises(ParameterError):
            oc.solve_entropic(rho, g, cost, eps_final=1e-3, schedule=[1e-2, 1e-4])


class TestTransportMap:
    def test_identity_map_from_constant_potential(self):
        grid, rho, _ = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        mf = oc.transport_map_from_potential(np.zeros(grid.shape), cost, rho)
        np.testing.assert_allclose(mf.points, grid.cell_centers(), atol=1e-12)
        assert mf.max_clip_distance == 0.0

    def test_shifted_uniform_matches_quantile_oracle(self):
        grid = Grid(1, 0.0, 1.0, 64)
        cost = power_cost(2.0, grid.cost_radius)
        xs = grid.cell_centers()[:, 0]
        rho = as_density(grid, np.where(xs < 0.5, 2.0, 0.0))
        g = as_density(grid, np.where(xs >= 0.5, 2.0, 0.0))
        lp = oc.solve_lp(rho, g, cost)
        mf = oc.transport_map_from_potential(lp.phi, cost, rho)
        _, oracle = oc.solve_exact_1d(rho, g, cost)
        # compare away from the support edge where one-sided stencils act
        idx = np.where(rho.values > 0)[0][2:-2]
        err = np.abs(mf.points[idx, 0] - oracle.points[idx, 0])
        assert err.max() <= 2 * grid.spacing[0]

    def test_masked_values_lie_in_box(self):
        grid, rho, g = random_pair(seeds=(2, 6))
        cost = power_cost(1.5, grid.cost_radius)
        lp = oc.solve_lp(rho, g, cost)
        mf = oc.transport_map_from_potential(lp.phi, cost, rho)
        assert np.all(grid.contains(mf.points[mf.mask]))

    def test_non_c_concave_potential_raises(self):
        grid = Grid(1, 0.0, 1.0, 64)
        cost = power_cost(2.0, 1.0)  # gradient range [0, 1]
        rho = random_smooth_density(grid, 1)
        steep = 10.0 * grid.cell_centers()[:, 0]
        with pytest.raises(RangeError):
            oc.transport_map_from_potential(steep.reshape(grid.shape), cost, rho)


class TestMapConsistency:
    def test_identity_residuals_vanish(self):
        grid, rho, _ = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        result, mf = oc.solve_exact_1d(rho, rho, cost)
        report = oc.map_consistency_check(result.phi, result.psi, mf, cost, rho)
        assert report.median_psi <= 1e-8
        assert report.median_phi <= 1e-8

    def test_residuals_small_on_smooth_pair(self):
        grid = Grid(1, 0.0, 1.0, 256)
        cost = power_cost(2.0, grid.cost_radius)
        rho = random_smooth_density(grid, 1)
        g = random_smooth_density(grid, 2)
        lp = oc.solve_lp(rho, g, cost)
        mf = oc.transport_map_from_potential(lp.phi, cost, rho)
        report = oc.map_consistency_check(lp.phi, lp.psi, mf, cost, rho)
        assert report.median_psi <= 5.0 / 256
        assert report.median_phi <= 5.0 / 256

    def test_deterministic(self):
        grid, rho, g = random_pair()
        cost = power_cost(1.5, grid.cost_radius)
        reports = []
        for _ in range(2):
            lp = oc.solve_lp(rho, g, cost)
            mf = oc.transport_map_from_potential(lp.phi, cost, rho)
            reports.append(oc.map_consistency_check(lp.phi, lp.psi, mf, cost, rho))
        np.testing.assert_array_equal(reports[0].residual_psi, reports[1].residual_psi)
        np.testing.assert_array_equal(reports[0].residual_phi, reports[1].residual_phi)


class TestSerialization:
    def test_round_trip_meta_and_files(self, tmp_path):
        grid, rho, g = random_pair()
        cost = power_cost(2.0, grid.cost_radius)
        result, mf = oc.solve_exact_1d(rho, g, cost)
        out = tmp_path / "run"
        oc.write_result_dir(out, result, mf)
        for name in ("coupling.csv", "phi.csv", "psi.csv", "map.csv", "meta"):
            assert (out / name).exists()
        meta = oc.read_meta(out / "meta")
        assert meta["solver"] == "exact1d"
        assert float(meta["primal"]) == pytest.approx(result.primal, abs=1e-15)
        nonzeros = sum(1 for _ in open(out / "coupling.csv")) - 1
        assert nonzeros == np.count_nonzero(result.coupling)

    def test_rewrite_is_byte_identical(self, tmp_path):
        grid, rho, g = random_pair(seeds=(5, 12))
        cost = power_cost(1.5, grid.cost_radius)
        result, mf = oc.solve_exact_1d(rho, g, cost)
        oc.write_result_dir(tmp_path / "a", result, mf)
        oc.write_result_dir(tmp_path / "b", result, mf)
        for name in ("coupling.csv", "phi.csv", "psi.csv", "map.csv", "meta"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
