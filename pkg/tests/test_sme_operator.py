"""Unit tests for the discrete symmetric minimal surface operator."""

import math
import os
import tempfile
import unittest

import numpy as np

from ms_singular.core.radial_ode import make_cone_params
from ms_singular.core.sme_operator import (
    ConformalFactor,
    Derivatives,
    FieldSampler,
    Grid2D,
    GridSampler,
    UnitFactor,
    difference_residual,
    estimate_order,
    g_minimality_residual,
    load_grid,
    q_pointwise,
    q_term,
    roundoff_bound,
    sample_field,
    save_grid,
    sme_jacobian,
    sme_pointwise,
    sme_residual,
    weighted_area,
)
from ms_singular.errors import DomainMismatch, GridTooCoarse, NonpositiveU, OutsideWindow
from ms_singular.model import YBoundary

PARAMS = make_cone_params(3, 5, 1, 0.01, 0.05)
PERIOD = 2.0 * math.pi


def bump(r, y):
    return 1.0 + r * r / 3.0 + 0.1 * np.sin(y)


def bump_derivatives(r, y) -> Derivatives:
    r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
    return Derivatives(
        u=bump(r, y),
        u_r=2.0 * r / 3.0,
        u_rr=np.full(r.shape, 2.0 / 3.0),
        u_y=0.1 * np.cos(y),
        u_ry=np.zeros(r.shape),
        u_yy=-0.1 * np.sin(y),
    )


def periodic_grid(n_rho: int, n_y: int, func=bump) -> Grid2D:
    y = np.linspace(0.0, PERIOD, n_y, endpoint=False)
    return Grid2D.rectangular(1.0, n_rho, y, func, y_boundary=YBoundary.PERIODIC, period=PERIOD)


class PartialFactor(ConformalFactor):
    """A factor defined only for r < 1/2."""

    def evaluate(self, r, y):
        shape = np.broadcast(r, y).shape
        return np.ones(shape), np.zeros(shape), np.zeros(shape)

    def covers(self, r, y):
        return np.asarray(r) < 0.5


class BumpField(FieldSampler):

    def derivatives(self, r, y):
        return bump_derivatives(r, y)


class TestSmeResidual(unittest.TestCase):
    """Test the residual of M(u) on grids."""

    def test_cone_is_exact(self):
        """Test that the cone alpha0 r has vanishing discrete residual."""
        y = np.linspace(0.0, 1.0, 16)
        grid = Grid2D.rectangular(1.0, 32, y, lambda r, yy: PARAMS.alpha0 * r, r_min=0.5)
        residual = sme_residual(grid, PARAMS)
        self.assertLess(residual.sup_norm, 1e-10)

    def test_roundoff_bound_covers_cone(self):
        """Test that rounding errors of the cone's residual stay under the stencil magnitude bound."""
        y = np.linspace(0.0, 1.0, 16)
        for n_rho in (32, 512):
            with self.subTest(n_rho=n_rho):
                grid = Grid2D.rectangular(0.01, n_rho, y, lambda r, yy: PARAMS.alpha0 * r, r_min=1e-4)
                residual = sme_residual(grid, PARAMS)
                bound = roundoff_bound(grid, PARAMS)
                self.assertTrue(np.all(bound > 0))
                mask = residual.mask
                self.assertTrue(np.all(np.abs(residual.field[mask]) <= 64.0 * np.finfo(float).eps * bound[mask]))
        # the second difference of u = alpha0 r dominates once dr is small
        self.assertGreater(float(np.max(bound)), 4.0 * PARAMS.alpha0 * 0.01 / (0.01 / 511)**2)

    def test_refinement_order(self):
        """Test second order convergence to the pointwise operator."""
        errors = []
        for n_rho, n_y in [(17, 16), (33, 32), (65, 64)]:
            grid = periodic_grid(n_rho, n_y)
            residual = sme_residual(grid, PARAMS)
            exact = sme_pointwise(bump_derivatives(grid.r, grid.y_mesh), grid.r, PARAMS)
            errors.append(float(np.max(np.abs(residual.field - exact)[residual.mask])))
        orders = estimate_order(errors, 2.0)
        self.assertEqual(len(orders), 2)
        for order in orders:
            self.assertGreater(order, 1.8)
            self.assertLess(order, 2.2)

    def test_nonpositive_field(self):
        """Test rejection of a field touching zero."""
        grid = periodic_grid(17, 16, lambda r, y: r)
        with self.assertRaises(NonpositiveU):
            sme_residual(grid, PARAMS)

    def test_coarse_grid(self):
        """Test rejection of grids below 16 nodes."""
        grid = periodic_grid(8, 16)
        with self.assertRaises(GridTooCoarse):
            sme_residual(grid, PARAMS)

    def test_unit_factor_matches_sme(self):
        """Test that the metric operator with f = 1 reduces to M(u)."""
        grid = periodic_grid(17, 16)
        plain = sme_residual(grid, PARAMS)
        weighted = g_minimality_residual(grid, UnitFactor(), PARAMS)
        np.testing.assert_allclose(weighted.field, plain.field, rtol=1e-13, atol=1e-13)

    def test_factor_domain(self):
        """Test that a factor not covering the grid is rejected."""
        grid = periodic_grid(17, 16)
        with self.assertRaises(DomainMismatch):
            g_minimality_residual(grid, PartialFactor(), PARAMS)

    def test_difference_residual(self):
        """Test the linear difference equation for identical fields and mismatched layouts."""
        grid = periodic_grid(17, 16)
        residual = difference_residual(grid, grid.with_values(grid.values.copy()), PARAMS)
        self.assertEqual(residual.sup_norm, 0.0)
        with self.assertRaises(DomainMismatch):
            difference_residual(grid, periodic_grid(33, 16), PARAMS)

    def test_q_term(self):
        """Test Q(u) on the grid against its exact value."""
        grid = periodic_grid(65, 64)
        q = q_term(grid)
        self.assertTrue(q.same_layout(grid))
        exact = q_pointwise(bump_derivatives(grid.r, grid.y_mesh))
        mask = grid.interior_mask()
        np.testing.assert_allclose(q.values[mask], exact[mask], atol=1e-4)


class TestSmeJacobian(unittest.TestCase):
    """Test the Jacobian of the discrete operator."""

    def test_directional_derivative(self):
        """Test J v against a centered difference of M."""
        grid = periodic_grid(17, 16)
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(grid.shape)
        values, jac = sme_jacobian(grid, PARAMS)
        step = 1e-6
        plus = sme_residual(grid.with_values(grid.values + step * direction), PARAMS).field
        minus = sme_residual(grid.with_values(grid.values - step * direction), PARAMS).field
        mask = grid.interior_mask()
        expected = ((plus - minus) / (2.0 * step))[mask]
        actual = (jac @ direction.ravel()).reshape(grid.shape)[mask]
        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-5 * np.max(np.abs(expected)))
        np.testing.assert_allclose(values[mask], sme_residual(grid, PARAMS).field[mask], rtol=1e-12)


class TestGridUtilities(unittest.TestCase):
    """Test sampling, quadrature and persistence of grids."""

    def test_order_estimate(self):
        """Test observed orders of a clean second order sequence."""
        orders = estimate_order([4e-2, 1e-2, 2.5e-3])
        self.assertEqual(len(orders), 2)
        for order in orders:
            self.assertAlmostEqual(order, 2.0, places=12)

    def test_sampler_reproduces_nodes(self):
        """Test that the spline sampler interpolates the grid and refuses points outside the columns."""
        grid = periodic_grid(33, 32)
        sampler = GridSampler(grid)
        values = sampler.values(grid.r, grid.y_mesh)
        np.testing.assert_allclose(values, grid.values, rtol=1e-10)
        shifted = sampler.values(np.array([0.5]), np.array([0.3 + PERIOD]))
        self.assertAlmostEqual(float(shifted[0]), float(bump(0.5, 0.3)), places=4)
        with self.assertRaises(OutsideWindow):
            sampler.values(np.array([1.5]), np.array([0.0]))

    def test_sample_field(self):
        """Test sampling an exact field on a stretched grid."""
        rho = np.linspace(0.0, 1.0, 33)
        y = np.linspace(0.0, PERIOD, 16, endpoint=False)
        radius = np.full(y.size, 2.0)
        grid = sample_field(
            BumpField(), rho, y, radius, np.zeros(y.size), np.zeros(y.size),
            y_boundary=YBoundary.PERIODIC, period=PERIOD, stretch=2.0,
        )
        self.assertEqual(grid.shape, (16, 33))
        self.assertAlmostEqual(float(grid.r[0, -1]), 2.0, places=14)
        self.assertLess(float(grid.r[0, 1]), 2.0 / 32)
        np.testing.assert_allclose(grid.values, bump(grid.r, grid.y_mesh), rtol=1e-15)

    def test_weighted_area_of_constant(self):
        """Test the weighted area of u = 1, which reduces to the integral of r^(n-1)."""
        errors = []
        for n_rho in (33, 65):
            grid = periodic_grid(n_rho, 16, lambda r, y: np.ones_like(r))
            errors.append(weighted_area(grid, None, PARAMS) - PERIOD / 3.0)
        # trapezoidal error of r^2 on [0, 1] is h^2 / 6 per unit length in y
        self.assertAlmostEqual(errors[1], PERIOD / (6.0 * 64**2), delta=1e-6)
        self.assertAlmostEqual(errors[0] / errors[1], 4.0, delta=0.05)
        self.assertLess(abs(errors[1]), 4e-4)

    def test_save_and_load(self):
        """Test that a saved grid reloads with the same layout and samples."""
        grid = periodic_grid(17, 16)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.csv')
            save_grid(grid, path, {'alpha0': PARAMS.alpha0})
            loaded = load_grid(path)
        self.assertTrue(loaded.same_layout(grid))
        np.testing.assert_allclose(loaded.values, grid.values, rtol=1e-15)
        self.assertEqual(loaded.period, PERIOD)


if __name__ == '__main__':
    unittest.main()
