"""Unit tests for the Dirichlet problems, the eps family and the global gluing."""

import os
import tempfile
import unittest

import numpy as np

from ms_singular.core.bvp_solver import (
    BvpProblem,
    ConeField,
    ProfileField,
    eps_family,
    exact_solution_refinement,
    export_solution,
    glue_checks,
    glue_global,
    slice_compare,
    slice_curves,
    slice_probe_columns,
    solve_bvp,
    truncation_defect,
)
from ms_singular.core.envelope import PeriodicEnvelope, build_envelope
from ms_singular.core.radial_ode import make_cone_params, solve_radial
from ms_singular.core.sme_operator import sme_pointwise
from ms_singular.errors import InvalidParameter
from ms_singular.model import ClosedSetSpec, GridSpec, ProfileVariant, SliceStatus, SolverConstants, YBoundary
from ms_singular.utils import read_json

TAU0 = 0.02


class BvpTestCase(unittest.TestCase):
    """Shared profiles and envelope."""

    @classmethod
    def setUpClass(cls):
        cls.params = make_cone_params(3, 5, 1, 0.01, 0.05)
        cls.std = solve_radial(cls.params, ProfileVariant.STANDARD)
        cls.mod = solve_radial(cls.params, ProfileVariant.MODIFIED)
        cls.env = build_envelope(ClosedSetSpec(points=[0.0]), TAU0)

    def problem(self, **kwargs) -> BvpProblem:
        options = dict(
            params=self.params,
            env=self.env,
            std=self.std,
            mod=self.mod,
            eps=1e-3,
            tau=1e-3,
            q_period=4.0,
            grid=GridSpec(n_rho=33, n_y=16),
        )
        options.update(kwargs)
        return BvpProblem(**options)


class TestBvpProblem(BvpTestCase):
    """Test problem setup."""

    def test_validation(self):
        """Test rejection of eps above tau0 and of swapped profiles."""
        with self.assertRaises(InvalidParameter):
            self.problem(eps=0.05)
        with self.assertRaises(InvalidParameter):
            self.problem(std=self.mod, mod=self.std)

    def test_periodic_layout(self):
        """Test that a period wraps the envelope and spans the cell with uniform nodes."""
        problem = self.problem()
        self.assertIsInstance(problem.env, PeriodicEnvelope)
        y, boundary = problem.y_nodes()
        self.assertEqual(boundary, YBoundary.PERIODIC)
        self.assertEqual(y.size, 16)
        self.assertAlmostEqual(y[0], -2.0, places=15)
        np.testing.assert_allclose(np.diff(y), 0.25, rtol=1e-12)

    def test_reflecting_layout(self):
        """Test the reflecting window without a period."""
        problem = self.problem(q_period=None)
        y, boundary = problem.y_nodes()
        self.assertEqual(boundary, YBoundary.REFLECT)
        self.assertAlmostEqual(y[0], -problem.grid.y_halfwidth, places=12)
        self.assertAlmostEqual(y[-1], problem.grid.y_halfwidth, places=12)

    def test_initial_grid(self):
        """Test column radii h_eps and the lower barrier as initial values."""
        problem = self.problem()
        grid = problem.make_grid()
        radius, _, _ = problem.env.h_eps(grid.y, problem.eps)
        np.testing.assert_allclose(grid.radius, radius, rtol=1e-15)
        np.testing.assert_allclose(grid.values, problem.lower(grid.r), rtol=1e-15)
        np.testing.assert_allclose(problem.boundary_data(0.0, grid), problem.lower(grid.radius), rtol=1e-15)
        np.testing.assert_allclose(
            problem.boundary_data(1.0, grid), problem.upper.values(grid.radius, grid.y), rtol=1e-15
        )

    def test_truncation_defect(self):
        """Test that the barrier defect lives on interior rows and is what the mapped stencils miss."""
        problem = self.problem()
        grid = problem.make_grid()
        defect = truncation_defect(problem, grid).reshape(grid.shape)
        interior = grid.interior_mask()
        np.testing.assert_array_equal(defect[~interior], 0.0)
        self.assertGreater(float(np.max(np.abs(defect))), 0.0)
        self.assertTrue(np.all(np.isfinite(defect)))

    def test_family_needs_three_values(self):
        """Test that eps_family refuses short or unsorted eps lists."""
        with self.assertRaises(InvalidParameter):
            eps_family(self.problem(), [1e-2, 1e-3])
        with self.assertRaises(InvalidParameter):
            eps_family(self.problem(), [1e-3, 1e-2, 1e-4])


class TestExactFields(BvpTestCase):
    """Test the cone and profile fields."""

    def test_cone_solves_equation(self):
        """Test that alpha0 r solves M(u) = 0 away from the axis."""
        r = np.geomspace(1e-3, 1.0, 20)
        d = ConeField(self.params.alpha0).derivatives(r, np.zeros_like(r))
        np.testing.assert_allclose(sme_pointwise(d, r, self.params), 0.0, atol=1e-10)

    def test_profile_field(self):
        """Test that t phi(r / t) solves M(u) = 0."""
        r = np.linspace(0.0, 0.1, 21)
        field = ProfileField(self.std, t=0.01)
        d = field.derivatives(r, np.zeros_like(r))
        self.assertAlmostEqual(float(d.u[0]), 0.01, places=12)
        residual = sme_pointwise(d, r, self.params)
        self.assertLess(float(np.max(np.abs(residual[1:]) * r[1:])), 1e-5)

    def test_exact_solution_refinement(self):
        """Test second order decay of the residual of t phi(r / t) across three grid levels."""
        table = exact_solution_refinement(self.std)
        self.assertEqual(sorted(table), [0.5, 1.0, 2.0])
        for t, residuals in table.items():
            with self.subTest(t=t):
                self.assertEqual(len(residuals), 3)
                for coarse, fine in zip(residuals, residuals[1:]):
                    self.assertGreaterEqual(coarse / fine, 3.5)
                    self.assertLessEqual(coarse / fine, 4.5)
        with self.assertRaises(InvalidParameter):
            exact_solution_refinement(self.mod)


class TestSolveBvp(BvpTestCase):
    """Test a full continuation solve."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        problem = BvpProblem(
            params=cls.params,
            env=cls.env,
            std=cls.std,
            mod=cls.mod,
            eps=1e-3,
            tau=1e-3,
            q_period=4.0,
            grid=GridSpec(n_rho=33, n_y=16),
        )
        cls.solved_problem = problem
        cls.solution = solve_bvp(problem)

    def test_continuation_reaches_supersolution_data(self):
        """Test that continuation ends at sigma = 1 with a converged residual and exact boundary data."""
        solution = self.solution
        self.assertEqual(solution.sigma_path[0][0], 0.0)
        self.assertEqual(solution.sigma_path[-1][0], 1.0)
        self.assertLessEqual(solution.residual_final, self.solved_problem.tolerances.newton_tol)
        self.assertLess(solution.margins['boundary_error'], 1e-9)
        self.assertTrue(solution.squeeze_ok)
        self.assertTrue(solution.grad_ok)
        self.assertTrue(solution.checks['sliding'])

    def test_starts_from_exact_barrier(self):
        """Test that the sigma = 0 system is solved by the sampled lower barrier without Newton steps."""
        sigma, iterations, residual = self.solution.sigma_path[0]
        self.assertEqual(sigma, 0.0)
        self.assertEqual(iterations, 0)
        self.assertLessEqual(residual, self.solved_problem.tolerances.newton_tol)
        self.assertGreater(self.solution.margins['truncation_defect'], 0.0)
        self.assertGreaterEqual(len(self.solution.sigma_path), 2)

    def test_glued_field(self):
        """Test that the glued field is the cone beyond h^2 and on K, and u_tau near the axis."""
        glued = glue_global(self.solution.u, self.solved_problem.env, self.params.alpha0)
        deviations = glue_checks(glued, self.solution.u.y)
        self.assertEqual(deviations['outer_cone'], 0.0)
        self.assertEqual(deviations['k_columns'], 0.0)
        self.assertLess(deviations['inner_plateau'], 1e-12)

    def test_slice_hypothesis(self):
        """Test that a failed smallness gate is reported rather than raised."""
        report = slice_compare(self.solution.u, 1.0, self.std, SolverConstants(eta_small=1e-12))
        self.assertEqual(report.status, SliceStatus.HYPOTHESIS_UNMET)
        self.assertIsNone(report.value)

    def test_slice_curves(self):
        """Test that the rescaled slice starts at phi(0) = 1."""
        curves = slice_curves(self.solution.u, 1.0, self.std)
        self.assertEqual(set(curves), {'y0', 's', 'u_hat', 'phi'})
        self.assertEqual(curves['s'][0], 0.0)
        self.assertAlmostEqual(float(curves['u_hat'][0]), 1.0, places=10)
        self.assertAlmostEqual(float(curves['phi'][0]), 1.0, places=12)

    def test_probe_columns(self):
        """Test that probe columns keep their distance from K."""
        y = self.solution.u.y
        columns = slice_probe_columns(self.solved_problem.env, y, 3, 1.0)
        self.assertEqual(columns.size, 3)
        self.assertTrue(np.all(np.abs(columns) >= 0.25))

    def test_export(self):
        """Test that the exported sidecar carries the continuation path."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = export_solution(self.solution, os.path.join(tmp, 'u.csv'))
            meta = read_json(paths[1])
        self.assertEqual(meta['eps'], 1e-3)
        self.assertEqual(meta['sigma_path'][-1][0], 1.0)


if __name__ == '__main__':
    unittest.main()
