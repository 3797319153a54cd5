"""Unit tests for the envelope of K and the supersolution family."""

import dataclasses
import math
import os
import tempfile
import unittest

import numpy as np

from ms_singular.core.envelope import (
    BOUND_FACTOR,
    ClosedSetFactory,
    EnvelopeFn,
    PeriodicEnvelope,
    SmoothCutoff,
    SupersolutionField,
    SupersolutionParams,
    build_envelope,
    check_r0_bound,
    check_t_monotonicity,
    component_intervals,
    envelope_bound,
    flatness_report,
    point_bound_ratio,
    r0_threshold,
    save_envelope_probes,
    supersolution_grid,
    verify_supersolution,
)
from ms_singular.core.radial_ode import make_cone_params, solve_radial
from ms_singular.errors import BoundViolation, EmptyK, GridTooCoarse, InvalidParameter
from ms_singular.model import ClosedSetKind, ClosedSetSpec, ProfileVariant
from ms_singular.utils import read_csv

TAU0 = 0.02


def points(*values) -> ClosedSetSpec:
    return ClosedSetSpec(kind=ClosedSetKind.FINITE_POINTS, points=list(values))


class TestClosedSets(unittest.TestCase):
    """Test the closed set builders."""

    def test_registered_kinds(self):
        """Test that every closed set kind has a builder."""
        self.assertEqual(set(ClosedSetFactory.get_available_kinds()), set(ClosedSetKind))

    def test_interval_merging(self):
        """Test that overlapping intervals merge into one component."""
        spec = ClosedSetSpec(kind=ClosedSetKind.INTERVAL_UNION, intervals=[(3.0, 4.0), (0.0, 1.0), (0.5, 2.0)])
        np.testing.assert_array_equal(component_intervals(spec), [[0.0, 2.0], [3.0, 4.0]])

    def test_cantor_components(self):
        """Test that generation d of the Cantor construction has 2^d components."""
        spec = ClosedSetSpec(kind=ClosedSetKind.CANTOR_LIKE, depth=3)
        components = component_intervals(spec)
        self.assertEqual(len(components), 8)
        self.assertAlmostEqual(components[0, 1] - components[0, 0], 1.0 / 27.0, places=12)

    def test_empty_set(self):
        """Test that an empty K is rejected."""
        with self.assertRaises(EmptyK):
            component_intervals(points())


class TestEnvelope(unittest.TestCase):
    """Test h = tau0 exp(-1 / d) and its periodization."""

    def test_single_point(self):
        """Test values, the zero set and the derivative bound for K = {0}."""
        env = build_envelope(points(0.0), TAU0)
        h, h1, _ = env.evaluate(np.array([0.0, 1.0, -1.0, 0.5]))
        self.assertEqual(h[0], 0.0)
        self.assertAlmostEqual(h[1], TAU0 * math.exp(-1.0), places=15)
        self.assertAlmostEqual(h[2], h[1], places=15)
        self.assertAlmostEqual(h1[3], TAU0 * math.exp(-2.0) * 4.0, places=14)
        self.assertTrue(env.in_k(np.array([0.0]))[0])
        self.assertLess(env.bound_value, 4.0 * TAU0)
        self.assertEqual(envelope_bound(env)[0], env.bound_value)

    def test_bound_violation(self):
        """Test that a tight bound factor raises BoundViolation."""
        with self.assertRaises(BoundViolation):
            build_envelope(points(0.0), TAU0, bound_factor=1.0)

    def test_point_bound_ratio(self):
        """Test that an isolated point of K reaches about 2.77 tau0, inside the default bound factor of 4."""
        ratio = point_bound_ratio()
        self.assertAlmostEqual(ratio, 2.768, delta=0.01)
        self.assertLess(ratio, BOUND_FACTOR)
        env = build_envelope(points(0.0), TAU0)
        self.assertGreater(env.bound_value, 2.5 * TAU0)
        self.assertLessEqual(env.bound_value, ratio * TAU0 * (1.0 + 1e-6))
        with self.assertRaises(BoundViolation):
            build_envelope(points(0.0), TAU0, bound_factor=2.5)

    def test_invalid_tau0(self):
        """Test rejection of tau0 outside (0, 1/4]."""
        with self.assertRaises(InvalidParameter):
            build_envelope(points(0.0), 0.3)

    def test_smoothed_gap_derivatives(self):
        """Test h' against a centered difference inside a mollified gap."""
        env = build_envelope(points(0.0, 1.0), TAU0)
        y = np.array([0.45])
        step = 1e-5
        _, h1, _ = env.evaluate(y)
        fd = (env.h(y + step) - env.h(y - step)) / (2.0 * step)
        np.testing.assert_allclose(h1, fd, rtol=1e-4)
        self.assertAlmostEqual(float(env.distance(y)[0]), 0.45, places=14)

    def test_flatness(self):
        """Test that every normalized flatness sequence decreases toward K and comes from h itself."""
        env = build_envelope(points(0.0), TAU0)
        table = flatness_report(env)
        self.assertTrue(table.passed)
        self.assertLess(table.closed_form_error, 1e-10)
        self.assertEqual(len(table.rows), 2 * 5 * 3 * 6)
        self.assertEqual(max(row['k'] for row in table.rows), 2.0)
        row = next(row for row in table.rows if row['k'] == 2.0 and row['j'] == 1.0 and row['side'] == 1.0)
        h2 = env.evaluate(np.array([row['delta']]))[2][0]
        self.assertAlmostEqual(row['value'], abs(h2) / TAU0 / row['delta'], delta=1e-12 * row['value'])

    def test_flatness_reads_the_envelope(self):
        """Test that an envelope whose second derivative is off fails the flatness table."""

        class SkewedEnvelope(EnvelopeFn):

            def evaluate(self, y):
                h, h1, h2 = super().evaluate(y)
                return h, h1, 1.5 * h2

        env = build_envelope(points(0.0), TAU0)
        skewed = SkewedEnvelope(**{f.name: getattr(env, f.name) for f in dataclasses.fields(env)})
        table = flatness_report(skewed)
        self.assertFalse(table.passed)
        self.assertAlmostEqual(table.closed_form_error, 0.5, places=6)

    def test_cutoff(self):
        """Test the plateau, the zero region and the symmetric midpoint of the cutoff."""
        cutoff = SmoothCutoff()
        z, _, _ = cutoff.evaluate(np.array([0.3, 0.75, 1.2]))
        np.testing.assert_allclose(z, [1.0, 0.5, 0.0], atol=1e-15)
        t = np.linspace(0.5, 1.0, 101)
        self.assertTrue(np.all(np.diff(cutoff(t)) <= 0.0))

    def test_periodic_envelope(self):
        """Test that the periodized envelope matches h on the plateau and vanishes at the cell edge."""
        base = build_envelope(points(0.0), TAU0)
        env = PeriodicEnvelope(base, 4.0)
        y = np.array([0.3, -0.9])
        np.testing.assert_allclose(env.h(y), base.h(y), rtol=1e-12)
        np.testing.assert_allclose(env.h(np.array([2.0, -2.0])), [0.0, 0.0], atol=1e-300)
        np.testing.assert_allclose(env.h(y + 4.0), env.h(y), rtol=1e-12)

    def test_probe_export(self):
        """Test the probe CSV export."""
        env = build_envelope(points(0.0), TAU0)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_envelope_probes(env, os.path.join(tmp, 'probes.csv'))
            columns = read_csv(path)
        self.assertEqual(set(columns), {'y', 'dist', 'h', 'dh', 'd2h'})
        self.assertTrue(np.all(columns['h'] >= 0.0))


class TestSupersolution(unittest.TestCase):
    """Test the supersolution family S = psi phi~(r / psi)."""

    @classmethod
    def setUpClass(cls):
        cls.params = make_cone_params(3, 5, 1, 0.01, 0.05)
        cls.std = solve_radial(cls.params, ProfileVariant.STANDARD)
        cls.mod = solve_radial(cls.params, ProfileVariant.MODIFIED)
        cls.env = build_envelope(points(0.0), TAU0)

    def test_needs_modified_profile(self):
        """Test that the standard profile is refused."""
        with self.assertRaises(InvalidParameter):
            SupersolutionField(self.env, SupersolutionParams(1e-3, 1e-3, 1e-3), self.std)

    def test_invalid_params(self):
        """Test rejection of negative t and zero tau."""
        with self.assertRaises(InvalidParameter):
            SupersolutionParams(-1.0, 1e-3, 1e-3)
        with self.assertRaises(InvalidParameter):
            SupersolutionParams(1e-3, 0.0, 1e-3)

    def test_y_derivative(self):
        """Test the exact y derivative against a centered difference."""
        field = SupersolutionField(self.env, SupersolutionParams(1e-3, 1e-3, 1e-3), self.mod)
        r, y, step = np.array([0.01]), np.array([0.5]), 1e-5
        d = field.derivatives(r, y)
        fd = (field.values(r, y + step) - field.values(r, y - step)) / (2.0 * step)
        np.testing.assert_allclose(d.u_y, fd, rtol=1e-4)

    def test_sign(self):
        """Test M(S) < 0 on the regularized domain over the (t, eps) grid with tau = 1e-3."""
        for eps in (1e-2, 1e-3, 1e-4):
            for t in (0.0, 1e-3, 1.0, eps):
                with self.subTest(eps=eps, t=t):
                    report = verify_supersolution(self.env, SupersolutionParams(t, 1e-3, eps), self.mod)
                    self.assertTrue(report.passed, msg=str(report))
                    self.assertGreater(report.n_points, 0)
                    self.assertGreaterEqual(report.roundoff_floor, 0.0)
        with self.assertRaises(GridTooCoarse):
            verify_supersolution(self.env, SupersolutionParams(1e-3, 1e-3, 1e-3), self.mod, n_rho=31)

    def test_sign_grid_resolution(self):
        """Test that the sampling grid keeps the cone exact and resolves a tip wider than a few spacings."""
        p = SupersolutionParams(1e-3, 1e-3, 1e-2)
        grid = supersolution_grid(self.env, p, self.mod)
        self.assertTrue(np.all(grid.radius == grid.radius[0]))
        self.assertEqual(grid.stretch, 0.0)
        self.assertGreaterEqual(grid.rho.size, 32 * grid.radius[0] / 1.05e-3)
        flat = supersolution_grid(self.env, SupersolutionParams(0.0, 1e-3, 1e-2), self.mod)
        self.assertEqual(flat.rho.size, 64)
        report = verify_supersolution(self.env, p, self.mod)
        self.assertEqual(report.n_radial, grid.rho.size)

    def test_sign_periodic(self):
        """Test the sign certificate on the periodized envelope, whose cutoff bends h away from K."""
        env = PeriodicEnvelope(self.env, 4.0)
        for t in (0.0, 1e-3):
            with self.subTest(t=t):
                self.assertTrue(verify_supersolution(env, SupersolutionParams(t, 1e-3, 1e-3), self.mod).passed)

    def test_axis_bound(self):
        """Test S(0, y) <= C (eps^(1/4) + tau0)^2 h_eps(y) at t = eps."""
        eps = 1e-3
        ratio = check_r0_bound(self.env, SupersolutionParams(eps, 1e-3, eps), self.mod)
        self.assertLess(ratio, r0_threshold(self.env, eps, 4.0))

    def test_monotone_in_t(self):
        """Test that S grows with t."""
        r = np.linspace(0.0, 0.05, 11)[None, :]
        y = np.linspace(-1.0, 1.0, 9)[:, None]
        self.assertTrue(check_t_monotonicity(self.env, 1e-3, 1e-3, self.mod, [1e-2, 1e-4, 1e-3], r, y))


if __name__ == '__main__':
    unittest.main()
