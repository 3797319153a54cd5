"""Unit tests for the characteristic construction of the metric factor."""

import math
import os
import tempfile
import unittest

import numpy as np

from ms_singular.core.bvp_solver import ConeField
from ms_singular.core.characteristics import (
    assemble_metric,
    build_coefficients,
    build_patches,
    cone_speed_constant,
    integrate_characteristics,
    invert_flow,
    minimality_certificate,
    residual_z,
    save_metric,
    tail_conservation,
    tail_exponents,
    tail_invariant,
    tail_residual,
    tail_z,
)
from ms_singular.core.envelope import SmoothCutoff, build_envelope
from ms_singular.core.radial_ode import make_cone_params
from ms_singular.core.sme_operator import Derivatives, FieldSampler
from ms_singular.errors import InvalidParameter, OutsideWindow
from ms_singular.model import ClosedSetSpec
from ms_singular.utils import read_json

PARAMS = make_cone_params(3, 5, 1, 0.01, 0.05)
ENV = build_envelope(ClosedSetSpec(points=[0.0]), 0.02)
Y0 = 1.0
H0 = float(ENV.h_squared(np.array([Y0]))[0][0])


class BumpedCone(FieldSampler):
    """alpha0 r + amplitude H0 b(r / H0) with a smooth bump b supported in (1/2, 1)."""

    def __init__(self, amplitude: float):
        self.amplitude = amplitude
        self.cutoff = SmoothCutoff()

    def bump(self, x):
        rise, rise1, rise2 = self.cutoff.evaluate(2.0 * x - 0.5)
        fall, fall1, fall2 = self.cutoff.evaluate(2.0 * x - 1.0)
        up, up1, up2 = 1.0 - rise, -2.0 * rise1, -4.0 * rise2
        down, down1, down2 = fall, 2.0 * fall1, 4.0 * fall2
        return up * down, up1 * down + up * down1, up2 * down + 2.0 * up1 * down1 + up * down2

    def derivatives(self, r, y) -> Derivatives:
        r, _ = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        b, b1, b2 = self.bump(r / H0)
        zeros = np.zeros_like(r)
        a = self.amplitude
        return Derivatives(PARAMS.alpha0 * r + a * H0 * b, PARAMS.alpha0 + a * b1, a * b2 / H0, zeros, zeros, zeros)


class TestTailFormulas(unittest.TestCase):
    """Test the closed-form tail of the z-equation."""

    def test_exponents(self):
        """Test beta1 = 1/16 and beta2 = 3/4 for (n, m) = (3, 5)."""
        beta1, beta2 = tail_exponents(PARAMS)
        self.assertAlmostEqual(beta1, 1.0 / 16.0, places=15)
        self.assertAlmostEqual(beta2, 0.75, places=15)
        self.assertAlmostEqual(cone_speed_constant(PARAMS), 0.5 * math.sqrt(2.0) * 16.0 / 3.0, places=14)

    def test_tail_root(self):
        """Test that the tail solution keeps its boundary value and conserves the first integral."""
        r = np.geomspace(1.0, 100.0, 40)
        z, z_r = tail_z(0.1, 1.0, r, PARAMS)
        self.assertAlmostEqual(float(z[0]), 0.1, places=15)
        invariant = tail_invariant(z, r, PARAMS)
        np.testing.assert_allclose(invariant, invariant[0], rtol=1e-12)
        self.assertTrue(np.all(z_r < 0))


class TestConeCharacteristics(unittest.TestCase):
    """Test the characteristic flow over the exact cone."""

    @classmethod
    def setUpClass(cls):
        cls.coeffs = build_coefficients(ConeField(PARAMS.alpha0), PARAMS, ENV)
        cls.char = integrate_characteristics(cls.coeffs, ENV, Y0)

    def test_straight_characteristics(self):
        """Test R = psi + c0 t, Y = eta and Z = 0 over the cone."""
        char = self.char
        c0 = cone_speed_constant(PARAMS)
        psi0 = char.psi(char.eta)
        np.testing.assert_allclose(char.R, psi0[None, :] + c0 * char.t[:, None], rtol=1e-8)
        np.testing.assert_allclose(char.Y, np.broadcast_to(char.eta[None, :], char.Y.shape), atol=1e-12)
        self.assertLess(float(np.max(np.abs(char.Z))), 1e-12)
        self.assertGreater(char.min_jacobian, 0.0)

    def test_inversion_round_trip(self):
        """Test that the inverse flow recovers (t, eta)."""
        r, y = self.char.phi(0.5, 0.3)
        t, eta = invert_flow(self.char, float(r), float(y))
        self.assertAlmostEqual(t, 0.5, places=8)
        self.assertAlmostEqual(eta, 0.3, places=8)

    def test_inversion_window(self):
        """Test that queries outside the strip or the y window are refused."""
        with self.assertRaises(OutsideWindow):
            invert_flow(self.char, 10.0, 0.0)
        with self.assertRaises(OutsideWindow):
            invert_flow(self.char, 2.0, 4.5)

    def test_anchor_on_k(self):
        """Test that a patch cannot be anchored where h vanishes."""
        with self.assertRaises(InvalidParameter):
            integrate_characteristics(self.coeffs, ENV, 0.0)


class TestMetricFactor(unittest.TestCase):
    """Test the assembled metric for a field that departs from the cone inside the cutoff band."""

    @classmethod
    def setUpClass(cls):
        cls.field = BumpedCone(1e-5)
        cls.coeffs = build_coefficients(cls.field, PARAMS, ENV)
        cls.patches = build_patches(cls.coeffs, ENV, Y0, Y0 + 0.25 * H0)
        cls.metric = assemble_metric(cls.patches, ENV, PARAMS, [Y0])

    def test_patches(self):
        """Test the anchors and the overlap agreement of consecutive patches."""
        self.assertEqual(len(self.patches), 2)
        self.assertAlmostEqual(self.patches[1].y0 - self.patches[0].y0, 0.5 * H0, places=15)
        self.assertLessEqual(self.metric.patch_mismatch, 1e-6)

    def test_inner_strip_vanishes(self):
        """Test that z is exactly zero for r <= h^2 / 2 and nonzero beyond."""
        strip_r, strip_z = self.metric.strip_r[0], self.metric.strip_z[0]
        inner = strip_r <= 0.5 * H0
        self.assertTrue(np.all(strip_z[inner] == 0.0))
        self.assertGreater(self.metric.max_deviation, 0.0)
        self.assertLess(self.metric.max_deviation, 1e-2)

    def test_tail(self):
        """Test the tail first integral and the reduced tail equation."""
        r = H0 * np.geomspace(1.0, 100.0, 50)
        self.assertLess(tail_conservation(self.metric, Y0, r), 1e-8)
        self.assertLess(tail_residual(self.metric, Y0, H0 * np.geomspace(1.01, 100.0, 30)), 1e-9)

    def test_domain(self):
        """Test that z is undefined below h^2 / 4 and that K columns are covered."""
        with self.assertRaises(OutsideWindow):
            self.metric.z_derivatives(np.array([0.1 * H0]), np.array([Y0]))
        self.assertTrue(bool(self.metric.covers(np.array([1.0]), np.array([0.0]))[0]))
        f, f_r, f_y = self.metric.evaluate(np.array([0.3 * H0]), np.array([Y0]))
        self.assertEqual((float(f[0]), float(f_r[0]), float(f_y[0])), (1.0, 0.0, 0.0))

    def test_residuals(self):
        """Test that the residual diagnostics return finite values on every level."""
        self.assertTrue(np.isfinite(residual_z(self.metric, self.coeffs, Y0).sup_norm))
        residuals, orders = minimality_certificate(self.field, self.metric, Y0)
        self.assertEqual(len(residuals), 3)
        self.assertEqual(len(orders), 2)
        self.assertTrue(all(np.isfinite(residuals)))

    def test_export(self):
        """Test the strip CSV and its sidecar."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = save_metric(self.metric, os.path.join(tmp, 'metric.csv'))
            meta = read_json(paths[1])
        self.assertAlmostEqual(meta['beta2'], 0.75, places=15)
        self.assertEqual(len(meta['anchors']), 2)


if __name__ == '__main__':
    unittest.main()
