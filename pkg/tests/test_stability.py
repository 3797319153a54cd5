"""Unit tests for the second variation and the strict stability estimate."""

import os
import tempfile
import unittest

import numpy as np

from ms_singular.core.bvp_solver import ConeField, ProfileField
from ms_singular.core.radial_ode import make_cone_params, solve_radial
from ms_singular.core.sme_operator import Derivatives, FieldSampler
from ms_singular.core.stability import (
    StabilityMesh,
    default_test_family,
    estimate_lambda,
    jacobi_apply,
    numerator,
    rayleigh_quotient,
    save_quotients,
    second_fundamental,
    slice_aggregate_check,
)
from ms_singular.errors import (
    DomainMismatch,
    InvalidParameter,
    NonpositiveU,
    SupportTouchesBoundary,
    ZeroTestFunction,
)
from ms_singular.model import ProfileVariant, StabilityReport, StabilitySettings
from ms_singular.utils import read_csv

PARAMS = make_cone_params(3, 5, 1, 0.01, 0.05)
SETTINGS = StabilitySettings(n_r=200)


class RippledCone(FieldSampler):
    """alpha0 r + 1 with a y-dependent ripple, so the metric has an off-diagonal part."""

    def derivatives(self, r, y):
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        ripple = 0.2 * np.sin(2.0 * np.pi * y)
        slope = 0.4 * np.pi * np.cos(2.0 * np.pi * y)
        return Derivatives(
            u=PARAMS.alpha0 * r + 1.0 + r * ripple,
            u_r=PARAMS.alpha0 + ripple,
            u_rr=np.zeros(r.shape),
            u_y=r * slope,
            u_ry=slope,
            u_yy=-4.0 * np.pi**2 * r * ripple,
        )


class TestSecondFundamental(unittest.TestCase):
    """Test the squared second fundamental forms."""

    def test_cone(self):
        """Test |A_SG|^2 r^2 = 2 and |A_G|^2 r^2 = 4/3 on the cone for (n, m) = (3, 5)."""
        r = np.geomspace(1e-2, 10.0, 7)
        geometry = second_fundamental(ConeField(PARAMS.alpha0), PARAMS, r)
        np.testing.assert_allclose(geometry.A2_sg * r * r, 2.0, rtol=1e-12)
        np.testing.assert_allclose(geometry.A2_graph * r * r, 4.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(geometry.nu_t, 1.0 / np.sqrt(3.0), rtol=1e-14)

    def test_invalid_inputs(self):
        """Test rejection of a negative field and of a sampler without sample points."""
        with self.assertRaises(NonpositiveU):
            second_fundamental(ConeField(-1.0), PARAMS, np.array([1.0]))
        with self.assertRaises(InvalidParameter):
            second_fundamental(ConeField(PARAMS.alpha0), PARAMS)


class TestQuadraticForms(unittest.TestCase):
    """Test the discrete second variation on the cone."""

    @classmethod
    def setUpClass(cls):
        cls.mesh = StabilityMesh.build(ConeField(PARAMS.alpha0), PARAMS, SETTINGS, period=1.0, y=[0.0])
        cls.family = default_test_family(cls.mesh)

    def test_mesh_validation(self):
        """Test rejection of decreasing radii and of too few non-periodic y nodes."""
        with self.assertRaises(InvalidParameter):
            StabilityMesh(ConeField(PARAMS.alpha0), PARAMS, np.array([4.0, 3.0, 2.0, 1.0]), np.array([0.0]), 1.0)
        with self.assertRaises(InvalidParameter):
            StabilityMesh(ConeField(PARAMS.alpha0), PARAMS, np.geomspace(0.1, 1.0, 8), np.array([0.0, 1.0]))

    def test_family(self):
        """Test the size, support and normalization of the default family."""
        self.assertEqual(len(self.family), 24)
        for name, zeta in self.family:
            self.assertTrue(np.all(zeta[~self.mesh.active] == 0.0), msg=name)
            self.assertAlmostEqual(float(np.max(np.abs(zeta))), 1.0, places=14)
        self.assertEqual([n for n, _ in default_test_family(self.mesh)], [n for n, _ in self.family])
        with self.assertRaises(InvalidParameter):
            default_test_family(self.mesh, size=19)

    def test_jacobi_operator_matches_form(self):
        """Test -sum(omega zeta L(V zeta)) = Q_h(zeta) for the flux form of L."""
        for name, zeta in self.family[:6]:
            psi = self.mesh.geometry.V * zeta
            pairing = -float(np.sum(self.mesh.node_measure * zeta * jacobi_apply(self.mesh, psi)))
            self.assertAlmostEqual(pairing / numerator(self.mesh, zeta), 1.0, places=8, msg=name)

    def test_jacobi_operator_cross_terms(self):
        """Test the pairing identity on y-dependent fields, periodic and bounded in y."""
        rng = np.random.default_rng(3)
        r = np.geomspace(0.05, 2.0, 24)
        meshes = {
            'periodic': StabilityMesh(RippledCone(), PARAMS, r, np.arange(12) / 12.0, period=1.0),
            'bounded': StabilityMesh(RippledCone(), PARAMS, r, np.linspace(-0.5, 0.5, 11)),
        }
        for name, mesh in meshes.items():
            with self.subTest(mesh=name):
                self.assertGreater(float(np.max(np.abs(mesh.geometry.nu_y))), 0.1)
                zeta = np.where(mesh.active, rng.standard_normal(mesh.shape), 0.0)
                pairing = -float(np.sum(mesh.node_measure * zeta * jacobi_apply(mesh, mesh.geometry.V * zeta)))
                scale = float(zeta.ravel() @ (mesh.stiffness @ zeta.ravel()))
                self.assertLess(abs(pairing - numerator(mesh, zeta)), 1e-9 * scale)

    def test_quotient_errors(self):
        """Test the vanishing, boundary-touching and misshaped test functions."""
        with self.assertRaises(ZeroTestFunction):
            rayleigh_quotient(self.mesh, np.zeros(self.mesh.shape))
        with self.assertRaises(SupportTouchesBoundary):
            rayleigh_quotient(self.mesh, np.ones(self.mesh.shape))
        with self.assertRaises(DomainMismatch):
            rayleigh_quotient(self.mesh, np.zeros((2, 3)))

    def test_periodic_reduction(self):
        """Test that a y-constant function has the same quotient on a periodic 2-D mesh as on the slice."""
        mesh = StabilityMesh.build(ConeField(PARAMS.alpha0), PARAMS, StabilitySettings(n_r=200, n_y=16), period=4.0)
        name, radial = self.family[0]
        zeta = np.broadcast_to(radial, mesh.shape).copy()
        self.assertAlmostEqual(rayleigh_quotient(mesh, zeta) / rayleigh_quotient(self.mesh, radial), 1.0, places=10)

    def test_cone_constant(self):
        """Test the cone estimate between the Hardy limit 1/12 and its finite-interval correction."""
        report = estimate_lambda(self.mesh, self.family, lambda_target=0.01)
        self.assertGreater(report.eigen_estimate, 0.08)
        self.assertLess(report.eigen_estimate, 0.2)
        self.assertGreaterEqual(report.min_quotient, report.eigen_estimate - 1e-8)
        self.assertTrue(report.passed)


class TestProfileStability(unittest.TestCase):
    """Test strict stability of SG(phi)."""

    def test_profile_slice(self):
        """Test that the profile slice clears the stability floor and the quotient export."""
        std = solve_radial(PARAMS, ProfileVariant.STANDARD)
        mesh = StabilityMesh.build(ProfileField(std), PARAMS, SETTINGS, period=1.0, y=[0.0])
        report = estimate_lambda(mesh, default_test_family(mesh), lambda_target=0.01, jitter_seed=0)
        self.assertTrue(report.passed, msg=f'lambda_hat={report.lambda_hat}')
        with tempfile.TemporaryDirectory() as tmp:
            path = save_quotients(report, os.path.join(tmp, 'quotients.csv'))
            columns = read_csv(path)
        self.assertEqual(columns['index'].size, 24)
        np.testing.assert_allclose(columns['quotient'], list(report.quotients.values()), rtol=1e-15)

    def test_scaling_field_is_jacobi(self):
        """Test that phi - r phi', the variation of t phi(r / t), is nearly annihilated by L."""
        std = solve_radial(PARAMS, ProfileVariant.STANDARD)
        mesh = StabilityMesh.build(ProfileField(std), PARAMS, SETTINGS, period=1.0, y=[0.0])
        d = mesh.field.derivatives(*np.meshgrid(mesh.r, mesh.y))
        psi = np.where(mesh.active, d.u - mesh.r[None, :] * d.u_r, 0.0)
        self.assertTrue(np.all(psi[:, 1:-1] > 0))
        values = jacobi_apply(mesh, psi)[:, 2:-2]
        zeta = psi / mesh.geometry.V
        potential = (d.u**(PARAMS.m - 1) * mesh.geometry.V * mesh.geometry.A2_sg * zeta)[:, 2:-2]
        self.assertLess(float(np.max(np.abs(values))), 1e-2 * float(np.max(np.abs(potential))))


class TestAggregateCheck(unittest.TestCase):
    """Test the comparison of two-dimensional and slice estimates."""

    def test_quarter_rule(self):
        """Test margins against a quarter of the slice value."""
        report = StabilityReport(min_quotient=0.1)
        ok, margin = slice_aggregate_check(report, 0.2)
        self.assertTrue(ok)
        self.assertAlmostEqual(margin, 0.05, places=15)
        ok, _ = slice_aggregate_check(StabilityReport(min_quotient=0.01), 0.2)
        self.assertFalse(ok)


if __name__ == '__main__':
    unittest.main()
