"""Tests for the stage registry, configuration loading and pipeline runs."""

import json
import os
import tempfile
import unittest

from pydantic import ValidationError

from ms_singular.errors import MissingArtifact
from ms_singular.model import PipelineConfig, SolverConstants, StageName
from ms_singular.pipeline import StageFactory, config_digest, emit_plot_data, load_config, run_pipeline
from ms_singular.pipeline.stages import orders_verdict, slices_verdict
from ms_singular.utils import read_json


class TestStageSelection(unittest.TestCase):
    """Test stage ordering and the registry."""

    def test_prerequisites(self):
        """Test closing a selection under its prerequisites."""
        self.assertEqual(
            StageName.with_prerequisites([StageName.METRIC]),
            [StageName.RADIAL, StageName.ENVELOPE, StageName.SUPERSOLUTION, StageName.BVP, StageName.METRIC],
        )
        self.assertEqual(
            StageName.with_prerequisites([StageName.STABILITY]), [StageName.RADIAL, StageName.STABILITY]
        )
        self.assertEqual(StageName.with_prerequisites([StageName.ENVELOPE]), [StageName.ENVELOPE])

    def test_registry(self):
        """Test that every stage is registered."""
        self.assertEqual(set(StageFactory.get_registered_types()), set(StageName))


class TestConfig(unittest.TestCase):
    """Test configuration validation and loading."""

    def test_invalid_values(self):
        """Test rejection of bad dimensions, eps lists and amplitudes at parse time."""
        with self.assertRaises(ValidationError):
            PipelineConfig(n=2)
        with self.assertRaises(ValidationError):
            PipelineConfig(eps_list=[1e-2, 1e-3])
        with self.assertRaises(ValidationError):
            PipelineConfig(eps_list=[1e-3, 1e-2, 1e-4])
        with self.assertRaises(ValidationError):
            PipelineConfig(tau=0.05)

    def test_load_with_overrides(self):
        """Test that overrides replace file values and None overrides are ignored."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.json')
            with open(path, 'w', encoding='utf-8') as f:
                json.dump({'tau': 5e-4, 'output_dir': 'from_file', 'closed_set': {'points': [0.0, 1.0]}}, f)
            config = load_config(path, output_dir=os.path.join(tmp, 'out'), q_period=None)
        self.assertEqual(config.tau, 5e-4)
        self.assertEqual(config.output_dir, os.path.join(tmp, 'out'))
        self.assertEqual(config.q_period, 4.0)
        self.assertEqual(config.closed_set.points, [0.0, 1.0])

    def test_digest_ignores_output_dir(self):
        """Test that the config digest depends on the run parameters only."""
        a = PipelineConfig(output_dir='a')
        self.assertEqual(config_digest(a), config_digest(PipelineConfig(output_dir='b')))
        self.assertNotEqual(config_digest(a), config_digest(PipelineConfig(tau=5e-4)))


class TestRuns(unittest.TestCase):
    """Test pipeline runs restricted to the cheap stages."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def out(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def test_radial_run(self):
        """Test a radial-only run, its artifacts and the written report."""
        config = PipelineConfig(output_dir=self.out('radial'), stages=[StageName.RADIAL])
        report = run_pipeline(config)
        self.assertEqual(list(report.stages), ['radial'])
        self.assertTrue(report.passed, msg=str(report.stages['radial'].checks))
        result = report.stages['radial']
        self.assertIn('radial/profile_standard.csv', result.artifacts)
        self.assertIn('profile_modified', result.digests)
        self.assertEqual(os.listdir(os.path.join(config.output_dir, 'plots')), ['profile_log.csv'])
        saved = read_json(os.path.join(config.output_dir, 'run_report.json'))
        self.assertEqual(saved['config_digest'], config_digest(config))
        self.assertTrue(saved['stages']['radial']['passed'])

    def test_deterministic(self):
        """Test that identical configurations give identical reports and artifacts."""
        reports, payloads = [], []
        for name in ('first', 'second'):
            config = PipelineConfig(output_dir=self.out(name), stages=[StageName.RADIAL, StageName.ENVELOPE])
            reports.append(run_pipeline(config).model_dump())
            with open(os.path.join(config.output_dir, 'radial', 'profile_standard.csv'), 'rb') as f:
                payloads.append(f.read())
        self.assertEqual(reports[0], reports[1])
        self.assertEqual(payloads[0], payloads[1])

    def test_failed_prerequisite(self):
        """Test that a failing stage is tagged and its dependents are skipped."""
        config = PipelineConfig(
            output_dir=self.out('failed'),
            chosen_constants=SolverConstants(bound_factor=1.0),
            stages=[StageName.SUPERSOLUTION],
        )
        report = run_pipeline(config)
        self.assertEqual(list(report.stages), ['radial', 'envelope', 'supersolution'])
        self.assertTrue(report.stages['radial'].passed)
        envelope = report.stages['envelope']
        self.assertFalse(envelope.passed)
        self.assertTrue(envelope.error.startswith('[envelope]'))
        self.assertIn('BoundViolation', envelope.error)
        self.assertIn('skipped', report.stages['supersolution'].error)
        self.assertFalse(report.passed)

    def test_missing_artifact(self):
        """Test that plot emission fails when a completed stage lost its artifact."""
        config = PipelineConfig(output_dir=self.out('missing'), stages=[StageName.RADIAL])
        report = run_pipeline(config)
        os.remove(os.path.join(config.output_dir, 'radial', 'profile_standard.csv'))
        with self.assertRaises(MissingArtifact):
            emit_plot_data(report, config.output_dir)

    def test_supersolution_run(self):
        """Test that the supersolution stage certifies the sign over every (t, eps) pair."""
        config = PipelineConfig(output_dir=self.out('sign'), stages=[StageName.SUPERSOLUTION])
        result = run_pipeline(config).stages['supersolution']
        keys = [key for key in result.checks if key.startswith('sign_')]
        self.assertEqual(len(keys), 3 * 4)
        for key in keys:
            self.assertTrue(result.checks[key], msg=f'{key}: {result.margins[key]}')
        self.assertIn('supersolution/sign_reports.csv', result.artifacts)

    def test_bvp_run_records_certificates(self):
        """Test that convergence, envelope and slice certificates of the bvp stage are checks, not margins only."""
        config = PipelineConfig(output_dir=self.out('bvp'), stages=[StageName.BVP])
        result = run_pipeline(config).stages['bvp']
        self.assertIsNone(result.error, msg=result.error)
        for k in range(len(config.eps_list)):
            self.assertIn(f'residual_eps{k}', result.checks)
            self.assertLess(result.margins[f'residual_eps{k}'], 1e-9)
        for key in ('envelope_bound', 'envelope_limit_trend', 'slices', 'positivity'):
            self.assertIn(key, result.checks)
        self.assertIn('truncation_defect_eps0', result.margins)


class TestStageVerdicts(unittest.TestCase):
    """Test the aggregate verdicts recorded by the stages."""

    def test_slices_need_enough_met_columns(self):
        """Test that columns failing the smallness gate cannot make the slice check pass on their own."""
        unmet = [{'passed': 0.0, 'hypothesis_met': 0.0}] * 5
        self.assertFalse(slices_verdict(unmet))
        met = [{'passed': 1.0, 'hypothesis_met': 1.0}] * 5
        self.assertTrue(slices_verdict(met))
        self.assertFalse(slices_verdict(met[:4]))
        self.assertTrue(slices_verdict(met + unmet))
        self.assertFalse(slices_verdict(met + [{'passed': 0.0, 'hypothesis_met': 1.0}]))

    def test_minimality_orders(self):
        """Test that the minimality residual must decay at second order across every refinement."""
        self.assertTrue(orders_verdict([1.97, 2.04]))
        self.assertFalse(orders_verdict([1.97, 0.3]))
        self.assertFalse(orders_verdict([]))


if __name__ == '__main__':
    unittest.main()
