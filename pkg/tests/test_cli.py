"""Tests for the ms-singular command line."""

import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from unittest.mock import patch

from ms_singular import __version__
from ms_singular.cli.cli import run_cmd


def invoke(*argv: str) -> int:
    with patch('sys.argv', ['ms-singular', *argv]):
        with redirect_stdout(io.StringIO()):
            try:
                run_cmd()
            except SystemExit as e:
                return e.code
    raise AssertionError('run_cmd returned without exiting')


class TestCommandLine(unittest.TestCase):
    """Test exit codes of the command line."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_version(self):
        """Test the version flag."""
        out = io.StringIO()
        with patch('sys.argv', ['ms-singular', '-v']), redirect_stdout(out):
            with self.assertRaises(SystemExit) as ctx:
                run_cmd()
        self.assertEqual(ctx.exception.code, 0)
        self.assertIn(__version__, out.getvalue())

    def test_no_command(self):
        """Test that a missing command prints help and exits with 1."""
        self.assertEqual(invoke(), 1)

    def test_invalid_config(self):
        """Test that a config failing validation exits with 2."""
        path = os.path.join(self.tmp.name, 'bad.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'n': 2}, f)
        self.assertEqual(invoke('envelope', '--config', path, '--out', self.tmp.name), 2)
        self.assertEqual(invoke('envelope', '--config', os.path.join(self.tmp.name, 'absent.json')), 2)

    def test_stage_command(self):
        """Test a single stage command writing into --out."""
        out = os.path.join(self.tmp.name, 'envelope')
        self.assertEqual(invoke('envelope', '--out', out), 0)
        self.assertTrue(os.path.exists(os.path.join(out, 'run_report.json')))
        self.assertTrue(os.path.exists(os.path.join(out, 'envelope', 'flatness.csv')))

    def test_full_with_stage_filter(self):
        """Test that --stage restricts the full command."""
        out = os.path.join(self.tmp.name, 'full')
        self.assertEqual(invoke('full', '--stage', 'envelope', '--out', out), 0)
        self.assertFalse(os.path.exists(os.path.join(out, 'radial')))


if __name__ == '__main__':
    unittest.main()
