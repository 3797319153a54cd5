from argparse import ArgumentParser
from typing import List, Optional

from pydantic import ValidationError

from ms_singular.cli.base import CLICommand
from ms_singular.errors import SingularSurfaceError
from ms_singular.model import StageName
from ms_singular.pipeline import load_config, run_pipeline
from ms_singular.utils import get_logger

logger = get_logger()

FULL = 'full'
COMMANDS = {
    StageName.RADIAL.value: 'Solve the standard and modified radial profiles',
    StageName.ENVELOPE.value: 'Build the envelope of K and its flatness table',
    StageName.SUPERSOLUTION.value: 'Certify the sign of the supersolution family',
    StageName.BVP.value: 'Solve the eps family of Dirichlet problems and glue the global u',
    StageName.METRIC.value: 'Build the metric factor by characteristics and certify minimality',
    StageName.STABILITY.value: 'Estimate the strict stability constant',
    FULL: 'Run every stage (or those selected with --stage)',
}

EXIT_CONFIG_ERROR = 2


def subparser_func(args):
    """ Function which will be called for a specific sub parser.
    """
    return StageCMD(args)


class StageCMD(CLICommand):
    name = FULL

    def __init__(self, args):
        self.args = args

    @staticmethod
    def define_args(parsers: ArgumentParser):
        """Define one sub command per stage plus ``full``.
        """
        for command, help_text in COMMANDS.items():
            parser = parsers.add_parser(command, help=help_text)
            add_argument(parser)
            parser.set_defaults(func=subparser_func, command=command)

    def selected_stages(self, default: List[StageName]) -> List[StageName]:
        command: str = getattr(self.args, 'command', FULL)
        if command != FULL:
            return [StageName(command)]
        requested: Optional[List[str]] = getattr(self.args, 'stage', None)
        return [StageName(s) for s in requested] if requested else default

    def execute(self) -> int:
        """Run the selected stages; the exit status is 0 iff the run report passes."""
        log_file: Optional[str] = getattr(self.args, 'log_file', None)
        if log_file:
            get_logger(log_file=log_file)

        try:
            config = load_config(getattr(self.args, 'config', None), output_dir=getattr(self.args, 'out', None))
        except (ValidationError, SingularSurfaceError, OSError) as e:
            logger.error('Invalid configuration: %s', e)
            return EXIT_CONFIG_ERROR

        report = run_pipeline(config, self.selected_stages(config.stages))
        for name, result in report.stages.items():
            status = 'PASS' if result.passed else 'FAIL'
            logger.info('%-14s %s%s', name, status, f'  {result.error}' if result.error else '')
        return 0 if report.passed else 1


def add_argument(parser: ArgumentParser) -> None:
    """Register command line arguments shared by every stage command.

    Args:
        parser: The argparse parser to add arguments to.
    """
    parser.add_argument('--config', type=str, default=None, metavar='PATH', help='JSON pipeline configuration')
    parser.add_argument(
        '--out', type=str, default=None, metavar='DIR', help='Output directory (overrides output_dir of the config)'
    )
    parser.add_argument(
        '--stage',
        type=str,
        action='append',
        choices=[s.value for s in StageName.ordered()],
        default=None,
        help='Restrict `full` to this stage and its prerequisites; repeatable'
    )
    parser.add_argument('--log-file', type=str, default=None, metavar='PATH', help='Mirror log output into a file')
