import argparse
import sys

from ms_singular import __version__
from ms_singular.cli.run import StageCMD


def run_cmd():
    parser = argparse.ArgumentParser('MS-Singular Command Line tool', usage='ms-singular <command> [<args>]')
    parser.add_argument('-v', '--version', action='version', version=f'ms-singular {__version__}')
    subparsers = parser.add_subparsers(help='MS-Singular command line helper.')

    StageCMD.define_args(subparsers)

    args = parser.parse_args()

    if not hasattr(args, 'func'):
        parser.print_help()
        sys.exit(1)

    cmd = args.func(args)
    sys.exit(cmd.execute())


if __name__ == '__main__':
    run_cmd()
