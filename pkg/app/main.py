import argparse
import logging
import sys
from typing import List, Optional

from app.commands import data, experiment, predict, synth, train
from app.commands.common import EXIT_USAGE, run_handler
from app.config import settings
from app.utils.logging_config import setup_logging

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser yang keluar dengan kode 1 untuk kesalahan pemakaian"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="sleep-stager",
        description="Mixed-cohort sleep staging: synthetic cohorts, training, evaluation and experiments",
    )
    parser.add_argument("--version", action="version", version=f"{settings.APP_NAME} {settings.APP_VERSION}")
    parser.add_argument("--debug", action="store_true", help="debug-level logging")
    parser.add_argument("--log-dir", help=f"log directory (default {settings.LOG_DIR})")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    # Tambahkan command
    for module in (synth, data, train, predict, experiment):
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(level=logging.DEBUG if args.debug else None, log_dir=args.log_dir)
    logger.info(f"Starting {settings.APP_NAME} command '{args.command}'")
    return run_handler(args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
