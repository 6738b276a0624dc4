"""
Command-line entry point for meanfield-lab.

    meanfield-lab run <config>
    meanfield-lab validate <config>
    meanfield-lab rate-study <config>
    meanfield-lab eps-sweep <config>

Exit codes: 0 success, 2 invalid configuration or model, 3 numerical
failure, 1 anything unexpected.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from meanfield_lab import __version__
from meanfield_lab.config import Experiment, load_config
from meanfield_lab.errors import ConfigError, LabError, ModelError, NumericalError, TransportError
from meanfield_lab.experiments import run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

SUBCOMMAND_EXPERIMENTS = {
    'run': None,
    'rate-study': Experiment.RATE_STUDY,
    'eps-sweep': Experiment.EPS_SWEEP,
}


def setup_logging() -> None:
    """Configure the root logger from MEANFIELD_LOG_LEVEL and MEANFIELD_LOG_FILE."""
    level_name = os.getenv('MEANFIELD_LOG_LEVEL', 'INFO').upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    log_file = os.getenv('MEANFIELD_LOG_FILE')
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(format=LOG_FORMAT, level=level, handlers=handlers, force=True)
    if level_name != logging.getLevelName(level):
        logger.warning(f"Unknown MEANFIELD_LOG_LEVEL={level_name!r}, using INFO")


def exit_code(error: BaseException) -> int:
    """Map an exception to the process exit status."""
    if isinstance(error, (ConfigError, ModelError, TransportError)):
        return EXIT_VALIDATION
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_UNEXPECTED


def run(config_path, experiment: Optional[Experiment] = None) -> int:
    """
    Load, validate and execute one experiment.

    Args:
        config_path: TOML experiment file
        experiment: Forces a recipe instead of the config's ``experiment`` key

    Returns:
        Exit status
    """
    try:
        cfg = load_config(config_path)
        run_experiment(cfg, experiment)
    except LabError as e:
        code = exit_code(e)
        kind = "Validation" if code == EXIT_VALIDATION else "Numerical"
        logger.error(f"{kind} error: {e}")
        return code
    return EXIT_OK


def validate(config_path) -> int:
    """Parse and validate a config without running anything."""
    try:
        cfg = load_config(config_path)
    except LabError as e:
        logger.error(f"Validation error: {e}")
        return exit_code(e)
    logger.info(f"{config_path}: valid {cfg.experiment.value} config")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='meanfield-lab',
        description='Particle, kinetic and hydrodynamic simulations of interacting agents '
                    'with transport-distance diagnostics')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)
    for name, help_text in (
        ('run', 'run the experiment named in the config'),
        ('validate', 'parse and validate the config only'),
        ('rate-study', 'run the convergence-rate study of the config'),
        ('eps-sweep', 'run the pressure sweep of the config'),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('config', help='TOML experiment file')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == 'validate':
            return validate(args.config)
        return run(args.config, SUBCOMMAND_EXPERIMENTS[args.command])
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
