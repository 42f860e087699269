import argparse
import json
import logging
import sys
from typing import Callable, List

from pydantic import ValidationError

from app.models.psg import CohortManifest
from app.models.training import RunConfig
from app.services.trainer import override_config
from app.utils.errors import DataError, SleepStagerError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def cohort_list(text: str) -> List[str]:
    cohorts = [c.strip() for c in text.split(",") if c.strip()]
    if not cohorts:
        raise argparse.ArgumentTypeError("expected a comma-separated list of cohort names")
    return cohorts


def int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def add_run_overrides(parser: argparse.ArgumentParser):
    """Flags that override fields of a loaded RunConfig"""
    parser.add_argument("--seed", type=int, help="seed of every random stream of the run")
    parser.add_argument("--tau", type=int, help="loss averaging window in seconds")
    parser.add_argument("--alpha", type=int, help="sequence length in 30 s epochs")
    parser.add_argument("--hidden-units", type=int, help="GRU hidden units per direction (0 disables the GRU)")
    parser.add_argument("--fraction", type=float, help="fraction of training subjects")
    parser.add_argument("--cohorts", type=cohort_list, help="comma-separated cohort names")
    parser.add_argument("--weight-decay", type=float, help="L2 weight decay")
    parser.add_argument("--batch-size", type=int, help="sequences per batch")


def apply_run_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    return override_config(
        config,
        seed=args.seed,
        tau=args.tau,
        alpha=args.alpha,
        hidden_units=args.hidden_units,
        fraction=args.fraction,
        cohorts=args.cohorts,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
    )


def load_manifest(path) -> CohortManifest:
    try:
        return CohortManifest.load(path)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}")


def print_json(payload):
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def run_handler(handler: Callable[[argparse.Namespace], None], args: argparse.Namespace) -> int:
    """
    Jalankan handler command dan terjemahkan exception ke exit code
    """
    try:
        handler(args)
        return EXIT_OK
    except ValidationError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as e:
        logger.error(f"Malformed JSON: {str(e)}")
        print(f"error: malformed JSON: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SleepStagerError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        logger.error(f"Numeric failure: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
