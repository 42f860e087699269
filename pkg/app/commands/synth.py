import argparse
import logging
from pathlib import Path

from app.commands.common import print_json
from app.config import settings
from app.models.synth import SyntheticCohortSpec
from app.services.synthcohort import default_cohort_spec, generate_cohorts
from app.utils.errors import DataError

logger = logging.getLogger(__name__)


def cmd_synth(args: argparse.Namespace):
    """Generate synthetic cohorts: EDF files, hypnograms and manifest.json"""
    if args.spec == "default":
        spec = default_cohort_spec(args.subjects)
    else:
        try:
            spec = SyntheticCohortSpec.load(args.spec)
        except OSError as e:
            raise DataError(f"cannot read cohort spec {args.spec}: {e}")
    seed = settings.DEFAULT_SEED if args.seed is None else args.seed
    manifest = generate_cohorts(spec, args.out_dir, seed, n_jobs=args.n_jobs)
    print_json({
        "manifest": str(Path(args.out_dir) / "manifest.json"),
        "cohorts": manifest.cohorts(),
        "entries": len(manifest.entries),
    })


def register(subparsers):
    parser = subparsers.add_parser("synth", help="generate synthetic multi-cohort PSG data")
    parser.add_argument("spec", help="cohort spec JSON, or 'default' for the five-site battery")
    parser.add_argument("out_dir", help="output directory")
    parser.add_argument("--seed", type=int, help="generation seed")
    parser.add_argument("--subjects", type=int, default=20, help="subjects per cohort of the default battery")
    parser.add_argument("--n-jobs", type=int, help="parallel subject generation")
    parser.set_defaults(handler=cmd_synth)
