import argparse
import logging

from app.commands.common import cohort_list, load_manifest, print_json
from app.config import settings
from app.services.cohort_manager import RecordingStore, split_cohort, split_sizes, subset_manifest

logger = logging.getLogger(__name__)


def cmd_ingest(args: argparse.Namespace):
    """Subject-level train/val/test split of a manifest, optionally warming the preprocessed cache"""
    manifest = load_manifest(args.manifest)
    if args.cohorts:
        manifest = subset_manifest(manifest, args.cohorts)
    seed = settings.DEFAULT_SEED if args.seed is None else args.seed
    split = split_cohort(manifest, seed)
    out = args.out or args.manifest
    split.save(out)
    if args.cache_dir:
        _warm_cache(split, args.cache_dir)
    print_json({
        "manifest": out,
        "splits": {c: split_sizes(len(split.subjects(c))) for c in split.cohorts()},
    })


def cmd_preprocess(args: argparse.Namespace):
    """Preprocess every entry of a manifest into the on-disk cache"""
    manifest = load_manifest(args.manifest)
    if args.cohorts:
        manifest = subset_manifest(manifest, args.cohorts)
    count = _warm_cache(manifest, args.cache_dir or settings.CACHE_DIR)
    print_json({"cached": count})


def _warm_cache(manifest, cache_dir) -> int:
    store = RecordingStore(manifest, cache_dir=cache_dir)
    store.initialize()
    recordings = store.load_many(manifest.entries)
    logger.info(f"Preprocessed {len(recordings)} recordings into {cache_dir}")
    return len(recordings)


def register(subparsers):
    parser = subparsers.add_parser("ingest", help="split a manifest into train/val/test by subject")
    parser.add_argument("manifest", help="manifest JSON")
    parser.add_argument("--out", help="output manifest (default: overwrite the input)")
    parser.add_argument("--seed", type=int, help="split seed")
    parser.add_argument("--cohorts", type=cohort_list, help="keep only these cohorts")
    parser.add_argument("--cache-dir", help="also preprocess every recording into this cache")
    parser.set_defaults(handler=cmd_ingest)

    parser = subparsers.add_parser("preprocess", help="fill the preprocessed-recording cache")
    parser.add_argument("manifest", help="manifest JSON")
    parser.add_argument("--cache-dir", help=f"cache directory (default {settings.CACHE_DIR})")
    parser.add_argument("--cohorts", type=cohort_list, help="only these cohorts")
    parser.set_defaults(handler=cmd_preprocess)
