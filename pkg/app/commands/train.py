import argparse
import logging
from pathlib import Path

from app.commands.common import add_run_overrides, apply_run_overrides, cohort_list, load_manifest, print_json
from app.models.network import TAU_GRID
from app.models.training import RunConfig
from app.services.cohort_manager import get_recording_store
from app.services.reporting import write_json
from app.services.trainer import evaluate, load_model, train_from_manifest
from app.utils.errors import DataError

logger = logging.getLogger(__name__)


def load_run_config(path) -> RunConfig:
    try:
        return RunConfig.load(path)
    except OSError as e:
        raise DataError(f"cannot read run config {path}: {e}")


def cmd_train(args: argparse.Namespace):
    """Train on the manifest's train split; writes model.ssck, its sidecar and training_log.ndjson"""
    config = apply_run_overrides(load_run_config(args.config), args)
    manifest = load_manifest(args.manifest)
    store = get_recording_store(manifest, cache_dir=args.cache_dir)
    result = train_from_manifest(config, manifest, args.out_dir, store)
    out = Path(args.out_dir)
    write_json(config.model_dump(mode="json"), out / "run_config.json")
    meta = result.checkpoint.meta
    print_json({
        "checkpoint": str(out / "model.ssck"),
        "selected_pass": meta.selected_pass,
        "validation_kappa": meta.validation_kappa,
        "passes_run": meta.passes_run,
    })


def cmd_evaluate(args: argparse.Namespace):
    """Metrics report of a checkpoint on one split of a manifest"""
    model = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    store = get_recording_store(manifest, cache_dir=args.cache_dir)
    entries = manifest.select(split=args.split, cohorts=args.cohorts)
    if not entries:
        raise DataError(f"no '{args.split}' entries to evaluate")
    report = evaluate(model, store.load_many(entries), args.tau, args.split, args.batch_size, args.units)
    if args.out:
        report.save(args.out)
    print_json({
        "split": report.split,
        "tau_eval": report.tau_eval,
        "n_subjects": len(report.per_subject),
        "pooled_accuracy": report.pooled_accuracy,
        "pooled_kappa": report.pooled_kappa,
    })


def register(subparsers):
    parser = subparsers.add_parser("train", help="train the sleep stager on a split manifest")
    parser.add_argument("config", help="run config JSON")
    parser.add_argument("manifest", help="split manifest JSON")
    parser.add_argument("out_dir", help="output directory")
    parser.add_argument("--cache-dir", help="preprocessed-recording cache")
    add_run_overrides(parser)
    parser.set_defaults(handler=cmd_train)

    parser = subparsers.add_parser("evaluate", help="evaluate a checkpoint on a split")
    parser.add_argument("checkpoint", help="model.ssck")
    parser.add_argument("manifest", help="split manifest JSON")
    parser.add_argument("--split", choices=["train", "val", "test"], default="test")
    parser.add_argument("--tau", type=int, choices=TAU_GRID, default=30, help="evaluation window in seconds")
    parser.add_argument("--units", choices=["30s", "1s"], default="30s")
    parser.add_argument("--cohorts", type=cohort_list, help="only these cohorts")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--cache-dir", help="preprocessed-recording cache")
    parser.add_argument("--out", help="metrics report JSON")
    parser.set_defaults(handler=cmd_evaluate)
