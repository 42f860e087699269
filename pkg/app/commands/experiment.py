import argparse
import json
import logging
from pathlib import Path

from app.commands.common import add_run_overrides, apply_run_overrides, int_list, load_manifest, print_json
from app.models.training import ExperimentConfig
from app.services.cohort_manager import RecordingStore, subset_manifest
from app.services.experiments import ExperimentRunner
from app.services.reporting import write_json, write_results, write_sweep
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

FAMILIES = ["sweep", "loci", "loco", "fractions", "combos"]


def load_experiment_config(path, family: str) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read experiment config {path}: {e}")
    # Family dari command line menggantikan isi file
    data["family"] = family
    return ExperimentConfig.model_validate(data)


def cmd_experiment(args: argparse.Namespace):
    """Run one experiment family and write its tables to out_dir"""
    config = load_experiment_config(args.config, args.family)
    run = apply_run_overrides(config.run, args)
    seeds = args.seeds or ([args.seed] if args.seed is not None else config.seeds)
    config = ExperimentConfig.model_validate({**config.model_dump(), "run": run.model_dump(), "seeds": seeds})

    manifest = load_manifest(args.manifest)
    if args.cohorts:
        manifest = subset_manifest(manifest, args.cohorts)
    store = RecordingStore(manifest, cache_dir=args.cache_dir)
    store.initialize()
    runner = ExperimentRunner(manifest, store, config)

    out = Path(args.out_dir)
    result = runner.run(config.family)
    if config.family == "sweep":
        written = write_sweep(result, out)
        count = len(result.rows)
    else:
        written = write_results(result, out, config.family, grid=config.family in ("loci", "loco"))
        written.append(write_json([r.model_dump() for r in result], out / f"{config.family}_results.json"))
        count = len(result)
    written.append(write_json(runner.audits, out / "audit.json"))
    write_json(config.model_dump(mode="json"), out / "experiment_config.json")
    print_json({"family": config.family, "results": count, "files": [str(p) for p in written]})


def register(subparsers):
    parser = subparsers.add_parser("experiment", help="run an experiment family")
    parser.add_argument("family", choices=FAMILIES)
    parser.add_argument("config", help="experiment config JSON")
    parser.add_argument("manifest", help="split manifest JSON")
    parser.add_argument("out_dir", help="output directory")
    parser.add_argument("--seeds", type=int_list, help="comma-separated seeds (overrides --seed)")
    parser.add_argument("--cache-dir", help="preprocessed-recording cache")
    add_run_overrides(parser)
    parser.set_defaults(handler=cmd_experiment)
