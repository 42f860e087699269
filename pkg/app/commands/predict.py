import argparse
import json
import logging
from pathlib import Path

from app.commands.common import print_json
from app.models.metrics import HypnodensityExport
from app.models.network import TAU_GRID
from app.models.psg import ChannelMontage
from app.services import dsp, objective
from app.services.edf_processor import EdfProcessor
from app.services.reporting import render_hypnodensity, write_hypnodensity_csv, write_hypnogram_tokens
from app.services.trainer import infer_recording, load_model
from app.utils.errors import DataError

logger = logging.getLogger(__name__)


def load_montage(path) -> ChannelMontage:
    if path is None:
        return ChannelMontage()
    try:
        return ChannelMontage.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as e:
        raise DataError(f"cannot read montage {path}: {e}")


def cmd_predict(args: argparse.Namespace):
    """
    Hypnodensity CSV (one row per second of whole epochs), argmax hypnogram at tau resolution
    and an SVG rendering next to the hypnogram file.
    """
    model = load_model(args.checkpoint)
    config = model.config
    subject_id = Path(args.recording).stem
    contents = EdfProcessor.read_edf(args.recording)
    recording = EdfProcessor.assemble_recording(contents, load_montage(args.montage), subject_id, cohort="")
    preprocessed = dsp.preprocess(recording, config.fs)

    probabilities = infer_recording(model, preprocessed.data, args.batch_size)
    per_second = objective.per_second_probabilities(probabilities, config.columns_per_second)
    export = HypnodensityExport(probabilities=per_second.T, subject_id=subject_id)
    automatic = objective.window_predictions(probabilities, args.tau, config.columns_per_second)

    hypnogram_path = Path(args.hypnogram_out)
    csv_path = Path(args.csv) if args.csv else hypnogram_path.with_suffix(".csv")
    svg_path = Path(args.svg) if args.svg else hypnogram_path.with_suffix(".svg")
    write_hypnogram_tokens(automatic, hypnogram_path)
    write_hypnodensity_csv(export, csv_path)

    manual = None
    if args.reference:
        reference = EdfProcessor.load_hypnogram(args.reference)
        reference, _ = EdfProcessor.align_hypnogram(reference, preprocessed.n_epochs)
        manual = reference.stages
    render_hypnodensity(export, automatic, svg_path, manual=manual, tau=args.tau)
    logger.info(f"Predicted {subject_id}: {export.n_seconds} s, {len(automatic)} windows of {args.tau} s")
    print_json({
        "hypnogram": str(hypnogram_path),
        "hypnodensity": str(csv_path),
        "plot": str(svg_path),
        "seconds": export.n_seconds,
        "windows": int(len(automatic)),
    })


def register(subparsers):
    parser = subparsers.add_parser("predict", help="stage one EDF recording with a trained checkpoint")
    parser.add_argument("checkpoint", help="model.ssck")
    parser.add_argument("recording", help="EDF file")
    parser.add_argument("hypnogram_out", help="output hypnogram text file")
    parser.add_argument("--tau", type=int, choices=TAU_GRID, default=30, help="hypnogram resolution in seconds")
    parser.add_argument("--reference", help="manual hypnogram to draw next to the automatic one")
    parser.add_argument("--montage", help="channel montage JSON")
    parser.add_argument("--csv", help="hypnodensity CSV path (default: next to the hypnogram); one row per "
                        "second of the whole 30 s epochs, a trailing partial epoch is dropped")
    parser.add_argument("--svg", help="SVG path (default: next to the hypnogram)")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.set_defaults(handler=cmd_predict)
