import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.models.metrics import MetricsReport
from app.models.psg import EPOCH_SECONDS, CohortManifest, LabeledRecording, ManifestEntry
from app.models.training import (
    AdamState,
    Checkpoint,
    CheckpointMeta,
    PassRecord,
    RunConfig,
    SequenceSample,
)
from app.services import objective
from app.services.autodiff import adam_step
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.cohort_manager import RecordingStore
from app.services.network import SleepStager
from app.services.reporting import TrainingLog
from app.utils.errors import DataError, NumericError

logger = logging.getLogger(__name__)


def sample_sequences(labeled: LabeledRecording, alpha: int) -> List[SequenceSample]:
    """Non-overlapping windows of alpha epochs; the last partial window is dropped"""
    recording = labeled.recording
    n_epochs = recording.n_epochs
    if n_epochs < alpha:
        raise DataError(f"{labeled.subject_id}: {n_epochs} epochs is shorter than alpha = {alpha}")
    epoch_samples = EPOCH_SECONDS * recording.fs
    samples = []
    for i in range(n_epochs // alpha):
        start = i * alpha
        samples.append(
            SequenceSample(
                x=recording.data[:, start * epoch_samples:(start + alpha) * epoch_samples],
                stages=labeled.hypnogram.stages[start:start + alpha],
                subject_id=labeled.subject_id,
                start_epoch=start,
            )
        )
    return samples


def nested_subsets(subjects: Sequence[str], fractions: Sequence[float], seed: int) -> Dict[float, List[str]]:
    """
    ceil(f * n) subjects (at least one) for each fraction, all prefixes of one
    seeded permutation, so smaller subsets are contained in larger ones.
    """
    subjects = sorted(subjects)
    if not subjects:
        raise DataError("no subjects to subsample")
    order = np.random.default_rng(seed).permutation(len(subjects))
    subsets = {}
    for fraction in fractions:
        count = max(1, math.ceil(round(fraction * len(subjects), 9)))
        subsets[fraction] = sorted(subjects[i] for i in order[:count])
    return subsets


def infer_recording(model: SleepStager, data: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """
    Eval-mode output over a whole recording [C, N] -> [K, n_epochs * 30 * cps].
    Windows of alpha epochs tile the recording; a final window aligned to the end
    covers the remainder.
    """
    config = model.config
    epoch_samples = EPOCH_SECONDS * config.fs
    n_epochs = data.shape[1] // epoch_samples
    if n_epochs < config.alpha:
        raise DataError(f"recording has {n_epochs} epochs, model needs at least alpha = {config.alpha}")
    starts = list(range(0, n_epochs - config.alpha + 1, config.alpha))
    if starts[-1] + config.alpha < n_epochs:
        starts.append(n_epochs - config.alpha)

    columns = config.epoch_columns
    out = np.zeros((config.n_classes, n_epochs * columns), dtype=np.float64)
    covered = 0
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        batch = np.stack([data[:, s * epoch_samples:(s + config.alpha) * epoch_samples] for s in chunk])
        probabilities = model.predict(batch.astype(model.dtype))
        for start, y in zip(chunk, probabilities):
            first = start * columns
            last = (start + config.alpha) * columns
            out[:, covered:last] = y[:, covered - first:]
            covered = last
    return out


def evaluate(model: SleepStager, recordings: Sequence[LabeledRecording], tau_eval: int = EPOCH_SECONDS,
             split: str = "test", batch_size: int = 32, units: str = "30s") -> MetricsReport:
    """Per-subject and pooled metrics of a model on labelled recordings"""
    per_subject = []
    confusions = []
    for labeled in recordings:
        if labeled.recording.n_epochs < model.config.alpha:
            logger.warning(f"{labeled.subject_id}: {labeled.recording.n_epochs} epochs, shorter than "
                           f"alpha = {model.config.alpha}; not evaluated")
            continue
        probabilities = infer_recording(model, labeled.recording.data, batch_size)
        metrics, cm = objective.subject_metrics(
            probabilities, labeled.hypnogram.stages, labeled.subject_id, labeled.cohort,
            tau_eval, model.config.columns_per_second,
        )
        per_subject.append(metrics)
        confusions.append(cm)
    return objective.build_report(split, tau_eval, per_subject, confusions, units)


class TrainingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: SleepStager
    checkpoint: Checkpoint
    log: List[PassRecord]
    initial_loss: float
    final_loss: float


class Trainer:
    """
    Fixed number of passes with Adam, validation kappa (30 s convention) after each
    validated pass, and selection of the first pass with the highest kappa.
    """

    def __init__(self, config: RunConfig, log_path: Optional[str] = None, dump_dir: Optional[str] = None):
        self.config = config
        self.log = TrainingLog(log_path)
        self.dump_dir = dump_dir
        self.dtype = np.dtype(config.dtype)

    def _batches(self, samples: List[SequenceSample], order: np.ndarray):
        tau = self.config.model.tau
        for i in range(0, len(order), self.config.batch_size):
            chosen = [samples[j] for j in order[i:i + self.config.batch_size]]
            x = np.stack([s.x for s in chosen]).astype(self.dtype)
            labels = objective.broadcast_labels(np.stack([s.stages for s in chosen]), tau,
                                                self.config.model.n_classes)
            yield x, labels

    def _snapshot(self, model: SleepStager, adam: AdamState, pass_index: int, kappa: float) -> Checkpoint:
        optimizer = adam.model_copy(update={
            "m": {k: v.copy() for k, v in adam.m.items()},
            "v": {k: v.copy() for k, v in adam.v.items()},
        })
        meta = CheckpointMeta(model=self.config.model, selected_pass=pass_index, validation_kappa=kappa,
                              passes_run=pass_index, seed=self.config.seed)
        return Checkpoint(meta=meta, params=model.parameter_arrays(), buffers=model.buffer_arrays(),
                          optimizer=optimizer)

    def _diverged(self, model: SleepStager, adam: AdamState, pass_index: int, best_kappa: float):
        self.log.write(PassRecord(event="diverged", pass_index=pass_index))
        if self.dump_dir:
            dump = self._snapshot(model, adam, pass_index, best_kappa)
            save_checkpoint(Path(self.dump_dir) / "diverged.ssck", dump)
        logger.error(f"Non-finite training loss in pass {pass_index}; state dumped to {self.dump_dir}")
        raise NumericError(f"training loss became non-finite in pass {pass_index}")

    def train(self, train_recordings: Sequence[LabeledRecording],
              val_recordings: Sequence[LabeledRecording]) -> TrainingResult:
        config = self.config
        if not train_recordings:
            raise DataError("training partition is empty")
        if not val_recordings:
            raise DataError("validation partition is empty")

        samples: List[SequenceSample] = []
        for labeled in train_recordings:
            try:
                samples.extend(sample_sequences(labeled, config.model.alpha))
            except DataError as e:
                logger.warning(f"Skipping training recording: {e}")
        if not samples:
            raise DataError("no training recording holds a full sequence")

        # Inferensi butuh minimal alpha epoch per rekaman
        short = [v.subject_id for v in val_recordings if v.recording.n_epochs < config.model.alpha]
        if short:
            logger.warning(f"Skipping validation recordings shorter than alpha = {config.model.alpha} epochs: {short}")
            val_recordings = [v for v in val_recordings if v.recording.n_epochs >= config.model.alpha]
        if not val_recordings:
            raise DataError(f"no validation recording holds alpha = {config.model.alpha} epochs")

        init_seed, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
        model = SleepStager(config.model, np.random.default_rng(init_seed), self.dtype)
        shuffle_rng = np.random.default_rng(shuffle_seed)
        adam = AdamState.from_config(config.optimizer)
        window = config.model.window_columns(config.model.tau)

        self.log.write(PassRecord(
            event="start", n_train_sequences=len(samples), n_val_recordings=len(val_recordings),
            n_parameters=model.parameter_count(), seed=config.seed,
        ))
        logger.info(f"Training on {len(samples)} sequences for {config.max_passes} passes")

        best: Optional[Checkpoint] = None
        best_kappa = -math.inf
        initial_loss = final_loss = math.nan
        for pass_index in range(1, config.max_passes + 1):
            model.train()
            order = shuffle_rng.permutation(len(samples))
            loss_sum, window_count, n_batches = 0.0, 0, 0
            for x, labels in self._batches(samples, order):
                n_valid = int(labels.mask.sum())
                if n_valid == 0:
                    continue
                model.zero_grad()
                y_avg = objective.time_average_predictions(model.forward(x), config.model.tau,
                                                           config.model.columns_per_second)
                loss = objective.sequence_loss(y_avg, labels)
                if not np.isfinite(loss.data):
                    self._diverged(model, adam, pass_index, best_kappa)
                (loss * (1.0 / n_valid)).backward()
                adam_step(model.params, model.gradients(), adam)
                loss_sum += float(loss.data)
                window_count += n_valid
                n_batches += 1
            if window_count == 0:
                raise DataError("every training window is masked")
            pass_loss = loss_sum / window_count
            if pass_index == 1:
                initial_loss = pass_loss
            final_loss = pass_loss

            record = PassRecord(event="pass", pass_index=pass_index, train_loss=pass_loss, n_batches=n_batches)
            if pass_index % config.validation_every == 0 or pass_index == config.max_passes:
                report = evaluate(model, val_recordings, EPOCH_SECONDS, "val", config.batch_size)
                record.val_accuracy = report.pooled_accuracy
                record.val_kappa = report.pooled_kappa
                if report.pooled_kappa > best_kappa:
                    best_kappa = report.pooled_kappa
                    best = self._snapshot(model, adam, pass_index, best_kappa)
            self.log.write(record)
            logger.info(f"Pass {pass_index}: loss {pass_loss:.4f}, val kappa {record.val_kappa}")

        if best is None:
            raise NumericError("no validated pass produced a finite kappa")
        best.meta.passes_run = config.max_passes
        self.log.write(PassRecord(event="selected", pass_index=best.meta.selected_pass,
                                  val_kappa=best.meta.validation_kappa))
        model.load_arrays(best.params, best.buffers)
        model.eval()
        return TrainingResult(model=model, checkpoint=best, log=self.log.records,
                              initial_loss=initial_loss, final_loss=final_loss)


def model_from_checkpoint(checkpoint: Checkpoint) -> SleepStager:
    model = SleepStager(checkpoint.meta.model)
    model.load_arrays(checkpoint.params, checkpoint.buffers)
    return model.eval()


def load_model(path) -> SleepStager:
    return model_from_checkpoint(load_checkpoint(path))


def select_entries(manifest: CohortManifest, split: str, cohorts: Optional[List[str]] = None,
                   fraction: Optional[float] = None, seed: int = 0) -> List[ManifestEntry]:
    """Entries of one split, optionally restricted to cohorts and a nested subject fraction"""
    entries = manifest.select(split=split, cohorts=cohorts)
    if fraction is not None and fraction < 1.0:
        subjects = sorted({e.subject_id for e in entries})
        kept = set(nested_subsets(subjects, [fraction], seed)[fraction])
        entries = [e for e in entries if e.subject_id in kept]
    if not entries:
        raise DataError(f"no '{split}' entries for cohorts {cohorts}")
    return entries


def train_from_manifest(config: RunConfig, manifest: CohortManifest, out_dir: str,
                        store: Optional[RecordingStore] = None) -> TrainingResult:
    """Train on the manifest's train split, select on val, write checkpoint and log to out_dir"""
    store = store or RecordingStore(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries = select_entries(manifest, "train", config.cohorts, config.fraction, config.seed)
    val_entries = select_entries(manifest, "val", config.cohorts)
    trainer = Trainer(config, log_path=str(out / "training_log.ndjson"), dump_dir=str(out))
    result = trainer.train(store.load_many(train_entries), store.load_many(val_entries))
    save_checkpoint(out / "model.ssck", result.checkpoint)
    return result


def override_config(config: RunConfig, **overrides) -> RunConfig:
    """Apply CLI overrides (None values ignored) and re-validate"""
    model_updates = {}
    run_updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("alpha", "tau", "hidden_units"):
            model_updates[key] = value
        elif key == "weight_decay":
            run_updates["optimizer"] = config.optimizer.model_copy(update={"weight_decay": value}).model_dump()
        else:
            run_updates[key] = value
    data = config.model_dump()
    data["model"].update(model_updates)
    data.update(run_updates)
    return RunConfig.model_validate(data)
