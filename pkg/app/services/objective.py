import logging
import math
from typing import Dict, List, Sequence, Union

import numpy as np

from app.models.metrics import (
    BroadcastLabels,
    ConfusionMatrix,
    MetricsReport,
    SubjectMetrics,
    SubjectMetricSummary,
)
from app.models.psg import EPOCH_SECONDS, N_STAGES
from app.services.autodiff import Tensor, cross_entropy, time_average
from app.utils.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

CI_Z = 1.96


def broadcast_labels(stages: np.ndarray, tau: int, n_classes: int = N_STAGES) -> BroadcastLabels:
    """
    Expand per-epoch stages [B, alpha] to one-hot targets [B, K, alpha * 30 / tau].
    UNKNOWN (-1) epochs become masked windows.
    """
    stages = np.atleast_2d(np.asarray(stages))
    if EPOCH_SECONDS % tau:
        raise ShapeError(f"tau = {tau} s does not divide {EPOCH_SECONDS} s")
    per_epoch = EPOCH_SECONDS // tau
    windows = np.repeat(stages, per_epoch, axis=1)
    mask = windows >= 0
    targets = np.zeros((windows.shape[0], n_classes, windows.shape[1]), dtype=np.float64)
    b, n = np.nonzero(mask)
    targets[b, windows[b, n], n] = 1.0
    return BroadcastLabels(targets=targets, mask=mask)


def time_average_predictions(y: Union[Tensor, np.ndarray], tau: int, columns_per_second: int = 1):
    """
    Average the per-column probabilities over consecutive tau-second windows.
    Tensors stay differentiable; arrays are averaged directly.
    """
    window = tau * columns_per_second
    if isinstance(y, Tensor):
        return time_average(y, window)
    y = np.asarray(y)
    if y.shape[-1] % window:
        raise ShapeError(f"tau = {tau} s does not divide {y.shape[-1]} columns")
    return y.reshape(y.shape[:-1] + (y.shape[-1] // window, window)).mean(axis=-1)


def sequence_loss(y_avg: Tensor, labels: BroadcastLabels) -> Tensor:
    """Summed cross-entropy over unmasked windows, log floored at 1e-12"""
    targets = labels.targets.astype(y_avg.dtype)
    return cross_entropy(y_avg, targets, labels.mask)


def confusion_matrix(reference: np.ndarray, predicted: np.ndarray, n_classes: int = N_STAGES) -> ConfusionMatrix:
    """Counts over positions whose reference is a scored stage"""
    reference = np.asarray(reference).ravel()
    predicted = np.asarray(predicted).ravel()
    if reference.shape != predicted.shape:
        raise ShapeError(f"reference {reference.shape} and predictions {predicted.shape} differ")
    valid = reference >= 0
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (reference[valid], predicted[valid]), 1)
    return ConfusionMatrix(counts=counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """(p_o - p_e) / (1 - p_e); defined as 0 with a warning when p_e == 1"""
    total = cm.total
    if total == 0:
        raise DataError("kappa of an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    p_o = np.trace(counts) / total
    p_e = float(np.sum(counts.sum(axis=1) * counts.sum(axis=0))) / (float(total) ** 2)
    if p_e == 1.0:
        logger.warning("Cohen's kappa undefined (single class in reference and prediction); reporting 0")
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def aggregate_subject_metrics(values: Sequence[float]) -> SubjectMetricSummary:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        raise DataError(f"need at least 2 subjects to aggregate, got {n}")
    mean = float(values.mean())
    sd = float(values.std(ddof=1))
    half_width = CI_Z * sd / math.sqrt(n)
    return SubjectMetricSummary(
        n=n, mean=mean, sd=sd, median=float(np.median(values)),
        ci_low=mean - half_width, ci_high=mean + half_width,
    )


def summary_from_moments(n: int, mean: float, sd: float) -> SubjectMetricSummary:
    """Summary from published moments; the median is unknown and set to the mean"""
    if n < 2:
        raise DataError(f"need at least 2 subjects to aggregate, got {n}")
    half_width = CI_Z * sd / math.sqrt(n)
    return SubjectMetricSummary(n=n, mean=mean, sd=sd, median=mean,
                                ci_low=mean - half_width, ci_high=mean + half_width)


def per_second_probabilities(y: np.ndarray, columns_per_second: int) -> np.ndarray:
    """[..., K, S * cps] -> [..., K, S]"""
    return time_average_predictions(y, 1, columns_per_second)


def window_predictions(y: np.ndarray, tau: int, columns_per_second: int = 1) -> np.ndarray:
    """Argmax stage per tau-second window after averaging (not a majority vote)"""
    return time_average_predictions(y, tau, columns_per_second).argmax(axis=-2)


def sequence_position_accuracy(probabilities: np.ndarray, references: np.ndarray, alpha: int,
                               tau_eval: int, columns_per_second: int = 1) -> np.ndarray:
    """
    Mean correctness at each within-sequence second 1..alpha*30.

    probabilities: [S, K, alpha * 30 * cps] model outputs of S sequences
    references: [S, alpha] per-epoch stages (UNKNOWN excluded per position)
    tau_eval: 1 scores each second; 30 scores the epoch average broadcast to its seconds
    """
    probabilities = np.asarray(probabilities)
    references = np.asarray(references)
    if probabilities.ndim != 3 or probabilities.shape[0] == 0:
        raise DataError("no complete sequences to profile")
    seconds = alpha * EPOCH_SECONDS
    if references.shape != (probabilities.shape[0], alpha) or probabilities.shape[-1] != seconds * columns_per_second:
        raise ShapeError(
            f"probabilities {probabilities.shape} and references {references.shape} do not match alpha = {alpha}"
        )
    predicted = window_predictions(probabilities, tau_eval, columns_per_second)
    predicted = np.repeat(predicted, tau_eval, axis=-1)
    truth = np.repeat(references, EPOCH_SECONDS, axis=-1)
    valid = truth >= 0
    correct = (predicted == truth) & valid
    counts = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)


def subject_metrics(probabilities: np.ndarray, stages: np.ndarray, subject_id: str, cohort: str,
                    tau_eval: int = EPOCH_SECONDS, columns_per_second: int = 1):
    """
    Metrics of one recording from its full-length output [K, n_epochs * 30 * cps].

    Returns (SubjectMetrics, confusion at tau_eval). The 30 s figures use the tau_eval
    window convention; the 1 s figures compare every second with its epoch's stage.
    """
    stages = np.asarray(stages)
    windows_per_epoch = EPOCH_SECONDS // tau_eval
    predicted = window_predictions(probabilities, tau_eval, columns_per_second)
    reference = np.repeat(stages, windows_per_epoch)
    cm = confusion_matrix(reference, predicted)

    predicted_1s = window_predictions(probabilities, 1, columns_per_second)
    cm_1s = confusion_matrix(np.repeat(stages, EPOCH_SECONDS), predicted_1s)
    if cm.total == 0:
        raise DataError(f"{subject_id}: no scored epochs")
    metrics = SubjectMetrics(
        subject_id=subject_id,
        cohort=cohort,
        n_epochs=int(stages.size),
        accuracy=accuracy(cm),
        kappa=cohen_kappa(cm),
        accuracy_1s=accuracy(cm_1s),
        kappa_1s=cohen_kappa(cm_1s),
    )
    return metrics, cm


def build_report(split: str, tau_eval: int, per_subject: List[SubjectMetrics],
                 confusions: List[ConfusionMatrix], units: str = "30s") -> MetricsReport:
    """Aggregate per-subject metrics (sorted by subject id) and the pooled confusion matrix"""
    if not per_subject:
        raise DataError(f"no subjects to report for split '{split}'")
    order = sorted(range(len(per_subject)), key=lambda i: (per_subject[i].cohort, per_subject[i].subject_id))
    per_subject = [per_subject[i] for i in order]
    pooled = confusions[0]
    for cm in confusions[1:]:
        pooled = pooled + cm

    key_acc, key_kappa = ("accuracy", "kappa") if units == "30s" else ("accuracy_1s", "kappa_1s")
    acc_values = [getattr(m, key_acc) for m in per_subject]
    kappa_values = [getattr(m, key_kappa) for m in per_subject]
    summaries: Dict[str, SubjectMetricSummary] = {}
    if len(per_subject) >= 2:
        summaries = {
            "accuracy": aggregate_subject_metrics(acc_values),
            "kappa": aggregate_subject_metrics(kappa_values),
        }
    return MetricsReport(
        split=split,
        tau_eval=tau_eval,
        units=units,
        per_subject=per_subject,
        accuracy=summaries.get("accuracy"),
        kappa=summaries.get("kappa"),
        pooled_accuracy=accuracy(pooled),
        pooled_kappa=cohen_kappa(pooled),
        confusion=pooled.counts.tolist(),
        confusion_normalized=pooled.normalized().round(6).tolist(),
    )
