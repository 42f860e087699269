import json
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class BroadcastLabels(BaseModel):
    """One-hot targets per averaging window, [B, K, N], and the validity mask [B, N]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    targets: np.ndarray
    mask: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        if self.targets.ndim != 3 or self.mask.shape != (self.targets.shape[0], self.targets.shape[2]):
            raise ValueError(f"targets {self.targets.shape} and mask {self.mask.shape} are inconsistent")
        sums = self.targets.sum(axis=1)
        if not np.all(sums[self.mask] == 1):
            raise ValueError("unmasked windows must carry one-hot targets")
        return self


class ConfusionMatrix(BaseModel):
    """K x K counts; rows are the reference stage, columns the predicted stage"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray

    @field_validator("counts")
    @classmethod
    def _check_counts(cls, v):
        v = np.asarray(v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {v.shape}")
        if np.any(v < 0):
            raise ValueError("confusion counts must be non-negative")
        return v.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=self.counts + other.counts)

    def normalized(self) -> np.ndarray:
        """Row-normalized proportions; empty rows stay zero"""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


class SubjectMetrics(BaseModel):
    subject_id: str
    cohort: str
    n_epochs: int
    accuracy: float
    kappa: float
    accuracy_1s: float
    kappa_1s: float


class SubjectMetricSummary(BaseModel):
    """Mean, sample SD, median and 95% CI of the mean over subjects"""
    n: int = Field(..., ge=2)
    mean: float
    sd: float
    median: float
    ci_low: float
    ci_high: float


class MetricsReport(BaseModel):
    split: str
    tau_eval: int
    units: str = "30s"
    per_subject: List[SubjectMetrics]
    accuracy: Optional[SubjectMetricSummary] = None
    kappa: Optional[SubjectMetricSummary] = None
    pooled_accuracy: float
    pooled_kappa: float
    confusion: List[List[int]]
    confusion_normalized: List[List[float]]
    stage_names: List[str] = Field(default_factory=lambda: ["W", "N1", "N2", "N3", "REM"])

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class HypnodensityRow(BaseModel):
    time_s: int
    p_W: float
    p_N1: float
    p_N2: float
    p_N3: float
    p_REM: float


class HypnodensityExport(BaseModel):
    """Per-second stage probabilities of one recording"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    probabilities: np.ndarray
    subject_id: str = ""

    @field_validator("probabilities")
    @classmethod
    def _check_simplex(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 5:
            raise ValueError(f"expected [seconds, 5] probabilities, got {v.shape}")
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1) > 1e-6):
            raise ValueError("every row must lie on the probability simplex")
        return v

    @property
    def n_seconds(self) -> int:
        return self.probabilities.shape[0]

    def rows(self) -> List[HypnodensityRow]:
        return [
            HypnodensityRow(time_s=t, p_W=p[0], p_N1=p[1], p_N2=p[2], p_N3=p[3], p_REM=p[4])
            for t, p in enumerate(self.probabilities)
        ]


class GridResult(BaseModel):
    """Accuracy and kappa of one trained configuration on one test set"""
    family: str
    config: str
    test_set: str
    seed: int
    accuracy: float
    kappa: float
    n_subjects: int
    extra: Dict[str, float] = Field(default_factory=dict)


class SweepRow(BaseModel):
    """One validation summary of the hidden-unit / sequence-length / window-length sweep"""
    section: Literal["hidden_units", "sequence_length", "window_length"]
    value: int
    seed: int
    accuracy: Optional[SubjectMetricSummary] = None
    kappa: Optional[SubjectMetricSummary] = None
    pooled_accuracy: float
    pooled_kappa: float
    n_subjects: int


class SweepResult(BaseModel):
    rows: List[SweepRow]
    # tau_eval -> akurasi per detik dalam sequence
    position_profile: Dict[int, List[float]] = Field(default_factory=dict)
