import json
from datetime import datetime
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.utils.errors import DataError

EPOCH_SECONDS = 30


class Stage(IntEnum):
    """Sleep stages in scoring order; UNKNOWN marks unscored epochs."""

    UNKNOWN = -1
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


SCORED_STAGES = [Stage.W, Stage.N1, Stage.N2, Stage.N3, Stage.REM]
N_STAGES = len(SCORED_STAGES)

# R&K: S3 dan S4 digabung menjadi N3
RK_STAGE_MAP: Dict[str, str] = {
    "W": "W",
    "S1": "N1",
    "S2": "N2",
    "S3": "N3",
    "S4": "N3",
    "R": "REM",
    "REM": "REM",
}

AASM_STAGE_MAP: Dict[str, str] = {
    "W": "W",
    "N1": "N1",
    "N2": "N2",
    "N3": "N3",
    "R": "REM",
    "REM": "REM",
}

# Epoch gerakan tetap di sinyal tapi tidak dinilai
MOVEMENT_TOKEN = "MOVEMENT"

DEFAULT_STAGE_MAP: Dict[str, str] = {**RK_STAGE_MAP, **AASM_STAGE_MAP, MOVEMENT_TOKEN: "UNKNOWN"}


class ChannelRole(str, Enum):
    EEG = "EEG"
    EOG_L = "EOG-L"
    EOG_R = "EOG-R"
    EMG = "EMG"


CHANNEL_ORDER = [ChannelRole.EEG, ChannelRole.EOG_L, ChannelRole.EOG_R, ChannelRole.EMG]


class EdfHeader(BaseModel):
    """Fixed 256-byte EDF header"""
    version_tag: str = Field("0", max_length=8)
    patient_id: str = Field("X", max_length=80)
    recording_id: str = Field("X", max_length=80)
    start_datetime: datetime
    header_bytes: int
    n_data_records: int = Field(..., ge=0)
    record_duration: float = Field(..., gt=0)
    n_signals: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_header_bytes(self):
        expected = 256 * (self.n_signals + 1)
        if self.header_bytes != expected:
            raise ValueError(
                f"header_bytes {self.header_bytes} inconsistent with {self.n_signals} signals "
                f"(expected {expected})"
            )
        return self


class SignalSpec(BaseModel):
    """Per-signal EDF header block"""
    label: str = Field(..., max_length=16)
    transducer: str = Field("", max_length=80)
    physical_dimension: str = Field("uV", max_length=8)
    physical_min: float
    physical_max: float
    digital_min: int = -32768
    digital_max: int = 32767
    prefiltering: str = Field("", max_length=80)
    samples_per_record: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_calibration(self):
        if self.digital_min >= self.digital_max:
            raise ValueError(f"degenerate calibration for '{self.label}': digital_min >= digital_max")
        if self.physical_min == self.physical_max:
            raise ValueError(f"degenerate calibration for '{self.label}': physical_min == physical_max")
        return self

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        """Linear map through (digital_min, physical_min) and (digital_max, physical_max)"""
        return self.physical_min + (np.asarray(digital, dtype=np.float64) - self.digital_min) * self.gain

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        digital = np.round((np.asarray(physical, dtype=np.float64) - self.physical_min) / self.gain) + self.digital_min
        return np.clip(digital, self.digital_min, self.digital_max).astype(np.int16)


class Channel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    role: ChannelRole
    label: str = ""
    sample_rate: float = Field(..., gt=0)
    samples: np.ndarray

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class PsgRecording(BaseModel):
    """Four referenced input channels of one PSG, in physical units"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    channels: List[Channel]
    subject_id: str
    cohort: str
    record_duration: float = 1.0

    @model_validator(mode="after")
    def _check_montage(self):
        roles = [c.role for c in self.channels]
        if roles != CHANNEL_ORDER:
            raise ValueError(f"expected channels {[r.value for r in CHANNEL_ORDER]}, got {[r.value for r in roles]}")
        durations = [c.duration for c in self.channels]
        if max(durations) - min(durations) > self.record_duration:
            raise ValueError(f"channel durations differ by more than one record: {durations}")
        return self

    @property
    def duration(self) -> float:
        return min(c.duration for c in self.channels)

    @property
    def n_epochs(self) -> int:
        return int(self.duration // EPOCH_SECONDS)


class HypnogramAnnotation(BaseModel):
    """One stage per 30 s epoch; UNKNOWN (-1) entries are masked downstream"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stages: np.ndarray
    epoch_duration: float = EPOCH_SECONDS

    @field_validator("stages")
    @classmethod
    def _check_stages(cls, v):
        v = np.asarray(v, dtype=np.int8)
        if v.ndim != 1:
            raise ValueError("stages must be one-dimensional")
        if v.size and (v.min() < Stage.UNKNOWN or v.max() > Stage.REM):
            raise ValueError("stage codes must lie in [-1, 4]")
        return v

    @property
    def n_epochs(self) -> int:
        return int(self.stages.size)

    @property
    def mask(self) -> np.ndarray:
        return self.stages >= 0

    def tokens(self) -> List[str]:
        return [Stage(int(s)).name for s in self.stages]

    def truncated(self, n_epochs: int) -> "HypnogramAnnotation":
        return HypnogramAnnotation(stages=self.stages[:n_epochs].copy(), epoch_duration=self.epoch_duration)


class Derivation(BaseModel):
    """EDF label of an electrode plus the label of its reference, if any"""
    label: str
    reference: Optional[str] = None


class ChannelMontage(BaseModel):
    eeg: List[Derivation] = Field(
        default_factory=lambda: [Derivation(label="C3", reference="M2"), Derivation(label="C4", reference="M1")]
    )
    eog_left: Derivation = Field(default_factory=lambda: Derivation(label="E1", reference="M2"))
    eog_right: Derivation = Field(default_factory=lambda: Derivation(label="E2", reference="M1"))
    emg: Derivation = Field(default_factory=lambda: Derivation(label="Chin"))
    # Channel sudah direferensikan (mis. "C3-A2"): label dipakai apa adanya
    pre_referenced: bool = False

    @field_validator("eeg")
    @classmethod
    def _check_eeg(cls, v):
        if not v:
            raise ValueError("at least one central EEG candidate is required")
        return v


Split = Literal["train", "val", "test"]


class ManifestEntry(BaseModel):
    subject_id: str
    cohort: str
    recording_path: str
    annotation_path: str
    recording_id: Optional[str] = None

    @property
    def key(self) -> str:
        return self.recording_id or Path(self.recording_path).stem


class CohortManifest(BaseModel):
    """Recordings of one or more cohorts plus the subject-level split"""
    entries: List[ManifestEntry]
    stage_map: Dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_STAGE_MAP))
    montages: Dict[str, ChannelMontage] = Field(default_factory=dict)
    assignments: Dict[str, Split] = Field(default_factory=dict)

    @field_validator("stage_map")
    @classmethod
    def _check_stage_map(cls, v):
        valid = {s.name for s in Stage}
        bad = sorted(set(v.values()) - valid)
        if bad:
            raise ValueError(f"stage_map targets must be stage names, got {bad}")
        return v

    @model_validator(mode="after")
    def _check_subjects(self):
        owner: Dict[str, str] = {}
        for entry in self.entries:
            if owner.setdefault(entry.subject_id, entry.cohort) != entry.cohort:
                raise ValueError(f"subject {entry.subject_id} listed under two cohorts")
        unknown = sorted(set(self.assignments) - set(owner))
        if unknown:
            raise ValueError(f"assignments reference unknown subjects: {unknown[:5]}")
        # Urutan entries deterministik: path-sorted
        self.entries = sorted(self.entries, key=lambda e: (e.recording_path, e.annotation_path))
        return self

    def cohorts(self) -> List[str]:
        return sorted({e.cohort for e in self.entries})

    def subjects(self, cohort: Optional[str] = None) -> List[str]:
        return sorted({e.subject_id for e in self.entries if cohort is None or e.cohort == cohort})

    def montage_for(self, cohort: str) -> ChannelMontage:
        return self.montages.get(cohort, ChannelMontage())

    def select(
        self,
        split: Optional[str] = None,
        cohorts: Optional[List[str]] = None,
        subjects: Optional[List[str]] = None,
    ) -> List[ManifestEntry]:
        """Entries filtered by split, cohort and subject (all optional)"""
        if split is not None and not self.assignments:
            raise DataError("manifest has no split assignments; run ingest first")
        chosen = []
        subject_set = set(subjects) if subjects is not None else None
        for entry in self.entries:
            if split is not None and self.assignments.get(entry.subject_id) != split:
                continue
            if cohorts is not None and entry.cohort not in cohorts:
                continue
            if subject_set is not None and entry.subject_id not in subject_set:
                continue
            chosen.append(entry)
        return chosen

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CohortManifest":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class PreprocessedRecording(BaseModel):
    """4 x N matrix at fs = 128 Hz, filtered and z-normalized per channel"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    fs: int = 128
    means: np.ndarray
    stds: np.ndarray
    subject_id: str = ""
    cohort: str = ""

    @model_validator(mode="after")
    def _check_shape(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(CHANNEL_ORDER):
            raise ValueError(f"expected a {len(CHANNEL_ORDER)} x N matrix, got {self.data.shape}")
        if self.data.shape[1] % self.fs:
            raise ValueError("N must be a whole number of seconds")
        return self

    @property
    def n_epochs(self) -> int:
        return self.data.shape[1] // (EPOCH_SECONDS * self.fs)


class EdfContents(BaseModel):
    """Parsed EDF: header, per-signal specs and the raw 16-bit samples"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    header: EdfHeader
    signals: List[SignalSpec]
    digital: List[np.ndarray]

    @property
    def physical(self) -> List[np.ndarray]:
        return [spec.to_physical(d) for spec, d in zip(self.signals, self.digital)]

    def sample_rate(self, index: int) -> float:
        return self.signals[index].samples_per_record / self.header.record_duration

    def index_of(self, label: str) -> Optional[int]:
        for i, spec in enumerate(self.signals):
            if spec.label.strip() == label:
                return i
        return None


class LabeledRecording(BaseModel):
    """Preprocessed signals plus the hypnogram aligned to their epoch count"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    recording: PreprocessedRecording
    hypnogram: HypnogramAnnotation

    @model_validator(mode="after")
    def _check_alignment(self):
        if self.hypnogram.n_epochs != self.recording.n_epochs:
            raise ValueError(
                f"hypnogram has {self.hypnogram.n_epochs} epochs, recording has {self.recording.n_epochs}"
            )
        return self

    @property
    def subject_id(self) -> str:
        return self.recording.subject_id

    @property
    def cohort(self) -> str:
        return self.recording.cohort
