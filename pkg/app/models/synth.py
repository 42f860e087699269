import json
from pathlib import Path
from typing import Dict, List, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.dsp import EEG_BANDS
from app.models.psg import CHANNEL_ORDER, N_STAGES, ChannelRole, HypnogramAnnotation, Stage

SAMPLE_RATES = (100, 128, 200, 256, 512)

# Matriks transisi default (baris = stage sekarang, urutan W, N1, N2, N3, REM)
DEFAULT_TRANSITIONS: List[List[float]] = [
    [0.90, 0.08, 0.01, 0.00, 0.01],
    [0.05, 0.70, 0.22, 0.00, 0.03],
    [0.02, 0.03, 0.85, 0.06, 0.04],
    [0.01, 0.01, 0.10, 0.88, 0.00],
    [0.04, 0.03, 0.05, 0.00, 0.88],
]

# Tabel signature per stage, urutan kolom W, N1, N2, N3, REM.
#   eeg_rms        RMS (uV) komponen band-limited EEG per pita
#   emg_rms        RMS (uV) tonus otot dagu
#   eog_rate       jumlah rata-rata gerakan mata per epoch 30 s
#   eog_duration   durasi satu gerakan mata (s)
DEFAULT_SIGNATURE_TABLE = {
    "eeg_rms": {
        "delta": [10.0, 15.0, 25.0, 75.0, 12.0],
        "theta": [8.0, 25.0, 15.0, 12.0, 20.0],
        "alpha": [30.0, 8.0, 6.0, 4.0, 10.0],
        "spindle": [3.0, 3.0, 15.0, 4.0, 2.0],
    },
    "emg_rms": [30.0, 15.0, 10.0, 8.0, 3.0],
    "eog_rate": [6.0, 2.0, 0.5, 0.0, 8.0],
    "eog_duration": [0.3, 1.5, 1.0, 1.0, 0.4],
}


def _check_stochastic(matrix: List[List[float]], name: str) -> List[List[float]]:
    array = np.asarray(matrix, dtype=np.float64)
    if array.shape != (N_STAGES, N_STAGES):
        raise ValueError(f"{name} must be {N_STAGES} x {N_STAGES}, got {array.shape}")
    if (array < 0).any() or not np.allclose(array.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError(f"{name} rows must be probability distributions")
    return matrix


class StageSignature(BaseModel):
    """Stage-conditional spectral and tonic levels of the synthetic signals"""
    eeg_rms: Dict[str, List[float]] = Field(default_factory=lambda: dict(DEFAULT_SIGNATURE_TABLE["eeg_rms"]))
    emg_rms: List[float] = Field(default_factory=lambda: list(DEFAULT_SIGNATURE_TABLE["emg_rms"]))
    eog_rate: List[float] = Field(default_factory=lambda: list(DEFAULT_SIGNATURE_TABLE["eog_rate"]))
    eog_duration: List[float] = Field(default_factory=lambda: list(DEFAULT_SIGNATURE_TABLE["eog_duration"]))
    eog_amplitude: float = Field(100.0, gt=0)
    # Bocoran EEG frontal ke kanal EOG
    eog_eeg_leakage: float = Field(0.25, ge=0)

    @model_validator(mode="after")
    def _check_table(self):
        if set(self.eeg_rms) != set(EEG_BANDS):
            raise ValueError(f"eeg_rms must cover the bands {sorted(EEG_BANDS)}")
        columns = list(self.eeg_rms.values()) + [self.emg_rms, self.eog_rate, self.eog_duration]
        for column in columns:
            if len(column) != N_STAGES or min(column) < 0:
                raise ValueError(f"every signature column needs {N_STAGES} non-negative values")
        if min(self.eog_duration) <= 0:
            raise ValueError("eog_duration must be positive")

        n3 = {band: values[Stage.N3] for band, values in self.eeg_rms.items()}
        if any(n3["delta"] <= v for band, v in n3.items() if band != "delta"):
            raise ValueError("N3 delta power must exceed every other band's power in N3")
        alpha = self.eeg_rms["alpha"]
        if any(alpha[Stage.W] <= alpha[s] for s in range(1, N_STAGES)):
            raise ValueError("W must have the strongest alpha")
        if any(self.emg_rms[Stage.W] <= self.emg_rms[s] for s in range(1, N_STAGES)):
            raise ValueError("W must have the strongest EMG tone")
        if any(self.emg_rms[Stage.REM] >= self.emg_rms[s] for s in range(N_STAGES) if s != Stage.REM):
            raise ValueError("REM must have the weakest EMG tone")
        return self


class SiteProfile(BaseModel):
    """Acquisition and scoring characteristics of one synthetic site"""
    sample_rate: int = 128
    amplitude_scale: Dict[ChannelRole, float] = Field(default_factory=lambda: {r: 1.0 for r in CHANNEL_ORDER})
    noise_sd: float = Field(2.0, ge=0)
    line_noise: float = Field(0.0, ge=0)
    line_freq: Literal[50, 60] = 50
    # Variasi amplitudo per subjek (log-normal)
    subject_jitter: float = Field(0.1, ge=0)
    scorer_bias: List[List[float]] = Field(default_factory=lambda: np.eye(N_STAGES).tolist())
    annotation_style: Literal["aasm", "rk"] = "aasm"
    movement_rate: float = Field(0.0, ge=0, lt=1)

    @field_validator("sample_rate")
    @classmethod
    def _check_rate(cls, v):
        if v not in SAMPLE_RATES:
            raise ValueError(f"sample_rate must be one of {SAMPLE_RATES}, got {v}")
        return v

    @field_validator("amplitude_scale")
    @classmethod
    def _check_scale(cls, v):
        missing = [r.value for r in CHANNEL_ORDER if r not in v]
        if missing:
            raise ValueError(f"amplitude_scale lacks channels {missing}")
        if any(s <= 0 for s in v.values()):
            raise ValueError("amplitude scales must be positive")
        return v

    @field_validator("scorer_bias")
    @classmethod
    def _check_bias(cls, v):
        return _check_stochastic(v, "scorer_bias")

    @model_validator(mode="after")
    def _check_line(self):
        if self.line_noise > 0 and self.line_freq >= self.sample_rate / 2:
            raise ValueError(f"line noise at {self.line_freq} Hz not representable at {self.sample_rate} Hz")
        return self


class CohortSpec(BaseModel):
    name: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_]+$")
    n_subjects: int = Field(..., ge=1)
    site: SiteProfile = Field(default_factory=SiteProfile)
    min_epochs: int = Field(80, ge=1)
    max_epochs: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_epochs(self):
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must not exceed max_epochs")
        return self


class SyntheticCohortSpec(BaseModel):
    """JSON cohort spec: the cohort battery plus the shared stage signature"""
    cohorts: List[CohortSpec] = Field(..., min_length=1)
    signature: StageSignature = Field(default_factory=StageSignature)
    transitions: List[List[float]] = Field(default_factory=lambda: [list(r) for r in DEFAULT_TRANSITIONS])

    @field_validator("cohorts")
    @classmethod
    def _check_names(cls, v):
        names = [c.name for c in v]
        if len(set(names)) != len(names):
            raise ValueError(f"cohort names must be unique, got {names}")
        return v

    @field_validator("transitions")
    @classmethod
    def _check_transitions(cls, v):
        return _check_stochastic(v, "transitions")

    @classmethod
    def load(cls, path) -> "SyntheticCohortSpec":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class SyntheticRecording(BaseModel):
    """Generated EDF plus the written (scored) and clean hypnograms"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    edf: bytes
    tokens: List[str]
    scored: HypnogramAnnotation
    clean: HypnogramAnnotation
