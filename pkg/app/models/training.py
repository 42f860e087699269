import json
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.network import ALPHA_GRID, HIDDEN_UNIT_GRID, TAU_GRID, ModelConfig

FRACTION_GRID = [0.0025, 0.005, 0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 1.0]

ExperimentFamily = Literal["standard", "sweep", "loci", "loco", "combos", "fractions"]


class OptimizerConfig(BaseModel):
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)


class AdamState(BaseModel):
    """Adam moments per parameter name plus the step count"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = Field(0.0, ge=0)
    t: int = Field(0, ge=0)
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)

    @classmethod
    def from_config(cls, config: OptimizerConfig) -> "AdamState":
        return cls(**config.model_dump())


class RunConfig(BaseModel):
    """One training run: model, optimizer, data selection and evaluation settings"""
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(32, ge=1)
    max_passes: int = Field(50, ge=1)
    seed: int = 0
    # Tepat satu keluarga eksperimen per run
    experiment: ExperimentFamily = "standard"
    cohorts: Optional[List[str]] = None
    fraction: Optional[float] = None
    tau_eval: int = 30
    validation_every: int = Field(1, ge=1)
    balance_classes: bool = False
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("fraction")
    @classmethod
    def _check_fraction(cls, v):
        if v is not None and not 0 < v <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {v}")
        return v

    @field_validator("tau_eval")
    @classmethod
    def _check_tau_eval(cls, v):
        if v not in TAU_GRID:
            raise ValueError(f"tau_eval must be one of {TAU_GRID}, got {v}")
        return v

    @model_validator(mode="after")
    def _check_run(self):
        if self.experiment == "fractions" and self.fraction is not None and self.fraction not in FRACTION_GRID:
            raise ValueError(f"fraction {self.fraction} not in {FRACTION_GRID}")
        if self.balance_classes:
            raise ValueError("class balancing is not supported; batches follow the natural stage distribution")
        return self

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class ExperimentConfig(BaseModel):
    """Grids and options of the experiment runners"""
    family: Literal["sweep", "loci", "loco", "combos", "fractions"]
    run: RunConfig = Field(default_factory=RunConfig)
    seeds: List[int] = Field(default_factory=lambda: [0])
    hidden_units: List[int] = Field(default_factory=lambda: list(HIDDEN_UNIT_GRID))
    alphas: List[int] = Field(default_factory=lambda: list(ALPHA_GRID))
    tau_evals: List[int] = Field(default_factory=lambda: list(TAU_GRID))
    fractions: List[float] = Field(default_factory=lambda: list(FRACTION_GRID))
    fraction_cohort: Optional[str] = None
    combination_sizes: List[int] = Field(default_factory=lambda: [2, 3, 4])
    total_psgs: int = Field(500, ge=1)
    loci_weight_decay: Optional[float] = Field(None, ge=0)
    loco_entire_cohort: bool = False

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, v):
        bad = [f for f in v if f not in FRACTION_GRID]
        if bad:
            raise ValueError(f"fractions {bad} not in {FRACTION_GRID}")
        return sorted(v)

    @field_validator("tau_evals")
    @classmethod
    def _check_taus(cls, v):
        bad = [t for t in v if t not in TAU_GRID]
        if bad:
            raise ValueError(f"tau values {bad} not in {TAU_GRID}")
        return v

    @field_validator("hidden_units")
    @classmethod
    def _check_hidden(cls, v):
        if any(h < 0 for h in v):
            raise ValueError("hidden units must be non-negative")
        return v

    @field_validator("combination_sizes")
    @classmethod
    def _check_sizes(cls, v):
        if any(k < 1 for k in v):
            raise ValueError("combination sizes must be positive")
        return v

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class CheckpointMeta(BaseModel):
    """JSON sidecar of a checkpoint"""
    model: ModelConfig
    selected_pass: int = Field(..., ge=1)
    validation_kappa: float
    passes_run: int = Field(..., ge=1)
    seed: int = 0
    format_version: int = 1


class Checkpoint(BaseModel):
    """Parameters, batch-norm buffers and Adam state of the selected training pass"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    meta: CheckpointMeta
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    optimizer: AdamState


class SequenceSample(BaseModel):
    """alpha consecutive epochs of one recording: x [C, T] and per-epoch stages"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    stages: np.ndarray
    subject_id: str = ""
    start_epoch: int = Field(0, ge=0)


class PassRecord(BaseModel):
    """One line of the training log"""
    event: Literal["start", "pass", "selected", "diverged"]
    pass_index: Optional[int] = None
    train_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    val_kappa: Optional[float] = None
    n_batches: Optional[int] = None
    n_train_sequences: Optional[int] = None
    n_val_recordings: Optional[int] = None
    n_parameters: Optional[int] = None
    seed: Optional[int] = None
