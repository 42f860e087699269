import numpy as np
import pytest

from app.models.network import ModelConfig
from app.models.psg import EPOCH_SECONDS, ChannelRole, HypnogramAnnotation, LabeledRecording, PreprocessedRecording
from app.models.synth import CohortSpec, SiteProfile, SyntheticCohortSpec
from app.models.training import OptimizerConfig, RunConfig
from app.services.cohort_manager import split_cohort
from app.services.synthcohort import generate_cohorts


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def labeled_recording(stages, fs: int = 32, seed: int = 0, subject_id: str = "S1", cohort: str = "A",
                      noise: float = 0.1) -> LabeledRecording:
    """Separable toy recording: channel c carries a level of 1 during stage c, stage 4 is silent"""
    stages = np.asarray(stages, dtype=np.int8)
    rng = np.random.default_rng(seed)
    epoch_samples = EPOCH_SECONDS * fs
    n = len(stages) * epoch_samples
    per_sample = np.repeat(stages, epoch_samples)
    data = noise * rng.standard_normal((4, n))
    for c in range(4):
        data[c] += (per_sample == c).astype(np.float64)
    recording = PreprocessedRecording(data=data, fs=fs, means=np.zeros(4), stds=np.ones(4),
                                      subject_id=subject_id, cohort=cohort)
    return LabeledRecording(recording=recording, hypnogram=HypnogramAnnotation(stages=stages))


def random_stages(n_epochs: int, seed: int) -> np.ndarray:
    """Stage runs of 2-4 epochs so that every sequence holds more than one stage"""
    rng = np.random.default_rng(seed)
    stages = []
    while len(stages) < n_epochs:
        stages.extend([int(rng.integers(0, 5))] * int(rng.integers(2, 5)))
    return np.asarray(stages[:n_epochs], dtype=np.int8)


@pytest.fixture
def tiny_model_config():
    # fs = 32 dengan R = 5: satu kolom per detik
    return ModelConfig(fs=32, n_blocks=5, base_filters=1, hidden_units=4, alpha=2, tau=30)


@pytest.fixture
def tiny_run_config(tiny_model_config):
    return RunConfig(model=tiny_model_config, optimizer=OptimizerConfig(lr=1e-3), batch_size=4,
                     max_passes=3, seed=7)


@pytest.fixture
def pipeline_model_config():
    """Smallest configuration that runs on preprocessed (128 Hz) recordings"""
    return ModelConfig(fs=128, n_blocks=7, base_filters=1, hidden_units=4, alpha=2, tau=30)


@pytest.fixture
def toy_recordings():
    train = [labeled_recording(random_stages(12, s), seed=s, subject_id=f"T{s}") for s in range(4)]
    val = [labeled_recording(random_stages(8, 10 + s), seed=10 + s, subject_id=f"V{s}") for s in range(2)]
    return train, val


def small_cohort_spec(names=("ALPHA", "BETA", "GAMMA"), n_subjects: int = 4) -> SyntheticCohortSpec:
    rates = [128, 200, 100, 256, 128]
    styles = ["aasm", "rk", "rk", "aasm", "rk"]
    cohorts = [
        CohortSpec(
            name=name,
            n_subjects=n_subjects,
            site=SiteProfile(sample_rate=rates[i], annotation_style=styles[i],
                             amplitude_scale={r: 1.0 + 0.2 * i for r in ChannelRole}),
            min_epochs=6,
            max_epochs=8,
        )
        for i, name in enumerate(names)
    ]
    return SyntheticCohortSpec(cohorts=cohorts)


@pytest.fixture(scope="session")
def synthetic_cohort(tmp_path_factory):
    """Three small synthetic cohorts on disk, split into train/val/test"""
    out = tmp_path_factory.mktemp("cohorts")
    manifest = generate_cohorts(small_cohort_spec(), out, seed=3, n_jobs=1)
    return split_cohort(manifest, seed=5)
