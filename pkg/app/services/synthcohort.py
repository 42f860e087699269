import logging
import math
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.neighbors import NearestCentroid
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from app.config import settings
from app.models.dsp import EEG_BANDS, EMG_HIGHPASS
from app.models.psg import (
    EPOCH_SECONDS,
    N_STAGES,
    ChannelMontage,
    ChannelRole,
    CohortManifest,
    EdfHeader,
    HypnogramAnnotation,
    MOVEMENT_TOKEN,
    ManifestEntry,
    SignalSpec,
    Stage,
)
from app.models.synth import (
    DEFAULT_TRANSITIONS,
    CohortSpec,
    SiteProfile,
    StageSignature,
    SyntheticCohortSpec,
    SyntheticRecording,
)
from app.services.dsp import design_butterworth, epoch_band_features, zero_phase_filter
from app.services.edf_processor import EdfProcessor
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]

START_TIME = datetime(2000, 1, 1, 22, 0, 0)
ELECTRODES = ["C3", "C4", "E1", "E2", "M1", "M2", "Chin"]
MASTOID_SD = 5.0

_AASM_TOKENS = {Stage.W: "W", Stage.N1: "N1", Stage.N2: "N2", Stage.N3: "N3", Stage.REM: "REM"}
_RK_TOKENS = {Stage.W: "W", Stage.N1: "S1", Stage.N2: "S2", Stage.REM: "R"}


def generate_hypnogram(n_epochs: int, seed: Seed, transitions: Optional[Sequence[Sequence[float]]] = None,
                       initial: Stage = Stage.W) -> HypnogramAnnotation:
    """First-order Markov chain over the five stages, starting at `initial`"""
    if n_epochs < 1:
        raise DataError(f"n_epochs must be >= 1, got {n_epochs}")
    matrix = np.asarray(transitions if transitions is not None else DEFAULT_TRANSITIONS, dtype=np.float64)
    cumulative = np.cumsum(matrix, axis=1)
    draws = np.random.default_rng(np.random.SeedSequence(seed)).random(n_epochs - 1)
    stages = np.empty(n_epochs, dtype=np.int8)
    stages[0] = initial
    for i, u in enumerate(draws, start=1):
        row = cumulative[stages[i - 1]]
        stages[i] = min(int(np.searchsorted(row, u, side="right")), N_STAGES - 1)
    return HypnogramAnnotation(stages=stages)


def _band_noise(rng: np.random.Generator, n: int, fs: int, band) -> np.ndarray:
    component = zero_phase_filter(rng.standard_normal(n), design_butterworth("bandpass", band, fs))
    return component / component.std()


def _eye_movements(rng: np.random.Generator, stages: np.ndarray, signature: StageSignature, fs: int) -> np.ndarray:
    """Hann-shaped deflections, Poisson count per epoch, random sign"""
    epoch_samples = EPOCH_SECONDS * fs
    trace = np.zeros(len(stages) * epoch_samples)
    for epoch, stage in enumerate(stages):
        count = rng.poisson(signature.eog_rate[stage])
        width = max(2, int(signature.eog_duration[stage] * fs))
        pulse = np.hanning(width) * signature.eog_amplitude
        for start in rng.integers(0, epoch_samples, size=count):
            begin = epoch * epoch_samples + int(start)
            end = min(begin + width, len(trace))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            trace[begin:end] += sign * pulse[: end - begin]
    return trace


def _score(rng: np.random.Generator, clean: np.ndarray, site: SiteProfile):
    """Scorer bias, movement tokens and the site's annotation vocabulary"""
    cumulative = np.cumsum(np.asarray(site.scorer_bias), axis=1)
    u = rng.random(len(clean))
    scored = np.minimum((u[:, None] >= cumulative[clean]).sum(axis=1), N_STAGES - 1).astype(np.int8)
    movement = rng.random(len(clean)) < site.movement_rate
    n3_variant = rng.random(len(clean)) < 0.5

    tokens = []
    for i, stage in enumerate(scored):
        stage = Stage(int(stage))
        if movement[i]:
            tokens.append(MOVEMENT_TOKEN)
        elif site.annotation_style == "aasm":
            tokens.append(_AASM_TOKENS[stage])
        elif stage == Stage.N3:
            # R&K: N3 ditulis sebagai S3 atau S4
            tokens.append("S3" if n3_variant[i] else "S4")
        else:
            tokens.append(_RK_TOKENS[stage])
    scored[movement] = Stage.UNKNOWN
    return HypnogramAnnotation(stages=scored), tokens


def _quantize(label: str, physical: np.ndarray, fs: int):
    bound = float(math.ceil(np.max(np.abs(physical)) * 1.05) + 1)
    spec = SignalSpec(label=label, transducer="AgAgCl electrode", physical_dimension="uV",
                      physical_min=-bound, physical_max=bound, samples_per_record=fs)
    return spec, spec.to_digital(physical)


def generate_recording(hypnogram: HypnogramAnnotation, signature: StageSignature, site: SiteProfile,
                       seed: Seed, subject_id: str = "X", cohort: str = "X") -> SyntheticRecording:
    """
    Seven raw electrodes (C3, C4, E1, E2, M1, M2, Chin) in 1 s EDF records.
    Referenced derivations C3-M2, C4-M1, E1-M2, E2-M1 and Chin carry the stage signature.
    """
    clean = hypnogram.stages.astype(np.int64)
    if (clean < 0).any():
        raise DataError("the clean hypnogram must be fully scored")
    signal_ss, label_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(signal_ss)
    fs = site.sample_rate
    epoch_samples = EPOCH_SECONDS * fs
    n = len(clean) * epoch_samples
    per_sample = np.repeat(clean, epoch_samples)
    t = np.arange(n) / fs

    jitter = np.exp(rng.normal(0.0, site.subject_jitter, size=len(EEG_BANDS) + 1))
    eeg = np.zeros(n)
    for j, (name, band) in enumerate(EEG_BANDS.items()):
        envelope = np.asarray(signature.eeg_rms[name])[per_sample] * jitter[j]
        eeg += envelope * _band_noise(rng, n, fs, band)

    emg_noise = zero_phase_filter(rng.standard_normal(n), design_butterworth("highpass", (EMG_HIGHPASS,), fs))
    emg = np.asarray(signature.emg_rms)[per_sample] * jitter[-1] * emg_noise / emg_noise.std()
    eog = _eye_movements(rng, clean, signature, fs)

    line = site.line_noise * np.sin(2 * np.pi * site.line_freq * t)
    scale = site.amplitude_scale

    def derived(clean_signal: np.ndarray, role: ChannelRole) -> np.ndarray:
        return scale[role] * (clean_signal + site.noise_sd * rng.standard_normal(n) + line)

    c3 = derived(eeg, ChannelRole.EEG)
    c4 = derived(eeg, ChannelRole.EEG)
    e1 = derived(eog + signature.eog_eeg_leakage * eeg, ChannelRole.EOG_L)
    e2 = derived(-eog + signature.eog_eeg_leakage * eeg, ChannelRole.EOG_R)
    chin = derived(emg, ChannelRole.EMG)
    m1 = MASTOID_SD * _band_noise(rng, n, fs, (0.5, 10.0))
    m2 = MASTOID_SD * _band_noise(rng, n, fs, (0.5, 10.0))

    # Elektroda mentah: derivasi + mastoid referensinya
    raw = {"C3": c3 + m2, "C4": c4 + m1, "E1": e1 + m2, "E2": e2 + m1, "M1": m1, "M2": m2, "Chin": chin}
    specs, digital = zip(*(_quantize(label, raw[label], fs) for label in ELECTRODES))
    header = EdfHeader(
        patient_id=subject_id,
        recording_id=f"Startdate 01-JAN-2000 {cohort}",
        start_datetime=START_TIME,
        header_bytes=256 * (len(ELECTRODES) + 1),
        n_data_records=len(clean) * EPOCH_SECONDS,
        record_duration=1.0,
        n_signals=len(ELECTRODES),
    )
    edf = EdfProcessor.write_edf(header, list(specs), list(digital))

    scored, tokens = _score(np.random.default_rng(label_ss), clean, site)
    return SyntheticRecording(edf=edf, tokens=tokens, scored=scored,
                              clean=HypnogramAnnotation(stages=clean.astype(np.int8)))


def _generate_subject(spec: SyntheticCohortSpec, cohort: CohortSpec, cohort_index: int, subject_index: int,
                      out_dir: Path, seed: int) -> ManifestEntry:
    subject_id = f"{cohort.name}-{subject_index:03d}"
    base = [seed, cohort_index, subject_index]
    n_epochs = int(np.random.default_rng(np.random.SeedSequence(base + [2])).integers(
        cohort.min_epochs, cohort.max_epochs + 1))
    hypnogram = generate_hypnogram(n_epochs, base + [0], spec.transitions)
    generated = generate_recording(hypnogram, spec.signature, cohort.site, base + [1], subject_id, cohort.name)

    folder = out_dir / cohort.name
    folder.mkdir(parents=True, exist_ok=True)
    recording_path = folder / f"{subject_id}.edf"
    annotation_path = folder / f"{subject_id}.hyp"
    try:
        recording_path.write_bytes(generated.edf)
        EdfProcessor.write_hypnogram(annotation_path, generated.tokens)
        EdfProcessor.write_hypnogram(folder / f"{subject_id}.clean.hyp", generated.clean.tokens())
    except OSError as e:
        raise DataError(f"cannot write synthetic files for {subject_id}: {e}")
    return ManifestEntry(subject_id=subject_id, cohort=cohort.name, recording_path=str(recording_path),
                         annotation_path=str(annotation_path))


def generate_cohorts(spec: SyntheticCohortSpec, out_dir, seed: int, n_jobs: Optional[int] = None) -> CohortManifest:
    """
    Write EDF and hypnogram files for every subject of every cohort and return the manifest
    (also saved as out_dir/manifest.json). Subject (c, s) draws from SeedSequence([seed, c, s, ...]).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        delayed(_generate_subject)(spec, cohort, c, s, out, seed)
        for c, cohort in enumerate(spec.cohorts)
        for s in range(cohort.n_subjects)
    ]
    logger.info(f"Generating {len(jobs)} synthetic recordings in {len(spec.cohorts)} cohorts under {out}")
    entries = Parallel(n_jobs=n_jobs or settings.N_JOBS)(jobs)

    manifest = CohortManifest(entries=entries, montages={c.name: ChannelMontage() for c in spec.cohorts})
    manifest.save(out / "manifest.json")
    logger.info(f"Wrote manifest with {len(manifest.entries)} entries")
    return manifest


def _bias(off_diagonal: dict) -> List[List[float]]:
    matrix = np.eye(N_STAGES)
    for (i, j), p in off_diagonal.items():
        matrix[i, j] += p
        matrix[i, i] -= p
    return matrix.tolist()


def default_cohort_spec(n_subjects: int = 20) -> SyntheticCohortSpec:
    """Five sites with distinct rates, gains, noise, scoring habits and vocabularies"""
    def scale(eeg, eog, emg):
        return {ChannelRole.EEG: eeg, ChannelRole.EOG_L: eog, ChannelRole.EOG_R: eog, ChannelRole.EMG: emg}

    sites = {
        "ISRUC": SiteProfile(sample_rate=200, amplitude_scale=scale(1.0, 1.0, 1.0), line_noise=4.0, line_freq=50,
                             annotation_style="aasm",
                             scorer_bias=_bias({(Stage.N1, Stage.N2): 0.03})),
        "MrOS": SiteProfile(sample_rate=256, amplitude_scale=scale(0.8, 1.2, 0.7), noise_sd=3.0, line_noise=6.0,
                            line_freq=60, annotation_style="rk", movement_rate=0.02,
                            scorer_bias=_bias({(Stage.N1, Stage.W): 0.03, (Stage.N2, Stage.N3): 0.02})),
        "SHHS": SiteProfile(sample_rate=128, amplitude_scale=scale(1.3, 0.9, 1.5), noise_sd=2.5, line_noise=3.0,
                            line_freq=60, annotation_style="rk", movement_rate=0.01,
                            scorer_bias=_bias({(Stage.N3, Stage.N2): 0.03})),
        "SSC": SiteProfile(sample_rate=100, amplitude_scale=scale(0.6, 0.8, 1.1), noise_sd=1.5,
                           annotation_style="rk", movement_rate=0.02,
                           scorer_bias=_bias({(Stage.N1, Stage.N2): 0.04})),
        "WSC": SiteProfile(sample_rate=200, amplitude_scale=scale(1.1, 1.0, 0.9), noise_sd=2.0, line_noise=5.0,
                           line_freq=60, annotation_style="aasm",
                           scorer_bias=_bias({(Stage.REM, Stage.N1): 0.03})),
    }
    return SyntheticCohortSpec(
        cohorts=[CohortSpec(name=name, n_subjects=n_subjects, site=site) for name, site in sites.items()]
    )


def band_power_features(recording: SyntheticRecording) -> np.ndarray:
    """Per-epoch log band powers of the selected central EEG plus log chin EMG power"""
    contents = EdfProcessor.parse_edf(recording.edf)
    psg = EdfProcessor.assemble_recording(contents, ChannelMontage(), "synthetic", "synthetic")
    eeg, emg = psg.channels[0], psg.channels[-1]
    features = epoch_band_features(eeg.samples, emg.samples, eeg.sample_rate)
    return features[: recording.clean.n_epochs]


def stage_separability(recordings: Sequence[SyntheticRecording]) -> float:
    """
    Epoch accuracy of a nearest-centroid classifier on band-power features against the
    clean stages. Fitted on the first half of the recordings, scored on the rest.
    """
    if len(recordings) < 2:
        raise DataError("separability check needs at least 2 recordings")
    half = len(recordings) // 2
    features = [band_power_features(r) for r in recordings]
    stages = [r.clean.stages[: len(f)] for r, f in zip(recordings, features)]

    classifier = make_pipeline(StandardScaler(), NearestCentroid())
    classifier.fit(np.concatenate(features[:half]), np.concatenate(stages[:half]))
    score = float(classifier.score(np.concatenate(features[half:]), np.concatenate(stages[half:])))
    logger.info(f"Nearest-centroid stage accuracy on clean synthetic epochs: {score:.3f}")
    return score
