import logging
from functools import lru_cache
from math import gcd
from typing import Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.integrate import trapezoid

from app.models.dsp import EEG_BAND, EEG_BANDS, EMG_HIGHPASS, TARGET_FS, FilterSpec
from app.models.psg import EPOCH_SECONDS, ChannelRole, PreprocessedRecording, PsgRecording
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8


def design_butterworth(kind: str, corners: Sequence[float], fs: float, order: int = 4) -> FilterSpec:
    """
    Digital Butterworth filter (bilinear transform with pre-warped corners),
    returned as second-order sections. Single-pass gain is -3 dB at each corner.
    """
    corners = tuple(float(c) for c in corners)
    nyquist = fs / 2
    for corner in corners:
        if not 0 < corner < nyquist:
            raise DataError(f"corner {corner} Hz must lie strictly inside (0, {nyquist}) Hz for fs={fs}")
    wn = corners if kind == "bandpass" else corners[0]
    sos = signal.butter(order, wn, btype=kind, output="sos", fs=fs)
    return FilterSpec(kind=kind, corners=corners, fs=fs, order=order, sos=sos)


def frequency_response(spec: FilterSpec, freqs: Sequence[float]) -> np.ndarray:
    """Complex single-pass response H(e^{jw}) at the given frequencies in Hz"""
    _, h = signal.sosfreqz(spec.sos, worN=np.asarray(freqs, dtype=np.float64), fs=spec.fs)
    return h


def zero_phase_filter(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward-backward filtering with odd-reflection padding of 3*(order+1) samples"""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= spec.padlen:
        raise DataError(f"signal of {len(x)} samples is too short for padding of {spec.padlen}")
    return signal.sosfiltfilt(spec.sos, x, padtype="odd", padlen=spec.padlen)


def resample_polyphase(x: np.ndarray, fs_in: int, fs_out: int = TARGET_FS) -> np.ndarray:
    """
    Rational resampling by L/M with a Kaiser-windowed sinc (beta 5.0, 10*max(L, M)+1 taps,
    cutoff 0.9 * min(fs_in, fs_out)/2). Output length is ceil(len(x) * L / M).
    """
    if fs_in <= 0 or fs_out <= 0 or int(fs_in) != fs_in or int(fs_out) != fs_out:
        raise DataError(f"sample rates must be positive integers, got {fs_in} -> {fs_out}")
    fs_in, fs_out = int(fs_in), int(fs_out)
    x = np.asarray(x, dtype=np.float64)
    divisor = gcd(fs_in, fs_out)
    up, down = fs_out // divisor, fs_in // divisor
    if up == down:
        return x.copy()
    taps = _antialias_taps(up, down)
    return signal.resample_poly(x, up, down, window=taps)


@lru_cache(maxsize=32)
def _antialias_taps(up: int, down: int) -> np.ndarray:
    rate = max(up, down)
    # resample_poly mengalikan koefisien dengan `up` sendiri
    return signal.firwin(10 * rate + 1, 0.9 / rate, window=("kaiser", 5.0))


def zscore_normalize(x: np.ndarray, eps: float = NORMALIZE_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / max(x.std(), eps)


@lru_cache(maxsize=8)
def _channel_filter(role: ChannelRole, fs: int) -> FilterSpec:
    if role == ChannelRole.EMG:
        return design_butterworth("highpass", (EMG_HIGHPASS,), fs)
    return design_butterworth("bandpass", EEG_BAND, fs)


def preprocess(rec: PsgRecording, fs_out: int = TARGET_FS) -> PreprocessedRecording:
    """
    Resample every channel to fs_out, filter (EEG/EOG bandpass 0.5-35 Hz, EMG highpass 10 Hz),
    drop samples after the last whole 30 s epoch and z-normalize per channel.
    """
    filtered = []
    for channel in rec.channels:
        resampled = resample_polyphase(channel.samples, channel.sample_rate, fs_out)
        filtered.append(zero_phase_filter(resampled, _channel_filter(channel.role, fs_out)))

    epoch_samples = EPOCH_SECONDS * fs_out
    n_epochs = min(len(f) for f in filtered) // epoch_samples
    if n_epochs == 0:
        raise DataError(f"{rec.subject_id}: recording shorter than one {EPOCH_SECONDS} s epoch")
    n_samples = n_epochs * epoch_samples

    data = np.empty((len(filtered), n_samples), dtype=np.float64)
    means = np.empty(len(filtered))
    stds = np.empty(len(filtered))
    for i, f in enumerate(filtered):
        cropped = f[:n_samples]
        means[i] = cropped.mean()
        stds[i] = cropped.std()
        data[i] = zscore_normalize(cropped)

    logger.debug(f"Preprocessed {rec.subject_id}: {n_epochs} epochs at {fs_out} Hz")
    return PreprocessedRecording(
        data=data, fs=fs_out, means=means, stds=stds, subject_id=rec.subject_id, cohort=rec.cohort
    )


def band_power(x: np.ndarray, fs: float, band: Tuple[float, float]) -> float:
    """Welch PSD integrated over [low, high] Hz"""
    x = np.asarray(x, dtype=np.float64)
    freqs, psd = signal.welch(x, fs=fs, nperseg=min(len(x), int(2 * fs)))
    low, high = band
    selected = (freqs >= low) & (freqs <= high)
    if selected.sum() < 2:
        raise DataError(f"band {band} Hz has fewer than two PSD bins at fs={fs}")
    return float(trapezoid(psd[selected], freqs[selected]))


def epoch_band_features(eeg: np.ndarray, emg: np.ndarray, fs: float) -> np.ndarray:
    """
    Per-epoch log band powers of the EEG bands plus log EMG power, shape [n_epochs, 5]
    """
    epoch_samples = int(EPOCH_SECONDS * fs)
    n_epochs = min(len(eeg), len(emg)) // epoch_samples
    features = np.empty((n_epochs, len(EEG_BANDS) + 1))
    for n in range(n_epochs):
        window = slice(n * epoch_samples, (n + 1) * epoch_samples)
        for j, band in enumerate(EEG_BANDS.values()):
            features[n, j] = np.log(band_power(eeg[window], fs, band) + 1e-12)
        features[n, -1] = np.log(np.mean(np.square(emg[window])) + 1e-12)
    return features
