import logging
from collections import Counter
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.models.psg import (
    DEFAULT_STAGE_MAP,
    EPOCH_SECONDS,
    Channel,
    ChannelMontage,
    ChannelRole,
    Derivation,
    EdfContents,
    EdfHeader,
    HypnogramAnnotation,
    PsgRecording,
    SignalSpec,
    Stage,
)
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

# (nama field, lebar byte) untuk header utama dan header per sinyal
_MAIN_FIELDS = [
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_data_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
]
_SIGNAL_FIELDS = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
]


def _format_number(value: float, width: int = 8) -> str:
    """Shortest decimal text for value that fits the EDF field width"""
    if float(value).is_integer() and len(str(int(value))) <= width:
        return str(int(value))
    for precision in range(width, 0, -1):
        text = f"{value:.{precision}g}"
        if len(text) <= width:
            return text
    raise DataError(f"value {value} does not fit in an {width}-character EDF field")


def _ascii_field(text: str, width: int) -> bytes:
    raw = text.encode("latin-1", errors="replace")
    if len(raw) > width:
        raise DataError(f"EDF field '{text}' longer than {width} bytes")
    return raw.ljust(width, b" ")


class EdfProcessor:
    """
    Reads and writes EDF containers and turns them into four-channel PSG recordings
    """

    @staticmethod
    def _parse_datetime(date_text: str, time_text: str) -> datetime:
        try:
            day, month, year = (int(p) for p in date_text.strip().split("."))
            hour, minute, second = (int(p) for p in time_text.strip().split("."))
        except ValueError:
            raise DataError(f"invalid EDF start date/time '{date_text}' '{time_text}'")
        # Konvensi EDF: yy 85-99 -> 19yy, 00-84 -> 20yy
        year += 1900 if year >= 85 else 2000
        return datetime(year, month, day, hour, minute, second)

    @staticmethod
    def parse_edf(data: bytes) -> EdfContents:
        """
        Parse an EDF byte stream.

        Args:
            data: complete file content

        Returns:
            EdfContents with header, signal specs and 16-bit digital samples
        """
        if len(data) < 256:
            raise DataError(f"truncated EDF stream: {len(data)} bytes, header needs 256")

        fields: Dict[str, str] = {}
        offset = 0
        for name, width in _MAIN_FIELDS:
            fields[name] = data[offset:offset + width].decode("latin-1")
            offset += width

        try:
            n_signals = int(fields["n_signals"])
            header_bytes = int(fields["header_bytes"])
            n_records = int(fields["n_data_records"])
            record_duration = float(fields["record_duration"])
        except ValueError as e:
            raise DataError(f"malformed numeric field in EDF header: {e}")

        if n_records == -1:
            raise DataError("EDF header declares an unknown number of data records (-1)")

        try:
            header = EdfHeader(
                version_tag=fields["version"].strip(),
                patient_id=fields["patient_id"].strip(),
                recording_id=fields["recording_id"].strip(),
                start_datetime=EdfProcessor._parse_datetime(fields["start_date"], fields["start_time"]),
                header_bytes=header_bytes,
                n_data_records=n_records,
                record_duration=record_duration,
                n_signals=n_signals,
            )
        except ValidationError as e:
            raise DataError(f"invalid EDF header: {e.errors()[0]['msg']}")

        if len(data) < header.header_bytes:
            raise DataError(f"truncated EDF stream: {len(data)} bytes, header declares {header.header_bytes}")

        # Setiap field sinyal disimpan berurutan untuk semua sinyal
        columns: Dict[str, List[str]] = {}
        for name, width in _SIGNAL_FIELDS:
            columns[name] = [
                data[offset + i * width: offset + (i + 1) * width].decode("latin-1").strip()
                for i in range(n_signals)
            ]
            offset += width * n_signals

        signals = []
        for i in range(n_signals):
            try:
                signals.append(
                    SignalSpec(
                        label=columns["label"][i],
                        transducer=columns["transducer"][i],
                        physical_dimension=columns["physical_dimension"][i],
                        physical_min=float(columns["physical_min"][i]),
                        physical_max=float(columns["physical_max"][i]),
                        digital_min=int(columns["digital_min"][i]),
                        digital_max=int(columns["digital_max"][i]),
                        prefiltering=columns["prefiltering"][i],
                        samples_per_record=int(columns["samples_per_record"][i]),
                    )
                )
            except (ValueError, ValidationError) as e:
                raise DataError(f"invalid header for signal {i}: {e}")

        samples_per_record = [s.samples_per_record for s in signals]
        record_samples = sum(samples_per_record)
        payload_bytes = n_records * record_samples * 2
        available = len(data) - header.header_bytes
        if available < payload_bytes:
            raise DataError(f"truncated EDF stream: payload has {available} bytes, header declares {payload_bytes}")
        if available > payload_bytes:
            logger.warning(f"Ignoring {available - payload_bytes} trailing bytes after the last data record")

        records = np.frombuffer(
            data, dtype="<i2", count=n_records * record_samples, offset=header.header_bytes
        ).reshape(n_records, record_samples)
        bounds = np.cumsum([0] + samples_per_record)
        digital = [records[:, bounds[i]:bounds[i + 1]].reshape(-1).astype(np.int16) for i in range(n_signals)]

        return EdfContents(header=header, signals=signals, digital=digital)

    @staticmethod
    def write_edf(header: EdfHeader, signals: List[SignalSpec], digital: List[np.ndarray]) -> bytes:
        """Serialize header, signal specs and digital samples to EDF bytes"""
        if len(signals) != header.n_signals or len(digital) != header.n_signals:
            raise DataError("number of signals does not match header.n_signals")
        for spec, samples in zip(signals, digital):
            expected = header.n_data_records * spec.samples_per_record
            if len(samples) != expected:
                raise DataError(f"signal '{spec.label}' has {len(samples)} samples, expected {expected}")

        out = bytearray()
        start = header.start_datetime
        out += _ascii_field(header.version_tag, 8)
        out += _ascii_field(header.patient_id, 80)
        out += _ascii_field(header.recording_id, 80)
        out += _ascii_field(start.strftime("%d.%m.%y"), 8)
        out += _ascii_field(start.strftime("%H.%M.%S"), 8)
        out += _ascii_field(str(header.header_bytes), 8)
        out += _ascii_field("", 44)
        out += _ascii_field(str(header.n_data_records), 8)
        out += _ascii_field(_format_number(header.record_duration), 8)
        out += _ascii_field(str(header.n_signals), 4)

        for name, width in _SIGNAL_FIELDS:
            for spec in signals:
                if name == "reserved":
                    value = ""
                elif name in ("physical_min", "physical_max"):
                    value = _format_number(getattr(spec, name), width)
                else:
                    value = str(getattr(spec, name))
                out += _ascii_field(value, width)

        if header.n_signals:
            n_records = header.n_data_records
            blocks = [
                np.asarray(samples, dtype="<i2").reshape(n_records, spec.samples_per_record)
                for spec, samples in zip(signals, digital)
            ]
            out += np.concatenate(blocks, axis=1).astype("<i2").tobytes()
        return bytes(out)

    @staticmethod
    def read_edf(path) -> EdfContents:
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read EDF file {path}: {e}")
        return EdfProcessor.parse_edf(data)

    @staticmethod
    def select_central_eeg(candidates: Sequence[Tuple[str, np.ndarray]]) -> Tuple[str, np.ndarray]:
        """
        Pick the central EEG derivation with the lowest total signal energy.
        Ties resolve to the first-listed candidate.
        """
        if not candidates:
            raise DataError("no central EEG candidates to choose from")
        lengths = {len(signal) for _, signal in candidates}
        if len(lengths) > 1:
            raise DataError(f"central EEG candidates differ in length: {sorted(lengths)}")
        energies = [float(np.sum(np.square(np.asarray(signal, dtype=np.float64)))) for _, signal in candidates]
        chosen = int(np.argmin(energies))
        logger.debug(f"Central EEG energies {dict(zip([c[0] for c in candidates], energies))}, chose {candidates[chosen][0]}")
        return candidates[chosen]

    @staticmethod
    def apply_reference(
        primary: np.ndarray,
        reference: np.ndarray,
        primary_rate: Optional[float] = None,
        reference_rate: Optional[float] = None,
    ) -> np.ndarray:
        """Elementwise primary - reference"""
        if len(primary) != len(reference):
            raise DataError(f"cannot reference: lengths differ ({len(primary)} vs {len(reference)})")
        if primary_rate is not None and reference_rate is not None and primary_rate != reference_rate:
            raise DataError(f"cannot reference: sample rates differ ({primary_rate} vs {reference_rate})")
        return np.asarray(primary, dtype=np.float64) - np.asarray(reference, dtype=np.float64)

    @staticmethod
    def load_hypnogram(path, stage_map: Optional[Dict[str, str]] = None) -> HypnogramAnnotation:
        """
        Read one stage token per line (30 s per line) and harmonize it.
        Tokens missing from stage_map become UNKNOWN.
        """
        stage_map = DEFAULT_STAGE_MAP if stage_map is None else stage_map
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read hypnogram {path}: {e}")
        while lines and not lines[-1].strip():
            lines.pop()
        if not lines:
            raise DataError(f"hypnogram {path} is empty")

        unknown = Counter()
        stages = np.empty(len(lines), dtype=np.int8)
        for i, line in enumerate(lines):
            token = line.strip()
            name = stage_map.get(token)
            if name is None:
                unknown[token] += 1
                stages[i] = Stage.UNKNOWN
            else:
                stages[i] = Stage[name]
        if unknown:
            logger.warning(f"{Path(path).name}: unrecognized stage tokens mapped to UNKNOWN: {dict(unknown)}")
        return HypnogramAnnotation(stages=stages)

    @staticmethod
    def write_hypnogram(path, tokens: Sequence[str]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")

    @staticmethod
    def align_hypnogram(hypnogram: HypnogramAnnotation, recording_epochs: int) -> Tuple[HypnogramAnnotation, int]:
        """Truncate to the shorter of hypnogram and recording, warning on mismatch"""
        n_epochs = min(hypnogram.n_epochs, recording_epochs)
        if hypnogram.n_epochs != recording_epochs:
            logger.warning(
                f"Hypnogram has {hypnogram.n_epochs} epochs but recording has {recording_epochs}; "
                f"truncating to {n_epochs}"
            )
        return hypnogram.truncated(n_epochs), n_epochs

    @staticmethod
    def crop_recording(recording: PsgRecording, n_epochs: int) -> PsgRecording:
        """Keep only the first n_epochs * 30 s of every channel"""
        channels = [
            c.model_copy(update={"samples": c.samples[: int(round(n_epochs * EPOCH_SECONDS * c.sample_rate))]})
            for c in recording.channels
        ]
        return recording.model_copy(update={"channels": channels})

    @staticmethod
    def _resolve(contents: EdfContents, physical: List[np.ndarray], derivation: Derivation,
                 pre_referenced: bool) -> Optional[Tuple[str, np.ndarray, float]]:
        index = contents.index_of(derivation.label)
        if index is None:
            return None
        rate = contents.sample_rate(index)
        if pre_referenced or derivation.reference is None:
            return derivation.label, physical[index], rate
        ref_index = contents.index_of(derivation.reference)
        if ref_index is None:
            raise DataError(f"reference '{derivation.reference}' for '{derivation.label}' not found")
        signal = EdfProcessor.apply_reference(
            physical[index], physical[ref_index], rate, contents.sample_rate(ref_index)
        )
        return f"{derivation.label}-{derivation.reference}", signal, rate

    @staticmethod
    def assemble_recording(contents: EdfContents, montage: ChannelMontage,
                           subject_id: str, cohort: str) -> PsgRecording:
        """Reference, select and order the EEG, EOG-L, EOG-R and EMG channels"""
        physical = contents.physical
        resolve = lambda d: EdfProcessor._resolve(contents, physical, d, montage.pre_referenced)  # noqa: E731

        eeg = [r for r in (resolve(d) for d in montage.eeg) if r is not None]
        if not eeg:
            raise DataError(
                f"{subject_id}: no central EEG derivation among {[d.label for d in montage.eeg]}"
            )
        label, _ = EdfProcessor.select_central_eeg([(lbl, sig) for lbl, sig, _ in eeg])
        eeg_label, eeg_signal, eeg_rate = next(r for r in eeg if r[0] == label)

        channels = [Channel(role=ChannelRole.EEG, label=eeg_label, sample_rate=eeg_rate, samples=eeg_signal)]
        for role, derivation in (
            (ChannelRole.EOG_L, montage.eog_left),
            (ChannelRole.EOG_R, montage.eog_right),
            (ChannelRole.EMG, montage.emg),
        ):
            resolved = resolve(derivation)
            if resolved is None:
                raise DataError(f"{subject_id}: channel '{derivation.label}' ({role.value}) not found")
            lbl, signal, rate = resolved
            channels.append(Channel(role=role, label=lbl, sample_rate=rate, samples=signal))

        try:
            return PsgRecording(
                channels=channels,
                subject_id=subject_id,
                cohort=cohort,
                record_duration=contents.header.record_duration,
            )
        except ValidationError as e:
            raise DataError(f"{subject_id}: {e.errors()[0]['msg']}")


