from datetime import datetime

import numpy as np
import pytest

from app.models.psg import ChannelMontage, ChannelRole, Derivation, EdfHeader, HypnogramAnnotation, SignalSpec, Stage
from app.services.edf_processor import EdfProcessor
from app.utils.errors import DataError


def make_edf(labels=("C3", "C4", "E1", "E2", "M1", "M2", "Chin"), rate=4, n_records=60, seed=0,
             physical=(-500.0, 500.0)):
    rng = np.random.default_rng(seed)
    header = EdfHeader(
        start_datetime=datetime(2001, 3, 4, 22, 15, 0),
        header_bytes=256 * (len(labels) + 1),
        n_data_records=n_records,
        record_duration=1.0,
        n_signals=len(labels),
    )
    signals = [
        SignalSpec(label=label, physical_min=physical[0], physical_max=physical[1], samples_per_record=rate)
        for label in labels
    ]
    digital = [rng.integers(-2000, 2000, size=rate * n_records).astype(np.int16) for _ in labels]
    return header, signals, digital


def test_write_then_parse_reproduces_bytes():
    header, signals, digital = make_edf()
    data = EdfProcessor.write_edf(header, signals, digital)

    contents = EdfProcessor.parse_edf(data)

    assert contents.header == header
    assert [s.label for s in contents.signals] == [s.label for s in signals]
    for written, parsed in zip(digital, contents.digital):
        np.testing.assert_array_equal(written, parsed)
    assert EdfProcessor.write_edf(contents.header, contents.signals, contents.digital) == data


def test_header_layout():
    header, signals, digital = make_edf(n_records=5)
    data = EdfProcessor.write_edf(header, signals, digital)

    assert len(data) == 256 * 8 + 7 * 4 * 5 * 2
    assert data[168:176] == b"04.03.01"
    assert data[176:184] == b"22.15.00"
    assert data[236:244].strip() == b"5"


def test_truncated_stream_rejected():
    header, signals, digital = make_edf(n_records=5)
    data = EdfProcessor.write_edf(header, signals, digital)

    with pytest.raises(DataError, match="truncated"):
        EdfProcessor.parse_edf(data[:-1])
    with pytest.raises(DataError, match="truncated"):
        EdfProcessor.parse_edf(data[:100])


def test_unknown_record_count_rejected():
    header, signals, digital = make_edf(n_records=5)
    data = bytearray(EdfProcessor.write_edf(header, signals, digital))
    data[236:244] = b"-1      "

    with pytest.raises(DataError, match="-1"):
        EdfProcessor.parse_edf(bytes(data))


def test_trailing_bytes_ignored_with_warning(caplog):
    header, signals, digital = make_edf(n_records=5)
    data = EdfProcessor.write_edf(header, signals, digital)

    with caplog.at_level("WARNING"):
        contents = EdfProcessor.parse_edf(data + b"\x00\x01\x02")

    assert "3 trailing bytes" in caplog.text
    np.testing.assert_array_equal(contents.digital[0], digital[0])


def test_calibration_maps_digital_extremes():
    spec = SignalSpec(label="C3", physical_min=-200.0, physical_max=200.0, digital_min=-2048,
                      digital_max=2047, samples_per_record=1)

    physical = spec.to_physical(np.array([-2048, 2047]))

    np.testing.assert_allclose(physical, [-200.0, 200.0])
    np.testing.assert_array_equal(spec.to_digital(physical), [-2048, 2047])


def test_degenerate_calibration_rejected():
    with pytest.raises(ValueError):
        SignalSpec(label="C3", physical_min=1.0, physical_max=1.0, samples_per_record=1)


def test_select_central_eeg_prefers_lowest_energy():
    quiet = np.full(100, 1.0)
    loud = np.full(100, 3.0)

    assert EdfProcessor.select_central_eeg([("C3-M2", loud), ("C4-M1", quiet)])[0] == "C4-M1"
    # Seri: kandidat pertama
    assert EdfProcessor.select_central_eeg([("C3-M2", quiet), ("C4-M1", -quiet)])[0] == "C3-M2"


@pytest.mark.parametrize("seed", range(5))
def test_select_central_eeg_flips_once_chosen_grows_louder(seed):
    rng = np.random.default_rng(seed)
    first, second = rng.standard_normal((2, 500)) * rng.uniform(0.5, 2.0, size=(2, 1))
    candidates = [("C3-M2", first), ("C4-M1", second)]
    chosen_label, chosen = EdfProcessor.select_central_eeg(candidates)
    other = second if chosen_label == "C3-M2" else first
    other_label = "C4-M1" if chosen_label == "C3-M2" else "C3-M2"
    crossover = np.sqrt(np.sum(other ** 2) / np.sum(chosen ** 2))

    picks = []
    for factor in np.linspace(1.0, 3.0 * crossover, 40):
        scaled = [(lbl, sig * factor if lbl == chosen_label else sig) for lbl, sig in candidates]
        picks.append(EdfProcessor.select_central_eeg(scaled)[0])
        expected = other_label if factor > crossover else chosen_label
        assert picks[-1] == expected

    # Pilihan berpindah tepat sekali
    assert sum(a != b for a, b in zip(picks, picks[1:])) == 1


def test_select_central_eeg_requires_candidates():
    with pytest.raises(DataError):
        EdfProcessor.select_central_eeg([])


def test_apply_reference():
    out = EdfProcessor.apply_reference(np.array([3.0, 5.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(out, [2.0, 4.0])

    with pytest.raises(DataError, match="lengths"):
        EdfProcessor.apply_reference(np.zeros(3), np.zeros(4))
    with pytest.raises(DataError, match="sample rates"):
        EdfProcessor.apply_reference(np.zeros(3), np.zeros(3), 100, 200)


def test_load_hypnogram_harmonizes_rk_tokens(tmp_path, caplog):
    path = tmp_path / "sub.hyp"
    path.write_text("W\nS1\nS2\nS3\nS4\nR\nMT\nREM\n\n", encoding="utf-8")

    with caplog.at_level("WARNING"):
        hyp = EdfProcessor.load_hypnogram(path)

    expected = [Stage.W, Stage.N1, Stage.N2, Stage.N3, Stage.N3, Stage.REM, Stage.UNKNOWN, Stage.REM]
    np.testing.assert_array_equal(hyp.stages, expected)
    assert "MT" in caplog.text
    assert hyp.mask.sum() == 7


def test_movement_token_is_unscored_without_warning(tmp_path, caplog):
    path = tmp_path / "moved.hyp"
    path.write_text("N2\nMOVEMENT\nN3\n", encoding="utf-8")

    with caplog.at_level("WARNING"):
        hyp = EdfProcessor.load_hypnogram(path)

    np.testing.assert_array_equal(hyp.stages, [Stage.N2, Stage.UNKNOWN, Stage.N3])
    assert "unrecognized" not in caplog.text


def test_load_hypnogram_empty_file(tmp_path):
    path = tmp_path / "empty.hyp"
    path.write_text("\n", encoding="utf-8")

    with pytest.raises(DataError, match="empty"):
        EdfProcessor.load_hypnogram(path)


def test_align_truncates_to_shorter(caplog):
    annotation = HypnogramAnnotation(stages=np.array([0, 1, 2, 3, 4]))
    with caplog.at_level("WARNING"):
        aligned, n = EdfProcessor.align_hypnogram(annotation, 3)

    assert n == 3
    np.testing.assert_array_equal(aligned.stages, [0, 1, 2])
    assert "truncating" in caplog.text


def test_assemble_recording_references_and_orders():
    header, signals, digital = make_edf(rate=4, n_records=60)
    contents = EdfProcessor.parse_edf(EdfProcessor.write_edf(header, signals, digital))

    rec = EdfProcessor.assemble_recording(contents, ChannelMontage(), "S01", "A")

    assert [c.role for c in rec.channels] == [ChannelRole.EEG, ChannelRole.EOG_L, ChannelRole.EOG_R, ChannelRole.EMG]
    physical = contents.physical
    np.testing.assert_allclose(rec.channels[1].samples, physical[2] - physical[5])
    np.testing.assert_allclose(rec.channels[3].samples, physical[6])
    assert rec.channels[0].label in ("C3-M2", "C4-M1")
    assert rec.n_epochs == 2


def test_assemble_recording_falls_back_to_remaining_central_lead():
    labels = ("C4", "E1", "E2", "M1", "M2", "Chin")
    header, signals, digital = make_edf(labels=labels)
    contents = EdfProcessor.parse_edf(EdfProcessor.write_edf(header, signals, digital))

    rec = EdfProcessor.assemble_recording(contents, ChannelMontage(), "S01", "A")

    assert rec.channels[0].label == "C4-M1"


def test_assemble_recording_without_central_eeg():
    labels = ("E1", "E2", "M1", "M2", "Chin")
    header, signals, digital = make_edf(labels=labels)
    contents = EdfProcessor.parse_edf(EdfProcessor.write_edf(header, signals, digital))

    with pytest.raises(DataError, match="central EEG"):
        EdfProcessor.assemble_recording(contents, ChannelMontage(), "S01", "A")


def test_assemble_recording_pre_referenced_labels():
    labels = ("C3-A2", "LOC-A2", "ROC-A1", "EMG")
    header, signals, digital = make_edf(labels=labels)
    contents = EdfProcessor.parse_edf(EdfProcessor.write_edf(header, signals, digital))
    montage = ChannelMontage(
        eeg=[Derivation(label="C3-A2")],
        eog_left=Derivation(label="LOC-A2"),
        eog_right=Derivation(label="ROC-A1"),
        emg=Derivation(label="EMG"),
        pre_referenced=True,
    )

    rec = EdfProcessor.assemble_recording(contents, montage, "S01", "A")

    np.testing.assert_allclose(rec.channels[0].samples, contents.physical[0])
