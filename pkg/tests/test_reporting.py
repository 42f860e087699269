import json

import numpy as np
import pandas as pd
import pytest

from app.models.metrics import GridResult, HypnodensityExport, SubjectMetricSummary, SweepResult, SweepRow
from app.models.training import PassRecord
from app.services.reporting import (
    STAGE_COLUMNS,
    TrainingLog,
    grid_frame,
    read_hypnodensity_csv,
    render_hypnodensity,
    results_frame,
    write_hypnodensity_csv,
    write_hypnogram_tokens,
    write_position_profile,
    write_results,
    write_sweep,
)


def grid_results():
    results = []
    for seed, offset in ((0, 0.0), (1, 0.1)):
        for config in ("LOCI A", "LOCI B"):
            for test_set in ("A", "B"):
                results.append(GridResult(
                    family="loci", config=config, test_set=test_set, seed=seed,
                    accuracy=0.5 + offset + (0.2 if config.endswith(test_set) else 0.0),
                    kappa=0.3 + offset, n_subjects=3, extra={"weight_decay": 0.0},
                ))
    return results


def make_export(n_seconds=60, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.random((n_seconds, 5))
    return HypnodensityExport(probabilities=p / p.sum(axis=1, keepdims=True), subject_id="s1")


def test_training_log_writes_ndjson(tmp_path):
    path = tmp_path / "logs" / "training_log.ndjson"
    log = TrainingLog(str(path))
    log.write(PassRecord(event="start", n_parameters=102, seed=7))
    log.write(PassRecord(event="pass", pass_index=1, train_loss=1.2, val_kappa=0.4))
    log.write(PassRecord(event="selected", pass_index=1, val_kappa=0.4))

    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    # Field None tidak ditulis
    assert "val_accuracy" not in json.loads(lines[1])
    records = TrainingLog.read(path)
    assert [r.event for r in records] == ["start", "pass", "selected"]
    assert records[1].train_loss == pytest.approx(1.2)
    assert log.records == records


def test_training_log_in_memory_only():
    log = TrainingLog()
    log.write(PassRecord(event="start"))
    assert log.path is None
    assert len(log.records) == 1


def test_results_frame_flattens_extra():
    frame = results_frame(grid_results())
    assert len(frame) == 8
    assert "weight_decay" in frame.columns
    assert "extra" not in frame.columns


def test_grid_frame_averages_seeds():
    grid = grid_frame(grid_results(), "accuracy")
    assert list(grid.index) == ["LOCI A", "LOCI B"]
    assert list(grid.columns) == ["A", "B"]
    assert grid.loc["LOCI A", "A"] == pytest.approx(0.75)
    assert grid.loc["LOCI A", "B"] == pytest.approx(0.55)
    assert grid_frame(grid_results(), "kappa").loc["LOCI B", "A"] == pytest.approx(0.35)


def test_write_results_with_grids(tmp_path):
    written = write_results(grid_results(), tmp_path / "out", "loci", grid=True)
    names = [p.name for p in written]
    assert names == ["loci_results.csv", "loci_accuracy_grid.csv", "loci_kappa_grid.csv"]
    grid = pd.read_csv(tmp_path / "out" / "loci_accuracy_grid.csv", index_col="train_config")
    assert grid.shape == (2, 2)


def test_write_results_without_grid(tmp_path):
    written = write_results(grid_results()[:2], tmp_path, "combos")
    assert [p.name for p in written] == ["combos_results.csv"]
    assert len(pd.read_csv(written[0])) == 2


def test_hypnodensity_csv(tmp_path):
    export = make_export()
    path = write_hypnodensity_csv(export, tmp_path / "night.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["time_s"] + STAGE_COLUMNS
    assert list(frame["time_s"]) == list(range(60))
    np.testing.assert_allclose(frame[STAGE_COLUMNS].sum(axis=1), 1.0, atol=1e-6)

    back = read_hypnodensity_csv(path)
    np.testing.assert_allclose(back.probabilities, export.probabilities, atol=1e-8)


def test_hypnodensity_rejects_off_simplex():
    with pytest.raises(ValueError):
        HypnodensityExport(probabilities=np.full((3, 5), 0.3))
    with pytest.raises(ValueError):
        HypnodensityExport(probabilities=np.full((3, 4), 0.25))


def test_hypnodensity_rows():
    rows = make_export(n_seconds=4).rows()
    assert [r.time_s for r in rows] == [0, 1, 2, 3]
    assert rows[0].p_W + rows[0].p_N1 + rows[0].p_N2 + rows[0].p_N3 + rows[0].p_REM == pytest.approx(1.0)


def test_hypnogram_tokens(tmp_path):
    path = write_hypnogram_tokens([0, 2, 3, 4, 1], tmp_path / "night.txt")
    assert path.read_text(encoding="utf-8").splitlines() == ["W", "N2", "N3", "REM", "N1"]


@pytest.mark.parametrize("manual", [None, [0, 1, -1]])
def test_render_hypnodensity_is_deterministic(tmp_path, manual):
    export = make_export(n_seconds=90)
    automatic = [0, 2, 2]
    first = render_hypnodensity(export, automatic, tmp_path / "a.svg", manual=manual)
    second = render_hypnodensity(export, automatic, tmp_path / "b.svg", manual=manual)
    content = first.read_bytes()
    assert content.startswith(b"<?xml")
    assert content == second.read_bytes()


def test_render_with_manual_adds_panel(tmp_path):
    export = make_export(n_seconds=90)
    without = render_hypnodensity(export, [0, 2, 2], tmp_path / "a.svg").read_text()
    with_manual = render_hypnodensity(export, [0, 2, 2], tmp_path / "b.svg", manual=[0, 2, 3]).read_text()
    assert len(with_manual) > len(without)


def test_position_profile_columns(tmp_path):
    path = write_position_profile({1: [0.5, 0.6, 0.7], 30: [0.4, 0.5, 0.6]}, tmp_path / "profile.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["position_s", "accuracy_tau1", "accuracy_tau30"]
    assert list(frame["position_s"]) == [1, 2, 3]


def test_write_sweep(tmp_path):
    summary = SubjectMetricSummary(n=3, mean=0.7, sd=0.05, median=0.71, ci_low=0.6, ci_high=0.8)
    sweep = SweepResult(
        rows=[
            SweepRow(section="hidden_units", value=0, seed=0, accuracy=summary, kappa=summary,
                     pooled_accuracy=0.7, pooled_kappa=0.6, n_subjects=3),
            SweepRow(section="window_length", value=30, seed=0,
                     pooled_accuracy=0.72, pooled_kappa=0.61, n_subjects=1),
        ],
        position_profile={30: [0.5, 0.6]},
    )
    written = write_sweep(sweep, tmp_path)
    assert [p.name for p in written] == ["sweep.json", "sweep_summary.csv", "position_profile.csv"]

    frame = pd.read_csv(tmp_path / "sweep_summary.csv")
    assert {"section", "value", "accuracy_mean", "kappa_ci_high", "pooled_kappa"} <= set(frame.columns)
    assert "accuracy_n" not in frame.columns
    assert np.isnan(frame.loc[1, "accuracy_mean"])

    payload = json.loads((tmp_path / "sweep.json").read_text())
    assert len(payload["rows"]) == 2


def test_write_sweep_without_profile(tmp_path):
    sweep = SweepResult(rows=[SweepRow(section="sequence_length", value=10, seed=1,
                                       pooled_accuracy=0.7, pooled_kappa=0.6, n_subjects=1)])
    written = write_sweep(sweep, tmp_path)
    assert [p.name for p in written] == ["sweep.json", "sweep_summary.csv"]
