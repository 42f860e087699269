import json
from pathlib import Path

import pandas as pd
import pytest

from app.main import main
from app.models.psg import CohortManifest

RUN_CONFIG = {
    "model": {"fs": 128, "n_blocks": 7, "base_filters": 1, "hidden_units": 4, "alpha": 2, "tau": 30},
    "optimizer": {"lr": 1e-3},
    "batch_size": 4,
    "max_passes": 1,
    "seed": 0,
}


def run_cli(args, log_dir, capsys):
    code = main(["--log-dir", str(log_dir)] + [str(a) for a in args])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.strip() else None)


@pytest.fixture
def cli(tmp_path, capsys):
    def invoke(*args):
        return run_cli(args, tmp_path / "logs", capsys)
    return invoke


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, synthetic_cohort):
    """Split manifest, run config and a checkpoint trained once through the CLI"""
    root = tmp_path_factory.mktemp("cli")
    manifest_path = root / "split.json"
    synthetic_cohort.save(manifest_path)
    config_path = root / "run.json"
    config_path.write_text(json.dumps(RUN_CONFIG), encoding="utf-8")
    code = main(["--log-dir", str(root / "logs"), "train", str(config_path), str(manifest_path), str(root / "model")])
    assert code == 0
    return root


def write_spec(path, names):
    spec = {"cohorts": [{"name": n, "n_subjects": 3, "min_epochs": 4, "max_epochs": 5} for n in names]}
    path.write_text(json.dumps(spec), encoding="utf-8")
    return path


def test_synth_writes_manifest_deterministically(tmp_path, cli):
    spec = write_spec(tmp_path / "spec.json", ["A", "B"])
    code, payload = cli("synth", spec, tmp_path / "one", "--seed", 4, "--n-jobs", 1)
    assert code == 0
    assert payload["cohorts"] == ["A", "B"]
    assert payload["entries"] == 6
    code, _ = cli("synth", spec, tmp_path / "two", "--seed", 4, "--n-jobs", 1)
    assert code == 0

    first = CohortManifest.load(tmp_path / "one" / "manifest.json")
    second = CohortManifest.load(tmp_path / "two" / "manifest.json")
    for a, b in zip(first.entries, second.entries):
        assert Path(a.recording_path).read_bytes() == Path(b.recording_path).read_bytes()
        assert Path(a.annotation_path).read_bytes() == Path(b.annotation_path).read_bytes()


def test_synth_invalid_spec_exits_1(tmp_path, cli):
    spec = write_spec(tmp_path / "spec.json", ["A", "A"])
    code, _ = cli("synth", spec, tmp_path / "out")
    assert code == 1


def test_synth_malformed_json_exits_1(tmp_path, cli):
    spec = tmp_path / "spec.json"
    spec.write_text("{not json", encoding="utf-8")
    code, _ = cli("synth", spec, tmp_path / "out")
    assert code == 1


def test_missing_file_exits_2(tmp_path, cli):
    code, _ = cli("synth", tmp_path / "nope.json", tmp_path / "out")
    assert code == 2
    code, _ = cli("ingest", tmp_path / "nope.json")
    assert code == 2


def test_usage_error_exits_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--log-dir", str(tmp_path), "synth"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["--log-dir", str(tmp_path), "evaluate", "m.ssck", "split.json", "--tau", "7"])
    assert exc.value.code == 1


def test_ingest_splits_and_caches(tmp_path, cli):
    spec = write_spec(tmp_path / "spec.json", ["A", "B"])
    cli("synth", spec, tmp_path / "data", "--seed", 1, "--n-jobs", 1)
    manifest = tmp_path / "data" / "manifest.json"
    code, payload = cli("ingest", manifest, "--out", tmp_path / "split.json", "--seed", 2,
                        "--cache-dir", tmp_path / "cache")
    assert code == 0
    one_each = {"train": 1, "val": 1, "test": 1}
    assert payload["splits"] == {"A": one_each, "B": one_each}

    split = CohortManifest.load(tmp_path / "split.json")
    assert len(split.select(split="train")) == 2
    assert len(list((tmp_path / "cache").rglob("*.sspc"))) == 6


def test_preprocess_fills_cache(tmp_path, cli):
    spec = write_spec(tmp_path / "spec.json", ["A", "B"])
    cli("synth", spec, tmp_path / "data", "--seed", 1, "--n-jobs", 1)
    code, payload = cli("preprocess", tmp_path / "data" / "manifest.json", "--cache-dir", tmp_path / "cache",
                        "--cohorts", "B")
    assert code == 0
    assert payload == {"cached": 3}
    assert sorted(p.parent.name for p in (tmp_path / "cache").rglob("*.sspc")) == ["B", "B", "B"]


def test_train_outputs(workspace):
    out = workspace / "model"
    assert (out / "model.ssck").exists()
    assert (out / "run_config.json").exists()
    events = [json.loads(line)["event"] for line in (out / "training_log.ndjson").read_text().splitlines()]
    assert events[0] == "start"
    assert events[-1] == "selected"


def test_train_rejects_bad_override(workspace, cli, tmp_path):
    code, _ = cli("train", workspace / "run.json", workspace / "split.json", tmp_path / "m", "--tau", 7)
    assert code == 1


@pytest.mark.parametrize("tau", [30, 10])
def test_predict_outputs(workspace, cli, tmp_path, tau):
    manifest = CohortManifest.load(workspace / "split.json")
    entry = manifest.select(split="test")[0]
    hypnogram = tmp_path / f"{entry.subject_id}.txt"
    code, payload = cli("predict", workspace / "model" / "model.ssck", entry.recording_path, hypnogram,
                        "--tau", tau, "--reference", entry.annotation_path)
    assert code == 0

    frame = pd.read_csv(hypnogram.with_suffix(".csv"))
    assert len(frame) == payload["seconds"]
    assert payload["seconds"] % 30 == 0
    n_epochs = payload["seconds"] // 30
    lines = hypnogram.read_text(encoding="utf-8").splitlines()
    assert len(lines) == n_epochs * 30 // tau
    assert set(lines) <= {"W", "N1", "N2", "N3", "REM"}
    assert hypnogram.with_suffix(".svg").read_bytes().startswith(b"<?xml")


def test_predict_help_documents_csv_rows(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--help"])

    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    assert "one row per second of the whole 30 s epochs" in text
    assert "trailing partial epoch is dropped" in text


def test_evaluate_report(workspace, cli, tmp_path):
    report = tmp_path / "report.json"
    code, payload = cli("evaluate", workspace / "model" / "model.ssck", workspace / "split.json",
                        "--split", "test", "--tau", 30, "--out", report)
    assert code == 0
    assert payload["n_subjects"] == 3
    assert 0.0 <= payload["pooled_accuracy"] <= 1.0
    assert json.loads(report.read_text())["split"] == "test"


def test_evaluate_unknown_cohort_exits_2(workspace, cli):
    code, _ = cli("evaluate", workspace / "model" / "model.ssck", workspace / "split.json", "--cohorts", "NOPE")
    assert code == 2


def test_experiment_loco(workspace, cli, tmp_path):
    config = tmp_path / "loco.json"
    config.write_text(json.dumps({"run": RUN_CONFIG, "seeds": [0]}), encoding="utf-8")
    out = tmp_path / "loco"
    code, payload = cli("experiment", "loco", config, workspace / "split.json", out)
    assert code == 0
    assert payload["family"] == "loco"
    assert payload["results"] == 9
    for name in ("loco_results.csv", "loco_accuracy_grid.csv", "loco_kappa_grid.csv",
                 "loco_results.json", "audit.json"):
        assert (out / name).exists()
    audits = json.loads((out / "audit.json").read_text())
    assert len(audits) == 3
    assert not any(a["forbidden_files_requested"] for a in audits)
