import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.models.metrics import GridResult, HypnodensityExport, SweepResult  # noqa: E402
from app.models.psg import SCORED_STAGES, Stage  # noqa: E402
from app.models.training import PassRecord  # noqa: E402

logger = logging.getLogger(__name__)

STAGE_COLUMNS = [f"p_{s.name}" for s in SCORED_STAGES]
STAGE_COLORS = ["#f2c14e", "#a5d8ff", "#4d96ff", "#1b3c73", "#e4572e"]


class TrainingLog:
    """Newline-delimited JSON training events, kept in memory and optionally appended to a file"""

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self.records: List[PassRecord] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, record: PassRecord):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(record.model_dump_json(exclude_none=True) + "\n")

    @staticmethod
    def read(path) -> List[PassRecord]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [PassRecord.model_validate(json.loads(line)) for line in lines if line.strip()]


def results_frame(results: Iterable[GridResult]) -> pd.DataFrame:
    rows = []
    for r in results:
        row = r.model_dump(exclude={"extra"})
        row.update(r.extra)
        rows.append(row)
    return pd.DataFrame(rows)


def grid_frame(results: Sequence[GridResult], metric: str = "accuracy") -> pd.DataFrame:
    """Seed-averaged grid: rows are training configurations, columns test sets"""
    frame = results_frame(results)
    grid = frame.pivot_table(index="config", columns="test_set", values=metric, aggfunc="mean", sort=False)
    grid.columns.name = None
    return grid


def write_results(results: Sequence[GridResult], out_dir, stem: str, grid: bool = False) -> List[Path]:
    """Long-form CSV of every result plus, for LOCI/LOCO, accuracy and kappa grids"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{stem}_results.csv"]
    results_frame(results).to_csv(written[0], index=False)
    if grid:
        for metric in ("accuracy", "kappa"):
            path = out / f"{stem}_{metric}_grid.csv"
            grid_frame(results, metric).to_csv(path, index_label="train_config")
            written.append(path)
    logger.info(f"Wrote {', '.join(str(p) for p in written)}")
    return written


def write_json(payload, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def write_position_profile(profiles: dict, path) -> Path:
    """CSV with one row per within-sequence second and one column per tau_eval"""
    frame = pd.DataFrame({f"accuracy_tau{tau}": values for tau, values in profiles.items()})
    frame.insert(0, "position_s", np.arange(1, len(frame) + 1))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def write_hypnodensity_csv(export: HypnodensityExport, path) -> Path:
    frame = pd.DataFrame(export.probabilities, columns=STAGE_COLUMNS)
    frame.insert(0, "time_s", np.arange(export.n_seconds))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.8f")
    return path


def read_hypnodensity_csv(path) -> HypnodensityExport:
    frame = pd.read_csv(path)
    return HypnodensityExport(probabilities=frame[STAGE_COLUMNS].to_numpy())


def write_hypnogram_tokens(stages: Sequence[int], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{Stage(int(s)).name}\n" for s in stages), encoding="utf-8")
    return path


def render_hypnodensity(export: HypnodensityExport, automatic: Sequence[int], path,
                        manual: Optional[Sequence[int]] = None, tau: int = 30) -> Path:
    """
    SVG with the stacked per-second probabilities and the automatic (A) hypnogram;
    the manual (M) hypnogram is added when a reference is given.
    """
    n_rows = 3 if manual is not None else 2
    fig, axes = plt.subplots(n_rows, 1, figsize=(12, 2.0 * n_rows), sharex=True)
    seconds = np.arange(export.n_seconds)
    axes[0].stackplot(seconds, export.probabilities.T, colors=STAGE_COLORS,
                      labels=[s.name for s in SCORED_STAGES])
    axes[0].set_ylim(0, 1)
    axes[0].set_ylabel("p")
    axes[0].legend(loc="upper right", ncol=len(SCORED_STAGES), fontsize="small")

    traces = [("A", automatic, tau)]
    if manual is not None:
        traces.append(("M", manual, 30))
    for ax, (label, stages, step) in zip(axes[1:], traces):
        stages = np.asarray(stages, dtype=float)
        stages[stages < 0] = np.nan
        times = np.arange(len(stages) + 1) * step
        ax.stairs(stages, times, baseline=None)
        ax.set_yticks(range(len(SCORED_STAGES)))
        ax.set_yticklabels([s.name for s in SCORED_STAGES])
        ax.invert_yaxis()
        ax.set_ylabel(label)
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "hypnodensity"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_sweep(sweep: SweepResult, out_dir) -> List[Path]:
    """sweep.json, a flat summary CSV and the within-sequence accuracy profile"""
    out = Path(out_dir)
    written = [write_json(sweep.model_dump(mode="json"), out / "sweep.json")]
    rows = []
    for row in sweep.rows:
        flat = row.model_dump(exclude={"accuracy", "kappa"})
        for metric in ("accuracy", "kappa"):
            summary = getattr(row, metric)
            if summary is not None:
                flat.update({f"{metric}_{k}": v for k, v in summary.model_dump().items() if k != "n"})
        rows.append(flat)
    written.append(out / "sweep_summary.csv")
    pd.DataFrame(rows).to_csv(written[-1], index=False)
    if sweep.position_profile:
        written.append(write_position_profile(sweep.position_profile, out / "position_profile.csv"))
    return written
