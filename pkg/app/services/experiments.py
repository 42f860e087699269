import itertools
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.models.metrics import GridResult, MetricsReport, SweepResult, SweepRow
from app.models.psg import CohortManifest, ManifestEntry
from app.models.training import ExperimentConfig, RunConfig
from app.services import objective
from app.services.cohort_manager import RecordingStore
from app.services.network import SleepStager
from app.services.trainer import Trainer, TrainingResult, evaluate, nested_subsets, sample_sequences
from app.utils.errors import DataError, SleepStagerError

logger = logging.getLogger(__name__)


def combination_quotas(cohorts: Sequence[str], total: int) -> Dict[str, int]:
    """Even split of `total` over cohorts; the remainder goes one each in name order"""
    cohorts = sorted(cohorts)
    base, remainder = divmod(total, len(cohorts))
    return {c: base + (1 if i < remainder else 0) for i, c in enumerate(cohorts)}


def _paths(entries: Sequence[ManifestEntry]) -> List[str]:
    return [p for e in entries for p in (e.recording_path, e.annotation_path)]


class ExperimentRunner:
    """
    Runners of the experiment families. Every training run is audited: no test
    entry (and, for LOCO, no entry of the held-out cohort) may be requested from
    the store while the model trains.
    """

    def __init__(self, manifest: CohortManifest, store: RecordingStore, config: ExperimentConfig):
        if not manifest.assignments:
            raise DataError("manifest has no split assignments; run split_cohort first")
        self.manifest = manifest
        self.store = store
        self.config = config
        self.cohorts = manifest.cohorts()
        self.audits: List[Dict[str, object]] = []

    # ------------------------------------------------------------------
    # Shared steps
    # ------------------------------------------------------------------

    def _run_config(self, seed: int, **model_updates) -> RunConfig:
        run = self.config.run
        data = run.model_dump()
        data["seed"] = seed
        data["model"].update(model_updates)
        return RunConfig.model_validate(data)

    def _train(self, run: RunConfig, train_entries: List[ManifestEntry], val_entries: List[ManifestEntry],
               label: str, forbidden: Optional[List[ManifestEntry]] = None) -> TrainingResult:
        if not train_entries:
            raise DataError(f"{label}: empty training partition")
        if not val_entries:
            raise DataError(f"{label}: empty validation partition")
        forbidden = list(forbidden or []) + self.manifest.select(split="test")
        self.store.clear_audit()
        result = Trainer(run).train(self.store.load_many(train_entries), self.store.load_many(val_entries))
        violated = self.store.opened_any(_paths(forbidden))
        self.audits.append({"run": label, "seed": run.seed, "forbidden_files_requested": violated})
        if violated:
            raise SleepStagerError(f"{label}: a test or held-out file was requested during training")
        return result

    def _evaluate(self, model: SleepStager, entries: List[ManifestEntry], split: str,
                  tau_eval: Optional[int] = None) -> MetricsReport:
        tau = tau_eval or self.config.run.tau_eval
        return evaluate(model, self.store.load_many(entries), tau, split, self.config.run.batch_size)

    @staticmethod
    def _grid_result(family: str, config: str, test_set: str, seed: int, report: MetricsReport,
                     **extra) -> GridResult:
        acc = report.accuracy.mean if report.accuracy else report.pooled_accuracy
        kappa = report.kappa.mean if report.kappa else report.pooled_kappa
        return GridResult(family=family, config=config, test_set=test_set, seed=seed, accuracy=acc,
                          kappa=kappa, n_subjects=len(report.per_subject), extra=extra)

    def _require_cohorts(self, minimum: int, family: str):
        if len(self.cohorts) < minimum:
            raise DataError(f"{family} needs at least {minimum} cohorts, manifest has {len(self.cohorts)}")

    def _test_grid(self, family: str, config: str, seed: int, model: SleepStager) -> List[GridResult]:
        results = []
        for cohort in self.cohorts:
            report = self._evaluate(model, self.manifest.select(split="test", cohorts=[cohort]), "test")
            results.append(self._grid_result(family, config, cohort, seed, report))
        return results

    # ------------------------------------------------------------------
    # Cohort generalization
    # ------------------------------------------------------------------

    def run_loci(self, weight_decay: Optional[float] = None) -> List[GridResult]:
        """Train on one cohort, test on every cohort's test subset"""
        self._require_cohorts(2, "LOCI")
        family = "loci" if weight_decay is None else "loci-wd"
        results = []
        for seed in self.config.seeds:
            run = self._run_config(seed)
            if weight_decay is not None:
                run = run.model_copy(update={"optimizer": run.optimizer.model_copy(
                    update={"weight_decay": weight_decay})})
            for cohort in self.cohorts:
                label = f"LOCI {cohort}" if weight_decay is None else f"LOCI-wd {cohort}"
                result = self._train(
                    run,
                    self.manifest.select(split="train", cohorts=[cohort]),
                    self.manifest.select(split="val", cohorts=[cohort]),
                    label,
                )
                results.extend(self._test_grid(family, label, seed, result.model))
        return results

    def run_loco(self) -> List[GridResult]:
        """Train on all cohorts but one; the held-out cohort is never requested during training"""
        self._require_cohorts(2, "LOCO")
        results = []
        for seed in self.config.seeds:
            run = self._run_config(seed)
            for held_out in self.cohorts:
                others = [c for c in self.cohorts if c != held_out]
                label = f"LOCO {held_out}"
                result = self._train(
                    run,
                    self.manifest.select(split="train", cohorts=others),
                    self.manifest.select(split="val", cohorts=others),
                    label,
                    forbidden=self.manifest.select(cohorts=[held_out]),
                )
                results.extend(self._test_grid("loco", label, seed, result.model))
                if self.config.loco_entire_cohort:
                    report = self._evaluate(result.model, self.manifest.select(cohorts=[held_out]), "all")
                    results.append(self._grid_result("loco", label, f"{held_out} (entire)", seed, report))
        return results

    # ------------------------------------------------------------------
    # Data composition
    # ------------------------------------------------------------------

    def run_combinations(self, sizes: Optional[Sequence[int]] = None,
                         total_psgs: Optional[int] = None) -> List[GridResult]:
        """Every k-subset of cohorts with total_psgs training recordings drawn evenly across it"""
        sizes = list(sizes or self.config.combination_sizes)
        total = total_psgs or self.config.total_psgs
        self._require_cohorts(max(sizes), "combinations")
        test_entries = self.manifest.select(split="test")
        results = []
        for seed in self.config.seeds:
            run = self._run_config(seed)
            for k in sizes:
                for index, combo in enumerate(itertools.combinations(self.cohorts, k)):
                    rng = np.random.default_rng([seed, k, index])
                    train_entries = []
                    for cohort, quota in combination_quotas(combo, total).items():
                        pool = self.manifest.select(split="train", cohorts=[cohort])
                        if len(pool) < quota:
                            raise DataError(f"cohort {cohort} has {len(pool)} training PSGs, {quota} requested")
                        picked = np.sort(rng.choice(len(pool), size=quota, replace=False))
                        train_entries.extend(pool[i] for i in picked)
                    label = "+".join(combo)
                    result = self._train(run, train_entries,
                                         self.manifest.select(split="val", cohorts=list(combo)), label)
                    report = self._evaluate(result.model, test_entries, "test")
                    results.append(self._grid_result("combos", label, "all", seed, report,
                                                     k=float(k), n_train_psgs=float(len(train_entries))))
        return results

    def run_fractions(self, fractions: Optional[Sequence[float]] = None,
                      cohort: Optional[str] = None) -> List[GridResult]:
        """
        Nested subject subsamples of the training partition, tested on the fixed test partition.
        With `cohort`, the pool is that cohort alone (single-cohort baseline).
        """
        fractions = sorted(fractions or self.config.fractions)
        cohorts = [cohort] if cohort else None
        if cohort and cohort not in self.cohorts:
            raise DataError(f"unknown cohort {cohort}")
        pool = self.manifest.select(split="train", cohorts=cohorts)
        val_entries = self.manifest.select(split="val", cohorts=cohorts)
        test_entries = self.manifest.select(split="test")
        results = []
        for seed in self.config.seeds:
            run = self._run_config(seed)
            subsets = nested_subsets(sorted({e.subject_id for e in pool}), fractions, seed)
            for fraction in fractions:
                subjects = set(subsets[fraction])
                train_entries = [e for e in pool if e.subject_id in subjects]
                if not train_entries:
                    raise DataError(f"fraction {fraction} selected no training recordings")
                label = f"{fraction:g}" if cohort is None else f"{cohort} {fraction:g}"
                result = self._train(run, train_entries, val_entries, label)
                report = self._evaluate(result.model, test_entries, "test")
                results.append(self._grid_result("fractions", label, "all", seed, report,
                                                 fraction=fraction, n_train_subjects=float(len(subjects))))
        return results

    # ------------------------------------------------------------------
    # Temporal context
    # ------------------------------------------------------------------

    def position_profile(self, model: SleepStager, entries: List[ManifestEntry],
                         taus: Sequence[int] = (1, 30)) -> Dict[int, List[float]]:
        """Accuracy per within-sequence second over all complete sequences of the given entries"""
        config = model.config
        x, refs = [], []
        for labeled in self.store.load_many(entries):
            try:
                for sample in sample_sequences(labeled, config.alpha):
                    x.append(sample.x)
                    refs.append(sample.stages)
            except DataError as e:
                logger.warning(f"Skipping recording in position profile: {e}")
        if not x:
            raise DataError("no complete sequences to profile")
        batch = self.config.run.batch_size
        outputs = [model.predict(np.stack(x[i:i + batch]).astype(model.dtype)) for i in range(0, len(x), batch)]
        probabilities = np.concatenate(outputs)
        references = np.stack(refs)
        return {
            tau: objective.sequence_position_accuracy(
                probabilities, references, config.alpha, tau, config.columns_per_second
            ).tolist()
            for tau in taus
        }

    def run_hidden_unit_sweep(self) -> SweepResult:
        """
        Validation-set summaries for every hidden-unit count (at the base alpha), every
        sequence length (at the base hidden units) and every evaluation window (base model).
        """
        base = self.config.run.model
        train_entries = self.manifest.select(split="train")
        val_entries = self.manifest.select(split="val")
        rows: List[SweepRow] = []
        profile: Dict[int, List[float]] = {}

        def row(section: str, value: int, seed: int, report: MetricsReport) -> SweepRow:
            return SweepRow(section=section, value=value, seed=seed, accuracy=report.accuracy,
                            kappa=report.kappa, pooled_accuracy=report.pooled_accuracy,
                            pooled_kappa=report.pooled_kappa, n_subjects=len(report.per_subject))

        for seed in self.config.seeds:
            base_model = None
            for hidden in self.config.hidden_units:
                result = self._train(self._run_config(seed, hidden_units=hidden), train_entries, val_entries,
                                     f"n_h={hidden}")
                rows.append(row("hidden_units", hidden, seed, self._evaluate(result.model, val_entries, "val")))
                if hidden == base.hidden_units:
                    base_model = result.model
            for alpha in self.config.alphas:
                if alpha == base.alpha and base_model is not None:
                    model = base_model
                else:
                    model = self._train(self._run_config(seed, alpha=alpha), train_entries, val_entries,
                                        f"alpha={alpha}").model
                    if alpha == base.alpha:
                        base_model = model
                rows.append(row("sequence_length", alpha, seed, self._evaluate(model, val_entries, "val")))
            if base_model is None:
                base_model = self._train(self._run_config(seed), train_entries, val_entries, "base").model
            for tau in self.config.tau_evals:
                rows.append(row("window_length", tau, seed, self._evaluate(base_model, val_entries, "val", tau)))
            if seed == self.config.seeds[0]:
                profile = self.position_profile(base_model, self.manifest.select(split="test"))
        return SweepResult(rows=rows, position_profile=profile)

    def run(self, family: Optional[str] = None):
        family = family or self.config.family
        logger.info(f"Running experiment family '{family}' over cohorts {self.cohorts}")
        if family == "loci":
            results = self.run_loci()
            if self.config.loci_weight_decay is not None:
                results += self.run_loci(self.config.loci_weight_decay)
            return results
        if family == "loco":
            return self.run_loco()
        if family == "combos":
            return self.run_combinations()
        if family == "fractions":
            return self.run_fractions(cohort=self.config.fraction_cohort)
        if family == "sweep":
            return self.run_hidden_unit_sweep()
        raise DataError(f"unknown experiment family '{family}'")
