import logging
import math
import os
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from joblib import Parallel, delayed

from app.config import settings
from app.models.psg import CohortManifest, LabeledRecording, ManifestEntry, PreprocessedRecording
from app.services import dsp
from app.services.checkpoint import load_cache, save_cache
from app.services.edf_processor import EdfProcessor
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

VAL_FRACTION = 0.025
TEST_FRACTION = 0.10


def split_sizes(n_subjects: int) -> Dict[str, int]:
    """Floor rounding for val and test (at least one each), remainder to train"""
    if n_subjects < 3:
        raise DataError(f"need at least 3 subjects for train/val/test, got {n_subjects}")
    n_val = max(1, math.floor(VAL_FRACTION * n_subjects))
    n_test = max(1, math.floor(TEST_FRACTION * n_subjects))
    return {"train": n_subjects - n_val - n_test, "val": n_val, "test": n_test}


def split_cohort(manifest: CohortManifest, seed: int) -> CohortManifest:
    """
    Assign every subject to train, val or test, per cohort.

    Cohorts are visited in name order and subjects in sorted order, drawing all
    permutations from one generator seeded with `seed`.
    """
    rng = np.random.default_rng(seed)
    assignments: Dict[str, str] = {}
    for cohort in manifest.cohorts():
        subjects = manifest.subjects(cohort)
        sizes = split_sizes(len(subjects))
        order = rng.permutation(len(subjects))
        for rank, index in enumerate(order):
            if rank < sizes["test"]:
                split = "test"
            elif rank < sizes["test"] + sizes["val"]:
                split = "val"
            else:
                split = "train"
            assignments[subjects[index]] = split
        logger.info(f"Split cohort {cohort}: {sizes}")
    return manifest.model_copy(update={"assignments": assignments})


def merge_manifests(manifests: Iterable[CohortManifest]) -> CohortManifest:
    """Single-writer merge; entries end up path-sorted regardless of input order"""
    entries: List[ManifestEntry] = []
    stage_map: Dict[str, str] = {}
    montages = {}
    for manifest in manifests:
        entries.extend(manifest.entries)
        stage_map.update(manifest.stage_map)
        montages.update(manifest.montages)
    return CohortManifest(entries=entries, stage_map=stage_map, montages=montages)


def subset_manifest(manifest: CohortManifest, cohorts: List[str]) -> CohortManifest:
    """Manifest restricted to the named cohorts, assignments included"""
    unknown = sorted(set(cohorts) - set(manifest.cohorts()))
    if unknown:
        raise DataError(f"unknown cohorts {unknown}; manifest has {manifest.cohorts()}")
    entries = [e for e in manifest.entries if e.cohort in cohorts]
    subjects = {e.subject_id for e in entries}
    return CohortManifest(
        entries=entries,
        stage_map=manifest.stage_map,
        montages={c: m for c, m in manifest.montages.items() if c in cohorts},
        assignments={s: split for s, split in manifest.assignments.items() if s in subjects},
    )


class RecordingStore:
    """
    Loads manifest entries as preprocessed, labelled recordings.
    Every requested entry (recording and annotation path) is recorded in
    `accessed`, including requests served from memory, for protocol audits.
    """

    def __init__(self, manifest: CohortManifest, cache_dir: Optional[str] = None, n_jobs: Optional[int] = None):
        self.manifest = manifest
        self.cache_dir = cache_dir
        self.n_jobs = n_jobs if n_jobs is not None else settings.N_JOBS
        self.accessed: List[str] = []
        self._lock = threading.Lock()
        self._memory: Dict[str, LabeledRecording] = {}

    def initialize(self):
        if self.cache_dir:
            os.makedirs(self.cache_dir, exist_ok=True)
        logger.info(f"Recording store initialized with {len(self.manifest.entries)} entries")

    def _record(self, *paths: str):
        with self._lock:
            self.accessed.extend(str(p) for p in paths)

    def _cache_path(self, entry: ManifestEntry) -> Optional[Path]:
        if not self.cache_dir:
            return None
        return Path(self.cache_dir) / entry.cohort / f"{entry.key}.sspc"

    def load(self, entry: ManifestEntry) -> LabeledRecording:
        """Read, assemble, align and preprocess one entry (cached in memory and optionally on disk)"""
        self._record(entry.recording_path, entry.annotation_path)
        memory_key = f"{entry.cohort}/{entry.key}"
        if memory_key in self._memory:
            return self._memory[memory_key]

        try:
            hypnogram = EdfProcessor.load_hypnogram(entry.annotation_path, self.manifest.stage_map)
            cache_path = self._cache_path(entry)
            if cache_path is not None and cache_path.exists():
                data, fs = load_cache(cache_path)
                preprocessed = PreprocessedRecording(
                    data=data.astype(np.float64),
                    fs=fs,
                    means=np.zeros(data.shape[0]),
                    stds=np.ones(data.shape[0]),
                    subject_id=entry.subject_id,
                    cohort=entry.cohort,
                )
                hypnogram, _ = EdfProcessor.align_hypnogram(hypnogram, preprocessed.n_epochs)
            else:
                contents = EdfProcessor.read_edf(entry.recording_path)
                recording = EdfProcessor.assemble_recording(
                    contents, self.manifest.montage_for(entry.cohort), entry.subject_id, entry.cohort
                )
                hypnogram, n_epochs = EdfProcessor.align_hypnogram(hypnogram, recording.n_epochs)
                if n_epochs < recording.n_epochs:
                    recording = EdfProcessor.crop_recording(recording, n_epochs)
                preprocessed = dsp.preprocess(recording)
                if cache_path is not None:
                    save_cache(cache_path, preprocessed.data, preprocessed.fs)
            labeled = LabeledRecording(recording=preprocessed, hypnogram=hypnogram)
        except DataError as e:
            logger.error(f"Error loading {entry.recording_path}: {str(e)}")
            raise

        self._memory[memory_key] = labeled
        return labeled

    def load_many(self, entries: List[ManifestEntry]) -> List[LabeledRecording]:
        """Load entries concurrently; results keep the order of `entries`"""
        if self.n_jobs == 1 or len(entries) < 2:
            return [self.load(e) for e in entries]
        # Thread backend: audit log dan cache memori tetap dalam satu proses
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(delayed(self.load)(e) for e in entries)

    def load_split(self, split: str, cohorts: Optional[List[str]] = None,
                   subjects: Optional[List[str]] = None) -> List[LabeledRecording]:
        entries = self.manifest.select(split=split, cohorts=cohorts, subjects=subjects)
        return self.load_many(entries)

    def clear_audit(self):
        with self._lock:
            self.accessed = []

    def opened_any(self, paths: Iterable[str]) -> bool:
        opened = set(self.accessed)
        return any(str(p) in opened for p in paths)


# Singleton instance
_recording_store = None


def get_recording_store(manifest: Optional[CohortManifest] = None, cache_dir: Optional[str] = None) -> RecordingStore:
    """Dapatkan instance RecordingStore (singleton); manifest baru menggantikan store lama"""
    global _recording_store
    if manifest is not None and (_recording_store is None or _recording_store.manifest is not manifest):
        _recording_store = RecordingStore(manifest, cache_dir=cache_dir)
        _recording_store.initialize()
    if _recording_store is None:
        raise DataError("recording store has no manifest")
    return _recording_store
