"""Experiment pool data model: runs, hyperparameters, snapshots, scores.

A pool mirrors the structure of a hyperparameter sweep: one run per
(learning rate, batch size, seed), a fixed number of snapshots per run
saved at regular fractions of training, and score records per
(run, snapshot, split, metric).

Splits are ``src-dev``, ``trg-dev:<lang>`` and ``test:<lang>``. Scores are
stored in natural metric units (percentage points). Snapshot index 0 is a
sentinel for scores of the within-run checkpoint average (the CA model),
which is not a physical snapshot.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import MissingScoreError, MissingWeightsError, NonFiniteValueError, ValidationError
from .tensors import TensorMap, load_tensormap

CA_SENTINEL_INDEX = 0

SPLIT_FAMILIES = ("src-dev", "trg-dev", "test")


def split_family(split: str) -> str:
    """Family of a split id: ``src-dev``, ``trg-dev`` or ``test``."""
    return split.split(":", 1)[0]


def split_language(split: str) -> str | None:
    """Language suffix of a per-language split, None for ``src-dev``."""
    if ":" in split:
        return split.split(":", 1)[1]
    return None


def validate_split(split: str) -> str:
    family = split_family(split)
    lang = split_language(split)
    if family == "src-dev" and lang is None:
        return split
    if family in ("trg-dev", "test") and lang:
        return split
    raise ValidationError(
        f"malformed split {split!r}: expected 'src-dev', 'trg-dev:<lang>' or 'test:<lang>'"
    )


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    batch_size: int
    seed: int

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.batch_size > 0:
            raise ValidationError(f"batch_size must be > 0, got {self.batch_size}")

    @property
    def config_key(self) -> tuple[float, int]:
        """The (lr, batch size) pair; seeds are repetitions of a config."""
        return (self.learning_rate, self.batch_size)


@dataclass(frozen=True)
class ScoreRecord:
    run_id: str
    snapshot_index: int
    split: str
    metric: str
    value: float


@dataclass
class Snapshot:
    """One saved model state; ``index`` counts 1..S within its run.

    Weights may live on disk (``weights_path``), in memory (``weights``,
    used by the synthetic generator), or be absent entirely (score-only
    pools are legal; operations that need weights fail fast).
    """

    run_id: str
    index: int
    weights_path: Path | None = None
    weights: TensorMap | None = None

    def load_weights(self) -> TensorMap:
        if self.weights is not None:
            return self.weights
        if self.weights_path is None:
            raise MissingWeightsError(
                f"snapshot {self.index} of {self.run_id} has no weights (score-only pool)"
            )
        return load_tensormap(self.weights_path)

    @property
    def has_weights(self) -> bool:
        return self.weights is not None or self.weights_path is not None


@dataclass
class Run:
    run_id: str
    hparams: HyperParams
    snapshots: list[Snapshot]
    # (snapshot_index, split, metric) -> value; index 0 holds CA sentinel rows
    scores: dict[tuple[int, str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        indices = [s.index for s in self.snapshots]
        if indices != list(range(1, len(indices) + 1)):
            raise ValidationError(f"run {self.run_id}: gap in snapshot indices {indices}")

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def snapshot(self, index: int) -> Snapshot:
        if not 1 <= index <= len(self.snapshots):
            raise ValidationError(f"run {self.run_id} has no snapshot {index}")
        return self.snapshots[index - 1]

    def get_score(self, snapshot_index: int, split: str, metric: str) -> float:
        try:
            return self.scores[(snapshot_index, split, metric)]
        except KeyError:
            raise MissingScoreError(
                f"no score for ({self.run_id}, snapshot {snapshot_index}, {split}, {metric})"
            ) from None

    def has_score(self, snapshot_index: int, split: str, metric: str) -> bool:
        return (snapshot_index, split, metric) in self.scores

    def splits_for(self, snapshot_index: int, metric: str) -> list[str]:
        return sorted(
            {s for (i, s, m) in self.scores if i == snapshot_index and m == metric}
        )

    def language_splits(self, family: str, metric: str) -> list[str]:
        """All ``<family>:<lang>`` splits with any record in this run."""
        return sorted(
            {s for (_, s, m) in self.scores if m == metric and split_family(s) == family}
        )


@dataclass
class RunPool:
    """Validated collection of runs; treated as immutable after ingestion."""

    runs: list[Run]
    snapshots_per_run: int = 10

    def __post_init__(self):
        seen: set[str] = set()
        for run in self.runs:
            if run.run_id in seen:
                raise ValidationError(f"duplicate run_id {run.run_id!r}")
            seen.add(run.run_id)
            if run.num_snapshots != self.snapshots_per_run:
                raise ValidationError(
                    f"run {run.run_id}: expected {self.snapshots_per_run} snapshots, "
                    f"found {run.num_snapshots}"
                )
        counts: dict[tuple[float, int], int] = {}
        for run in self.runs:
            key = run.hparams.config_key
            counts[key] = counts.get(key, 0) + 1
        if len(set(counts.values())) > 1:
            warnings.warn(
                f"unequal seeds per hyperparameter config: {sorted(set(counts.values()))}; "
                "the protocol still runs on irregular pools",
                stacklevel=2,
            )

    def __iter__(self) -> Iterator[Run]:
        return iter(self.runs)

    def __len__(self) -> int:
        return len(self.runs)

    @property
    def num_snapshots(self) -> int:
        return sum(r.num_snapshots for r in self.runs)

    def run(self, run_id: str) -> Run:
        for r in self.runs:
            if r.run_id == run_id:
                return r
        raise ValidationError(f"unknown run_id {run_id!r}")

    def has_run(self, run_id: str) -> bool:
        return any(r.run_id == run_id for r in self.runs)

    def configs(self) -> list[tuple[float, int]]:
        """Distinct (lr, batch size) pairs in deterministic sorted order."""
        return sorted({r.hparams.config_key for r in self.runs})

    def runs_for_config(self, key: tuple[float, int]) -> list[Run]:
        return sorted(
            (r for r in self.runs if r.hparams.config_key == key),
            key=lambda r: (r.hparams.seed, r.run_id),
        )

    @property
    def splits(self) -> list[str]:
        return sorted({s for r in self.runs for (_, s, _) in r.scores})

    @property
    def metrics(self) -> list[str]:
        return sorted({m for r in self.runs for (_, _, m) in r.scores})

    def language_splits(self, family: str, metric: str) -> list[str]:
        return sorted({s for r in self.runs for s in r.language_splits(family, metric)})

    def records(self) -> Iterator[ScoreRecord]:
        for run in self.runs:
            for (idx, split, metric), value in sorted(run.scores.items()):
                yield ScoreRecord(run.run_id, idx, split, metric, value)


def load_manifest(path: str | Path) -> RunPool:
    """Load and validate a pool manifest.

    Manifest schema::

        {"snapshots_per_run": 10,
         "runs": [{"run_id": "...", "lr": 1e-5, "batch_size": 32, "seed": 1,
                   "snapshots": [{"index": 1, "path": "..."}, ...]}]}

    Relative snapshot paths are resolved against the manifest's directory.
    Referenced weight files must exist.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path}: invalid JSON: {exc}") from exc
    base = path.parent
    snapshots_per_run = int(doc.get("snapshots_per_run", 10))
    runs = []
    for entry in doc.get("runs", []):
        try:
            run_id = entry["run_id"]
            hp = HyperParams(float(entry["lr"]), int(entry["batch_size"]), int(entry["seed"]))
        except KeyError as exc:
            raise ValidationError(f"manifest run entry missing key {exc}") from exc
        snaps = []
        for s in sorted(entry.get("snapshots", []), key=lambda s: int(s["index"])):
            p = s.get("path")
            wpath = None
            if p is not None:
                wpath = Path(p)
                if not wpath.is_absolute():
                    wpath = base / wpath
                if not wpath.is_file():
                    raise ValidationError(f"run {run_id}: weight file not found: {wpath}")
            snaps.append(Snapshot(run_id=run_id, index=int(s["index"]), weights_path=wpath))
        runs.append(Run(run_id=run_id, hparams=hp, snapshots=snaps))
    return RunPool(runs=runs, snapshots_per_run=snapshots_per_run)


def _iter_score_rows(path: Path) -> Iterator[dict]:
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"run_id", "snapshot_index", "split", "metric", "value"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise ValidationError(
                    f"{path}: scores CSV must have header run_id,snapshot_index,split,metric,value"
                )
            yield from reader


def ingest_scores(pool: RunPool, path: str | Path) -> RunPool:
    """Attach score records from a CSV or JSONL file to ``pool``.

    Every referenced run must exist; snapshot_index must be 0 (CA sentinel)
    or a valid snapshot; duplicate (run, snapshot, split, metric) rows and
    non-finite values are rejected. Returns the annotated pool.
    """
    path = Path(path)
    by_id = {r.run_id: r for r in pool.runs}
    for row in _iter_score_rows(path):
        run_id = str(row["run_id"])
        run = by_id.get(run_id)
        if run is None:
            raise ValidationError(f"{path}: unknown run_id {run_id!r}")
        idx = int(row["snapshot_index"])
        if not (idx == CA_SENTINEL_INDEX or 1 <= idx <= run.num_snapshots):
            raise ValidationError(
                f"{path}: run {run_id} has no snapshot {idx} (0 is the CA sentinel)"
            )
        split = validate_split(str(row["split"]))
        metric = str(row["metric"])
        if not metric:
            raise ValidationError(f"{path}: empty metric for run {run_id}")
        value = float(row["value"])
        if not math.isfinite(value):
            raise NonFiniteValueError(
                f"{path}: non-finite score for ({run_id}, {idx}, {split}, {metric})"
            )
        key = (idx, split, metric)
        if key in run.scores:
            raise ValidationError(
                f"{path}: duplicate score record ({run_id}, {idx}, {split}, {metric})"
            )
        run.scores[key] = value
    return pool


def mean_over_languages(
    pool: RunPool, run_id: str, snapshot_index: int, split_family_id: str, metric: str
) -> float:
    """Unweighted mean over all languages of a split family.

    ``split_family_id`` is ``trg-dev`` or ``test``; every language present
    for the (run, snapshot) weighs equally.
    """
    if split_family_id not in ("trg-dev", "test"):
        raise ValidationError(f"split family must be 'trg-dev' or 'test', got {split_family_id!r}")
    run = pool.run(run_id)
    values = [
        v
        for (idx, split, m), v in run.scores.items()
        if idx == snapshot_index and m == metric and split_family(split) == split_family_id
    ]
    if not values:
        raise MissingScoreError(
            f"no {split_family_id} records for ({run_id}, snapshot {snapshot_index}, {metric})"
        )
    # fsum is exactly rounded, so the mean does not depend on language order
    return math.fsum(values) / len(values)


def write_scores_csv(records: Iterable[ScoreRecord], path: str | Path) -> None:
    """Write records in the canonical CSV schema (deterministic order)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "snapshot_index", "split", "metric", "value"])
        for rec in records:
            writer.writerow([rec.run_id, rec.snapshot_index, rec.split, rec.metric, repr(rec.value)])
