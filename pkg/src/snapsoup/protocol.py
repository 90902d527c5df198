"""The run-by-run evaluation protocol.

For each of ``repetitions`` repetitions, a sequence of runs with pairwise
distinct (lr, batch size) configs is sampled from the pool; within a
repetition the runs used at ``r`` are a prefix of those used at ``r+1``
(nested growth), so rows are comparable run-by-run. For every r, variant
and strategy the protocol produces one score; cells aggregate mean and
population std over repetitions. All repetitions share the same samples
across variants and strategies (paired comparison).

Sampling uses numpy's counter-based Philox generator with SeedSequence
spawn-key streams per repetition, recorded in the output for
reproducibility. The resulting table is a pure function of
(pool, evaluator, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import averaging
from .errors import MissingScoreError, ValidationError
from .evaluator import Evaluator
from .registry import CA_SENTINEL_INDEX, Run, RunPool, split_language
from .selection import (
    Strategy,
    Variant,
    VariantModel,
    build_variant,
    max_src_dev,
    max_trg_dev,
    variant_weights,
)

RNG_ALGORITHM = "numpy philox4x64; SeedSequence(seed, spawn_key=(0, rep)) per repetition, (1, rep, r) in fresh-sample mode"

_NS_NESTED, _NS_FRESH = 0, 1


@dataclass(frozen=True)
class ProtocolConfig:
    r_max: int = 10
    repetitions: int = 10
    variants: tuple[Variant, ...] = (Variant.LAST, Variant.SRC_DEV, Variant.CA)
    strategies: tuple[Strategy, ...] = (Strategy.MAX_SRC_DEV, Strategy.ACCUMULATIVE_AVG)
    rng_seed: int = 0
    metric: str = "score"
    target_splits: tuple[str, ...] | None = None  # default: every test:<lang> split
    trg_dev_splits: tuple[str, ...] | None = None  # default: every trg-dev:<lang> split
    soup_k: int = 5
    nested: bool = True  # prefix-nested samples across r; False resamples per r
    distinct_configs: bool = True  # no two sampled runs share (lr, batch size)
    jobs: int = 1  # parallel split evaluations (useful with slow external commands)

    def __post_init__(self):
        if self.r_max < 1:
            raise ValidationError("r_max must be >= 1")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "r_max": self.r_max,
            "repetitions": self.repetitions,
            "variants": [v.value for v in self.variants],
            "strategies": [s.value for s in self.strategies],
            "rng_seed": self.rng_seed,
            "metric": self.metric,
            "target_splits": list(self.target_splits) if self.target_splits else None,
            "trg_dev_splits": list(self.trg_dev_splits) if self.trg_dev_splits else None,
            "soup_k": self.soup_k,
            "nested": self.nested,
            "distinct_configs": self.distinct_configs,
        }


@dataclass(frozen=True)
class CellResult:
    """Aggregated result of one (r, variant, strategy) cell.

    ``variant`` is None for soup, which averages snapshots regardless of
    variant. ``std`` is the population standard deviation over repetitions.
    """

    r: int
    variant: Variant | None
    strategy: Strategy
    mean: float
    std: float
    n_reps: int


@dataclass(frozen=True)
class Highlight:
    r: int
    variant: Variant | None
    strategy: Strategy
    level: str  # "strong" | "weak"
    diff: float
    baseline: float


@dataclass
class ProtocolTable:
    config: dict
    rng: dict
    cells: list[CellResult]
    highlights: list[Highlight] = field(default_factory=list)

    def cell(self, r: int, variant: Variant | None, strategy: Strategy) -> CellResult:
        for c in self.cells:
            if c.r == r and c.variant == variant and c.strategy == strategy:
                return c
        raise KeyError(f"no cell (r={r}, {variant}, {strategy})")

    def to_json_dict(self) -> dict:
        return {
            "format": "snapsoup-protocol-table",
            "version": 1,
            "config": self.config,
            "rng": self.rng,
            "cells": [
                {
                    "r": c.r,
                    "variant": c.variant.value if c.variant else None,
                    "strategy": c.strategy.value,
                    "mean": c.mean,
                    "std": c.std,
                    "n_reps": c.n_reps,
                }
                for c in self.cells
            ],
            "highlights": [
                {
                    "r": h.r,
                    "variant": h.variant.value if h.variant else None,
                    "strategy": h.strategy.value,
                    "level": h.level,
                    "diff": h.diff,
                    "baseline": h.baseline,
                }
                for h in self.highlights
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProtocolTable":
        if doc.get("format") != "snapsoup-protocol-table":
            raise ValidationError("not a protocol table JSON document")
        cells = [
            CellResult(
                r=int(c["r"]),
                variant=Variant(c["variant"]) if c["variant"] else None,
                strategy=Strategy(c["strategy"]),
                mean=float(c["mean"]),
                std=float(c["std"]),
                n_reps=int(c["n_reps"]),
            )
            for c in doc["cells"]
        ]
        highlights = [
            Highlight(
                r=int(h["r"]),
                variant=Variant(h["variant"]) if h["variant"] else None,
                strategy=Strategy(h["strategy"]),
                level=str(h["level"]),
                diff=float(h["diff"]),
                baseline=float(h["baseline"]),
            )
            for h in doc.get("highlights", [])
        ]
        return cls(config=doc.get("config", {}), rng=doc.get("rng", {}), cells=cells, highlights=highlights)

    @classmethod
    def load(cls, path: str | Path) -> "ProtocolTable":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation (divide by n)."""
    if len(values) == 0:
        raise ValidationError("cannot aggregate zero repetition values")
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError("non-finite repetition value")
    return float(arr.mean()), float(arr.std())


def sample_runs(
    pool: RunPool,
    r: int,
    rng: np.random.Generator,
    *,
    distinct_configs: bool = True,
) -> list[Run]:
    """Sample r runs; by default no two share an (lr, batch size) config.

    Configs are drawn uniformly without replacement, then one seed is drawn
    uniformly per chosen config. Draws are sequential, so for a fixed
    generator state the sample at r is a prefix of the sample at r' > r.
    """
    if distinct_configs:
        configs = pool.configs()
        if r > len(configs):
            raise ValidationError(
                f"cannot sample {r} distinct configs from {len(configs)} available"
            )
        order = rng.permutation(len(configs))
        chosen = []
        for i in order[:r]:
            candidates = pool.runs_for_config(configs[i])
            chosen.append(candidates[int(rng.integers(len(candidates)))])
        return chosen
    if r > len(pool.runs):
        raise ValidationError(f"cannot sample {r} runs from {len(pool.runs)}")
    runs = sorted(pool.runs, key=lambda run: run.run_id)
    order = rng.permutation(len(runs))
    return [runs[i] for i in order[:r]]


def _resolve_splits(
    explicit: tuple[str, ...] | None, pool: RunPool, ev: Evaluator, family: str, metric: str
) -> tuple[str, ...]:
    if explicit:
        return tuple(explicit)
    from_pool = pool.language_splits(family, metric)
    if from_pool:
        return tuple(from_pool)
    from_ev = [s for s in ev.known_splits() if s.startswith(family + ":")]
    if from_ev:
        return tuple(from_ev)
    raise ValidationError(f"no {family} splits found in pool records or evaluator")


class _CellEngine:
    """Shared scoring machinery for one protocol execution."""

    def __init__(self, pool: RunPool, ev: Evaluator, cfg: ProtocolConfig):
        self.pool = pool
        self.ev = ev
        self.cfg = cfg
        self.target_splits = _resolve_splits(
            cfg.target_splits, pool, ev, "test", cfg.metric
        )
        self.trg_dev_splits: tuple[str, ...] = ()
        if Strategy.MAX_TRG_DEV in cfg.strategies:
            self.trg_dev_splits = _resolve_splits(
                cfg.trg_dev_splits, pool, ev, "trg-dev", cfg.metric
            )
        self._models: dict[tuple[str, Variant], VariantModel] = {}
        self._weights: dict[tuple[str, Variant], object] = {}
        self._values: dict[tuple[str, Variant], float] = {}

    def model(self, run: Run, variant: Variant) -> VariantModel:
        key = (run.run_id, variant)
        if key not in self._models:
            model = build_variant(run, variant, self.cfg.metric)
            scores: dict[str, float] = {}
            if Strategy.MAX_SRC_DEV in self.cfg.strategies and variant is not Variant.TRG_DEV:
                scores["src-dev"] = self.score_model(run, model, "src-dev")
            for split in self.trg_dev_splits:
                scores[split] = self.score_model(run, model, split)
            self._models[key] = model.with_scores(scores)
        return self._models[key]

    def weights(self, run: Run, variant: Variant):
        key = (run.run_id, variant)
        if key not in self._weights:
            self._weights[key] = variant_weights(run, variant, self.cfg.metric)
        return self._weights[key]

    def score_model(self, run: Run, model: VariantModel, split: str) -> float:
        """Score one variant model on one split via the evaluator."""
        if model.variant is Variant.TRG_DEV:
            lang = split_language(split)
            if lang is None or lang not in model.language_snapshots:
                raise MissingScoreError(
                    f"trg-dev model of {run.run_id} has no snapshot for split {split!r}"
                )
            entity = (run, model.language_snapshots[lang])
        elif model.variant is Variant.CA:
            if self.ev.requires_weights:
                entity = self.weights(run, Variant.CA)
            else:
                entity = (run, CA_SENTINEL_INDEX)
        else:
            entity = (run, model.snapshot_index)
        return self.ev.score(entity, split, self.cfg.metric)

    def _mean_over_splits(self, score_fn) -> float:
        if self.cfg.jobs > 1 and len(self.target_splits) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as tp:
                scores = list(tp.map(score_fn, self.target_splits))
        else:
            scores = [score_fn(split) for split in self.target_splits]
        return float(sum(scores) / len(scores))

    def model_value(self, run: Run, model: VariantModel) -> float:
        """Mean score over the target splits; the value a cell reports."""
        key = (run.run_id, model.variant)
        if key not in self._values:
            self._values[key] = self._mean_over_splits(
                lambda split: self.score_model(run, model, split)
            )
        return self._values[key]

    def composite_value(self, weights) -> float:
        return self._mean_over_splits(
            lambda split: self.ev.score(weights, split, self.cfg.metric)
        )


def _validate_combos(cfg: ProtocolConfig) -> None:
    if Variant.TRG_DEV in cfg.variants:
        bad = {Strategy.MAX_SRC_DEV, Strategy.ACCUMULATIVE_AVG} & set(cfg.strategies)
        if bad:
            raise ValidationError(
                "trg-dev variant models have neither a src-dev score nor a single "
                f"weight set; unsupported with strategies {sorted(s.value for s in bad)}"
            )


def run_protocol(pool: RunPool, ev: Evaluator, cfg: ProtocolConfig) -> ProtocolTable:
    """Execute the sampling protocol and aggregate cells over repetitions.

    Any repetition failure propagates; nothing is silently dropped.
    """
    _validate_combos(cfg)
    limit = len(pool.configs()) if cfg.distinct_configs else len(pool.runs)
    if cfg.r_max > limit:
        raise ValidationError(
            f"r_max={cfg.r_max} exceeds the pool size under the sampling rule ({limit})"
        )
    engine = _CellEngine(pool, ev, cfg)
    by_run = {run.run_id: run for run in pool.runs}

    # raw[(r, variant, strategy)] -> one value per repetition
    raw: dict[tuple[int, Variant | None, Strategy], list[float]] = {}

    for rep in range(cfg.repetitions):
        if cfg.nested:
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence(cfg.rng_seed, spawn_key=(_NS_NESTED, rep)))
            )
            sequence = sample_runs(pool, cfg.r_max, rng, distinct_configs=cfg.distinct_configs)

        running: dict[Variant, averaging.RunningAverage] = {
            v: averaging.RunningAverage()
            for v in cfg.variants
            if Strategy.ACCUMULATIVE_AVG in cfg.strategies
        }

        for r in range(1, cfg.r_max + 1):
            if cfg.nested:
                runs_r = sequence[:r]
            else:
                rng = np.random.Generator(
                    np.random.Philox(
                        np.random.SeedSequence(cfg.rng_seed, spawn_key=(_NS_FRESH, rep, r))
                    )
                )
                runs_r = sample_runs(pool, r, rng, distinct_configs=cfg.distinct_configs)

            for variant in cfg.variants:
                models = [engine.model(run, variant) for run in runs_r]
                for strategy in cfg.strategies:
                    if strategy is Strategy.SOUP:
                        continue
                    if strategy is Strategy.MAX_SRC_DEV:
                        chosen = max_src_dev(models)
                        value = engine.model_value(by_run[chosen.run_id], chosen)
                    elif strategy is Strategy.MAX_TRG_DEV:
                        chosen = max_trg_dev(models)
                        value = engine.model_value(by_run[chosen.run_id], chosen)
                    elif strategy is Strategy.ACCUMULATIVE_AVG:
                        if r == 1:
                            # the mean of one model is that model; no weights needed
                            value = engine.model_value(runs_r[0], models[0])
                        elif cfg.nested:
                            ra = running[variant]
                            while ra.count < r:
                                ra.push(engine.weights(runs_r[ra.count], variant))
                            value = engine.composite_value(ra.finalize())
                        else:
                            avg = averaging.average_checkpoints(
                                [engine.weights(run, variant) for run in runs_r]
                            )
                            value = engine.composite_value(avg)
                    else:  # pragma: no cover
                        raise ValidationError(f"unhandled strategy {strategy}")
                    raw.setdefault((r, variant, strategy), []).append(value)

            if Strategy.SOUP in cfg.strategies:
                soup_map = averaging.soup(
                    pool, cfg.soup_k, cfg.metric, runs=runs_r
                )
                raw.setdefault((r, None, Strategy.SOUP), []).append(
                    engine.composite_value(soup_map)
                )

    strategy_order = {s: i for i, s in enumerate(cfg.strategies)}
    variant_order = {v: i for i, v in enumerate(cfg.variants)}
    variant_order[None] = len(cfg.variants)
    cells = []
    for (r, variant, strategy), values in sorted(
        raw.items(), key=lambda kv: (kv[0][0], strategy_order[kv[0][2]], variant_order[kv[0][1]])
    ):
        mean, std = aggregate(values)
        cells.append(
            CellResult(r=r, variant=variant, strategy=strategy, mean=mean, std=std, n_reps=len(values))
        )

    config_echo = cfg.to_json_dict()
    config_echo["target_splits"] = list(engine.target_splits)
    config_echo["trg_dev_splits"] = list(engine.trg_dev_splits) or None
    table = ProtocolTable(
        config=config_echo,
        rng={"algorithm": RNG_ALGORITHM, "seed": cfg.rng_seed},
        cells=cells,
    )
    from .report import compute_highlights

    table.highlights = compute_highlights(table)
    return table
