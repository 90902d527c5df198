"""Per-run model variants and cross-run selection strategies.

Variants produce one model per run: LAST (final snapshot), SRC_DEV (best
snapshot by source-dev validation), CA (uniform mean of all snapshots) and
TRG_DEV (per-language best snapshot on target-dev; an oracle that violates
true zero-shot transfer).

Cross-run strategies pick one variant model out of many: max_src_dev by
source-dev score, max_trg_dev by mean target-dev score (oracle).

Tie rules are total, so selections are deterministic: within a run prefer
the later snapshot (more training); across runs prefer the
lexicographically smallest run_id.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import averaging
from .errors import MissingScoreError, ValidationError
from .registry import CA_SENTINEL_INDEX, Run, split_family
from .tensors import TensorMap


class Variant(str, enum.Enum):
    LAST = "last"
    SRC_DEV = "src-dev"
    CA = "ca"
    TRG_DEV = "trg-dev"

    @property
    def is_oracle(self) -> bool:
        """TRG_DEV uses target-language validation data, breaking true ZS-XLT."""
        return self is Variant.TRG_DEV

    @classmethod
    def parse(cls, text: str) -> "Variant":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(
                f"unknown variant {text!r}; expected one of {[v.value for v in cls]}"
            ) from None


class Strategy(str, enum.Enum):
    MAX_SRC_DEV = "max-src-dev"
    MAX_TRG_DEV = "max-trg-dev"
    ACCUMULATIVE_AVG = "acc-avg"
    SOUP = "soup"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(
                f"unknown strategy {text!r}; expected one of {[s.value for s in cls]}"
            ) from None


@dataclass(frozen=True)
class VariantModel:
    """A concrete model produced by applying a variant rule to one run.

    Exactly one identity form is populated: ``snapshot_index`` for
    LAST/SRC_DEV, ``language_snapshots`` for TRG_DEV, neither for CA.
    ``scores`` maps split id -> value for one metric, resolved either from
    ingested records or by an evaluator.
    """

    run_id: str
    variant: Variant
    snapshot_index: int | None = None
    language_snapshots: dict[str, int] | None = None
    weights: TensorMap | None = None
    scores: dict[str, float] = field(default_factory=dict)
    oracle: bool = False

    def __post_init__(self):
        has_index = self.snapshot_index is not None
        has_langs = self.language_snapshots is not None
        if self.variant in (Variant.LAST, Variant.SRC_DEV) and not (has_index and not has_langs):
            raise ValidationError(f"{self.variant.value} model must carry a snapshot index")
        if self.variant is Variant.CA and (has_index or has_langs):
            raise ValidationError("ca model carries neither snapshot index nor language map")
        if self.variant is Variant.TRG_DEV and not (has_langs and not has_index):
            raise ValidationError("trg-dev model must carry a per-language snapshot map")

    @property
    def src_dev_score(self) -> float:
        try:
            return self.scores["src-dev"]
        except KeyError:
            raise MissingScoreError(
                f"{self.variant.value} model of {self.run_id} has no src-dev score"
            ) from None

    def mean_trg_dev_score(self) -> float:
        values = [v for s, v in self.scores.items() if split_family(s) == "trg-dev"]
        if not values:
            raise MissingScoreError(
                f"{self.variant.value} model of {self.run_id} has no trg-dev scores"
            )
        return math.fsum(values) / len(values)

    def with_scores(self, scores: dict[str, float]) -> "VariantModel":
        return replace(self, scores=dict(scores))


def _argmax_snapshot(run: Run, split: str, metric: str) -> int:
    """Best snapshot by score on one split; ties go to the later snapshot."""
    best_idx, best = None, None
    for snap in run.snapshots:
        if not run.has_score(snap.index, split, metric):
            continue
        value = run.get_score(snap.index, split, metric)
        if best is None or value >= best:
            best_idx, best = snap.index, value
    if best_idx is None:
        raise MissingScoreError(f"run {run.run_id} has no {split} scores for metric {metric!r}")
    return best_idx


def build_variant(
    run: Run, variant: Variant, metric: str = "score", *, with_weights: bool = False
) -> VariantModel:
    """Construct the variant model of one run.

    Scores present in the run's records are resolved onto the model (for CA
    this means the snapshot-index-0 sentinel rows; a CA model's score is
    never proxied by any individual snapshot's score). Weights are attached
    only when requested; TRG_DEV has no single weight set.
    """
    if variant is Variant.LAST:
        idx = run.num_snapshots
        model = VariantModel(run.run_id, variant, snapshot_index=idx)
    elif variant is Variant.SRC_DEV:
        idx = _argmax_snapshot(run, "src-dev", metric)
        model = VariantModel(run.run_id, variant, snapshot_index=idx)
    elif variant is Variant.CA:
        model = VariantModel(run.run_id, variant)
    elif variant is Variant.TRG_DEV:
        langs = run.language_splits("trg-dev", metric)
        if not langs:
            raise MissingScoreError(f"run {run.run_id} has no trg-dev scores for {metric!r}")
        per_lang = {
            split.split(":", 1)[1]: _argmax_snapshot(run, split, metric) for split in langs
        }
        model = VariantModel(run.run_id, variant, language_snapshots=per_lang, oracle=True)
    else:  # pragma: no cover
        raise ValidationError(f"unhandled variant {variant}")

    scores = _resolve_scores_from_records(run, model, metric)
    model = model.with_scores(scores)
    if with_weights:
        model = replace(model, weights=variant_weights(run, variant, metric))
    return model


def _resolve_scores_from_records(run: Run, model: VariantModel, metric: str) -> dict[str, float]:
    if model.variant is Variant.CA:
        source_index = CA_SENTINEL_INDEX
        return {
            split: run.get_score(source_index, split, metric)
            for split in run.splits_for(source_index, metric)
        }
    if model.variant is Variant.TRG_DEV:
        scores: dict[str, float] = {}
        for lang, idx in model.language_snapshots.items():
            for family in ("trg-dev", "test"):
                split = f"{family}:{lang}"
                if run.has_score(idx, split, metric):
                    scores[split] = run.get_score(idx, split, metric)
        return scores
    idx = model.snapshot_index
    return {split: run.get_score(idx, split, metric) for split in run.splits_for(idx, metric)}


def variant_weights(run: Run, variant: Variant, metric: str = "score") -> TensorMap:
    """Weights of a run's variant model (CA averages all snapshots)."""
    if variant is Variant.CA:
        return averaging.ca_of_run(run)
    if variant is Variant.TRG_DEV:
        raise ValidationError(
            "trg-dev selects per-language snapshots and has no single weight set"
        )
    if variant is Variant.LAST:
        idx = run.num_snapshots
    else:
        idx = _argmax_snapshot(run, "src-dev", metric)
    return run.snapshot(idx).load_weights()


def _select(models: Sequence[VariantModel], key) -> VariantModel:
    best, best_key = None, None
    for model in models:
        k = (key(model), model.run_id)
        # maximize the score; on exact ties prefer the smallest run_id
        if best is None or k[0] > best_key[0] or (k[0] == best_key[0] and k[1] < best_key[1]):
            best, best_key = model, k
    return best


def max_src_dev(models: Sequence[VariantModel]) -> VariantModel:
    """The model with maximal source-dev validation score."""
    if not models:
        raise ValidationError("cannot select from an empty model list")
    return _select(models, lambda m: m.src_dev_score)


def max_trg_dev(models: Sequence[VariantModel]) -> VariantModel:
    """The model with maximal mean target-dev score across languages (oracle)."""
    if not models:
        raise ValidationError("cannot select from an empty model list")
    chosen = _select(models, lambda m: m.mean_trg_dev_score())
    return replace(chosen, oracle=True)
