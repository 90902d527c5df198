"""Uniform scoring interface over snapshots and averaged weight maps.

Three backends share one ``score(model, split, metric)`` surface, where
``model`` is either a :class:`TensorMap` or a ``(run, snapshot_index)``
reference (snapshot index 0 addresses the CA sentinel):

* score-table: looks values up in ingested records; cannot score an
  averaged map it has no record for ("unscorable composite").
* synthetic-quadratic: ``s0 - c * ||w - w*_split||^2`` against per-split
  ground-truth optima. Concave in the weights, which is exactly why weight
  averaging helps; src and trg optima differ by a configurable offset so
  source validation picks target-suboptimal models.
* external-command: hands the model over as a TPAK path to a user command
  that prints ``{"score": <float>}`` on stdout.

Backends are stateless/reentrant; a small content-hash cache memoizes
external-command calls.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import (
    EvaluationError,
    ExternalEvaluatorError,
    MissingWeightsError,
    ValidationError,
)
from .registry import Run, RunPool, CA_SENTINEL_INDEX, validate_split
from .tensors import TensorMap, check_compatibility, save_tensormap

ModelRef = Union[TensorMap, tuple]

DEFAULT_TIMEOUT_SECS = 3600.0
TIMEOUT_ENV_VAR = "SNAPSOUP_EVAL_TIMEOUT_SECS"


@dataclass(frozen=True)
class SplitSpec:
    """A (split id, metric name) pair identifying one evaluation."""

    split: str
    metric: str

    def __post_init__(self):
        validate_split(self.split)
        if not self.metric:
            raise ValidationError("metric name must be non-empty")


class Evaluator:
    """Base scoring interface. ``requires_weights`` tells callers whether
    snapshot references must be resolvable to actual weight tensors."""

    requires_weights = False

    def score(self, model: ModelRef, split: str, metric: str) -> float:
        raise NotImplementedError

    def known_splits(self) -> list[str]:
        """Splits this backend can score, when enumerable (else empty)."""
        return []

    def _resolve_run(self, model: tuple) -> tuple[Run, int]:
        run, idx = model
        if isinstance(run, str):
            if getattr(self, "pool", None) is None:
                raise EvaluationError(f"cannot resolve run id {run!r} without a pool")
            run = self.pool.run(run)
        return run, int(idx)


class ScoreTableEvaluator(Evaluator):
    """Looks scores up in the pool's ingested records."""

    requires_weights = False

    def __init__(self, pool: RunPool):
        self.pool = pool

    def known_splits(self) -> list[str]:
        return self.pool.splits

    def score(self, model: ModelRef, split: str, metric: str) -> float:
        if isinstance(model, TensorMap):
            meta = model.meta
            run_id, idx = meta.get("run_id"), meta.get("snapshot_index")
            if run_id is None and meta.get("variant") != "ca":
                raise EvaluationError(
                    "unscorable composite: score-table backend has no record for an "
                    "averaged weight map"
                )
            if idx is None:
                idx = CA_SENTINEL_INDEX if meta.get("variant") == "ca" else None
            if idx is None or not self.pool.has_run(run_id):
                raise EvaluationError("unscorable composite: no matching sentinel record")
            model = (self.pool.run(run_id), int(idx))
        run, idx = self._resolve_run(model)
        return run.get_score(idx, split, metric)


@dataclass
class QuadraticTruth:
    """Ground truth for the synthetic surrogate: per-split optima plus the
    score scale ``s0`` (maximum) and curvature ``c``."""

    optima: dict[str, TensorMap]
    s0: float = 80.0
    curvature: float = 1.0

    def splits(self) -> list[str]:
        return sorted(self.optima)

    def to_json_dict(self) -> dict:
        return {
            "s0": self.s0,
            "curvature": self.curvature,
            "optima": {
                split: {
                    name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
                    for name, arr in tm.items()
                }
                for split, tm in sorted(self.optima.items())
            },
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "QuadraticTruth":
        optima = {}
        for split, tensors in doc["optima"].items():
            optima[split] = TensorMap(
                {
                    name: np.asarray(t["data"], dtype=np.float32).reshape(t["shape"])
                    for name, t in tensors.items()
                }
            )
        return cls(optima=optima, s0=float(doc["s0"]), curvature=float(doc["curvature"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "QuadraticTruth":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class SyntheticQuadraticEvaluator(Evaluator):
    """Scores weights as ``s0 - c * ||w - w*_split||^2`` (surrogate units).

    The squared distance is accumulated in float64 over all tensors of the
    map. Concavity makes the score of any average of maps at least the mean
    of their scores.
    """

    requires_weights = True

    def __init__(self, truth: QuadraticTruth, pool: RunPool | None = None):
        self.truth = truth
        self.pool = pool

    def known_splits(self) -> list[str]:
        return self.truth.splits()

    def score(self, model: ModelRef, split: str, metric: str) -> float:
        if not isinstance(model, TensorMap):
            run, idx = self._resolve_run(model)
            model = run.snapshot(idx).load_weights()
        try:
            optimum = self.truth.optima[split]
        except KeyError:
            raise EvaluationError(f"synthetic truth has no optimum for split {split!r}") from None
        report = check_compatibility(model, optimum)
        if not report.compatible:
            raise EvaluationError(f"model does not match optimum shapes: {report.summary()}")
        sq = 0.0
        for name, arr in model.items():
            diff = arr.astype(np.float64) - optimum[name].astype(np.float64)
            sq += float(np.dot(diff.ravel(), diff.ravel()))
        return self.truth.s0 - self.truth.curvature * sq


def _default_timeout() -> float:
    env = os.environ.get(TIMEOUT_ENV_VAR)
    if env:
        return float(env)
    return DEFAULT_TIMEOUT_SECS


def score_external(
    model_path: str | Path,
    split: str,
    command_template: str,
    *,
    timeout: float | None = None,
) -> float:
    """Run an external evaluation command and parse its score.

    The template is split into argv and ``{model}`` / ``{split}``
    placeholders are substituted per argument. The command must exit 0 and
    print a JSON object ``{"score": <float>}`` on stdout (the last line
    that parses as one wins, so harnesses may log above it).
    """
    if "{model}" not in command_template or "{split}" not in command_template:
        raise ValidationError("command template must contain {model} and {split} placeholders")
    argv = [
        arg.replace("{model}", str(model_path)).replace("{split}", split)
        for arg in shlex.split(command_template)
    ]
    if timeout is None:
        timeout = _default_timeout()
    try:
        proc = subprocess.run(
            argv, capture_output=True, text=True, timeout=timeout, check=False
        )
    except subprocess.TimeoutExpired as exc:
        raise ExternalEvaluatorError(f"evaluation command timed out after {timeout}s") from exc
    except OSError as exc:
        raise ExternalEvaluatorError(f"failed to spawn evaluation command: {exc}") from exc
    if proc.returncode != 0:
        raise ExternalEvaluatorError(
            f"evaluation command exited {proc.returncode}; stderr: {proc.stderr.strip()}"
        )
    score = None
    for line in proc.stdout.splitlines():
        line = line.strip()
        if not line.startswith("{"):
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "score" in doc:
            score = doc["score"]
    if score is None:
        raise ExternalEvaluatorError(
            f"no {{\"score\": ...}} JSON object found on stdout: {proc.stdout.strip()!r}"
        )
    try:
        value = float(score)
    except (TypeError, ValueError):
        raise ExternalEvaluatorError(f"score is not a number: {score!r}") from None
    if not math.isfinite(value):
        raise ExternalEvaluatorError(f"non-finite score: {score!r}")
    return value


class ExternalCommandEvaluator(Evaluator):
    """Bridges to a real evaluation harness via a command template.

    Weight maps are handed over as TPAK files. Results are memoized per
    (model content hash, split, metric) so repeated protocol lookups do not
    re-spawn the command.
    """

    requires_weights = True

    def __init__(
        self,
        command_template: str,
        pool: RunPool | None = None,
        *,
        timeout: float | None = None,
    ):
        self.command_template = command_template
        self.pool = pool
        self.timeout = timeout
        self._cache: dict[tuple[str, str, str], float] = {}

    def score(self, model: ModelRef, split: str, metric: str) -> float:
        if not isinstance(model, TensorMap):
            run, idx = self._resolve_run(model)
            snap = run.snapshot(idx)
            if snap.weights_path is not None:
                key = (str(snap.weights_path), split, metric)
                if key not in self._cache:
                    self._cache[key] = score_external(
                        snap.weights_path, split, self.command_template, timeout=self.timeout
                    )
                return self._cache[key]
            model = snap.load_weights()
        if model is None:
            raise MissingWeightsError("external evaluation needs model weights")
        key = (model.content_hash(), split, metric)
        if key not in self._cache:
            with tempfile.TemporaryDirectory(prefix="snapsoup-eval-") as tmpdir:
                tmp_path = Path(tmpdir) / "model.tpak"
                save_tensormap(model, tmp_path)
                self._cache[key] = score_external(
                    tmp_path, split, self.command_template, timeout=self.timeout
                )
        return self._cache[key]


def make_evaluator(
    kind: str,
    pool: RunPool | None = None,
    *,
    truth: QuadraticTruth | None = None,
    command_template: str | None = None,
    timeout: float | None = None,
) -> Evaluator:
    """Factory for the CLI's ``--evaluator table|synthetic|external``."""
    kind = kind.strip().lower()
    if kind == "table":
        if pool is None:
            raise ValidationError("score-table evaluator needs a pool with ingested scores")
        return ScoreTableEvaluator(pool)
    if kind == "synthetic":
        if truth is None:
            raise ValidationError("synthetic evaluator needs ground-truth optima (--truth)")
        return SyntheticQuadraticEvaluator(truth, pool)
    if kind == "external":
        if not command_template:
            raise ValidationError("external evaluator needs a command template (--command)")
        return ExternalCommandEvaluator(command_template, pool, timeout=timeout)
    raise ValidationError(f"unknown evaluator backend {kind!r}")
