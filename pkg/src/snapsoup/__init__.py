"""snapsoup: checkpoint weight averaging and run-by-run evaluation
protocols for zero-shot cross-lingual transfer sweeps."""

from .averaging import RunningAverage, accumulative_average, average_checkpoints, ca_of_run, soup
from .errors import (
    EvaluationError,
    ExternalEvaluatorError,
    IncompatibleModelsError,
    MissingScoreError,
    MissingWeightsError,
    NonFiniteValueError,
    SnapsoupError,
    TensorFormatError,
    ValidationError,
)
from .evaluator import (
    Evaluator,
    ExternalCommandEvaluator,
    QuadraticTruth,
    ScoreTableEvaluator,
    SplitSpec,
    SyntheticQuadraticEvaluator,
    make_evaluator,
    score_external,
)
from .protocol import CellResult, Highlight, ProtocolConfig, ProtocolTable, aggregate, run_protocol, sample_runs
from .registry import (
    HyperParams,
    Run,
    RunPool,
    ScoreRecord,
    Snapshot,
    ingest_scores,
    load_manifest,
    mean_over_languages,
)
from .report import GridCell, GridTable, HighlightRule, compute_highlights, grid_from_pool, render, render_grid
from .selection import Strategy, Variant, VariantModel, build_variant, max_src_dev, max_trg_dev, variant_weights
from .synthgen import SynthConfig, SynthPool, generate
from .tensors import (
    CompatibilityReport,
    TensorMap,
    check_compatibility,
    load_tensormap,
    save_tensormap,
)

__version__ = "0.1.0"
