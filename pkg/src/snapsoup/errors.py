"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/validation
problems (:class:`SnapsoupError` and subclasses) exit 2, and external
evaluator failures exit 3.
"""

from __future__ import annotations


class SnapsoupError(Exception):
    """Base class for all data and validation errors raised by snapsoup."""


class TensorFormatError(SnapsoupError):
    """Malformed or unsupported TPAK file."""


class NonFiniteValueError(SnapsoupError):
    """A NaN or Inf weight/score encountered without an explicit override."""


class ValidationError(SnapsoupError):
    """Manifest, score table, or configuration violates an invariant."""


class IncompatibleModelsError(SnapsoupError):
    """Tensor maps cannot be averaged; carries the compatibility report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class MissingScoreError(SnapsoupError):
    """A required score record is absent."""


class MissingWeightsError(SnapsoupError):
    """An operation needs snapshot weights that were never provided."""


class EvaluationError(SnapsoupError):
    """A model could not be scored by the selected evaluator backend."""


class ExternalEvaluatorError(EvaluationError):
    """The external evaluation command failed (nonzero exit, bad output, timeout)."""
