"""Rendering of protocol tables and full-grid sweep results.

Cells display as ``mean_{std}`` with one decimal place. Averaging cells are
highlighted against the best max-src-dev baseline: ``strong`` when they
outperform it by at least +0.2 points, ``weak`` when they land within
±0.1 of it. Highlight decisions always use unrounded values; rounding is
display-only and the JSON output round-trips exact floats.

The default baseline is the best max-src-dev cell in the same row r;
``global`` (best across all rows, the shading rule the published tables
actually follow) and ``per-variant`` baselines are available.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .protocol import CellResult, Highlight, ProtocolTable
from .registry import RunPool, split_family
from .selection import Strategy, Variant, build_variant

BASELINE_MODES = ("row", "global", "per-variant")


@dataclass(frozen=True)
class HighlightRule:
    strong_threshold: float = 0.2
    weak_band: float = 0.1
    baseline: str = "row"

    def __post_init__(self):
        if not self.strong_threshold > self.weak_band:
            raise ValidationError("strong_threshold must exceed weak_band")
        if self.baseline not in BASELINE_MODES:
            raise ValidationError(f"baseline must be one of {BASELINE_MODES}")


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.1f}_{{{std:.1f}}}"


def _is_averaging(cell: CellResult) -> bool:
    return cell.strategy in (Strategy.ACCUMULATIVE_AVG, Strategy.SOUP)


def compute_highlights(table: ProtocolTable, rule: HighlightRule | None = None) -> list[Highlight]:
    """Annotate averaging cells against the max-src-dev baseline."""
    rule = rule or HighlightRule()
    baselines = [c for c in table.cells if c.strategy is Strategy.MAX_SRC_DEV]
    if not baselines:
        return []
    global_best = max(c.mean for c in baselines)
    row_best: dict[int, float] = {}
    per_variant: dict[tuple[int, Variant | None], float] = {}
    for c in baselines:
        row_best[c.r] = max(row_best.get(c.r, float("-inf")), c.mean)
        per_variant[(c.r, c.variant)] = c.mean

    highlights = []
    for cell in table.cells:
        if not _is_averaging(cell):
            continue
        if rule.baseline == "global":
            baseline = global_best
        elif rule.baseline == "per-variant":
            if (cell.r, cell.variant) not in per_variant:
                continue
            baseline = per_variant[(cell.r, cell.variant)]
        else:
            if cell.r not in row_best:
                continue
            baseline = row_best[cell.r]
        diff = cell.mean - baseline
        if diff >= rule.strong_threshold:
            level = "strong"
        elif abs(diff) <= rule.weak_band:
            level = "weak"
        else:
            continue
        highlights.append(
            Highlight(
                r=cell.r,
                variant=cell.variant,
                strategy=cell.strategy,
                level=level,
                diff=diff,
                baseline=baseline,
            )
        )
    return highlights


def _column_key(cell: CellResult) -> tuple[str, str]:
    return (cell.strategy.value, cell.variant.value if cell.variant else "")


def _column_label(key: tuple[str, str]) -> str:
    strategy, variant = key
    return f"{strategy}/{variant}" if variant else strategy


def render(table: ProtocolTable, fmt: str = "markdown", rule: HighlightRule | None = None) -> str:
    """Render a protocol table to markdown, CSV or JSON text."""
    highlights = compute_highlights(table, rule) if rule is not None else table.highlights
    level_of = {(h.r, h.variant, h.strategy): h.level for h in highlights}

    if fmt == "json":
        doc = table.to_json_dict()
        if rule is not None:
            doc["highlights"] = [
                {
                    "r": h.r,
                    "variant": h.variant.value if h.variant else None,
                    "strategy": h.strategy.value,
                    "level": h.level,
                    "diff": h.diff,
                    "baseline": h.baseline,
                }
                for h in highlights
            ]
        for c in doc["cells"]:
            c["display"] = format_cell(c["mean"], c["std"])
            c["highlight"] = level_of.get(
                (c["r"], Variant(c["variant"]) if c["variant"] else None, Strategy(c["strategy"])),
                "",
            )
        return json.dumps(doc, indent=2, sort_keys=True)

    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["r", "variant", "strategy", "mean", "std", "highlight"])
        for c in table.cells:
            writer.writerow(
                [
                    c.r,
                    c.variant.value if c.variant else "",
                    c.strategy.value,
                    repr(c.mean),
                    repr(c.std),
                    level_of.get((c.r, c.variant, c.strategy), ""),
                ]
            )
        return out.getvalue()

    if fmt != "markdown":
        raise ValidationError(f"unknown format {fmt!r}; expected markdown, csv or json")

    columns: list[tuple[str, str]] = []
    for c in table.cells:
        key = _column_key(c)
        if key not in columns:
            columns.append(key)
    rows = sorted({c.r for c in table.cells})
    by_key = {(c.r, _column_key(c)): c for c in table.cells}
    best_per_column = {
        key: max(c.mean for c in table.cells if _column_key(c) == key) for key in columns
    }

    lines = ["| r | " + " | ".join(_column_label(k) for k in columns) + " |"]
    lines.append("|---" * (len(columns) + 1) + "|")
    for r in rows:
        parts = [str(r)]
        for key in columns:
            cell = by_key.get((r, key))
            if cell is None:
                parts.append("")
                continue
            text = format_cell(cell.mean, cell.std)
            if cell.mean == best_per_column[key]:
                text = f"**{text}**"
            level = level_of.get((cell.r, cell.variant, cell.strategy), "")
            if level == "strong":
                text += " +"
            elif level == "weak":
                text += " ~"
            parts.append(text)
        lines.append("| " + " | ".join(parts) + " |")
    lines.append("")
    lines.append(
        "`mean_{std}` over repetitions; **bold** best per column; "
        "`+` averaging outperforms the best max-src-dev baseline by >= 0.2; "
        "`~` within +/- 0.1 of it."
    )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GridCell:
    """Per (config, variant) aggregate over seeds."""

    test_mean: float
    test_std: float
    val_mean: float


@dataclass
class GridTable:
    """Full-sweep results: one row per (lr, batch size), columns per variant."""

    variants: list[Variant]
    rows: list[tuple[float, int, dict[Variant, GridCell]]] = field(default_factory=list)

    def delta(self, variant: Variant) -> float:
        """Best test score minus the test score at maximal validation."""
        cells = [c[variant] for _, _, c in self.rows if variant in c]
        if not cells:
            raise ValidationError(f"grid has no cells for variant {variant.value}")
        best = max(c.test_mean for c in cells)
        at_max_val = max(cells, key=lambda c: c.val_mean).test_mean
        return best - at_max_val

    def to_json_dict(self) -> dict:
        return {
            "format": "snapsoup-grid",
            "version": 1,
            "variants": [v.value for v in self.variants],
            "rows": [
                {
                    "lr": lr,
                    "batch_size": bs,
                    "cells": {
                        v.value: {
                            "test_mean": c.test_mean,
                            "test_std": c.test_std,
                            "val_mean": c.val_mean,
                        }
                        for v, c in cells.items()
                    },
                }
                for lr, bs, cells in self.rows
            ],
            "delta": {v.value: self.delta(v) for v in self.variants},
        }


def grid_from_pool(
    pool: RunPool, variants: list[Variant], metric: str, target_family: str = "test"
) -> GridTable:
    """Aggregate a scored pool into the full-grid table.

    Per config and variant: the test value of each seed's variant model is
    its mean over target languages; seeds aggregate to mean/std. Validation
    is src-dev (mean trg-dev for the trg-dev variant), averaged over seeds.
    """
    grid = GridTable(variants=list(variants))
    for key in pool.configs():
        cells: dict[Variant, GridCell] = {}
        runs = pool.runs_for_config(key)
        for variant in variants:
            tests, vals = [], []
            for run in runs:
                model = build_variant(run, variant, metric)
                langs = [
                    v for s, v in model.scores.items() if split_family(s) == target_family
                ]
                if not langs:
                    raise ValidationError(
                        f"run {run.run_id}: no {target_family} scores for variant {variant.value}"
                    )
                tests.append(sum(langs) / len(langs))
                if variant is Variant.TRG_DEV:
                    vals.append(model.mean_trg_dev_score())
                else:
                    vals.append(model.src_dev_score)
            n = len(tests)
            mean = sum(tests) / n
            std = (sum((t - mean) ** 2 for t in tests) / n) ** 0.5
            cells[variant] = GridCell(
                test_mean=mean, test_std=std, val_mean=sum(vals) / len(vals)
            )
        grid.rows.append((key[0], key[1], cells))
    return grid


def render_grid(grid: GridTable, fmt: str = "markdown") -> str:
    """Render a grid table; the last row is the per-variant delta."""
    if fmt == "json":
        return json.dumps(grid.to_json_dict(), indent=2, sort_keys=True)

    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["lr", "batch_size", "variant", "test_mean", "test_std", "val_mean"])
        for lr, bs, cells in grid.rows:
            for v in grid.variants:
                if v in cells:
                    c = cells[v]
                    writer.writerow([repr(lr), bs, v.value, repr(c.test_mean), repr(c.test_std), repr(c.val_mean)])
        for v in grid.variants:
            writer.writerow(["delta", "", v.value, repr(grid.delta(v)), "", ""])
        return out.getvalue()

    if fmt != "markdown":
        raise ValidationError(f"unknown format {fmt!r}; expected markdown, csv or json")

    best = {
        v: max(c[v].test_mean for _, _, c in grid.rows if v in c) for v in grid.variants
    }
    max_val = {
        v: max(c[v].val_mean for _, _, c in grid.rows if v in c) for v in grid.variants
    }
    lines = ["| lr | bs | " + " | ".join(v.value for v in grid.variants) + " |"]
    lines.append("|---" * (len(grid.variants) + 2) + "|")
    for lr, bs, cells in grid.rows:
        parts = [f"{lr:g}", str(bs)]
        for v in grid.variants:
            if v not in cells:
                parts.append("")
                continue
            c = cells[v]
            text = format_cell(c.test_mean, c.test_std)
            if c.test_mean == best[v]:
                text = f"**{text}**"
            if c.val_mean == max_val[v]:
                text += " +"
            parts.append(text)
        lines.append("| " + " | ".join(parts) + " |")
    lines.append(
        "| delta | | " + " | ".join(f"{grid.delta(v):.1f}" for v in grid.variants) + " |"
    )
    lines.append("")
    lines.append(
        "`mean_{std}` over seeds; **bold** best test per column; "
        "`+` marks the config with maximal validation; "
        "delta = best test minus test at maximal validation."
    )
    return "\n".join(lines) + "\n"
