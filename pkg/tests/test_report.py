import csv
import io
import json

import pytest

from conftest import make_pool, make_run
from snapsoup.protocol import CellResult, ProtocolTable
from snapsoup.report import (
    GridCell,
    GridTable,
    HighlightRule,
    compute_highlights,
    format_cell,
    grid_from_pool,
    render,
    render_grid,
)
from snapsoup.selection import Strategy, Variant

SEL, ACC = Strategy.MAX_SRC_DEV, Strategy.ACCUMULATIVE_AVG
L, S, C = Variant.LAST, Variant.SRC_DEV, Variant.CA

# golden run-by-run NER token-F1 table (mean, std) per r:
# three max-src-dev columns (last, src-dev, ca), three accumulative columns
NER_TABLE = {
    1: [(40.8, 2.7), (41.1, 3.1), (44.6, 2.1), (40.8, 2.7), (41.1, 3.0), (44.6, 2.1)],
    2: [(39.3, 2.1), (39.3, 2.1), (43.5, 1.1), (43.2, 2.2), (43.2, 2.2), (45.6, 1.5)],
    3: [(39.3, 1.2), (39.5, 1.7), (44.0, 1.1), (45.0, 1.7), (45.1, 1.8), (47.3, 1.3)],
    4: [(40.2, 2.0), (40.8, 2.2), (44.5, 1.5), (45.0, 1.7), (45.3, 1.8), (47.2, 1.4)],
    5: [(40.3, 2.0), (41.2, 2.3), (43.9, 1.9), (45.3, 1.7), (45.5, 1.7), (47.5, 1.4)],
    6: [(40.3, 2.0), (41.2, 2.3), (43.9, 1.9), (45.7, 1.4), (45.9, 1.4), (47.9, 1.2)],
    7: [(40.0, 2.1), (40.6, 2.3), (44.1, 2.0), (46.0, 1.3), (46.1, 1.3), (48.1, 1.1)],
    8: [(40.0, 2.1), (40.6, 2.3), (44.6, 1.7), (46.0, 1.1), (46.1, 1.2), (48.2, 1.0)],
    9: [(39.6, 2.3), (39.9, 2.4), (44.3, 1.8), (46.0, 0.6), (46.1, 0.7), (48.3, 0.7)],
    10: [(39.6, 2.3), (39.9, 2.4), (44.4, 1.7), (46.1, 0.5), (46.2, 0.6), (48.4, 0.5)],
}


def ner_table() -> ProtocolTable:
    cells = []
    for r, row in NER_TABLE.items():
        for (mean, std), (variant, strategy) in zip(
            row, [(L, SEL), (S, SEL), (C, SEL), (L, ACC), (S, ACC), (C, ACC)]
        ):
            cells.append(
                CellResult(r=r, variant=variant, strategy=strategy, mean=mean, std=std, n_reps=10)
            )
    return ProtocolTable(config={"metric": "token-f1"}, rng={}, cells=cells)


def test_format_cell_one_decimal_with_std_subscript():
    assert format_cell(48.4, 0.5) == "48.4_{0.5}"
    assert format_cell(76.46, 0.55) == "76.5_{0.6}"


def test_golden_ner_accumulative_ca_is_strong_at_r10():
    table = ner_table()
    highlights = compute_highlights(table)  # default: best max-src-dev in the same row
    by_key = {(h.r, h.variant, h.strategy): h for h in highlights}
    hit = by_key[(10, C, ACC)]
    assert hit.level == "strong"
    assert hit.diff == pytest.approx(4.0, abs=1e-9)  # 48.4 against the row-best 44.4
    assert hit.baseline == pytest.approx(44.4)


def test_golden_ner_display_string():
    table = ner_table()
    cell = table.cell(10, C, ACC)
    assert format_cell(cell.mean, cell.std) == "48.4_{0.5}"
    markdown = render(table, "markdown", rule=HighlightRule())
    assert "48.4_{0.5}" in markdown
    assert "**48.4_{0.5}** +" in markdown  # best of its column and strong


def test_global_baseline_matches_published_shading():
    # TyDiQA-style row: against the global best max-src-dev (74.3 at r=7),
    # 74.2 at r=5 is weak while the row-best (73.8) would have made it strong
    cells = [
        CellResult(5, C, SEL, 73.8, 0.8, 10),
        CellResult(5, C, ACC, 74.2, 0.8, 10),
        CellResult(7, C, SEL, 74.3, 0.3, 10),
        CellResult(7, C, ACC, 74.2, 0.5, 10),
    ]
    table = ProtocolTable(config={}, rng={}, cells=cells)
    row = {(h.r, h.strategy): h.level for h in compute_highlights(table, HighlightRule(baseline="row"))}
    glob = {(h.r, h.strategy): h.level for h in compute_highlights(table, HighlightRule(baseline="global"))}
    assert row[(5, ACC)] == "strong"
    assert glob[(5, ACC)] == "weak"


def test_highlight_gap_between_bands():
    cells = [CellResult(2, L, SEL, 50.0, 0.1, 10), CellResult(2, L, ACC, 50.15, 0.1, 10)]
    table = ProtocolTable(config={}, rng={}, cells=cells)
    assert compute_highlights(table) == []  # 0.15 sits between the bands


def test_highlight_decision_uses_unrounded_values():
    def level_for(baseline, value):
        cells = [CellResult(1, L, SEL, baseline, 0.0, 1), CellResult(1, L, ACC, value, 0.0, 1)]
        table = ProtocolTable(config={}, rng={}, cells=cells)
        hs = compute_highlights(table)
        return hs[0].level if hs else ""

    # both pairs display as 77.8 vs 77.6, but only one is a strong highlight
    assert format_cell(77.80, 0.0)[:4] == format_cell(77.75, 0.0)[:4] == "77.8"
    assert level_for(77.60, 77.80) == "strong"  # diff 0.20
    assert level_for(77.649, 77.80) == ""  # diff 0.151, between bands
    assert level_for(77.649, 77.551) == "weak"  # diff -0.098


def test_csv_render_schema():
    table = ner_table()
    text = render(table, "csv", rule=HighlightRule())
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["r", "variant", "strategy", "mean", "std", "highlight"]
    data = {(r, v, s): (m, sd, h) for r, v, s, m, sd, h in rows[1:]}
    assert data[("10", "ca", "acc-avg")] == ("48.4", "0.5", "strong")


def test_json_render_carries_exact_values_and_display():
    cells = [CellResult(1, L, SEL, 76.46251, 0.5501, 10), CellResult(1, L, ACC, 76.49999, 0.5, 10)]
    table = ProtocolTable(config={}, rng={}, cells=cells)
    doc = json.loads(render(table, "json", rule=HighlightRule()))
    assert doc["cells"][0]["mean"] == 76.46251  # rounding is display-only
    assert doc["cells"][0]["display"] == "76.5_{0.6}"
    assert doc["cells"][1]["highlight"] == "weak"


def test_markdown_renders_missing_cells_blank():
    cells = [CellResult(1, L, SEL, 50.0, 0.1, 2), CellResult(2, L, SEL, 51.0, 0.1, 2),
             CellResult(2, None, Strategy.SOUP, 52.0, 0.1, 2)]
    table = ProtocolTable(config={}, rng={}, cells=cells)
    text = render(table, "markdown", rule=HighlightRule())
    assert "| soup |" in text.splitlines()[0] + "|"
    assert text.splitlines()[2].endswith("|  |")  # no soup cell at r=1


def grid_fixture():
    return GridTable(
        variants=[S],
        rows=[
            (1e-6, 16, {S: GridCell(test_mean=45.9, test_std=0.3, val_mean=81.9)}),
            (5e-6, 16, {S: GridCell(test_mean=44.9, test_std=0.9, val_mean=85.3)}),
            (1e-5, 16, {S: GridCell(test_mean=40.7, test_std=1.8, val_mean=85.7)}),
        ],
    )


def test_grid_delta_best_minus_at_max_validation():
    grid = grid_fixture()
    delta = grid.delta(S)
    assert delta == pytest.approx(5.2, abs=1e-9)  # best 45.9, at-max-validation 40.7
    text = render_grid(grid, "markdown")
    assert "| delta | | 5.2 |" in text
    assert "**45.9_{0.3}**" in text
    assert "40.7_{1.8} +" in text  # the max-validation marker


def test_grid_single_config_delta_zero():
    grid = GridTable(
        variants=[L], rows=[(1e-5, 32, {L: GridCell(77.0, 0.1, 89.0)})]
    )
    assert grid.delta(L) == 0.0


def test_grid_delta_matches_brute_force_scan():
    import numpy as np

    rng = np.random.default_rng(13)
    rows = []
    for i in range(3):
        rows.append(
            ((i + 1) * 1e-6, 16, {L: GridCell(float(rng.uniform(40, 50)), 0.5, float(rng.uniform(80, 90)))})
        )
    grid = GridTable(variants=[L], rows=rows)
    cells = [r[2][L] for r in rows]
    best = max(c.test_mean for c in cells)
    best_val, at_max = -1.0, None
    for c in cells:
        if c.val_mean > best_val:
            best_val, at_max = c.val_mean, c.test_mean
    assert grid.delta(L) == pytest.approx(best - at_max, abs=1e-12)


def test_grid_from_pool_aggregates_seeds_and_languages():
    runs = []
    # one config, two seeds; LAST model test scores: mean(60, 70)=65 and mean(80, 90)=85
    vals = [(60.0, 70.0, 91.0), (80.0, 90.0, 93.0)]
    for seed, (ta, tb, src) in enumerate(vals, start=1):
        run = make_run(f"s{seed}", 2, lr=1e-5, bs=32, seed=seed)
        run.scores[(2, "src-dev", "f1")] = src
        run.scores[(2, "test:aa", "f1")] = ta
        run.scores[(2, "test:bb", "f1")] = tb
        runs.append(run)
    pool = make_pool(runs)
    grid = grid_from_pool(pool, [L], "f1")
    cell = grid.rows[0][2][L]
    assert cell.test_mean == pytest.approx(75.0)  # mean of 65 and 85
    assert cell.test_std == pytest.approx(10.0)  # population std over seeds
    assert cell.val_mean == pytest.approx(92.0)
    parsed = json.loads(render_grid(grid, "json"))
    assert parsed["delta"]["last"] == 0.0


def test_grid_csv_render():
    text = render_grid(grid_fixture(), "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["lr", "batch_size", "variant", "test_mean", "test_std", "val_mean"]
    assert rows[-1][0] == "delta"
    assert float(rows[-1][3]) == pytest.approx(5.2)
