import math

import numpy as np
import pytest

from conftest import make_pool, make_run, scalar_map
from snapsoup.errors import ValidationError
from snapsoup.evaluator import (
    QuadraticTruth,
    ScoreTableEvaluator,
    SyntheticQuadraticEvaluator,
)
from snapsoup.protocol import (
    ProtocolConfig,
    ProtocolTable,
    aggregate,
    run_protocol,
    sample_runs,
)
from snapsoup.selection import Strategy, Variant
M = "acc"


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


def grid_pool(n_configs=6, seeds=2, n_snaps=3):
    runs = []
    rng = np.random.default_rng(0)
    for ci in range(n_configs):
        for si in range(1, seeds + 1):
            run = make_run(f"c{ci:02d}-s{si}", n_snaps, lr=(ci + 1) * 1e-6, bs=16, seed=si)
            for i in range(1, n_snaps + 1):
                run.scores[(i, "src-dev", M)] = float(rng.uniform(50, 100))
                for lang in ("aa", "bb"):
                    run.scores[(i, f"trg-dev:{lang}", M)] = float(rng.uniform(30, 80))
                    run.scores[(i, f"test:{lang}", M)] = float(rng.uniform(30, 80))
            runs.append(run)
    return make_pool(runs)


def test_sample_runs_distinct_configs():
    pool = grid_pool(n_configs=8, seeds=3)
    runs = sample_runs(pool, 8, philox(1))
    assert len(runs) == 8
    assert len({r.hparams.config_key for r in runs}) == 8


def test_sample_runs_deterministic():
    pool = grid_pool()
    a = sample_runs(pool, 4, philox(7))
    b = sample_runs(pool, 4, philox(7))
    assert [r.run_id for r in a] == [r.run_id for r in b]


def test_sample_runs_prefix_property():
    pool = grid_pool(n_configs=10)
    short = sample_runs(pool, 3, philox(11))
    long = sample_runs(pool, 10, philox(11))
    assert [r.run_id for r in long[:3]] == [r.run_id for r in short]


def test_sample_runs_rejects_oversized_r():
    pool = grid_pool(n_configs=4)
    with pytest.raises(ValidationError, match="cannot sample 5"):
        sample_runs(pool, 5, philox(0))


def test_sample_runs_shared_config_mode():
    pool = grid_pool(n_configs=3, seeds=2)
    runs = sample_runs(pool, 6, philox(2), distinct_configs=False)
    assert len({r.run_id for r in runs}) == 6


def test_aggregate_two_points():
    mean, std = aggregate([76.0, 77.0])
    assert mean == 76.5 and std == 0.5


def test_aggregate_singleton_and_empty():
    assert aggregate([41.5]) == (41.5, 0.0)
    with pytest.raises(ValidationError):
        aggregate([])


def test_aggregate_matches_two_pass_oracle():
    rng = np.random.default_rng(3)
    values = [float(v) for v in rng.uniform(0, 100, size=10)]
    mean, std = aggregate(values)
    oracle_mean = math.fsum(values) / len(values)
    oracle_std = math.sqrt(math.fsum((v - oracle_mean) ** 2 for v in values) / len(values))
    assert abs(mean - oracle_mean) <= 1e-12
    assert abs(std - oracle_std) <= 1e-12


def table_cfg(**kw):
    defaults = dict(
        r_max=4,
        repetitions=3,
        variants=(Variant.LAST, Variant.SRC_DEV),
        strategies=(Strategy.MAX_SRC_DEV, Strategy.ACCUMULATIVE_AVG),
        rng_seed=5,
        metric=M,
    )
    defaults.update(kw)
    return ProtocolConfig(**defaults)


def test_r1_cells_equal_for_every_variant_on_score_table_pool():
    pool = grid_pool()
    # CA sentinels so all three variants are scorable by the table backend;
    # r_max=1 because a score-only pool cannot average weights at r >= 2
    rng = np.random.default_rng(8)
    for run in pool.runs:
        run.scores[(0, "src-dev", M)] = float(rng.uniform(50, 100))
        for lang in ("aa", "bb"):
            run.scores[(0, f"test:{lang}", M)] = float(rng.uniform(30, 80))
    cfg = table_cfg(variants=(Variant.LAST, Variant.SRC_DEV, Variant.CA), r_max=1, repetitions=6)
    table = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    for v in cfg.variants:
        sel = table.cell(1, v, Strategy.MAX_SRC_DEV)
        acc = table.cell(1, v, Strategy.ACCUMULATIVE_AVG)
        assert sel.mean == acc.mean and sel.std == acc.std


def test_protocol_is_deterministic():
    pool = grid_pool()
    cfg = table_cfg(strategies=(Strategy.MAX_SRC_DEV, Strategy.MAX_TRG_DEV))
    a = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    b = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    assert a.to_json() == b.to_json()


def test_protocol_table_json_roundtrip():
    pool = grid_pool()
    cfg = table_cfg(strategies=(Strategy.MAX_SRC_DEV, Strategy.MAX_TRG_DEV))
    table = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    doc = table.to_json_dict()
    back = ProtocolTable.from_json_dict(doc)
    assert back.cells == table.cells
    assert back.highlights == table.highlights
    assert back.to_json() == table.to_json()


def designed_pool():
    """Four single-snapshot runs at -3, -1, 1, 3; src optimum -3, trg optimum 0.

    The run at -3 wins source validation forever while being the worst
    target model; the average of all runs sits exactly on the target
    optimum.
    """
    positions = [-3.0, -1.0, 1.0, 3.0]
    runs = []
    for i, x in enumerate(positions):
        run = make_run(f"r{i}", 1, lr=(i + 1) * 1e-6, weights=[scalar_map(x)])
        runs.append(run)
    truth = QuadraticTruth(
        optima={"src-dev": scalar_map(-3.0), "test:xx": scalar_map(0.0)},
        s0=100.0,
        curvature=1.0,
    )
    return make_pool(runs), SyntheticQuadraticEvaluator(truth)


def test_designed_pool_src_selection_plateaus_while_averaging_rises():
    pool, ev = designed_pool()
    cfg = table_cfg(
        r_max=4, repetitions=5, variants=(Variant.LAST,), rng_seed=3, metric="score"
    )
    table = run_protocol(pool, ev, cfg)
    sel = [table.cell(r, Variant.LAST, Strategy.MAX_SRC_DEV).mean for r in range(1, 5)]
    acc = [table.cell(r, Variant.LAST, Strategy.ACCUMULATIVE_AVG).mean for r in range(1, 5)]
    # with all four runs sampled the outcome is deterministic
    assert sel[3] == pytest.approx(100.0 - 9.0, abs=1e-6)  # stuck at the src-best run
    assert acc[3] == pytest.approx(100.0, abs=1e-6)  # mean of -3,-1,1,3 is the optimum
    assert table.cell(4, Variant.LAST, Strategy.ACCUMULATIVE_AVG).std == pytest.approx(0.0, abs=1e-9)
    assert all(acc[i + 1] >= acc[i] - 1e-9 for i in range(3))
    assert acc[3] > sel[3]


def test_oracle_dominance_on_trg_dev_means():
    pool = grid_pool(n_configs=5, seeds=2)
    cfg = table_cfg(
        r_max=5,
        repetitions=4,
        strategies=(Strategy.MAX_SRC_DEV, Strategy.MAX_TRG_DEV),
        target_splits=("trg-dev:aa", "trg-dev:bb"),
        rng_seed=17,
    )
    table = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    for r in range(1, 6):
        for v in cfg.variants:
            oracle = table.cell(r, v, Strategy.MAX_TRG_DEV).mean
            true_zs = table.cell(r, v, Strategy.MAX_SRC_DEV).mean
            assert oracle >= true_zs - 1e-12


def test_soup_cell_is_variant_free_and_matches_direct_soup():
    from snapsoup.averaging import soup as make_soup

    rng = np.random.default_rng(21)
    runs = []
    for i in range(4):
        weights = [scalar_map(float(rng.uniform(-2, 2))) for _ in range(2)]
        run = make_run(f"r{i}", 2, lr=(i + 1) * 1e-6, weights=weights)
        for t in (1, 2):
            run.scores[(t, "src-dev", "score")] = float(rng.uniform(0, 100))
        runs.append(run)
    pool = make_pool(runs)
    truth = QuadraticTruth(optima={"test:xx": scalar_map(0.0)}, s0=100.0, curvature=1.0)
    ev = SyntheticQuadraticEvaluator(truth)
    cfg = table_cfg(
        r_max=4, repetitions=2, variants=(Variant.LAST,),
        strategies=(Strategy.SOUP,), soup_k=2, metric="score", rng_seed=9,
    )
    table = run_protocol(pool, ev, cfg)
    cell = table.cell(4, None, Strategy.SOUP)
    assert cell.n_reps == 2
    # at r=4 every repetition sampled all runs, so the soup is the global one
    expected = ev.score(make_soup(pool, 2, "score"), "test:xx", "score")
    assert cell.mean == pytest.approx(expected, abs=1e-9)
    assert cell.std == pytest.approx(0.0, abs=1e-12)


def test_trg_dev_variant_rejected_for_averaging_strategies():
    pool = grid_pool()
    cfg = table_cfg(variants=(Variant.TRG_DEV,))
    with pytest.raises(ValidationError, match="unsupported with strategies"):
        run_protocol(pool, ScoreTableEvaluator(pool), cfg)


def test_trg_dev_variant_works_with_max_trg_dev():
    pool = grid_pool()
    cfg = table_cfg(variants=(Variant.TRG_DEV,), strategies=(Strategy.MAX_TRG_DEV,))
    table = run_protocol(pool, ScoreTableEvaluator(pool), cfg)
    assert table.cell(1, Variant.TRG_DEV, Strategy.MAX_TRG_DEV).n_reps == 3


def test_r_max_exceeding_config_count_rejected():
    pool = grid_pool(n_configs=3)
    with pytest.raises(ValidationError, match="exceeds the pool size"):
        run_protocol(pool, ScoreTableEvaluator(pool), table_cfg(r_max=4))


def test_fresh_sample_mode_runs_and_differs_from_nested():
    pool = grid_pool(n_configs=8)
    strategies = (Strategy.MAX_SRC_DEV,)
    nested = run_protocol(
        pool, ScoreTableEvaluator(pool), table_cfg(r_max=6, rng_seed=2, strategies=strategies)
    )
    fresh = run_protocol(
        pool,
        ScoreTableEvaluator(pool),
        table_cfg(r_max=6, rng_seed=2, nested=False, strategies=strategies),
    )
    assert fresh.cell(1, Variant.LAST, Strategy.MAX_SRC_DEV).n_reps == 3
    assert nested.to_json() != fresh.to_json()


def test_backend_substitution_yields_identical_tables():
    # generated score records reproduce the synthetic surrogate bit-for-bit,
    # so swapping the backend must not change any snapshot-level cell
    from snapsoup.evaluator import SyntheticQuadraticEvaluator as SQE
    from snapsoup.synthgen import METRIC, SynthConfig, generate

    sp = generate(SynthConfig(dim=16, n_configs=6, seeds_per_config=2,
                              snapshots_per_run=4, languages=2, rng_seed=13))
    cfg = ProtocolConfig(
        r_max=5, repetitions=4, variants=(Variant.LAST, Variant.SRC_DEV),
        strategies=(Strategy.MAX_SRC_DEV, Strategy.MAX_TRG_DEV),
        rng_seed=3, metric=METRIC,
    )
    via_table = run_protocol(sp.pool, ScoreTableEvaluator(sp.pool), cfg)
    via_weights = run_protocol(sp.pool, SQE(sp.truth), cfg)
    assert via_table.to_json() == via_weights.to_json()


def test_missing_target_splits_rejected():
    runs = [make_run("r0", 2, lr=1e-6), make_run("r1", 2, lr=2e-6)]
    for run in runs:
        for i in (1, 2):
            run.scores[(i, "src-dev", M)] = 50.0
    pool = make_pool(runs)
    with pytest.raises(ValidationError, match="no test splits"):
        run_protocol(pool, ScoreTableEvaluator(pool), table_cfg(r_max=2))
