#!/usr/bin/env python3
"""Measure how often source- and target-based model selection disagree.

For each generated pool, ranks runs by the src-dev score of their best
snapshot and by the mean trg-dev score of the same models, then counts how
often the two pick different runs. Also reports the per-variant grid delta
(best test score minus test score at maximal validation), the headline gap
between what a sweep could deliver and what source validation picks.

Usage:
    python scripts/selection_gap.py --pools 100
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from snapsoup.report import grid_from_pool
from snapsoup.selection import Variant, build_variant, max_src_dev, max_trg_dev
from snapsoup.synthgen import METRIC, SynthConfig, generate


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pools", type=int, default=100)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--configs", type=int, default=21)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1000, help="seed of the first pool")
    args = ap.parse_args()

    disagree = 0
    deltas = {v: 0.0 for v in (Variant.LAST, Variant.SRC_DEV, Variant.CA, Variant.TRG_DEV)}
    for i in range(args.pools):
        sp = generate(
            SynthConfig(
                dim=args.dim, n_configs=args.configs, seeds_per_config=args.seeds,
                rng_seed=args.seed + i,
            )
        )
        models = [build_variant(run, Variant.SRC_DEV, METRIC) for run in sp.pool.runs]
        by_src = max_src_dev(models).run_id
        by_trg = max_trg_dev(models).run_id
        disagree += by_src != by_trg
        grid = grid_from_pool(sp.pool, list(deltas), METRIC)
        for v in deltas:
            deltas[v] += grid.delta(v)

    print(f"pools: {args.pools} ({args.configs} configs x {args.seeds} seeds, dim {args.dim})")
    print(f"src/trg rank disagreement: {disagree}/{args.pools} = {disagree / args.pools:.0%}")
    print("mean grid delta (best test - test at max validation):")
    for v, total in deltas.items():
        print(f"  {v.value:8s} {total / args.pools:6.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
