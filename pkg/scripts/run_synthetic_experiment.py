#!/usr/bin/env python3
"""Run the full run-by-run protocol on a synthetic pool and print the table.

Generates a sweep-shaped pool (default: 21 configs x 3 seeds, 10 snapshots,
dim 256), runs max-src-dev selection against accumulative averaging for the
last / src-dev / ca variants, and renders the resulting table as markdown.

Usage:
    python scripts/run_synthetic_experiment.py
    python scripts/run_synthetic_experiment.py --extended   # + oracle & soup
    python scripts/run_synthetic_experiment.py --out-dir results/
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from snapsoup.evaluator import SyntheticQuadraticEvaluator
from snapsoup.protocol import ProtocolConfig, run_protocol
from snapsoup.report import HighlightRule, render
from snapsoup.selection import Strategy, Variant
from snapsoup.synthgen import METRIC, SynthConfig, generate


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--configs", type=int, default=21)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--languages", type=int, default=5)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--r-max", type=int, default=10)
    ap.add_argument("--baseline", default="row", help="highlight baseline: row | global | per-variant")
    ap.add_argument("--extended", action="store_true", help="add the oracle strategy and soups")
    ap.add_argument("--out-dir", default=None, help="also write table.json and the pool files")
    args = ap.parse_args()

    sp = generate(
        SynthConfig(
            dim=args.dim, n_configs=args.configs, seeds_per_config=args.seeds,
            languages=args.languages, rng_seed=args.seed,
        )
    )
    strategies = [Strategy.MAX_SRC_DEV, Strategy.ACCUMULATIVE_AVG]
    if args.extended:
        strategies += [Strategy.MAX_TRG_DEV, Strategy.SOUP]
    cfg = ProtocolConfig(
        r_max=args.r_max, repetitions=args.reps,
        variants=(Variant.LAST, Variant.SRC_DEV, Variant.CA),
        strategies=tuple(strategies), rng_seed=args.seed, metric=METRIC,
    )
    table = run_protocol(sp.pool, SyntheticQuadraticEvaluator(sp.truth), cfg)
    print(f"pool: {len(sp.pool)} runs x {sp.pool.snapshots_per_run} snapshots, dim {args.dim}")
    print(render(table, "markdown", rule=HighlightRule(baseline=args.baseline)))

    if args.out_dir:
        out = Path(args.out_dir)
        sp.write(out / "pool")
        (out / "table.json").write_text(table.to_json(), encoding="utf-8")
        print(f"wrote {out / 'table.json'} and {out / 'pool'}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
