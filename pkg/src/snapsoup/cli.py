"""The ``snapsoup`` command line tool.

Subcommands: validate, average, soup, select, best, protocol, synth,
report. Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 external-evaluator failure. Results go to stdout or ``--out``;
diagnostics go to stderr. Outputs carry no timestamps or hostnames, so
identical inputs (and seeds) produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .averaging import average_checkpoints, soup as make_soup
from .errors import ExternalEvaluatorError, SnapsoupError, ValidationError
from .evaluator import QuadraticTruth, make_evaluator
from .protocol import ProtocolConfig, ProtocolTable, run_protocol
from .registry import RunPool, ingest_scores, load_manifest
from .report import HighlightRule, grid_from_pool, render, render_grid
from .selection import Strategy, Variant, build_variant, max_src_dev, max_trg_dev, variant_weights
from .synthgen import SynthConfig, generate
from .tensors import check_compatibility, load_tensormap, save_tensormap

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_EXTERNAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the CLI contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_pool(args) -> RunPool:
    pool = load_manifest(args.manifest)
    if getattr(args, "scores", None):
        ingest_scores(pool, args.scores)
    return pool


def _resolve_metric(pool: RunPool, metric: str | None) -> str:
    if metric:
        return metric
    metrics = pool.metrics
    if len(metrics) == 1:
        return metrics[0]
    raise ValidationError(
        f"--metric required: pool has metrics {metrics or '(none)'}"
    )


def _model_json(model) -> dict:
    return {
        "run_id": model.run_id,
        "variant": model.variant.value,
        "snapshot_index": model.snapshot_index,
        "language_snapshots": model.language_snapshots,
        "oracle": model.oracle,
        "scores": dict(sorted(model.scores.items())),
    }


def _cmd_validate(args) -> int:
    pool = _load_pool(args)
    lines = [f"{len(pool)} runs, {pool.num_snapshots} snapshots"]
    if args.scores:
        n_records = sum(len(r.scores) for r in pool.runs)
        lines.append(f"{n_records} score records, splits: {', '.join(pool.splits)}")
    if args.check_weights:
        reference = None
        checked = 0
        problems = []
        for run in pool.runs:
            for snap in run.snapshots:
                if snap.weights_path is None:
                    continue
                tm = load_tensormap(snap.weights_path)
                checked += 1
                if reference is None:
                    reference = tm
                    continue
                report = check_compatibility(reference, tm)
                if not report.compatible:
                    problems.append(f"{run.run_id}#{snap.index}: {report.summary()}")
        if problems:
            for p in problems:
                print(p, file=sys.stderr)
            raise ValidationError(f"{len(problems)} snapshots incompatible with the pool")
        lines.append(f"weights: OK ({checked} files checked)")
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def _cmd_average(args) -> int:
    maps = [load_tensormap(p, allow_nonfinite=args.allow_nonfinite) for p in args.inputs]
    result = average_checkpoints(maps, jobs=args.jobs)
    save_tensormap(result, args.out, allow_nonfinite=args.allow_nonfinite)
    print(f"averaged {len(maps)} models -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _cmd_soup(args) -> int:
    pool = _load_pool(args)
    metric = _resolve_metric(pool, args.metric)
    result = make_soup(pool, args.k, metric)
    save_tensormap(result, args.out)
    print(f"soup of top-{args.k} snapshots -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _cmd_select(args) -> int:
    pool = _load_pool(args)
    metric = _resolve_metric(pool, args.metric)
    run = pool.run(args.run)
    variant = Variant.parse(args.variant)
    model = build_variant(run, variant, metric)
    if args.weights_out:
        save_tensormap(variant_weights(run, variant, metric), args.weights_out)
    _emit(json.dumps(_model_json(model), indent=2, sort_keys=True), args.out)
    return EXIT_OK


def _cmd_best(args) -> int:
    pool = _load_pool(args)
    metric = _resolve_metric(pool, args.metric)
    variant = Variant.parse(args.variant)
    strategy = Strategy.parse(args.strategy)
    models = [build_variant(run, variant, metric) for run in pool.runs]
    if strategy is Strategy.MAX_SRC_DEV:
        chosen = max_src_dev(models)
    elif strategy is Strategy.MAX_TRG_DEV:
        chosen = max_trg_dev(models)
    else:
        raise ValidationError(
            f"strategy {strategy.value} does not select a single run; "
            "use the average/soup/protocol subcommands"
        )
    doc = _model_json(chosen)
    doc["strategy"] = strategy.value
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.out)
    return EXIT_OK


def _cmd_protocol(args) -> int:
    pool = _load_pool(args)
    metric = _resolve_metric(pool, args.metric)
    truth = QuadraticTruth.load(args.truth) if args.truth else None
    ev = make_evaluator(
        args.evaluator, pool, truth=truth, command_template=args.command, timeout=args.timeout
    )
    cfg = ProtocolConfig(
        r_max=args.r_max,
        repetitions=args.reps,
        variants=tuple(Variant.parse(v) for v in args.variants),
        strategies=tuple(Strategy.parse(s) for s in args.strategies),
        rng_seed=args.seed,
        metric=metric,
        target_splits=tuple(args.target_splits) if args.target_splits else None,
        soup_k=args.soup_k,
        nested=not args.fresh_samples,
        distinct_configs=not args.allow_shared_configs,
        jobs=args.jobs,
    )
    table = run_protocol(pool, ev, cfg)
    _emit(table.to_json(), args.out)
    return EXIT_OK


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        dim=args.dim,
        n_configs=args.configs,
        seeds_per_config=args.seeds,
        snapshots_per_run=args.snapshots,
        sigma_noise=args.sigma_noise,
        sigma_bias=args.sigma_bias,
        decay=args.decay,
        delta_src_trg=args.delta_src_trg,
        languages=args.languages,
        sigma_lang=args.sigma_lang,
        rng_seed=args.seed,
        s0=args.s0,
        curvature=args.curvature,
    )
    sp = generate(cfg)
    sp.write(args.out)
    print(
        f"{len(sp.pool)} runs, {sp.pool.num_snapshots} snapshots -> {args.out}"
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    rule = HighlightRule(baseline=args.baseline)
    if args.grid:
        if not args.manifest or not args.scores:
            raise ValidationError("--grid needs --manifest and --scores")
        pool = _load_pool(args)
        metric = _resolve_metric(pool, args.metric)
        variants = [Variant.parse(v) for v in args.variants]
        grid = grid_from_pool(pool, variants, metric)
        _emit(render_grid(grid, args.format), args.out)
        return EXIT_OK
    if not args.infile:
        raise ValidationError("--in table.json required (or use --grid)")
    table = ProtocolTable.load(args.infile)
    _emit(render(table, args.format, rule=rule), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snapsoup", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_pool_args(p, scores_required=False):
        p.add_argument("--manifest", required=True, help="pool manifest JSON")
        p.add_argument("--scores", required=scores_required, help="scores CSV/JSONL")
        p.add_argument("--metric", default=None, help="metric name (default: the pool's only metric)")

    p = sub.add_parser("validate", help="validate a pool manifest and scores")
    add_pool_args(p)
    p.add_argument("--check-weights", action="store_true", help="load every TPAK and check compatibility")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("average", help="uniform average of TPAK files")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-nonfinite", action="store_true")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=_cmd_average)

    p = sub.add_parser("soup", help="average the top-k snapshots by src-dev score")
    add_pool_args(p, scores_required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_soup)

    p = sub.add_parser("select", help="build a variant model for one run")
    add_pool_args(p, scores_required=True)
    p.add_argument("--variant", required=True, help="last | src-dev | ca | trg-dev")
    p.add_argument("--run", required=True)
    p.add_argument("--weights-out", default=None, help="also save the variant weights as TPAK")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("best", help="select the best run's variant model across the pool")
    add_pool_args(p, scores_required=True)
    p.add_argument("--strategy", required=True, help="max-src-dev | max-trg-dev")
    p.add_argument("--variant", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_best)

    p = sub.add_parser("protocol", help="run the run-by-run sampling protocol")
    add_pool_args(p)
    p.add_argument("--evaluator", default="table", help="table | synthetic | external")
    p.add_argument("--truth", default=None, help="truth JSON for the synthetic evaluator")
    p.add_argument("--command", default=None, help="external command template with {model} {split}")
    p.add_argument("--timeout", type=float, default=None, help="external command timeout (secs)")
    p.add_argument("--r-max", type=int, default=10)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", nargs="+", default=["last", "src-dev", "ca"])
    p.add_argument("--strategies", nargs="+", default=["max-src-dev", "acc-avg"])
    p.add_argument("--target-splits", nargs="+", default=None)
    p.add_argument("--soup-k", type=int, default=5)
    p.add_argument("--fresh-samples", action="store_true", help="resample per r instead of nested prefixes")
    p.add_argument("--allow-shared-configs", action="store_true", help="sample over runs, not distinct configs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_protocol)

    p = sub.add_parser("synth", help="generate a synthetic pool with ground truth")
    sd = SynthConfig()  # argparse defaults mirror the dataclass, so they cannot drift
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=sd.dim)
    p.add_argument("--configs", type=int, default=sd.n_configs)
    p.add_argument("--seeds", type=int, default=sd.seeds_per_config)
    p.add_argument("--snapshots", type=int, default=sd.snapshots_per_run)
    p.add_argument("--languages", type=int, default=sd.languages)
    p.add_argument("--seed", type=int, default=sd.rng_seed)
    p.add_argument("--sigma-noise", type=float, default=sd.sigma_noise)
    p.add_argument("--sigma-bias", type=float, default=sd.sigma_bias)
    p.add_argument("--decay", type=float, default=sd.decay)
    p.add_argument("--delta-src-trg", type=float, default=sd.delta_src_trg)
    p.add_argument("--sigma-lang", type=float, default=sd.sigma_lang)
    p.add_argument("--s0", type=float, default=sd.s0)
    p.add_argument("--curvature", type=float, default=sd.curvature)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="render a protocol table or sweep grid")
    p.add_argument("--in", dest="infile", default=None, help="protocol table JSON")
    p.add_argument("--format", default="markdown", help="markdown | csv | json")
    p.add_argument("--baseline", default="row", help="highlight baseline: row | global | per-variant")
    p.add_argument("--grid", action="store_true", help="render the full-grid table from a scored pool")
    p.add_argument("--manifest", default=None)
    p.add_argument("--scores", default=None)
    p.add_argument("--metric", default=None)
    p.add_argument("--variants", nargs="+", default=["last", "src-dev", "ca", "trg-dev"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ExternalEvaluatorError as exc:
        print(f"snapsoup: external evaluator failed: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except SnapsoupError as exc:
        print(f"snapsoup: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"snapsoup: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
