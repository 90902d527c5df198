"""Shared helpers for building small in-memory pools."""

from __future__ import annotations

import numpy as np

from snapsoup.registry import HyperParams, Run, RunPool, Snapshot
from snapsoup.tensors import TensorMap


def make_run(
    run_id: str,
    n_snaps: int = 10,
    lr: float = 1e-5,
    bs: int = 32,
    seed: int = 1,
    weights: list[TensorMap] | None = None,
) -> Run:
    snaps = []
    for i in range(1, n_snaps + 1):
        tm = weights[i - 1] if weights is not None else None
        snaps.append(Snapshot(run_id=run_id, index=i, weights=tm))
    return Run(run_id=run_id, hparams=HyperParams(lr, bs, seed), snapshots=snaps)


def make_pool(runs: list[Run], snapshots_per_run: int | None = None) -> RunPool:
    n = snapshots_per_run if snapshots_per_run is not None else runs[0].num_snapshots
    return RunPool(runs=runs, snapshots_per_run=n)


def scalar_map(value: float, name: str = "w", meta: dict | None = None) -> TensorMap:
    return TensorMap({name: np.array([value], dtype=np.float32)}, meta=meta)


def random_map(rng: np.random.Generator, spec: dict[str, tuple[int, ...]], scale: float = 1.0) -> TensorMap:
    return TensorMap(
        {name: scale * rng.standard_normal(shape).astype(np.float32) for name, shape in spec.items()}
    )
