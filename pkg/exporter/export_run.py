#!/usr/bin/env python3
"""Export framework fine-tuning checkpoints into TPAK snapshot pools.

One training run is a directory of checkpoint files (``*.pt``, ``*.pth``,
``*.bin`` or ``*.ckpt``), one per saved snapshot, ordered by the last
integer in the file name (e.g. ``checkpoint-500.pt`` < ``checkpoint-1000.pt``).
Each checkpoint becomes one TPAK file with canonical (lexicographic) tensor
order, float dtypes cast to float32. A manifest fragment per run records
the hyperparameters, and all fragments in an output directory merge into a
``manifest.json`` consumable by ``snapsoup validate``.

Cross-run weight averaging is only meaningful when the task-head
parameters were initialized identically across runs; ``--check-heads``
verifies that head tensors at snapshot 1 are bit-identical across runs and
reports the max abs difference per parameter otherwise.

Usage:
    export_run.py --run-dir runs/lr2e-5_bs32_s1 --out pool/ --head-pattern 'classifier\\..*'
    export_run.py --check-heads --run-dirs runs/* --head-pattern 'classifier\\..*'

TPAK layout (little-endian): magic ``TPAK``, u32 version 1, u64 header
length, UTF-8 JSON header (tensor index with payload offsets, string meta),
then contiguous raw float32 data.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TPAK"
VERSION = 1
CHECKPOINT_SUFFIXES = (".pt", ".pth", ".bin", ".ckpt")
FRAGMENT_SUFFIX = ".fragment.json"

FLOAT_DTYPES = (torch.float16, torch.bfloat16, torch.float32, torch.float64)


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    run_dir: Path
    out_dir: Path
    run_id: str | None = None
    expected_snapshots: int = 10
    rename_rules: list[tuple[str, str]] = field(default_factory=list)
    nonfloat_policy: str = "error"  # "error" | "drop"
    head_patterns: list[str] = field(default_factory=list)
    lr: float | None = None
    batch_size: int | None = None
    seed: int | None = None


# ---------------------------------------------------------------- TPAK I/O


def write_tpak(path: Path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    index = {}
    offset = 0
    ordered = sorted(tensors)
    for name in ordered:
        arr = tensors[name]
        nbytes = 4 * arr.size
        index[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header = json.dumps(
        {"tensors": index, "meta": dict(sorted(meta.items()))},
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for name in ordered:
            fh.write(tensors[name].astype("<f4", copy=False).tobytes())


def read_tpak(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ExportError(f"{path}: not a TPAK file")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise ExportError(f"{path}: unsupported TPAK version {version}")
    hlen = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    payload = data[16 + hlen :]
    tensors = {}
    for name, info in header["tensors"].items():
        count = math.prod(info["shape"]) if info["shape"] else 1
        tensors[name] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=info["offset"]
        ).reshape(info["shape"])
    return tensors, header.get("meta", {})


# ------------------------------------------------------ checkpoint loading


def discover_snapshots(run_dir: Path) -> list[Path]:
    """Checkpoint files ordered by the last integer in their stem."""
    files = [
        p for p in run_dir.iterdir() if p.is_file() and p.suffix.lower() in CHECKPOINT_SUFFIXES
    ]

    def order_key(p: Path):
        numbers = re.findall(r"\d+", p.stem)
        return (int(numbers[-1]) if numbers else -1, p.name)

    return sorted(files, key=order_key)


def load_state_dict(path: Path) -> dict[str, torch.Tensor]:
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ExportError(f"unreadable checkpoint {path}: {exc}") from exc
    if isinstance(obj, dict):
        for key in ("state_dict", "model", "module"):
            inner = obj.get(key)
            if isinstance(inner, dict) and inner and all(
                isinstance(v, torch.Tensor) for v in inner.values()
            ):
                obj = inner
                break
    if not isinstance(obj, dict) or not all(isinstance(v, torch.Tensor) for v in obj.values()):
        raise ExportError(f"{path}: checkpoint is not a flat tensor state dict")
    return obj


def apply_renames(names: list[str], rules: list[tuple[str, str]]) -> dict[str, str]:
    """Map original -> exported names; the mapping must stay injective."""
    mapping = {}
    for name in names:
        new = name
        for pattern, repl in rules:
            new = re.sub(pattern, repl, new)
        mapping[name] = new
    seen: dict[str, str] = {}
    for old, new in mapping.items():
        if new in seen:
            raise ExportError(
                f"rename rules collide: {seen[new]!r} and {old!r} both map to {new!r}"
            )
        seen[new] = old
    return mapping


def cast_tensors(
    state: dict[str, torch.Tensor], mapping: dict[str, str], policy: str
) -> dict[str, np.ndarray]:
    out = {}
    for old, tensor in state.items():
        name = mapping[old]
        if tensor.dtype in FLOAT_DTYPES:
            out[name] = tensor.detach().to(torch.float32).cpu().numpy()
        elif policy == "drop":
            continue
        else:
            raise ExportError(
                f"tensor {old!r} has dtype {tensor.dtype}, not castable to f32 "
                "(use --drop-nonfloat to skip such tensors)"
            )
    return out


# --------------------------------------------------------------- exporting


def read_run_metadata(run_dir: Path) -> dict:
    meta_path = run_dir / "hparams.json"
    if not meta_path.is_file():
        return {}
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ExportError(f"{meta_path}: invalid JSON: {exc}") from exc


def export_run(spec: ExportSpec) -> dict:
    """Export one run directory; returns the manifest fragment."""
    if not spec.run_dir.is_dir():
        raise ExportError(f"run directory not found: {spec.run_dir}")
    files = discover_snapshots(spec.run_dir)
    if len(files) != spec.expected_snapshots:
        raise ExportError(
            f"{spec.run_dir}: expected {spec.expected_snapshots} snapshots, found {len(files)}"
        )
    run_id = spec.run_id or spec.run_dir.name
    meta = read_run_metadata(spec.run_dir)
    lr = spec.lr if spec.lr is not None else meta.get("lr", meta.get("learning_rate"))
    batch_size = spec.batch_size if spec.batch_size is not None else meta.get("batch_size")
    seed = spec.seed if spec.seed is not None else meta.get("seed")
    if lr is None or batch_size is None or seed is None:
        raise ExportError(
            f"{run_id}: hyperparameters incomplete; provide hparams.json in the run "
            "directory or pass --lr/--batch-size/--seed"
        )

    run_out = spec.out_dir / run_id
    run_out.mkdir(parents=True, exist_ok=True)
    snapshots = []
    reference_names: list[str] | None = None
    for index, path in enumerate(files, start=1):
        state = load_state_dict(path)
        mapping = apply_renames(sorted(state), spec.rename_rules)
        tensors = cast_tensors(state, mapping, spec.nonfloat_policy)
        if spec.head_patterns and index == 1:
            matched = match_heads(list(tensors), spec.head_patterns)
            if not matched:
                raise ExportError(
                    f"{run_id}: head pattern matched no parameters: {spec.head_patterns}"
                )
        names = sorted(tensors)
        if reference_names is None:
            reference_names = names
        elif names != reference_names:
            raise ExportError(
                f"{run_id}: snapshot {index} has a different parameter set than snapshot 1"
            )
        rel = f"{run_id}/snap{index:02d}.tpak"
        write_tpak(
            spec.out_dir / rel,
            tensors,
            meta={"run_id": run_id, "snapshot_index": str(index), "source": path.name},
        )
        snapshots.append({"index": index, "path": rel})

    fragment = {
        "run_id": run_id,
        "lr": float(lr),
        "batch_size": int(batch_size),
        "seed": int(seed),
        "snapshots": snapshots,
    }
    fragment_path = spec.out_dir / f"{run_id}{FRAGMENT_SUFFIX}"
    fragment_path.write_text(json.dumps(fragment, indent=2, sort_keys=True), encoding="utf-8")
    return fragment


def merge_fragments(out_dir: Path, snapshots_per_run: int) -> Path:
    """Merge every fragment in ``out_dir`` into manifest.json."""
    fragments = []
    for path in sorted(out_dir.glob(f"*{FRAGMENT_SUFFIX}")):
        fragments.append(json.loads(path.read_text(encoding="utf-8")))
    manifest = {"snapshots_per_run": snapshots_per_run, "runs": fragments}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest_path


# --------------------------------------------------------- head alignment


def match_heads(names: list[str], patterns: list[str]) -> list[str]:
    compiled = [re.compile(p) for p in patterns]
    return sorted(n for n in names if any(rx.fullmatch(n) for rx in compiled))


def check_head_alignment(run_dirs: list[Path], head_patterns: list[str]) -> dict:
    """Verify head parameters at snapshot 1 are bit-identical across runs.

    Returns a report dict with ``aligned`` and per-parameter max abs diffs
    against the first run.
    """
    if len(run_dirs) < 2:
        raise ExportError("head alignment needs at least two run directories")
    heads = []
    for run_dir in run_dirs:
        files = discover_snapshots(Path(run_dir))
        if not files:
            raise ExportError(f"{run_dir}: no checkpoints found")
        state = load_state_dict(files[0])
        tensors = {
            k: v.detach().to(torch.float32).cpu().numpy()
            for k, v in state.items()
            if v.dtype in FLOAT_DTYPES
        }
        matched = match_heads(sorted(tensors), head_patterns)
        if not matched:
            raise ExportError(f"{run_dir}: head pattern matched no parameters: {head_patterns}")
        heads.append((str(run_dir), {name: tensors[name] for name in matched}))

    ref_dir, ref = heads[0]
    parameters = {}
    aligned = True
    for name in ref:
        worst = 0.0
        for run_dir, other in heads[1:]:
            if name not in other:
                raise ExportError(f"{run_dir}: head parameter {name!r} missing")
            if other[name].shape != ref[name].shape:
                raise ExportError(
                    f"{run_dir}: head parameter {name!r} shape {other[name].shape} "
                    f"!= {ref[name].shape}"
                )
            if other[name].tobytes() != ref[name].tobytes():
                worst = max(worst, float(np.abs(other[name] - ref[name]).max()))
        if worst > 0.0:
            aligned = False
        parameters[name] = worst
    return {
        "aligned": aligned,
        "reference": ref_dir,
        "runs": [d for d, _ in heads],
        "max_abs_diff": parameters,
    }


# --------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="export_run.py", description=__doc__)
    ap.add_argument("--run-dir", type=Path, help="directory with one run's checkpoints")
    ap.add_argument("--out", type=Path, help="output pool directory")
    ap.add_argument("--run-id", default=None, help="default: run directory name")
    ap.add_argument("--expected-snapshots", type=int, default=10)
    ap.add_argument(
        "--rename",
        action="append",
        default=[],
        metavar="PATTERN=REPL",
        help="regex rename rule, may repeat (applied in order)",
    )
    ap.add_argument("--drop-nonfloat", action="store_true", help="skip non-float tensors instead of failing")
    ap.add_argument("--head-pattern", action="append", default=[], help="regex for task-head parameters")
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--batch-size", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--check-heads", action="store_true", help="compare snapshot-1 heads across --run-dirs")
    ap.add_argument("--run-dirs", nargs="+", type=Path, default=None)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.check_heads:
            if not args.run_dirs or not args.head_pattern:
                raise ExportError("--check-heads needs --run-dirs and --head-pattern")
            report = check_head_alignment(args.run_dirs, args.head_pattern)
            print(json.dumps(report, indent=2, sort_keys=True))
            return 0 if report["aligned"] else 1

        if not args.run_dir or not args.out:
            raise ExportError("--run-dir and --out are required")
        rules = []
        for rule in args.rename:
            if "=" not in rule:
                raise ExportError(f"--rename must look like PATTERN=REPL, got {rule!r}")
            pattern, repl = rule.split("=", 1)
            rules.append((pattern, repl))
        spec = ExportSpec(
            run_dir=args.run_dir,
            out_dir=args.out,
            run_id=args.run_id,
            expected_snapshots=args.expected_snapshots,
            rename_rules=rules,
            nonfloat_policy="drop" if args.drop_nonfloat else "error",
            head_patterns=args.head_pattern,
            lr=args.lr,
            batch_size=args.batch_size,
            seed=args.seed,
        )
        fragment = export_run(spec)
        manifest = merge_fragments(args.out, spec.expected_snapshots)
        print(
            f"exported {fragment['run_id']}: {len(fragment['snapshots'])} snapshots; "
            f"manifest: {manifest}"
        )
        return 0
    except ExportError as exc:
        print(f"export_run: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
