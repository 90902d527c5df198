import json
import shutil
import subprocess
import time

import numpy as np
import pytest
import torch

from export_run import (
    ExportError,
    ExportSpec,
    check_head_alignment,
    discover_snapshots,
    export_run,
    main,
    merge_fragments,
    read_tpak,
)


def make_run_dir(tmp_path, name, n_snaps=10, seed=0, head=None, lr=2e-5, bs=32, rs=1):
    """A run directory with n checkpoints of 3 named tensors + hparams.json."""
    rng = np.random.default_rng(seed)
    run_dir = tmp_path / name
    run_dir.mkdir()
    if head is None:
        head = rng.standard_normal((4, 2)).astype(np.float32)
    for step in range(1, n_snaps + 1):
        state = {
            "encoder.weight": torch.from_numpy(rng.standard_normal((3, 4)).astype(np.float32)),
            "encoder.bias": torch.from_numpy(rng.standard_normal(3).astype(np.float32)),
            "classifier.weight": torch.from_numpy(head),
        }
        torch.save(state, run_dir / f"checkpoint-{step * 100}.pt")
    (run_dir / "hparams.json").write_text(
        json.dumps({"lr": lr, "batch_size": bs, "seed": rs}), encoding="utf-8"
    )
    return run_dir


def test_discovery_orders_by_step_number(tmp_path):
    run_dir = tmp_path / "r"
    run_dir.mkdir()
    for step in (1000, 500, 2000):
        torch.save({"w": torch.zeros(1)}, run_dir / f"checkpoint-{step}.pt")
    names = [p.name for p in discover_snapshots(run_dir)]
    assert names == ["checkpoint-500.pt", "checkpoint-1000.pt", "checkpoint-2000.pt"]


def test_export_run_writes_tpaks_and_fragment(tmp_path):
    run_dir = make_run_dir(tmp_path, "lr2e-5_bs32_s1")
    out = tmp_path / "pool"
    fragment = export_run(ExportSpec(run_dir=run_dir, out_dir=out))
    assert [s["index"] for s in fragment["snapshots"]] == list(range(1, 11))
    assert fragment["lr"] == 2e-5 and fragment["batch_size"] == 32 and fragment["seed"] == 1
    tensors, meta = read_tpak(out / "lr2e-5_bs32_s1" / "snap01.tpak")
    assert sorted(tensors) == ["classifier.weight", "encoder.bias", "encoder.weight"]
    assert meta["run_id"] == "lr2e-5_bs32_s1" and meta["snapshot_index"] == "1"
    # exported values match the source checkpoint exactly
    state = torch.load(run_dir / "checkpoint-100.pt", weights_only=True)
    np.testing.assert_array_equal(tensors["encoder.weight"], state["encoder.weight"].numpy())


def test_snapshot_count_mismatch(tmp_path):
    run_dir = make_run_dir(tmp_path, "r9", n_snaps=9)
    with pytest.raises(ExportError, match="expected 10 snapshots, found 9"):
        export_run(ExportSpec(run_dir=run_dir, out_dir=tmp_path / "pool"))


def test_f16_cast_is_exact_widening(tmp_path):
    run_dir = tmp_path / "half"
    run_dir.mkdir()
    values = torch.randn(5, dtype=torch.float16)
    torch.save({"w": values}, run_dir / "snap-1.pt")
    (run_dir / "hparams.json").write_text('{"lr": 1e-5, "batch_size": 16, "seed": 1}')
    export_run(ExportSpec(run_dir=run_dir, out_dir=tmp_path / "pool", expected_snapshots=1))
    tensors, _ = read_tpak(tmp_path / "pool" / "half" / "snap01.tpak")
    np.testing.assert_array_equal(tensors["w"], values.numpy().astype(np.float32))


def test_nonfloat_tensor_policy(tmp_path):
    run_dir = tmp_path / "ints"
    run_dir.mkdir()
    torch.save({"w": torch.zeros(2), "position_ids": torch.arange(4)}, run_dir / "s1.pt")
    (run_dir / "hparams.json").write_text('{"lr": 1e-5, "batch_size": 16, "seed": 1}')
    with pytest.raises(ExportError, match="not castable"):
        export_run(ExportSpec(run_dir=run_dir, out_dir=tmp_path / "p1", expected_snapshots=1))
    export_run(
        ExportSpec(run_dir=run_dir, out_dir=tmp_path / "p2", expected_snapshots=1, nonfloat_policy="drop")
    )
    tensors, _ = read_tpak(tmp_path / "p2" / "ints" / "snap01.tpak")
    assert list(tensors) == ["w"]


def test_rename_rules_and_collision(tmp_path):
    run_dir = tmp_path / "ren"
    run_dir.mkdir()
    torch.save({"model.encoder.w": torch.zeros(2), "model.head.w": torch.ones(2)}, run_dir / "s1.pt")
    (run_dir / "hparams.json").write_text('{"lr": 1e-5, "batch_size": 16, "seed": 1}')
    export_run(
        ExportSpec(
            run_dir=run_dir, out_dir=tmp_path / "pool", expected_snapshots=1,
            rename_rules=[(r"^model\.", "")],
        )
    )
    tensors, _ = read_tpak(tmp_path / "pool" / "ren" / "snap01.tpak")
    assert sorted(tensors) == ["encoder.w", "head.w"]
    with pytest.raises(ExportError, match="collide"):
        export_run(
            ExportSpec(
                run_dir=run_dir, out_dir=tmp_path / "pool2", expected_snapshots=1,
                rename_rules=[(r"^model\.(encoder|head)\.", "x.")],
            )
        )


def test_missing_hparams_requires_flags(tmp_path):
    run_dir = tmp_path / "nohp"
    run_dir.mkdir()
    torch.save({"w": torch.zeros(1)}, run_dir / "s1.pt")
    with pytest.raises(ExportError, match="hyperparameters incomplete"):
        export_run(ExportSpec(run_dir=run_dir, out_dir=tmp_path / "pool", expected_snapshots=1))
    export_run(
        ExportSpec(
            run_dir=run_dir, out_dir=tmp_path / "pool", expected_snapshots=1,
            lr=1e-5, batch_size=64, seed=3,
        )
    )


def test_head_alignment_pass_and_flag(tmp_path):
    shared_head = np.random.default_rng(7).standard_normal((4, 2)).astype(np.float32)
    run_a = make_run_dir(tmp_path, "a", seed=1, head=shared_head)
    run_b = make_run_dir(tmp_path, "b", seed=2, head=shared_head)
    report = check_head_alignment([run_a, run_b], [r"classifier\..*"])
    assert report["aligned"]
    assert report["max_abs_diff"] == {"classifier.weight": 0.0}

    perturbed = shared_head.copy()
    perturbed[0, 0] += 0.25
    run_c = make_run_dir(tmp_path, "c", seed=3, head=perturbed)
    report = check_head_alignment([run_a, run_c], [r"classifier\..*"])
    assert not report["aligned"]
    assert report["max_abs_diff"]["classifier.weight"] == pytest.approx(0.25, abs=1e-6)


def test_head_pattern_matching_nothing_errors(tmp_path):
    run_a = make_run_dir(tmp_path, "a", seed=1)
    run_b = make_run_dir(tmp_path, "b", seed=2)
    with pytest.raises(ExportError, match="matched no parameters"):
        check_head_alignment([run_a, run_b], [r"decoder\..*"])


def test_cli_export_and_check_heads(tmp_path, capsys):
    head = np.zeros((4, 2), dtype=np.float32)
    run_a = make_run_dir(tmp_path, "runA", seed=1, head=head)
    run_b = make_run_dir(tmp_path, "runB", seed=2, head=head)
    out = tmp_path / "pool"
    for run_dir in (run_a, run_b):
        code = main(
            ["--run-dir", str(run_dir), "--out", str(out), "--head-pattern", r"classifier\..*"]
        )
        assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert {r["run_id"] for r in manifest["runs"]} == {"runA", "runB"}
    assert manifest["snapshots_per_run"] == 10

    capsys.readouterr()
    code = main(
        ["--check-heads", "--run-dirs", str(run_a), str(run_b), "--head-pattern", r"classifier\..*"]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["aligned"] and report["runs"] == [str(run_a), str(run_b)]

    code = main(["--check-heads", "--run-dirs", str(run_a), "--head-pattern", "x"])
    assert code == 2  # needs at least two runs


def test_acceptance_export_roundtrip_and_validation(tmp_path):
    """Exported pools reload with zero compatibility discrepancies and pass
    the pool validator end to end; must finish well inside 60s."""
    start = time.monotonic()
    head = np.random.default_rng(3).standard_normal((4, 2)).astype(np.float32)
    out = tmp_path / "pool"
    for name, seed, rs in (("runA", 1, 1), ("runB", 2, 2)):
        run_dir = make_run_dir(tmp_path, name, seed=seed, head=head, rs=rs)
        export_run(ExportSpec(run_dir=run_dir, out_dir=out, head_patterns=[r"classifier\..*"]))
    merge_fragments(out, 10)

    # every snapshot of every run carries the identical parameter space
    reference = None
    for tpak in sorted(out.glob("run*/snap*.tpak")):
        tensors, _ = read_tpak(tpak)
        signature = [(name, tensors[name].shape) for name in sorted(tensors)]
        if reference is None:
            reference = signature
        assert signature == reference

    snapsoup = shutil.which("snapsoup")
    assert snapsoup is not None, "snapsoup CLI not installed"
    proc = subprocess.run(
        [snapsoup, "validate", "--manifest", str(out / "manifest.json"), "--check-weights"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "2 runs, 20 snapshots" in proc.stdout
    assert "weights: OK (20 files checked)" in proc.stdout

    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    print(f"\nACCEPTANCE exporter round-trip + validation: PASS ({elapsed:.1f}s)")
