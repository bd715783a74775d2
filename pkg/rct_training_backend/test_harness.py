#!/usr/bin/env python3
"""
Tests for run orchestration: artifacts, determinism, history/report
consistency and the paired-run comparisons against float and fixed-k training.
"""

from pathlib import Path
from unittest import mock
import json
import statistics
import struct
import tempfile

import numpy as np

from app.config import settings
from app.datasets import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from app.exceptions import DomainError
from app.harness import batch_schedule, load_dataset, resolve_interval, run, run_with_history
from app.schemas import RunMeta, RunReport, TrainConfig
from app import storage

CONFIGS = Path(__file__).parent / "configs"


def _toy(**update) -> TrainConfig:
    base = TrainConfig.model_validate_json((CONFIGS / "toy.json").read_text(encoding="utf-8"))
    return TrainConfig.model_validate({**base.model_dump(), **update})


def _median_over_seeds(fn, seeds=range(5)):
    return statistics.median(fn(seed) for seed in seeds)


# ==================== CALENDARIO ====================

def test_schedule_and_interval():
    assert batch_schedule(10, 4, 2) == [4, 4, 2, 4, 4, 2]
    assert batch_schedule(10, 4, 0) == []
    assert resolve_interval(_toy(), 1600) == 5
    assert resolve_interval(_toy(batch_size=1600), 1600) == 1
    assert resolve_interval(_toy(policy={"interval": 7}), 1600) == 7


def test_config_validation():
    for update in ({"batch_size": 5000}, {"initial_bitwidth": 40}, {"lr": 0.0},
                   {"policy": {"k_min": 10, "k_max": 12}}):
        try:
            _toy(**update)
            assert False, f"se esperaba error de validación para {update}"
        except ValueError:
            pass
    # con la política apagada el bitwidth inicial no necesita estar en [k_min, k_max]
    _toy(mode="fixed", policy={"k_min": 10, "k_max": 12})


def test_input_shape_mismatch():
    config = _toy(dataset={"kind": "synthetic", "n_features": 5, "n_samples": 2000})
    try:
        load_dataset(config)
        assert False, "se esperaba DomainError"
    except DomainError:
        pass


# ==================== CORRIDAS ====================

def test_empty_run_reports_initial_bitwidths():
    report = run(_toy(epochs=0, initial_bitwidth=6))
    assert report.steps == 0 and report.final_loss is None
    assert set(report.per_layer_bitwidth.values()) == {6}
    assert report.weighted_avg_bitwidth == 6.0
    assert report.energy.gemm_fp32_mac_equiv == 0.0


def test_dead_policy_keeps_bitwidth():
    result = run_with_history(_toy(epochs=2, policy={"t_min": 0.0, "t_max": float("inf")}))
    frame = result.history.to_frame()
    assert len(frame) > 0
    assert (frame["bitwidth"] == 8).all()
    assert set(result.report.per_layer_bitwidth.values()) == {8}


def test_artifacts_and_schemas():
    print("🔧 artefactos de una corrida")
    config = _toy(epochs=2)
    with tempfile.TemporaryDirectory() as tmp:
        report = run(config, tmp)
        paths = storage.run_paths(tmp)
        raw = json.loads(paths["report"].read_text(encoding="utf-8"))
        for key in ("config", "final_accuracy", "per_layer_bitwidth", "weighted_avg_bitwidth",
                    "energy", "memory", "seed"):
            assert key in raw, key
        for key in ("gemm_fp32_mac_equiv", "movement_fp32_param_equiv", "forward_only_gemm"):
            assert key in raw["energy"], key
        for key in ("total_bits", "weighted_avg_bitwidth", "normalized_vs_fp32"):
            assert key in raw["memory"], key
        assert "wall_clock_seconds" not in raw

        assert RunReport.model_validate_json(paths["report"].read_text(encoding="utf-8")) == report
        meta = storage.read_run_meta(paths["meta"])
        assert isinstance(meta, RunMeta) and meta.wall_clock_seconds >= 0

        history_bytes = paths["history"].read_bytes()
        assert history_bytes.startswith(b"step,layer,bitwidth,gavg\n")
        assert b"\r\n" not in history_bytes
        frame = storage.read_history_frame(paths["history"])
        assert len(frame) > 0

        final = (Path(tmp) / settings.final_bitwidth_file).read_text(encoding="utf-8").splitlines()
        assert final[0] == "layer,n_params,bitwidth"
        assert len(final) == 1 + len(report.per_layer_bitwidth)
    print("  ✅ report.json, bitwidth_history.csv, bitwidth_final.csv, run_meta.json")


def test_history_round_trips_full_precision():
    with tempfile.TemporaryDirectory() as tmp:
        result = run_with_history(_toy(epochs=1), tmp)
        reread = storage.read_history_csv(storage.run_paths(tmp)["history"])
    assert [r.gavg for r in reread.records] == [r.gavg for r in result.history.records]
    assert [r.layer for r in reread.records] == [r.layer for r in result.history.records]


def test_history_matches_final_bitwidths():
    for seed in (0, 1):
        result = run_with_history(_toy(epochs=2, seed=seed))
        assert result.history.last_bitwidths() == result.report.per_layer_bitwidth


def test_runs_are_byte_identical():
    """Same config and seed give identical report.json and bitwidth_history.csv"""
    config = _toy(epochs=2, seed=11)
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        run(config, a)
        run(config, b)
        for name in (settings.report_file, settings.history_file, settings.final_bitwidth_file):
            assert (Path(a) / name).read_bytes() == (Path(b) / name).read_bytes(), name
    print("  ✅ corridas deterministas byte a byte")


def test_history_flushed_on_failure():
    config = _toy(epochs=1)
    with tempfile.TemporaryDirectory() as tmp:
        with mock.patch("app.harness.accuracy", side_effect=RuntimeError("fallo de evaluación")):
            try:
                run(config, tmp)
                assert False, "se esperaba RuntimeError"
            except RuntimeError:
                pass
        paths = storage.run_paths(tmp)
        assert paths["history"].exists()
        assert not paths["report"].exists()


def test_idx_dataset_run():
    rng = np.random.default_rng(0)
    n = 40
    labels = np.arange(n) % 2
    pixels = np.where(labels[:, None] == 1, 200, 30) + rng.integers(0, 20, size=(n, 4))
    with tempfile.TemporaryDirectory() as tmp:
        img_path, lbl_path = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
        img_path.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, 2, 2) + bytes(pixels.astype(np.uint8).ravel().tolist()))
        lbl_path.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + bytes(labels.astype(np.uint8).tolist()))
        config = TrainConfig.model_validate({
            "dataset": {"kind": "idx", "images": str(img_path), "labels": str(lbl_path)},
            "model": {"input_shape": [1, 2, 2], "layers": [
                {"kind": "flatten"},
                {"kind": "dense", "name": "fc", "in_features": 4, "out_features": 2},
            ]},
            "lr": 0.5, "batch_size": 8, "epochs": 20,
        })
        report = run(config)
    assert report.steps == 20 * 4
    assert report.final_accuracy.train >= 0.9


# ==================== COMPARACIONES MULTI-SEMILLA ====================

def test_float_baseline_anchor():
    """4 classes, noise 0.5: the float MLP reaches at least 95% test accuracy"""
    config = _toy(mode="float", dataset={"kind": "synthetic", "noise": 0.5})
    report = run(config)
    assert set(report.per_layer_bitwidth.values()) == {32}
    assert report.final_accuracy.test >= 0.95


def test_higher_tmin_keeps_more_bits():
    high = _median_over_seeds(lambda s: run(_toy(seed=s)).weighted_avg_bitwidth)
    low = _median_over_seeds(lambda s: run(_toy(seed=s, policy={"t_min": 0.1})).weighted_avg_bitwidth)
    assert high >= low, (high, low)
    print(f"  ✅ bitwidth promedio t_min=1.0: {high:.3f} >= t_min=0.1: {low:.3f}")


def test_rct_matches_float_training():
    """RCT at t_min=1.0, k_init=8 lands within 3 points of float SGD (5-seed medians)"""
    rct = _median_over_seeds(lambda s: run(_toy(seed=s)).final_accuracy.test)
    flt = _median_over_seeds(lambda s: run(_toy(seed=s, mode="float")).final_accuracy.test)
    assert rct >= flt - 0.03, (rct, flt)
    print(f"  ✅ RCT {rct:.4f} vs float {flt:.4f}")


def test_fixed_low_precision_underperforms_rct():
    rct_reports = [run(_toy(seed=s)) for s in range(5)]
    fixed = _median_over_seeds(lambda s: run(_toy(seed=s, mode="fixed", initial_bitwidth=4)).final_accuracy.test)
    rct = statistics.median(r.final_accuracy.test for r in rct_reports)
    assert fixed <= rct + 0.01, (fixed, rct)
    assert statistics.median(r.weighted_avg_bitwidth for r in rct_reports) <= 16
    print(f"  ✅ k=4 fijo {fixed:.4f} <= RCT {rct:.4f}")


if __name__ == "__main__":
    print("🧪 TESTS DEL HARNESS")
    print("=" * 60)
    test_schedule_and_interval()
    test_config_validation()
    test_input_shape_mismatch()
    test_empty_run_reports_initial_bitwidths()
    test_dead_policy_keeps_bitwidth()
    test_artifacts_and_schemas()
    test_history_round_trips_full_precision()
    test_history_matches_final_bitwidths()
    test_runs_are_byte_identical()
    test_history_flushed_on_failure()
    test_idx_dataset_run()
    test_float_baseline_anchor()
    test_higher_tmin_keeps_more_bits()
    test_rct_matches_float_training()
    test_fixed_low_precision_underperforms_rct()
    print("\n✅ Todos los tests del harness pasaron")
