#!/usr/bin/env python3
"""
Tests de barridos multi-semilla: t_min, bitwidth inicial y tamaño de lote.
"""

from pathlib import Path
import tempfile

import pandas as pd

from app.config import settings
from app.exceptions import DomainError
from app.harness import load_dataset, spearman, sweep_batch_size, sweep_init_bitwidth, sweep_tmin, write_sweep
from app.schemas import TrainConfig

CONFIGS = Path(__file__).parent / "configs"
SEEDS = [0, 1, 2, 3, 4]


def _load(name: str, **update) -> TrainConfig:
    base = TrainConfig.model_validate_json((CONFIGS / name).read_text(encoding="utf-8"))
    return TrainConfig.model_validate({**base.model_dump(), **update})


# ==================== AUXILIARES ====================

def test_spearman_helper():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0
    assert spearman([1], [2]) == 0.0
    assert spearman([], []) == 0.0


def test_empty_sweep_rejected():
    try:
        sweep_tmin(_load("toy.json", epochs=1), [], seeds=[0])
        assert False, "se esperaba DomainError"
    except DomainError:
        pass


def test_single_value_sweep():
    result = sweep_tmin(_load("toy.json", epochs=1), [1.0], seeds=[0, 1])
    assert len(result.table) == 1
    assert int(result.table["n_seeds"].iloc[0]) == 2
    assert result.table["spearman_accuracy"].iloc[0] == 0.0
    assert len(result.runs) == 2
    assert result.runs["seed"].tolist() == [0, 1]


def test_repeated_values_give_identical_rows():
    """Same t_min twice with the same seeds: both rows are equal"""
    result = sweep_tmin(_load("toy.json", epochs=1), [0.5, 0.5], seeds=[0, 1])
    first, second = result.table.iloc[0], result.table.iloc[1]
    for column in ("accuracy", "gemm_energy", "memory", "weighted_avg_bitwidth"):
        assert first[column] == second[column], column


def test_default_seeds_follow_base_seed():
    result = sweep_init_bitwidth(_load("toy.json", epochs=0, seed=7), [8])
    assert result.runs["seed"].tolist() == [7 + i for i in range(settings.sweep_seeds)]


def test_write_sweep_outputs():
    result = sweep_batch_size(_load("toy.json", epochs=1), [32, 64], seeds=[0])
    with tempfile.TemporaryDirectory() as tmp:
        path = write_sweep(result, Path(tmp) / "sweep")
        assert path.name == settings.sweep_file
        table = pd.read_csv(path)
        runs = pd.read_csv(path.parent / settings.sweep_runs_file)
        assert list(table.columns) == ["batch_size", "final_avg_bitwidth", "final_accuracy", "n_seeds", "spearman_bitwidth"]
        assert table["batch_size"].tolist() == [32, 64]
        assert len(runs) == 2 and "test_accuracy" in runs.columns
        assert path.read_bytes().count(b"\r\n") == 0
    print("  ✅ sweep.csv y sweep_runs.csv")


# ==================== TENDENCIAS ====================

def test_tmin_tradeoff_direction():
    """Accuracy and memory weakly increase with t_min (5-seed medians)"""
    print("🔧 barrido de t_min")
    result = sweep_tmin(_load("toy.json"), [0.1, 0.5, 1.0, 10.0], seeds=SEEDS)
    table = result.table
    print(table.to_string(index=False))
    assert table["t_min"].tolist() == [0.1, 0.5, 1.0, 10.0]
    assert table["spearman_memory"].iloc[0] >= 0
    # precisión monótona salvo ruido: las medianas quedan dentro de un punto
    accuracy_range = table["accuracy"].max() - table["accuracy"].min()
    assert table["spearman_accuracy"].iloc[0] >= 0 or accuracy_range <= 0.01, table
    assert table["weighted_avg_bitwidth"].iloc[-1] >= table["weighted_avg_bitwidth"].iloc[0]
    print("  ✅ más t_min, más bits")


def test_initial_bitwidth_insensitivity():
    print("🔧 barrido de bitwidth inicial")
    result = sweep_init_bitwidth(_load("toy.json"), [4, 6, 8, 10, 12], seeds=SEEDS)
    table = result.table
    print(table.to_string(index=False))
    assert table["spread"].iloc[0] <= 0.02, table
    assert (table["n_seeds"] == len(SEEDS)).all()
    print(f"  ✅ spread {table['spread'].iloc[0]:.4f}")


def test_full_precision_start_not_worse():
    """Starting at 32 bits ends within one point of starting at 8"""
    result = sweep_init_bitwidth(_load("toy.json"), [8, 32], seeds=SEEDS)
    accuracy = dict(zip(result.table["k_init"], result.table["final_accuracy"]))
    assert accuracy[32] >= accuracy[8] - 0.01, accuracy
    print(f"  ✅ k_init=32: {accuracy[32]:.3f} vs k_init=8: {accuracy[8]:.3f}")


def test_larger_batches_lower_bitwidth():
    """Summed loss: bigger batches settle lower, full batch lowest of all"""
    print("🔧 barrido de tamaño de lote")
    config = _load("toy_batch.json")
    full_batch = len(load_dataset(config).train)
    result = sweep_batch_size(config, [8, 32, 128, full_batch], seeds=SEEDS)
    table = result.table
    print(table.to_string(index=False))
    assert table["batch_size"].tolist()[-1] == full_batch
    assert table["spearman_bitwidth"].iloc[0] <= 0, table
    bits = table["final_avg_bitwidth"]
    assert bits.iloc[-1] <= bits.iloc[:-1].min(), table
    print("  ✅ lotes grandes, menos bits")


if __name__ == "__main__":
    print("🧪 TESTS DE BARRIDOS")
    print("=" * 60)
    test_spearman_helper()
    test_empty_sweep_rejected()
    test_single_value_sweep()
    test_repeated_values_give_identical_rows()
    test_default_seeds_follow_base_seed()
    test_write_sweep_outputs()
    test_tmin_tradeoff_direction()
    test_initial_bitwidth_insensitivity()
    test_full_precision_start_not_worse()
    test_larger_batches_lower_bitwidth()
    print("\n✅ Todos los tests de barridos pasaron")
