"""
Orquestación de corridas: datos, bucle de entrenamiento RCT, artefactos y barridos.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union
import logging
import math
import time

import numpy as np
import pandas as pd

from .accounting import (
    FP32_BITS, EnergyLedger, gemm_layout, memory_report, step_gemm_costs,
    traffic_bits, training_energy_report,
)
from .config import settings
from .datasets import Dataset, generate_synthetic, load_idx_dataset
from .exceptions import DomainError
from .models import Model, accuracy, build_model, gradient_check, init_float_weights, sgd_float_step
from .rct import BitwidthHistory, train_step
from .schemas import AccuracyReport, RunMeta, RunReport, SyntheticSpec, TrainConfig, TrainMode
from . import storage

# Configurar logging
logging.basicConfig(level=settings.effective_log_level)
logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    report: RunReport
    history: BitwidthHistory
    ledger: EnergyLedger
    meta: RunMeta


@dataclass
class SweepResult:
    table: pd.DataFrame   # medianas por valor barrido
    runs: pd.DataFrame    # una fila por (valor, semilla)


# ==================== DATOS Y CALENDARIO ====================

def load_dataset(config: TrainConfig) -> Dataset:
    spec = config.dataset
    if isinstance(spec, SyntheticSpec):
        data = generate_synthetic(spec, config.test_fraction)
    else:
        data = load_idx_dataset(spec.images, spec.labels, spec.test_images, spec.test_labels,
                                config.test_fraction, config.seed)
    if data.input_shape != tuple(config.model.input_shape):
        raise DomainError(f"Los datos tienen forma {data.input_shape}, el modelo espera {tuple(config.model.input_shape)}")
    return data


def batch_schedule(n_train: int, batch_size: int, epochs: int) -> List[int]:
    """Filas de cada step de la corrida (el último lote de cada época puede ser menor)"""
    per_epoch = [min(batch_size, n_train - start) for start in range(0, n_train, batch_size)]
    return per_epoch * epochs


def resolve_interval(config: TrainConfig, n_train: int) -> int:
    """Intervalo de ticks: el configurado o ceil(steps_por_época / 10)"""
    if config.policy.interval is not None:
        return config.policy.interval
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    return max(1, math.ceil(steps_per_epoch / 10))


def _rng_streams(config: TrainConfig):
    init_seq, shuffle_seq, round_seq = np.random.SeedSequence(config.seed).spawn(3)
    round_rng = (
        np.random.default_rng(config.rounding.seed)
        if config.rounding.seed is not None
        else np.random.default_rng(round_seq)
    )
    return np.random.default_rng(init_seq), np.random.default_rng(shuffle_seq), round_rng


# ==================== CORRIDA ====================

def run_with_history(config: TrainConfig, output_dir: Optional[Union[str, Path]] = None) -> RunResult:
    """
    Bucle completo de entrenamiento RCT. Con output_dir escribe report.json,
    bitwidth_history.csv, bitwidth_final.csv y run_meta.json; el historial
    se escribe aunque la corrida falle.
    """
    started_at = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    float_mode = config.mode == TrainMode.FLOAT
    logger.info(f"Iniciando corrida modo={config.mode.value} seed={config.seed} épocas={config.epochs}")

    # 1. Datos y modelo
    data = load_dataset(config)
    init_rng, shuffle_rng, round_rng = _rng_streams(config)
    float_weights = init_float_weights(config.model, init_rng)
    model = build_model(config.model, config.initial_bitwidth, round_rng,
                        float_weights=float_weights, rounding=config.init_rounding)
    if not float_mode:
        # un único modelo cuantizado: los pesos iniciales en float no sobreviven
        float_weights = None

    # 2. Calendario y contabilidad
    n_train = len(data.train)
    policy = config.policy.model_copy(update={"interval": resolve_interval(config, n_train)})
    counts = model.parameter_counts()
    layout = gemm_layout(model)
    ledger = EnergyLedger(sum(counts.values()), [g.layer for g in layout])
    act_bits, grad_bits = (FP32_BITS, FP32_BITS) if float_mode else (config.activation_bits, config.gradient_bits)

    def current_bits() -> Dict[str, int]:
        return {name: FP32_BITS for name in counts} if float_mode else model.bitwidths()

    history = BitwidthHistory()
    step = 0
    loss: Optional[float] = None
    paths = storage.run_paths(storage.ensure_dir(output_dir)) if output_dir is not None else None

    # 3. Bucle de entrenamiento
    try:
        for epoch in range(config.epochs):
            perm = shuffle_rng.permutation(n_train)
            for start in range(0, n_train, config.batch_size):
                idx = perm[start:start + config.batch_size]
                xb, yb = data.train.x[idx], data.train.y[idx]
                bits_before = current_bits()
                if float_mode:
                    loss = sgd_float_step(model, float_weights, xb, yb, config.lr, config.loss_reduction)
                else:
                    model, loss, history = train_step(
                        model, xb, yb, config.lr, policy, step, history,
                        rounding=config.rounding,
                        rng=round_rng,
                        adjust=config.mode == TrainMode.RCT,
                        reduction=config.loss_reduction,
                        activation_bits=config.activation_bits,
                        update_before_adjust=config.update_before_adjust,
                    )
                bits_after = current_bits()
                ledger.record_step(
                    step,
                    step_gemm_costs(layout, len(idx), bits_before, act_bits, grad_bits),
                    traffic_bits(counts, bits_before),
                    traffic_bits(counts, bits_after),
                )
                step += 1
            logger.info(f"Época {epoch + 1}/{config.epochs}: loss={loss:.4f}")
    finally:
        if paths is not None:
            storage.write_history_csv(history, paths["history"])

    # 4. Evaluación y reporte
    if float_mode:
        eval_kwargs = dict(weights=float_weights, quantize_activations=False)
    else:
        eval_kwargs = dict(activation_bits=config.activation_bits)
    final_bits = current_bits()
    memory = memory_report(counts, final_bits)
    report = RunReport(
        config=config,
        final_accuracy=AccuracyReport(
            train=accuracy(model, data.train.x, data.train.y, **eval_kwargs),
            test=accuracy(model, data.test.x, data.test.y, **eval_kwargs),
        ),
        final_loss=loss,
        per_layer_bitwidth=final_bits,
        weighted_avg_bitwidth=memory.weighted_avg_bitwidth,
        energy=ledger.to_report(),
        memory=memory,
        steps=step,
        seed=config.seed,
    )
    meta = RunMeta(started_at=started_at, wall_clock_seconds=time.perf_counter() - t0)
    logger.info(
        f"Corrida terminada en {meta.wall_clock_seconds:.2f}s: test={report.final_accuracy.test:.4f} "
        f"bitwidth promedio={report.weighted_avg_bitwidth:.3f}"
    )

    if paths is not None:
        storage.write_report_json(report, paths["report"])
        storage.write_final_bitwidth_csv(counts, final_bits, paths["final_bitwidth"])
        storage.write_run_meta(meta, paths["meta"])
    return RunResult(report=report, history=history, ledger=ledger, meta=meta)


def run(config: TrainConfig, output_dir: Optional[Union[str, Path]] = None) -> RunReport:
    return run_with_history(config, output_dir).report


def _structure(config: TrainConfig) -> Model:
    """Modelo con la estructura de la configuración (los valores de los pesos no importan)"""
    return build_model(config.model, config.initial_bitwidth, np.random.default_rng(0))


def replay_energy(report: RunReport, history: pd.DataFrame) -> EnergyLedger:
    """Reconstruye el libro de energía desde el eco de configuración y el CSV de historial"""
    config = report.config
    model = _structure(config)
    schedule = batch_schedule(len(load_dataset(config).train), config.batch_size, config.epochs)
    return training_energy_report(
        history,
        gemm_layout(model),
        model.parameter_counts(),
        schedule,
        config.initial_bitwidth,
        config.activation_bits,
        config.gradient_bits,
        float_mode=config.mode == TrainMode.FLOAT,
    )


def run_gradcheck(config: TrainConfig) -> float:
    """Error relativo máximo del gradiente analítico sobre el primer lote de entrenamiento"""
    data = load_dataset(config)
    init_rng, _, round_rng = _rng_streams(config)
    model = build_model(config.model, config.initial_bitwidth, round_rng,
                        float_weights=init_float_weights(config.model, init_rng),
                        rounding=config.init_rounding)
    rows = min(config.batch_size, len(data.train))
    return gradient_check(model, data.train.x[:rows], data.train.y[:rows], reduction=config.loss_reduction)


# ==================== BARRIDOS ====================

def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Correlación de rangos; 0.0 si alguna serie es constante o hay menos de 2 puntos"""
    a = pd.Series(list(x), dtype=float).rank()
    b = pd.Series(list(y), dtype=float).rank()
    if len(a) < 2 or a.nunique() < 2 or b.nunique() < 2:
        return 0.0
    return float(a.corr(b))


def _run_configs(configs: List[TrainConfig], jobs: int) -> List[RunReport]:
    if jobs <= 1 or len(configs) <= 1:
        return [run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, configs))


def _sweep_runs(
    base: TrainConfig,
    column: str,
    values: Sequence,
    apply: Callable[[TrainConfig, object], TrainConfig],
    seeds: Optional[Sequence[int]],
    jobs: Optional[int],
) -> pd.DataFrame:
    if not values:
        raise DomainError("El barrido requiere al menos un valor")
    seeds = list(seeds) if seeds is not None else [base.seed + i for i in range(settings.sweep_seeds)]
    jobs = jobs or settings.sweep_jobs

    configs, rows = [], []
    for point, value in enumerate(values):
        swept = apply(base, value)
        for seed in seeds:
            configs.append(swept.with_overrides(seed=seed))
            rows.append({"point": point, column: value, "seed": seed})
    logger.info(f"Barrido de {column}: {len(values)} valores x {len(seeds)} semillas, {jobs} jobs")

    for row, report in zip(rows, _run_configs(configs, jobs)):
        row.update(
            test_accuracy=report.final_accuracy.test,
            train_accuracy=report.final_accuracy.train,
            weighted_avg_bitwidth=report.weighted_avg_bitwidth,
            memory=report.memory.normalized_vs_fp32,
            gemm_energy=report.energy.gemm_ratio_vs_fp32,
            movement_energy=report.energy.movement_fp32_param_equiv,
        )
    return pd.DataFrame(rows)


def _medians(runs: pd.DataFrame, column: str) -> pd.DataFrame:
    grouped = runs.groupby("point", sort=True)
    table = grouped.median(numeric_only=True).drop(columns=["seed"])
    table[column] = grouped[column].first()
    table["n_seeds"] = grouped.size()
    return table.reset_index(drop=True)


def sweep_tmin(base: TrainConfig, values: Sequence[float], seeds=None, jobs=None) -> SweepResult:
    """Compromiso precisión / recursos en función de t_min (medianas multi-semilla)"""
    runs = _sweep_runs(
        base, "t_min", [float(v) for v in values],
        lambda c, v: c.model_validate(c.model_copy(update={"policy": c.policy.model_copy(update={"t_min": v})}).model_dump()),
        seeds, jobs,
    )
    med = _medians(runs, "t_min")
    table = pd.DataFrame({
        "t_min": med["t_min"],
        "accuracy": med["test_accuracy"],
        "gemm_energy": med["gemm_energy"],
        "memory": med["memory"],
        "weighted_avg_bitwidth": med["weighted_avg_bitwidth"],
        "n_seeds": med["n_seeds"],
    })
    table["spearman_accuracy"] = spearman(table["t_min"], table["accuracy"])
    table["spearman_memory"] = spearman(table["t_min"], table["memory"])
    logger.info(f"Barrido t_min: Spearman precisión={table['spearman_accuracy'].iloc[0]:.3f} "
                f"memoria={table['spearman_memory'].iloc[0]:.3f}")
    return SweepResult(table=table, runs=runs.drop(columns=["point"]))


def sweep_init_bitwidth(base: TrainConfig, values: Sequence[int], seeds=None, jobs=None) -> SweepResult:
    """Sensibilidad de la precisión final al bitwidth inicial"""
    runs = _sweep_runs(
        base, "k_init", [int(v) for v in values],
        lambda c, v: c.model_validate(c.model_copy(update={"initial_bitwidth": v}).model_dump()),
        seeds, jobs,
    )
    med = _medians(runs, "k_init")
    table = pd.DataFrame({
        "k_init": med["k_init"],
        "final_accuracy": med["test_accuracy"],
        "weighted_avg_bitwidth": med["weighted_avg_bitwidth"],
        "n_seeds": med["n_seeds"],
    })
    table["spread"] = float(table["final_accuracy"].max() - table["final_accuracy"].min())
    logger.info(f"Barrido k_init: spread de precisión={table['spread'].iloc[0]:.4f}")
    return SweepResult(table=table, runs=runs.drop(columns=["point"]))


def sweep_batch_size(base: TrainConfig, values: Sequence[int], seeds=None, jobs=None) -> SweepResult:
    """Bitwidth promedio final en función del tamaño de lote"""
    runs = _sweep_runs(
        base, "batch_size", [int(v) for v in values],
        lambda c, v: c.model_validate(c.model_copy(update={"batch_size": v}).model_dump()),
        seeds, jobs,
    )
    med = _medians(runs, "batch_size")
    table = pd.DataFrame({
        "batch_size": med["batch_size"],
        "final_avg_bitwidth": med["weighted_avg_bitwidth"],
        "final_accuracy": med["test_accuracy"],
        "n_seeds": med["n_seeds"],
    })
    table["spearman_bitwidth"] = spearman(table["batch_size"], table["final_avg_bitwidth"])
    logger.info(f"Barrido batch_size: Spearman bitwidth={table['spearman_bitwidth'].iloc[0]:.3f}")
    return SweepResult(table=table, runs=runs.drop(columns=["point"]))


def write_sweep(result: SweepResult, output_dir: Union[str, Path]) -> Path:
    directory = storage.ensure_dir(output_dir)
    storage.write_sweep_csv(result.runs, directory / settings.sweep_runs_file)
    return storage.write_sweep_csv(result.table, directory / settings.sweep_file)
