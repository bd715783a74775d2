"""
Modelos de costo de energía y memoria normalizados a la línea base fp32.

- Energía GEMM en equivalentes de MAC fp32: macs * k_a * k_b / (32 * 32).
  Con 16 bits por operando se obtiene el 25% de una multiplicación de 32 bits.
- Energía de movimiento en equivalentes de copia fp32 del modelo: bits / (32 * N).
Las dos magnitudes se reportan por separado y nunca se suman.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import pandas as pd

from .exceptions import DomainError, UsageError
from .models import Model
from .schemas import EnergyReport, LayerEnergy, MemoryReport

logger = logging.getLogger(__name__)

FP32_BITS = 32
BACKWARD_COSTING = (
    "forward: activation_bits x weight_bits; "
    "backward input-gradient: activation_bits x weight_bits; "
    "backward weight-gradient: activation_bits x gradient_bits"
)


def gemm_energy(macs: int, k_a: int, k_b: int) -> float:
    if macs < 0:
        raise DomainError(f"Número de MACs negativo: {macs}")
    for k in (k_a, k_b):
        if not 2 <= k <= FP32_BITS:
            raise DomainError(f"Bitwidth de operando {k} fuera de [2, 32]")
    return macs * (k_a * k_b) / (FP32_BITS * FP32_BITS)


def memory_report(param_counts: Mapping[str, int], bitwidths: Mapping[str, int]) -> MemoryReport:
    """Σ n_i k_i y promedio ponderado por número de parámetros"""
    total_params = sum(param_counts.values())
    if total_params < 1:
        raise DomainError("Se requiere al menos un parámetro")
    total_bits = sum(n * bitwidths[name] for name, n in param_counts.items())
    avg = total_bits / total_params
    return MemoryReport(
        total_bits=total_bits,
        total_params=total_params,
        weighted_avg_bitwidth=avg,
        normalized_vs_fp32=avg / FP32_BITS,
    )


def param_memory(model: Model) -> MemoryReport:
    return memory_report(model.parameter_counts(), model.bitwidths())


def movement_energy(bits_moved: int, total_param_count: int) -> float:
    """Normalizado para que mover una copia fp32 completa del modelo valga 1.0"""
    if bits_moved < 0:
        raise DomainError(f"Bits movidos negativos: {bits_moved}")
    if total_param_count < 1:
        raise DomainError("Se requiere al menos un parámetro")
    return bits_moved / (FP32_BITS * total_param_count)


def movement_trace(
    scheme: str,
    param_counts: Mapping[str, int],
    bitwidths: Mapping[str, int],
    shadow_bits: int = 8,
) -> List[Tuple[str, int]]:
    """
    Transferencias de parámetros de un paso de entrenamiento.
    "two_copy": lee maestro fp32 para cuantizar, lee la sombra cuantizada para el forward,
    escribe el maestro fp32 actualizado. "single_copy": lee y escribe el modelo cuantizado.
    """
    n = sum(param_counts.values())
    if scheme == "two_copy":
        return [
            ("read fp32 master", FP32_BITS * n),
            ("read quantized shadow", shadow_bits * n),
            ("write fp32 master", FP32_BITS * n),
        ]
    if scheme == "single_copy":
        bits = sum(count * bitwidths[name] for name, count in param_counts.items())
        return [("read quantized model", bits), ("write quantized model", bits)]
    raise DomainError(f"Esquema de movimiento desconocido: {scheme}")


def two_copy_movement_ratio(master_bits: float, shadow_bits: float, single_copy_bits: float) -> float:
    """Razón de energía de movimiento entre guardar maestro + sombra y guardar una sola copia"""
    if single_copy_bits <= 0:
        raise DomainError("El bitwidth de la copia única debe ser positivo")
    return (master_bits + shadow_bits) / single_copy_bits


# ==================== LIBRO DE ENERGÍA ====================

@dataclass(frozen=True)
class GemmLayer:
    """Capa con GEMM: nombre, tensor de pesos que la gobierna y MACs por muestra"""
    layer: str
    weight_param: str
    macs_per_sample: int


def gemm_layout(model: Model) -> List[GemmLayer]:
    return [
        GemmLayer(layer.name, layer.parameter_names()[0], layer.macs_per_sample)
        for layer in model.param_layers()
    ]


@dataclass(frozen=True)
class StepCost:
    layer: str
    forward: float
    backward_input: float
    backward_weight: float
    fp32: float


def step_gemm_costs(
    layout: Sequence[GemmLayer],
    batch_rows: int,
    weight_bits: Mapping[str, int],
    activation_bits: int,
    gradient_bits: int,
) -> List[StepCost]:
    costs = []
    for g in layout:
        macs = g.macs_per_sample * batch_rows
        k_w = weight_bits[g.weight_param]
        costs.append(StepCost(
            layer=g.layer,
            forward=gemm_energy(macs, activation_bits, k_w),
            backward_input=gemm_energy(macs, activation_bits, k_w),
            backward_weight=gemm_energy(macs, activation_bits, gradient_bits),
            fp32=3 * gemm_energy(macs, FP32_BITS, FP32_BITS),
        ))
    return costs


def traffic_bits(param_counts: Mapping[str, int], bitwidths: Mapping[str, int]) -> int:
    return sum(n * bitwidths[name] for name, n in param_counts.items())


class EnergyLedger:
    """
    Acumulador ordenado por step. El orden de suma es fijo (steps crecientes,
    capas en orden del modelo) para que la reconstrucción desde el historial sea exacta.
    """

    def __init__(self, total_param_count: int, layers: Sequence[str] = ()):
        if total_param_count < 1:
            raise DomainError("Se requiere al menos un parámetro")
        self.total_param_count = total_param_count
        self.gemm_energy = 0.0
        self.forward_gemm = 0.0
        self.backward_gemm = 0.0
        self.fp32_gemm = 0.0
        self.movement_energy = 0.0
        self.per_layer: Dict[str, LayerEnergy] = {name: LayerEnergy() for name in layers}
        self.last_step: Optional[int] = None
        self.steps = 0

    def record_step(self, step: int, costs: Sequence[StepCost], bits_read: int, bits_written: int) -> None:
        if self.last_step is not None and step <= self.last_step:
            raise UsageError(f"Evento de energía en step {step} después de step {self.last_step}")
        for c in costs:
            entry = self.per_layer.setdefault(c.layer, LayerEnergy())
            entry.forward += c.forward
            entry.backward_input += c.backward_input
            entry.backward_weight += c.backward_weight
            self.forward_gemm += c.forward
            self.backward_gemm += c.backward_input + c.backward_weight
            self.gemm_energy += c.forward + c.backward_input + c.backward_weight
            self.fp32_gemm += c.fp32
        self.movement_energy += movement_energy(bits_read + bits_written, self.total_param_count)
        self.last_step = step
        self.steps += 1

    def to_report(self) -> EnergyReport:
        ratio = self.gemm_energy / self.fp32_gemm if self.fp32_gemm > 0 else None
        return EnergyReport(
            gemm_fp32_mac_equiv=self.gemm_energy,
            movement_fp32_param_equiv=self.movement_energy,
            forward_only_gemm=self.forward_gemm,
            backward_gemm=self.backward_gemm,
            fp32_gemm_reference=self.fp32_gemm,
            gemm_ratio_vs_fp32=ratio,
            backward_costing=BACKWARD_COSTING,
            per_layer={name: entry.model_copy() for name, entry in self.per_layer.items()},
        )


def training_energy_report(
    history: pd.DataFrame,
    layout: Sequence[GemmLayer],
    param_counts: Mapping[str, int],
    batch_sizes: Sequence[int],
    initial_bits: int,
    activation_bits: int,
    gradient_bits: int,
    float_mode: bool = False,
) -> EnergyLedger:
    """
    Recalcula el libro de energía de una corrida a partir del historial de bitwidth.
    El forward del step s usa los bitwidths vigentes antes del tick de s; la escritura
    de parámetros usa los vigentes después del tick.
    """
    ledger = EnergyLedger(sum(param_counts.values()), [g.layer for g in layout])
    if float_mode:
        bits = {name: FP32_BITS for name in param_counts}
        activation_bits = gradient_bits = FP32_BITS
    else:
        bits = {name: initial_bits for name in param_counts}

    records = history.sort_values("step", kind="stable").itertuples(index=False) if len(history) else iter(())
    pending = next(records, None)
    for step, rows in enumerate(batch_sizes):
        bits_before = dict(bits)
        while pending is not None and pending.step <= step:
            bits[str(pending.layer)] = int(pending.bitwidth)
            pending = next(records, None)
        costs = step_gemm_costs(layout, rows, bits_before, activation_bits, gradient_bits)
        ledger.record_step(step, costs, traffic_bits(param_counts, bits_before), traffic_bits(param_counts, bits))
    return ledger
