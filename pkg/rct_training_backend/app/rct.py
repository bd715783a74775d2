"""
Controlador RCT: métrica Gavg por tensor, política de ajuste de bitwidth y
el paso de entrenamiento con un único modelo cuantizado.
"""
from typing import Dict, Iterable, List, Mapping, Optional, Tuple
import logging

import numpy as np
import pandas as pd

from .config import settings
from .exceptions import DomainError, InvalidInputError, UsageError
from .models import Model, Tensor, backward, cross_entropy, forward
from .quant import QuantizedTensor, apply_update, centered_params, dequantize, epsilon, quantize, refresh_params
from .schemas import HistoryRecord, LayerStats, LossReduction, PolicyConfig, RoundingMode

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", "layer", "bitwidth", "gavg"]


class BitwidthHistory:
    """Registros (step, layer, bitwidth, gavg) en orden de ticks"""

    def __init__(self, records: Optional[Iterable[HistoryRecord]] = None):
        self.records: List[HistoryRecord] = []
        for record in records or []:
            self.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.step < self.records[-1].step:
            raise UsageError(f"Registro en step {record.step} posterior a step {self.records[-1].step}")
        self.records.append(record)

    def last_bitwidths(self) -> Dict[str, int]:
        last: Dict[str, int] = {}
        for record in self.records:
            last[record.layer] = record.bitwidth
        return last

    def ticks(self) -> List[int]:
        return sorted({record.step for record in self.records})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.records], columns=HISTORY_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "BitwidthHistory":
        return cls(
            HistoryRecord(step=int(row.step), layer=str(row.layer), bitwidth=int(row.bitwidth), gavg=float(row.gavg))
            for row in frame.itertuples(index=False)
        )


def compute_gavg(grads: Tensor, eps: float) -> float:
    """Gavg = (1/N) Σ |g / ε|; el learning rate no participa"""
    if not eps > 0:
        raise DomainError(f"ε debe ser positivo, recibido {eps}")
    g = np.asarray(grads, dtype=np.float64)
    if g.size == 0:
        raise InvalidInputError("Gradiente vacío")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("Gradiente con NaN o infinitos")
    return float(np.mean(np.abs(g / eps)))


def collect_layer_stats(model: Model, grads: Mapping[str, Tensor]) -> List[LayerStats]:
    stats = []
    for name, qt in model.parameters().items():
        eps = epsilon(qt)
        stats.append(LayerStats(
            layer_name=name,
            gavg=compute_gavg(grads[name], eps),
            bitwidth=qt.bitwidth,
            n_params=qt.size,
            epsilon=eps,
        ))
    return stats


def adjust_bitwidth(stats: List[LayerStats], cfg: PolicyConfig) -> List[int]:
    """Política por capa: +1 bit bajo t_min, -1 bit sobre t_max, a lo sumo un paso por tick"""
    if not stats:
        raise DomainError("Se requiere al menos una capa")
    new_bits = []
    for s in stats:
        k = s.bitwidth
        if s.gavg < cfg.t_min and k < cfg.k_max:
            k += 1
        elif s.gavg > cfg.t_max and k > cfg.k_min:
            k -= 1
        new_bits.append(k)
    return new_bits


def _coverage_drifted(real: Tensor, qt, fraction: float) -> bool:
    """True si el rango vivo dejó sin usar más de `fraction` del rango de la grilla en algún extremo"""
    lo_g, hi_g = qt.params.range_lo, qt.params.range_hi
    span = hi_g - lo_g
    return (float(real.min()) - lo_g) > fraction * span or (hi_g - float(real.max())) > fraction * span


def _tick_refresh(
    qt: QuantizedTensor,
    k: int,
    grads: Tensor,
    rounding: Optional[RoundingMode],
    rng: Optional[np.random.Generator],
) -> QuantizedTensor:
    """
    Recuantiza a k bits con (S, Z) recalculados del rango vivo.
    Un tensor de valor único recibe una grilla centrada de semiancho max(|v|, mean|g|)
    para que un paso de actualización quepa en ella.
    """
    real = dequantize(qt)
    lo, hi = float(real.min()), float(real.max())
    if hi > lo:
        return refresh_params(qt, k, rounding, rng)
    half_width = max(abs(lo), float(np.mean(np.abs(grads))))
    return quantize(real, centered_params(lo, half_width, k), RoundingMode.nearest())


def policy_tick(
    model: Model,
    grads: Mapping[str, Tensor],
    history: BitwidthHistory,
    cfg: PolicyConfig,
    step: int,
    *,
    rounding: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
    adjust: bool = True,
) -> Tuple[Model, BitwidthHistory]:
    """
    1. Gavg por tensor con el ε actual
    2. Ajuste de bitwidth
    3. Recuantización + refresco de (S, Z) en los tensores que cambiaron, derivaron o tienen valor único
    4. Registro en el historial
    Con adjust=False solo se evalúa y registra (bitwidth fijo).
    """
    stats = collect_layer_stats(model, grads)
    new_bits = adjust_bitwidth(stats, cfg) if adjust else [s.bitwidth for s in stats]
    params = model.parameters()

    for s, k in zip(stats, new_bits):
        if s.gavg == 0:
            logger.info(f"Gradiente nulo en {s.layer_name} (step {step}): Gavg = 0")
        if adjust:
            qt = params[s.layer_name]
            real = dequantize(qt)
            if k != s.bitwidth:
                logger.info(f"Step {step}: {s.layer_name} {s.bitwidth} -> {k} bits (Gavg={s.gavg:.4g})")
                model.set_parameter(s.layer_name, _tick_refresh(qt, k, grads[s.layer_name], rounding, rng))
            elif real.max() == real.min():
                logger.debug(f"Step {step}: grilla centrada para {s.layer_name} (valor único)")
                model.set_parameter(s.layer_name, _tick_refresh(qt, k, grads[s.layer_name], rounding, rng))
            elif _coverage_drifted(real, qt, settings.refresh_drift_fraction):
                logger.debug(f"Step {step}: refresco de (S, Z) en {s.layer_name} por deriva de cobertura")
                model.set_parameter(s.layer_name, _tick_refresh(qt, k, grads[s.layer_name], rounding, rng))
        history.append(HistoryRecord(step=step, layer=s.layer_name, bitwidth=k, gavg=s.gavg))
    return model, history


def apply_updates(
    model: Model,
    grads: Mapping[str, Tensor],
    lr: float,
    rounding: RoundingMode,
    rng: Optional[np.random.Generator] = None,
) -> Model:
    for name, qt in model.parameters().items():
        model.set_parameter(name, apply_update(qt, grads[name], lr, rounding, rng))
    return model


def train_step(
    model: Model,
    batch: Tensor,
    targets,
    lr: float,
    cfg: PolicyConfig,
    step: int,
    history: BitwidthHistory,
    *,
    rounding: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
    adjust: bool = True,
    reduction: LossReduction = LossReduction.MEAN,
    activation_bits: int = 8,
    update_before_adjust: bool = False,
) -> Tuple[Model, float, BitwidthHistory]:
    """
    forward → backward → tick de política (si step % interval == 0) → actualización.
    Con update_before_adjust el paso se regula con el ε previo al ajuste.
    """
    if lr < 0:
        raise DomainError(f"Learning rate negativo: {lr}")
    rounding = rounding or RoundingMode.stochastic(seed=0)
    interval = cfg.interval or 1

    # 1. Forward y pérdida
    logits, cache = forward(model, batch, activation_bits=activation_bits)
    loss = cross_entropy(logits, targets, reduction)

    # 2. Backward
    grads = backward(model, cache, targets, reduction)
    del cache

    on_tick = step % interval == 0

    # 3. Tick y actualización en el orden configurado
    if update_before_adjust:
        if lr > 0:
            apply_updates(model, grads, lr, rounding, rng)
        if on_tick:
            model, history = policy_tick(model, grads, history, cfg, step, rounding=rounding, rng=rng, adjust=adjust)
    else:
        if on_tick:
            model, history = policy_tick(model, grads, history, cfg, step, rounding=rounding, rng=rng, adjust=adjust)
        if lr > 0:
            apply_updates(model, grads, lr, rounding, rng)
    return model, loss, history
