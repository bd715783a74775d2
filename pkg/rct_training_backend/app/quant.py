"""
Representación en punto fijo de los parámetros.

Cada tensor guarda códigos enteros q en [0, 2^k - 1] y un único par (S, Z):
el valor real es r = S(q - Z). La resolución ε de un tensor es su escala S.
"""
from dataclasses import dataclass
from typing import Dict, Optional
import logging
import math

import numpy as np
import numpy.typing as npt

from .config import settings
from .exceptions import DomainError, InvalidInputError
from .schemas import QuantParams, RoundingKind, RoundingMode

logger = logging.getLogger(__name__)

MIN_BITWIDTH = 2
MAX_BITWIDTH = 32

RealArray = npt.NDArray[np.float64]

# Un generador por semilla para el redondeo estocástico sin generador explícito
_ROUNDING_STREAMS: Dict[int, np.random.Generator] = {}


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Códigos enteros + QuantParams; única forma persistente de los pesos"""
    codes: npt.NDArray[np.int64]
    params: QuantParams

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() > self.params.qmax):
            raise DomainError(f"Códigos fuera de [0, {self.params.qmax}] para k={self.params.bitwidth}")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def size(self) -> int:
        return int(self.codes.size)

    @property
    def bitwidth(self) -> int:
        return self.params.bitwidth


def _check_bitwidth(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not MIN_BITWIDTH <= k <= MAX_BITWIDTH:
        raise DomainError(f"Bitwidth {k} fuera de [{MIN_BITWIDTH}, {MAX_BITWIDTH}]")


def _as_real_array(values, allow_empty: bool = False) -> RealArray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0 and not allow_empty:
        raise InvalidInputError("Se requiere al menos un valor")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Los valores contienen NaN o infinitos")
    return arr


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def grid_params(lo: float, hi: float, k: int) -> QuantParams:
    """Parámetros afines cuyo código 0 cae en lo y cuyo código 2^k - 1 cae en hi"""
    _check_bitwidth(k)
    qmax = (1 << k) - 1
    if hi > lo:
        scale = (hi - lo) / qmax
        return QuantParams(scale=scale, zero_point=_round_half_up(-lo / scale), bitwidth=k)

    # Rango nulo: ε = 0 según la definición, se usa scale_floor y el valor queda en el código central
    scale = settings.scale_floor
    logger.debug(f"Rango degenerado en {lo!r} con k={k}; usando scale_floor={scale:.3e}")
    mid = 1 << (k - 1)
    return QuantParams(scale=scale, zero_point=mid - _round_half_up(lo / scale), bitwidth=k)


def centered_params(value: float, half_width: float, k: int) -> QuantParams:
    """
    Grilla de ancho ≈ 2·half_width con `value` exactamente en el código central 2^(k-1).
    Para tensores de valor único, cuyo rango vivo no define una escala.
    Si |value| < ε/2 el valor cae en cero.
    """
    _check_bitwidth(k)
    qmax = (1 << k) - 1
    mid = 1 << (k - 1)
    half_width = max(half_width, settings.scale_floor * mid)
    base = 2 * half_width / qmax
    n = _round_half_up(abs(value) / base)
    if n == 0:
        return QuantParams(scale=base, zero_point=mid, bitwidth=k)
    return QuantParams(scale=abs(value) / n, zero_point=mid - int(math.copysign(n, value)), bitwidth=k)


def compute_params(values, k: int) -> QuantParams:
    """
    Escala y punto cero para un tensor a k bits.
    scale = (max - min) / (2^k - 1), que coincide con la resolución ε del tensor.
    """
    _check_bitwidth(k)
    arr = _as_real_array(values)
    return grid_params(float(arr.min()), float(arr.max()), k)


def rounding_stream(mode: RoundingMode) -> np.random.Generator:
    """
    Generador para redondeo estocástico sin generador explícito. Con semilla es
    compartido y avanza con cada llamada; sin semilla es uno nuevo por llamada.
    """
    if mode.seed is None:
        return np.random.default_rng()
    if mode.seed not in _ROUNDING_STREAMS:
        _ROUNDING_STREAMS[mode.seed] = np.random.default_rng(mode.seed)
    return _ROUNDING_STREAMS[mode.seed]


def reset_rounding_streams() -> None:
    """Reinicia los generadores por semilla (misma secuencia de llamadas, mismos sorteos)"""
    _ROUNDING_STREAMS.clear()


def round_codes(x: RealArray, mode: RoundingMode, rng: Optional[np.random.Generator] = None) -> RealArray:
    """
    Redondea posiciones reales en la grilla de códigos.
    El modo estocástico usa el generador del llamador o, sin él, rounding_stream(mode).
    """
    x = np.asarray(x, dtype=np.float64)
    if mode.kind == RoundingKind.NEAREST:
        return np.floor(x + 0.5)
    if mode.kind == RoundingKind.FLOOR:
        return np.floor(x)

    generator = rng if rng is not None else rounding_stream(mode)
    lower = np.floor(x)
    frac = x - lower
    return lower + (generator.random(x.shape) < frac)


def quantize(
    values,
    params: QuantParams,
    mode: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
) -> QuantizedTensor:
    """code = clamp(round_mode(value / S + Z), 0, 2^k - 1)"""
    arr = _as_real_array(values, allow_empty=True)
    mode = mode or RoundingMode.nearest()
    positions = arr / params.scale + params.zero_point
    codes = np.clip(round_codes(positions, mode, rng), 0, params.qmax)
    return QuantizedTensor(codes=codes.astype(np.int64), params=params)


def dequantize(qt: QuantizedTensor) -> RealArray:
    """r = S(q - Z), sin redondeo adicional"""
    return qt.params.scale * (qt.codes - qt.params.zero_point).astype(np.float64)


def epsilon(qt: QuantizedTensor) -> float:
    return qt.params.scale


def requantize(
    qt: QuantizedTensor,
    new_k: int,
    mode: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
) -> QuantizedTensor:
    """
    Migra un tensor a new_k bits conservando el rango real de su grilla actual
    [S(0 - Z), S(2^k - 1 - Z)]. La deriva por elemento es a lo sumo max(ε viejo, ε nuevo).
    """
    _check_bitwidth(new_k)
    old = qt.params
    if new_k == old.bitwidth:
        params = old
    else:
        new_qmax = (1 << new_k) - 1
        # Z' = round(Z * qmax' / qmax) en aritmética entera exacta
        zero_point = (2 * old.zero_point * new_qmax + old.qmax) // (2 * old.qmax)
        params = QuantParams(scale=old.scale * old.qmax / new_qmax, zero_point=zero_point, bitwidth=new_k)
    return quantize(dequantize(qt), params, mode, rng)


def refresh_params(
    qt: QuantizedTensor,
    k: int,
    mode: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
) -> QuantizedTensor:
    """Recalcula (S, Z) desde el min/max vivo del tensor y recuantiza a k bits"""
    real = dequantize(qt)
    return quantize(real, compute_params(real, k), mode, rng)


def apply_update(
    qt: QuantizedTensor,
    grads,
    lr: float,
    mode: Optional[RoundingMode] = None,
    rng: Optional[np.random.Generator] = None,
) -> QuantizedTensor:
    """
    Actualización regulada por ε: los códigos bajan round_mode(lr * g / ε) pasos
    y se saturan en [0, 2^k - 1]. S y Z no cambian.
    """
    g = _as_real_array(grads, allow_empty=True)
    if g.shape != qt.shape:
        raise DomainError(f"Gradiente con forma {g.shape} no coincide con el tensor {qt.shape}")
    if lr < 0 or not math.isfinite(lr):
        raise DomainError(f"Learning rate inválido: {lr}")
    mode = mode or RoundingMode.stochastic(seed=0)

    steps = round_codes((lr * g) / qt.params.scale, mode, rng)
    codes = np.clip(qt.codes.astype(np.float64) - steps, 0, qt.params.qmax)
    return QuantizedTensor(codes=codes.astype(np.int64), params=qt.params)
