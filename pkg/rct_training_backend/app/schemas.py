from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Annotated, Dict, List, Literal, Optional, Union
from datetime import datetime
from pathlib import Path
from enum import Enum
import math

from .config import settings


class RCTModel(BaseModel):
    """Base común: infinitos serializados como "Infinity" para que t_max = inf sobreviva al JSON"""
    model_config = ConfigDict(ser_json_inf_nan="strings")


# Enums para valores fijos
class RoundingKind(str, Enum):
    NEAREST = "nearest"
    FLOOR = "floor"
    STOCHASTIC = "stochastic"


class LayerKind(str, Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    RELU = "relu"
    FLATTEN = "flatten"


class TrainMode(str, Enum):
    RCT = "rct"        # política de bitwidth activa
    FIXED = "fixed"    # bitwidth fijo, Gavg solo se registra
    FLOAT = "float"    # línea base SGD en punto flotante


class LossReduction(str, Enum):
    MEAN = "mean"
    SUM = "sum"        # gradientes acumulados por muestra


# ==================== SCHEMAS DE CUANTIZACIÓN ====================

class RoundingMode(RCTModel):
    model_config = ConfigDict(frozen=True)

    kind: RoundingKind = RoundingKind.NEAREST
    seed: Optional[int] = Field(default=None, ge=0, lt=2 ** 64)

    @classmethod
    def nearest(cls) -> "RoundingMode":
        return cls(kind=RoundingKind.NEAREST)

    @classmethod
    def floor(cls) -> "RoundingMode":
        return cls(kind=RoundingKind.FLOOR)

    @classmethod
    def stochastic(cls, seed: Optional[int] = None) -> "RoundingMode":
        return cls(kind=RoundingKind.STOCHASTIC, seed=seed)


class QuantParams(RCTModel):
    """Escala S, punto cero Z y bitwidth k de un tensor: r = S(q - Z)"""
    model_config = ConfigDict(frozen=True)

    scale: float = Field(gt=0, allow_inf_nan=False)
    zero_point: int
    bitwidth: int = Field(ge=2, le=32)

    @property
    def qmax(self) -> int:
        return (1 << self.bitwidth) - 1

    @property
    def range_lo(self) -> float:
        """Valor real del código 0"""
        return self.scale * (0 - self.zero_point)

    @property
    def range_hi(self) -> float:
        """Valor real del código 2^k - 1"""
        return self.scale * (self.qmax - self.zero_point)


# ==================== SCHEMAS DEL MODELO ====================

class LayerSpec(RCTModel):
    kind: LayerKind
    name: Optional[str] = None
    # Dense
    in_features: Optional[int] = Field(default=None, gt=0)
    out_features: Optional[int] = Field(default=None, gt=0)
    # Conv2D
    in_channels: Optional[int] = Field(default=None, gt=0)
    out_channels: Optional[int] = Field(default=None, gt=0)
    kernel_size: Optional[int] = Field(default=None, gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_kind_fields(self):
        if self.kind == LayerKind.DENSE and (self.in_features is None or self.out_features is None):
            raise ValueError("Una capa dense requiere in_features y out_features")
        if self.kind == LayerKind.CONV2D and None in (self.in_channels, self.out_channels, self.kernel_size):
            raise ValueError("Una capa conv2d requiere in_channels, out_channels y kernel_size")
        return self


class ModelSpec(RCTModel):
    input_shape: List[int] = Field(min_length=1)
    layers: List[LayerSpec] = Field(min_length=1)

    @field_validator("input_shape")
    def validate_input_shape(cls, v):
        if any(d <= 0 for d in v):
            raise ValueError("Todas las dimensiones de entrada deben ser positivas")
        return v


# ==================== SCHEMAS DE DATOS ====================

class SyntheticSpec(RCTModel):
    kind: Literal["synthetic"] = "synthetic"
    n_classes: int = 4
    n_features: int = 8
    n_samples: int = 2000
    noise: float = 0.5
    separation: float = 1.5   # desviación estándar de los centros por dimensión
    seed: int = Field(default=0, ge=0)


class IdxSpec(RCTModel):
    kind: Literal["idx"] = "idx"
    images: str
    labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    @model_validator(mode="after")
    def validate_test_pair(self):
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images y test_labels deben indicarse juntos")
        return self


DatasetSpec = Annotated[Union[SyntheticSpec, IdxSpec], Field(discriminator="kind")]


# ==================== SCHEMAS DE ENTRENAMIENTO ====================

class PolicyConfig(RCTModel):
    t_min: float = Field(default=1.0, ge=0)
    t_max: float = Field(default=100.0, gt=0)
    k_min: int = 2
    k_max: int = 32
    interval: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def validate_policy(self):
        if not self.t_min < self.t_max:
            raise ValueError("t_min debe ser menor que t_max")
        if not 2 <= self.k_min <= self.k_max <= 32:
            raise ValueError("Se requiere 2 <= k_min <= k_max <= 32")
        return self


class TrainConfig(RCTModel):
    dataset: DatasetSpec = Field(default_factory=SyntheticSpec)
    model: ModelSpec
    lr: float = Field(gt=0)
    batch_size: int = Field(gt=0)
    epochs: int = Field(ge=0)
    initial_bitwidth: int = Field(default=8, ge=2, le=32)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    rounding: RoundingMode = Field(default_factory=RoundingMode.stochastic)
    init_rounding: RoundingMode = Field(default_factory=RoundingMode.nearest)
    mode: TrainMode = TrainMode.RCT
    loss_reduction: LossReduction = LossReduction.MEAN
    activation_bits: int = Field(default_factory=lambda: settings.activation_bits, ge=2, le=32)
    gradient_bits: int = Field(default_factory=lambda: settings.gradient_bits, ge=2, le=32)
    update_before_adjust: bool = False
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def validate_config(self):
        if isinstance(self.dataset, SyntheticSpec) and self.batch_size > self.dataset.n_samples:
            raise ValueError("batch_size no puede superar n_samples")
        if self.mode == TrainMode.RCT and not self.policy.k_min <= self.initial_bitwidth <= self.policy.k_max:
            raise ValueError("initial_bitwidth debe estar dentro de [k_min, k_max]")
        return self

    def with_overrides(self, seed: Optional[int] = None, policy_off: bool = False) -> "TrainConfig":
        """Copia con semilla y modo sobrescritos desde la línea de comandos"""
        update = {}
        if seed is not None:
            update["seed"] = seed
        if policy_off and self.mode == TrainMode.RCT:
            update["mode"] = TrainMode.FIXED
        return self.model_validate(self.model_copy(update=update).model_dump())


class LayerStats(RCTModel):
    layer_name: str
    gavg: float = Field(ge=0)
    bitwidth: int = Field(ge=2, le=32)
    n_params: int = Field(ge=1)
    epsilon: float = Field(gt=0)


class HistoryRecord(RCTModel):
    step: int = Field(ge=0)
    layer: str
    bitwidth: int = Field(ge=2, le=32)
    gavg: float = Field(ge=0)


# ==================== SCHEMAS DE REPORTES ====================

class LayerEnergy(RCTModel):
    forward: float = 0.0
    backward_input: float = 0.0
    backward_weight: float = 0.0


class EnergyReport(RCTModel):
    gemm_fp32_mac_equiv: float
    movement_fp32_param_equiv: float
    forward_only_gemm: float
    backward_gemm: float
    fp32_gemm_reference: float
    gemm_ratio_vs_fp32: Optional[float] = None
    backward_costing: str
    per_layer: Dict[str, LayerEnergy] = Field(default_factory=dict)


class MemoryReport(RCTModel):
    total_bits: int = Field(ge=0)
    total_params: int = Field(ge=1)
    weighted_avg_bitwidth: float
    normalized_vs_fp32: float

    @field_validator("weighted_avg_bitwidth")
    def validate_avg(cls, v):
        if not 2 <= v <= 32:
            raise ValueError("El bitwidth promedio debe estar en [2, 32]")
        return v


class AccuracyReport(RCTModel):
    train: float
    test: float


class RunReport(RCTModel):
    config: TrainConfig
    final_accuracy: AccuracyReport
    final_loss: Optional[float] = None
    per_layer_bitwidth: Dict[str, int]
    weighted_avg_bitwidth: float
    energy: EnergyReport
    memory: MemoryReport
    steps: int = Field(ge=0)
    history_file: str = Field(default_factory=lambda: settings.history_file)
    seed: int

    @field_validator("final_loss")
    def validate_loss(cls, v):
        if v is not None and not math.isfinite(v):
            raise ValueError("La pérdida final debe ser finita")
        return v


class RunMeta(RCTModel):
    started_at: datetime
    wall_clock_seconds: float = Field(ge=0)


# ==================== SCHEMAS DE COMANDOS CLI ====================

class TrainCommand(RCTModel):
    kind: Literal["train"] = "train"
    config_path: Path
    output_dir: Path
    seed: Optional[int] = None
    policy_off: bool = False


class SweepTminCommand(RCTModel):
    kind: Literal["sweep-tmin"] = "sweep-tmin"
    config_path: Path
    values: List[float] = Field(min_length=1)
    output_dir: Path
    seed: Optional[int] = None
    policy_off: bool = False
    seeds: int = Field(default_factory=lambda: settings.sweep_seeds, gt=0)
    jobs: int = Field(default_factory=lambda: settings.sweep_jobs, gt=0)


class SweepInitCommand(RCTModel):
    kind: Literal["sweep-init"] = "sweep-init"
    config_path: Path
    values: List[int] = Field(min_length=1)
    output_dir: Path
    seed: Optional[int] = None
    policy_off: bool = False
    seeds: int = Field(default_factory=lambda: settings.sweep_seeds, gt=0)
    jobs: int = Field(default_factory=lambda: settings.sweep_jobs, gt=0)


class SweepBatchCommand(RCTModel):
    kind: Literal["sweep-batch"] = "sweep-batch"
    config_path: Path
    values: List[int] = Field(min_length=1)
    output_dir: Path
    seed: Optional[int] = None
    policy_off: bool = False
    seeds: int = Field(default_factory=lambda: settings.sweep_seeds, gt=0)
    jobs: int = Field(default_factory=lambda: settings.sweep_jobs, gt=0)


class GradcheckCommand(RCTModel):
    kind: Literal["gradcheck"] = "gradcheck"
    config_path: Path
    seed: Optional[int] = None


class ReportCommand(RCTModel):
    kind: Literal["report"] = "report"
    run_dir: Path


Command = Union[TrainCommand, SweepTminCommand, SweepInitCommand, SweepBatchCommand, GradcheckCommand, ReportCommand]
