"""
Red feed-forward mínima con diferenciación en modo reverso.

Los pesos y sesgos de las capas Dense/Conv2D existen únicamente como QuantizedTensor.
Las salidas intermedias pasan por fake-quant a 8 bits; los logits no.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple
import logging
import math

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .config import settings
from .exceptions import DomainError, UsageError
from .quant import QuantizedTensor, compute_params, dequantize, quantize
from .schemas import LayerKind, LayerSpec, LossReduction, ModelSpec, RoundingMode

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]
FloatWeights = Dict[str, Tensor]


# ==================== CAPAS ====================

class Layer:
    """Capa sin parámetros; las subclases definen forward/backward"""
    kind: LayerKind

    def __init__(self, name: str, input_shape: tuple, output_shape: tuple):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)

    @property
    def parameterized(self) -> bool:
        return False

    def parameter_names(self) -> List[str]:
        return []

    def forward(self, x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None):
        raise NotImplementedError

    def backward(self, grad: Tensor, cache) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
        raise NotImplementedError


class ParamLayer(Layer):
    """Capa con exactamente un tensor de pesos y uno de sesgo, ambos cuantizados"""

    def __init__(self, name, input_shape, output_shape, weight: QuantizedTensor, bias: QuantizedTensor):
        super().__init__(name, input_shape, output_shape)
        if weight.shape != self.weight_shape or bias.shape != self.bias_shape:
            raise DomainError(
                f"Capa {name}: pesos {weight.shape} / sesgo {bias.shape}, "
                f"se esperaba {self.weight_shape} / {self.bias_shape}"
            )
        self.weight = weight
        self.bias = bias

    @property
    def parameterized(self) -> bool:
        return True

    @property
    def weight_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def bias_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def macs_per_sample(self) -> int:
        raise NotImplementedError

    def parameter_names(self) -> List[str]:
        return [f"{self.name}.weight", f"{self.name}.bias"]


class Dense(ParamLayer):
    kind = LayerKind.DENSE

    def __init__(self, name: str, in_features: int, out_features: int, weight, bias):
        self.in_features = in_features
        self.out_features = out_features
        super().__init__(name, (in_features,), (out_features,), weight, bias)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_features, self.in_features)

    @property
    def bias_shape(self) -> tuple:
        return (self.out_features,)

    @property
    def macs_per_sample(self) -> int:
        return self.in_features * self.out_features

    def forward(self, x, weight=None, bias=None):
        return x @ weight.T + bias, (x, weight)

    def backward(self, grad, cache):
        x, weight = cache
        return grad @ weight, grad.T @ x, grad.sum(axis=0)


class Conv2D(ParamLayer):
    """Convolución NCHW vía im2col; pesos (out_ch, in_ch, k, k)"""
    kind = LayerKind.CONV2D

    def __init__(self, name, in_channels, out_channels, kernel_size, stride, padding, input_shape, weight, bias):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        _, h, w = input_shape
        oh = (h + 2 * padding - kernel_size) // stride + 1
        ow = (w + 2 * padding - kernel_size) // stride + 1
        super().__init__(name, input_shape, (out_channels, oh, ow), weight, bias)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def bias_shape(self) -> tuple:
        return (self.out_channels,)

    @property
    def macs_per_sample(self) -> int:
        _, oh, ow = self.output_shape
        return self.out_channels * oh * ow * self.in_channels * self.kernel_size * self.kernel_size

    def _columns(self, x: Tensor) -> Tensor:
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n = x.shape[0]
        _, oh, ow = self.output_shape
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, self.in_channels * k * k)

    def forward(self, x, weight=None, bias=None):
        n = x.shape[0]
        _, oh, ow = self.output_shape
        cols = self._columns(x)
        w_mat = weight.reshape(self.out_channels, -1)
        out = (cols @ w_mat.T + bias).reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, weight)

    def backward(self, grad, cache):
        x_shape, cols, weight = cache
        n, c, h, w = x_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        _, oh, ow = self.output_shape
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w_mat = weight.reshape(self.out_channels, -1)

        grad_w = (g2.T @ cols).reshape(weight.shape)
        grad_b = g2.sum(axis=0)
        d_cols = (g2 @ w_mat).reshape(n, oh, ow, c, k, k)
        d_xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                d_xp[:, :, i:i + s * oh:s, j:j + s * ow:s] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return d_xp[:, :, p:p + h, p:p + w], grad_w, grad_b


class ReLU(Layer):
    kind = LayerKind.RELU

    def forward(self, x, weight=None, bias=None):
        return np.maximum(x, 0.0), x

    def backward(self, grad, cache):
        return grad * (cache > 0), None, None


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def forward(self, x, weight=None, bias=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), None, None


# ==================== MODELO ====================

class Model:
    """Lista ordenada de capas; pérdida cross-entropy con softmax"""

    def __init__(self, layers: List[Layer], input_shape):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise DomainError(f"Nombres de capa repetidos: {names}")
        shape = tuple(input_shape)
        for layer in layers:
            if layer.input_shape != shape:
                raise DomainError(f"Capa {layer.name} espera {layer.input_shape}, recibe {shape}")
            shape = layer.output_shape
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.version = 0

    def param_layers(self) -> List[ParamLayer]:
        return [layer for layer in self.layers if layer.parameterized]

    def parameters(self) -> Dict[str, QuantizedTensor]:
        params = {}
        for layer in self.param_layers():
            params[f"{layer.name}.weight"] = layer.weight
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def parameter_counts(self) -> Dict[str, int]:
        return {name: qt.size for name, qt in self.parameters().items()}

    def bitwidths(self) -> Dict[str, int]:
        return {name: qt.bitwidth for name, qt in self.parameters().items()}

    def set_parameter(self, name: str, qt: QuantizedTensor) -> None:
        layer_name, _, attr = name.rpartition(".")
        layer = next((l for l in self.param_layers() if l.name == layer_name), None)
        if layer is None or attr not in ("weight", "bias"):
            raise DomainError(f"Parámetro desconocido: {name}")
        if getattr(layer, attr).shape != qt.shape:
            raise DomainError(f"Forma {qt.shape} no coincide con {name}")
        setattr(layer, attr, qt)
        self.version += 1


def _layer_name(spec: LayerSpec, index: int) -> str:
    return spec.name or f"{spec.kind.value}{index}"


def infer_shapes(spec: ModelSpec) -> List[Tuple[tuple, tuple]]:
    """Formas (entrada, salida) por muestra de cada capa; verifica que compongan"""
    shapes = []
    shape = tuple(spec.input_shape)
    for index, layer in enumerate(spec.layers):
        name = _layer_name(layer, index)
        if layer.kind == LayerKind.DENSE:
            if shape != (layer.in_features,):
                raise DomainError(f"{name}: dense({layer.in_features}) recibe forma {shape}")
            out = (layer.out_features,)
        elif layer.kind == LayerKind.CONV2D:
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise DomainError(f"{name}: conv2d({layer.in_channels} canales) recibe forma {shape}")
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            oh = (shape[1] + 2 * p - k) // s + 1
            ow = (shape[2] + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise DomainError(f"{name}: kernel {k} no cabe en {shape[1:]} con padding {p}")
            out = (layer.out_channels, oh, ow)
        elif layer.kind == LayerKind.FLATTEN:
            out = (int(np.prod(shape)),)
        else:
            out = shape
        shapes.append((shape, out))
        shape = out
    return shapes


def init_float_weights(spec: ModelSpec, rng: np.random.Generator) -> FloatWeights:
    """Pesos y sesgos uniformes en ±1/sqrt(fan_in), en orden de capas"""
    weights: FloatWeights = {}
    for index, layer in enumerate(spec.layers):
        name = _layer_name(layer, index)
        if layer.kind == LayerKind.DENSE:
            w_shape = (layer.out_features, layer.in_features)
        elif layer.kind == LayerKind.CONV2D:
            w_shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        else:
            continue
        bound = 1.0 / math.sqrt(int(np.prod(w_shape[1:])))
        weights[f"{name}.weight"] = rng.uniform(-bound, bound, size=w_shape)
        weights[f"{name}.bias"] = rng.uniform(-bound, bound, size=(w_shape[0],))
    return weights


def build_model(
    spec: ModelSpec,
    bitwidth: int,
    rng: Optional[np.random.Generator] = None,
    *,
    float_weights: Optional[Mapping[str, Tensor]] = None,
    rounding: Optional[RoundingMode] = None,
) -> Model:
    """
    Construye el modelo cuantizando los pesos iniciales a `bitwidth` bits.
    Si no se pasan float_weights se inicializan con rng.
    """
    shapes = infer_shapes(spec)
    if float_weights is None:
        if rng is None:
            raise UsageError("build_model requiere rng o float_weights")
        float_weights = init_float_weights(spec, rng)

    def _q(name: str) -> QuantizedTensor:
        values = float_weights[name]
        return quantize(values, compute_params(values, bitwidth), rounding, rng)

    layers: List[Layer] = []
    for index, (layer_spec, (in_shape, out_shape)) in enumerate(zip(spec.layers, shapes)):
        name = _layer_name(layer_spec, index)
        if layer_spec.kind == LayerKind.DENSE:
            layers.append(Dense(name, layer_spec.in_features, layer_spec.out_features,
                                _q(f"{name}.weight"), _q(f"{name}.bias")))
        elif layer_spec.kind == LayerKind.CONV2D:
            layers.append(Conv2D(name, layer_spec.in_channels, layer_spec.out_channels, layer_spec.kernel_size,
                                 layer_spec.stride, layer_spec.padding, in_shape,
                                 _q(f"{name}.weight"), _q(f"{name}.bias")))
        elif layer_spec.kind == LayerKind.RELU:
            layers.append(ReLU(name, in_shape, out_shape))
        else:
            layers.append(Flatten(name, in_shape, out_shape))
    model = Model(layers, spec.input_shape)
    logger.debug(f"Modelo construido: {len(layers)} capas, {sum(model.parameter_counts().values())} parámetros a {bitwidth} bits")
    return model


# ==================== FAKE-QUANT DE ACTIVACIONES ====================

def fake_quant_with_mask(x: Tensor, k: int) -> Tuple[Tensor, npt.NDArray[np.bool_]]:
    """
    quantize → dequantize con min/max del propio lote (Nearest) y la máscara del
    estimador straight-through: True donde x cae dentro de la grilla (± medio paso).
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return x.copy(), np.ones(x.shape, dtype=bool)
    params = compute_params(x, k)
    out = dequantize(quantize(x, params, RoundingMode.nearest()))
    half = params.scale / 2
    mask = (x >= params.range_lo - half) & (x <= params.range_hi + half)
    return out, mask


def fake_quant_activation(x: Tensor, k: int) -> Tensor:
    return fake_quant_with_mask(x, k)[0]


# ==================== FORWARD / BACKWARD ====================

@dataclass
class ActivationCache:
    version: int
    layer_caches: list
    masks: list
    logits: Tensor
    relu_inputs: list = field(default_factory=list)


def forward(
    model: Model,
    batch: Tensor,
    *,
    weights: Optional[Mapping[str, Tensor]] = None,
    quantize_activations: bool = True,
    activation_bits: int = 8,
) -> Tuple[Tensor, ActivationCache]:
    """
    Propagación hacia adelante. Cada capa con parámetros usa dequantize(pesos),
    salvo que `weights` entregue valores reales (línea base float y gradcheck).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2 or tuple(x.shape[1:]) != model.input_shape:
        raise DomainError(f"Lote con forma {x.shape}, el modelo espera (N, {model.input_shape})")

    caches, masks, relu_inputs = [], [], []
    last = len(model.layers) - 1
    for index, layer in enumerate(model.layers):
        w = b = None
        if layer.parameterized:
            w_name, b_name = layer.parameter_names()
            if weights is not None:
                w, b = weights[w_name], weights[b_name]
            else:
                w, b = dequantize(layer.weight), dequantize(layer.bias)
        if layer.kind == LayerKind.RELU:
            relu_inputs.append(x)
        x, cache = layer.forward(x, w, b)
        mask = None
        if quantize_activations and index < last:
            x, mask = fake_quant_with_mask(x, activation_bits)
        caches.append(cache)
        masks.append(mask)
    return x, ActivationCache(model.version, caches, masks, x, relu_inputs)


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_targets(logits: Tensor, targets) -> npt.NDArray[np.int64]:
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise DomainError(f"Targets con forma {t.shape}, se esperaba ({logits.shape[0]},)")
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise DomainError("Etiquetas fuera del rango de clases")
    return t


def cross_entropy(logits: Tensor, targets, reduction: LossReduction = LossReduction.MEAN) -> float:
    t = _check_targets(logits, targets)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(t.size), t]
    return float(losses.sum() if reduction == LossReduction.SUM else losses.mean())


def backward(
    model: Model,
    cache: ActivationCache,
    targets,
    reduction: LossReduction = LossReduction.MEAN,
) -> Dict[str, Tensor]:
    """Gradientes g_ij de la pérdida para cada tensor de pesos y sesgo, en precisión real"""
    if cache.version != model.version:
        raise UsageError("Cache de activaciones obsoleto: el modelo cambió después del forward")
    t = _check_targets(cache.logits, targets)

    grad = softmax(cache.logits)
    grad[np.arange(t.size), t] -= 1.0
    if reduction == LossReduction.MEAN:
        grad /= t.size

    grads: Dict[str, Tensor] = {}
    for layer, layer_cache, mask in zip(reversed(model.layers), reversed(cache.layer_caches), reversed(cache.masks)):
        if mask is not None:
            grad = grad * mask
        grad, grad_w, grad_b = layer.backward(grad, layer_cache)
        if layer.parameterized:
            w_name, b_name = layer.parameter_names()
            grads[b_name] = grad_b
            grads[w_name] = grad_w
    return {name: grads[name] for name in model.parameters()}


def predict(model: Model, x: Tensor, *, weights=None, quantize_activations=True, activation_bits=8):
    logits, _ = forward(model, x, weights=weights, quantize_activations=quantize_activations,
                        activation_bits=activation_bits)
    return logits.argmax(axis=1)


def accuracy(model: Model, x: Tensor, y, **kwargs) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(model, x, **kwargs) == np.asarray(y)))


# ==================== SGD FLOTANTE Y GRADCHECK ====================

def dequantized_weights(model: Model) -> FloatWeights:
    """Copia transitoria en punto flotante de todos los parámetros"""
    return {name: dequantize(qt) for name, qt in model.parameters().items()}


def sgd_float_step(
    model: Model,
    weights: FloatWeights,
    batch: Tensor,
    targets,
    lr: float,
    reduction: LossReduction = LossReduction.MEAN,
) -> float:
    """Un paso de SGD en punto flotante sobre `weights` (in place); el modelo aporta solo la estructura"""
    logits, cache = forward(model, batch, weights=weights, quantize_activations=False)
    loss = cross_entropy(logits, targets, reduction)
    grads = backward(model, cache, targets, reduction)
    for name, g in grads.items():
        weights[name] -= lr * g
    return loss


def _relu_pattern(cache: ActivationCache) -> List[npt.NDArray[np.bool_]]:
    return [x > 0 for x in cache.relu_inputs]


def gradient_check(
    model: Model,
    batch: Tensor,
    targets,
    *,
    h: Optional[float] = None,
    reduction: LossReduction = LossReduction.MEAN,
) -> float:
    """
    Máximo error relativo entre gradiente analítico y diferencias centrales
    sobre la superficie de pérdida de los pesos decuantizados.
    Los elementos cuya perturbación cruza un quiebre de ReLU se excluyen.
    """
    h = h or settings.gradcheck_step
    weights = dequantized_weights(model)
    logits, cache = forward(model, batch, weights=weights, quantize_activations=False)
    analytic = backward(model, cache, targets, reduction)
    base_pattern = _relu_pattern(cache)

    def _loss_and_pattern():
        lg, c = forward(model, batch, weights=weights, quantize_activations=False)
        return cross_entropy(lg, targets, reduction), _relu_pattern(c)

    worst = 0.0
    for name, w in weights.items():
        flat = w.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            loss_plus, pattern_plus = _loss_and_pattern()
            flat[i] = original - h
            loss_minus, pattern_minus = _loss_and_pattern()
            flat[i] = original
            crosses_kink = any(
                not (np.array_equal(a, b) and np.array_equal(a, c))
                for a, b, c in zip(base_pattern, pattern_plus, pattern_minus)
            )
            if crosses_kink:
                continue
            numeric = (loss_plus - loss_minus) / (2 * h)
            worst = max(worst, relative_error(grad_flat[i], numeric))
    return worst


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
