"""
Datos de entrenamiento a escala de escritorio: blobs gaussianos sintéticos
y archivos IDX estilo MNIST.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union
import logging
import struct

import numpy as np
import numpy.typing as npt

from .exceptions import DomainError, IdxParseError
from .schemas import SyntheticSpec

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledArrays:
    x: npt.NDArray[np.float64]
    y: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class Dataset:
    train: LabeledArrays
    test: LabeledArrays

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.x.shape[1:])


def split_dataset(data: LabeledArrays, test_fraction: float, seed: int) -> Dataset:
    """Partición train/test por barajado con semilla"""
    n = len(data)
    if n < 2:
        raise DomainError("Se requieren al menos 2 muestras para separar train/test")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    return Dataset(
        train=LabeledArrays(data.x[train_idx], data.y[train_idx]),
        test=LabeledArrays(data.x[test_idx], data.y[test_idx]),
    )


def generate_synthetic(spec: SyntheticSpec, test_fraction: float = 0.2) -> Dataset:
    """
    Blobs gaussianos balanceados: centros ~ N(0, separation²) por dimensión y
    muestras centro + noise * N(0, I). Determinista dada spec.seed.
    """
    if spec.n_classes < 2 or spec.n_features < 1:
        raise DomainError(f"Especificación degenerada: {spec.n_classes} clases, {spec.n_features} features")
    if spec.n_samples < 2 * spec.n_classes:
        raise DomainError(f"n_samples={spec.n_samples} debe ser al menos 2 * n_classes={2 * spec.n_classes}")
    if spec.noise < 0 or spec.separation < 0:
        raise DomainError("noise y separation deben ser no negativos")

    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.separation, size=(spec.n_classes, spec.n_features))
    labels = np.arange(spec.n_samples, dtype=np.int64) % spec.n_classes
    x = centers[labels] + spec.noise * rng.normal(size=(spec.n_samples, spec.n_features))
    return split_dataset(LabeledArrays(x, labels), test_fraction, spec.seed)


# ==================== ARCHIVOS IDX ====================

def _read_magic(data: bytes, expected: int, what: str) -> None:
    if len(data) < 4:
        raise IdxParseError(f"Archivo de {what} truncado antes del número mágico", 0)
    magic = int.from_bytes(data[:4], "big")
    if magic != expected:
        raise IdxParseError(f"Número mágico 0x{magic:08x} inválido para {what}, se esperaba 0x{expected:08x}", 0)


def _check_payload(data: bytes, start: int, size: int, what: str) -> None:
    if len(data) < start + size:
        raise IdxParseError(f"Archivo de {what} truncado: faltan {start + size - len(data)} bytes", len(data))
    if len(data) > start + size:
        raise IdxParseError(f"Archivo de {what} con datos sobrantes", start + size)


def parse_idx_images(data: bytes) -> npt.NDArray[np.float64]:
    """Imágenes (n, 1, filas, columnas) con píxeles escalados a [0, 1]"""
    _read_magic(data, IDX_IMAGES_MAGIC, "imágenes")
    if len(data) < 16:
        raise IdxParseError("Cabecera de imágenes truncada", len(data))
    n, rows, cols = struct.unpack_from(">III", data, 4)
    _check_payload(data, 16, n * rows * cols, "imágenes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> npt.NDArray[np.int64]:
    _read_magic(data, IDX_LABELS_MAGIC, "etiquetas")
    if len(data) < 8:
        raise IdxParseError("Cabecera de etiquetas truncada", len(data))
    (n,) = struct.unpack_from(">I", data, 4)
    _check_payload(data, 8, n, "etiquetas")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(image_path: Union[str, Path], label_path: Union[str, Path]) -> LabeledArrays:
    images = parse_idx_images(Path(image_path).read_bytes())
    labels = parse_idx_labels(Path(label_path).read_bytes())
    if images.shape[0] != labels.shape[0]:
        # el conteo de etiquetas vive en el offset 4 del archivo de etiquetas
        raise IdxParseError(f"{labels.shape[0]} etiquetas para {images.shape[0]} imágenes", 4)
    logger.info(f"IDX cargado: {images.shape[0]} imágenes de {images.shape[2]}x{images.shape[3]}")
    return LabeledArrays(images, labels)


def load_idx_dataset(
    images: str,
    labels: str,
    test_images: Optional[str],
    test_labels: Optional[str],
    test_fraction: float,
    seed: int,
) -> Dataset:
    train = load_idx(images, labels)
    if test_images is not None and test_labels is not None:
        return Dataset(train=train, test=load_idx(test_images, test_labels))
    return split_dataset(train, test_fraction, seed)
