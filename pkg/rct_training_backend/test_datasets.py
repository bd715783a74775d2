#!/usr/bin/env python3
"""
Tests for the desk-scale datasets: seeded Gaussian blobs and IDX parsing.
"""

from pathlib import Path
import struct
import tempfile

import numpy as np

from app.datasets import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, LabeledArrays, generate_synthetic, load_idx,
    load_idx_dataset, parse_idx_images, parse_idx_labels, split_dataset,
)
from app.exceptions import DomainError, IdxParseError
from app.models import Dense, Model, accuracy, sgd_float_step
from app.quant import compute_params, quantize
from app.schemas import SyntheticSpec

PIXELS = [0, 255, 51, 102, 204, 153, 17, 34]


def _images_bytes(n=2, rows=2, cols=2, pixels=PIXELS) -> bytes:
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + bytes(pixels)


def _labels_bytes(labels=(3, 7)) -> bytes:
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + bytes(labels)


def _expect_parse_error(fn, data, offset):
    try:
        fn(data)
        assert False, "se esperaba IdxParseError"
    except IdxParseError as e:
        assert e.offset == offset, (e.offset, offset)
        assert f"byte offset {offset}" in str(e)


# ==================== SINTÉTICOS ====================

def test_synthetic_is_deterministic():
    print("🔧 datos sintéticos")
    spec = SyntheticSpec(n_classes=4, n_features=8, n_samples=500, noise=0.5, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.y, b.test.y)
    other = generate_synthetic(spec.model_copy(update={"seed": 4}))
    assert not np.array_equal(a.train.x, other.train.x)
    print("  ✅ misma semilla, mismos datos")


def test_synthetic_split_and_balance():
    spec = SyntheticSpec(n_classes=4, n_features=3, n_samples=1000)
    data = generate_synthetic(spec)
    assert len(data.train) == 800 and len(data.test) == 200
    assert data.input_shape == (3,)
    counts = np.bincount(np.concatenate([data.train.y, data.test.y]))
    assert counts.tolist() == [250, 250, 250, 250]


def test_synthetic_degenerate_specs():
    bad_specs = [
        SyntheticSpec(n_classes=1, n_samples=10),
        SyntheticSpec(n_classes=4, n_samples=7),
        SyntheticSpec(noise=-0.1),
    ]
    for spec in bad_specs:
        try:
            generate_synthetic(spec)
            assert False, f"se esperaba DomainError para {spec}"
        except DomainError:
            pass


def test_noiseless_blobs_linearly_separable():
    """noise = 0 with two classes: a float linear model reaches 100% test accuracy"""
    spec = SyntheticSpec(n_classes=2, n_features=4, n_samples=200, noise=0.0, separation=3.0, seed=1)
    data = generate_synthetic(spec)
    zeros = np.zeros((2, 4))
    model = Model([Dense("fc", 4, 2, quantize(zeros, compute_params(zeros, 8)),
                         quantize(np.zeros(2), compute_params(np.zeros(2), 8)))], (4,))
    weights = {"fc.weight": np.zeros((2, 4)), "fc.bias": np.zeros(2)}
    for _ in range(100):
        sgd_float_step(model, weights, data.train.x, data.train.y, 0.5)
    assert accuracy(model, data.test.x, data.test.y, weights=weights, quantize_activations=False) == 1.0


def test_split_is_seeded_permutation():
    """The split takes the first rows of one seeded permutation; class proportions are not enforced"""
    data = LabeledArrays(np.arange(20, dtype=float).reshape(10, 2), np.arange(10, dtype=np.int64))
    split = split_dataset(data, 0.2, 3)
    perm = np.random.default_rng(3).permutation(10)
    assert split.test.y.tolist() == perm[:2].tolist()
    assert split.train.y.tolist() == perm[2:].tolist()
    assert np.array_equal(split.train.x[:, 0], 2 * split.train.y)
    again = split_dataset(data, 0.2, 3)
    assert np.array_equal(again.test.y, split.test.y)


def test_split_requires_two_samples():
    try:
        split_dataset(LabeledArrays(np.zeros((1, 2)), np.zeros(1, dtype=np.int64)), 0.2, 0)
        assert False, "se esperaba DomainError"
    except DomainError:
        pass


# ==================== IDX ====================

def test_idx_fixture_round_trip():
    """Handcrafted 2-image file recovers the exact pixel values"""
    print("🔧 archivos IDX")
    images = parse_idx_images(_images_bytes())
    assert images.shape == (2, 1, 2, 2)
    assert np.array_equal(images.reshape(-1), np.array(PIXELS) / 255.0)
    assert parse_idx_labels(_labels_bytes()).tolist() == [3, 7]

    with tempfile.TemporaryDirectory() as tmp:
        img_path, lbl_path = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
        img_path.write_bytes(_images_bytes())
        lbl_path.write_bytes(_labels_bytes())
        data = load_idx(img_path, lbl_path)
        assert data.y.tolist() == [3, 7]
        assert data.x[0, 0, 0, 1] == 1.0
    print("  ✅ fixture de 2 imágenes")


def test_idx_errors_carry_offsets():
    _expect_parse_error(parse_idx_images, b"", 0)
    _expect_parse_error(parse_idx_labels, b"", 0)
    _expect_parse_error(parse_idx_images, _labels_bytes(), 0)
    _expect_parse_error(parse_idx_labels, _images_bytes(), 0)

    truncated = _images_bytes()[:-3]
    _expect_parse_error(parse_idx_images, truncated, len(truncated))
    _expect_parse_error(parse_idx_images, _images_bytes()[:10], 10)
    _expect_parse_error(parse_idx_images, _images_bytes() + b"\x00", 16 + 8)
    _expect_parse_error(parse_idx_labels, _labels_bytes()[:9], 9)
    print("  ✅ errores con byte offset")


def test_idx_count_mismatch():
    with tempfile.TemporaryDirectory() as tmp:
        img_path, lbl_path = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
        img_path.write_bytes(_images_bytes())
        lbl_path.write_bytes(_labels_bytes((1, 2, 3)))
        try:
            load_idx(img_path, lbl_path)
            assert False, "se esperaba IdxParseError"
        except IdxParseError as e:
            assert e.offset == 4


def test_idx_dataset_split_or_explicit_test():
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=10 * 9).tolist()
    labels = tuple(int(v) for v in rng.integers(0, 3, size=10))
    with tempfile.TemporaryDirectory() as tmp:
        img_path, lbl_path = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
        img_path.write_bytes(_images_bytes(10, 3, 3, pixels))
        lbl_path.write_bytes(_labels_bytes(labels))
        split = load_idx_dataset(str(img_path), str(lbl_path), None, None, 0.2, 0)
        assert len(split.train) == 8 and len(split.test) == 2
        assert split.input_shape == (1, 3, 3)

        explicit = load_idx_dataset(str(img_path), str(lbl_path), str(img_path), str(lbl_path), 0.2, 0)
        assert len(explicit.train) == 10 and len(explicit.test) == 10


if __name__ == "__main__":
    print("🧪 TESTS DE DATOS")
    print("=" * 60)
    test_synthetic_is_deterministic()
    test_synthetic_split_and_balance()
    test_synthetic_degenerate_specs()
    test_noiseless_blobs_linearly_separable()
    test_split_is_seeded_permutation()
    test_split_requires_two_samples()
    test_idx_fixture_round_trip()
    test_idx_errors_carry_offsets()
    test_idx_count_mismatch()
    test_idx_dataset_split_or_explicit_test()
    print("\n✅ Todos los tests de datos pasaron")
