import gzip
import json
import struct

import numpy as np
import pytest

from blockops.tasks.mnist_io import (
    FILES,
    IMAGE_MAGIC,
    LABEL_MAGIC,
    IdxFormatError,
    MnistUnavailableError,
    ensure_mnist,
    load_mnist,
    mnist_cache_dir,
    read_idx_images,
    read_idx_labels,
)


def idx_image_bytes(images: np.ndarray) -> bytes:
    count, rows, cols = images.shape
    return struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols) + images.astype(np.uint8).tobytes()


def idx_label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def write_synthetic_cache(cache_dir, train_n=32, test_n=16, seed=0):
    rng = np.random.default_rng(seed)
    sets = {"train": train_n, "test": test_n}
    arrays = {}
    for split, n in sets.items():
        images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        (cache_dir / FILES[f"{split}_images"]).write_bytes(idx_image_bytes(images))
        (cache_dir / FILES[f"{split}_labels"]).write_bytes(idx_label_bytes(labels))
        arrays[split] = (images, labels)
    return arrays


class TestIdxParsing:
    def test_image_round_trip_and_scaling(self, tmp_path):
        raw = np.zeros((2, 28, 28), dtype=np.uint8)
        raw[0, 0, 0] = 255
        raw[1, 3, 4] = 128
        path = tmp_path / "imgs"
        path.write_bytes(idx_image_bytes(raw))
        images = read_idx_images(str(path))
        assert images.shape == (2, 28, 28)
        assert images.dtype == np.float32
        assert images[0, 0, 0] == 1.0
        assert images[1, 3, 4] == pytest.approx(128 / 255)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_label_round_trip(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(idx_label_bytes(np.array([0, 9, 4], dtype=np.uint8)))
        assert np.array_equal(read_idx_labels(str(path)), [0, 9, 4])

    def test_gzip_payload_is_transparent(self, tmp_path):
        raw = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
        path = tmp_path / "imgs.gz"
        path.write_bytes(gzip.compress(idx_image_bytes(raw)))
        images = read_idx_images(str(path))
        assert images.shape == (3, 28, 28)
        assert np.array_equal((images * 255).round().astype(np.uint8), raw)

    def test_bad_image_magic_is_rejected(self, tmp_path):
        path = tmp_path / "imgs"
        payload = idx_image_bytes(np.zeros((1, 28, 28), dtype=np.uint8))
        path.write_bytes(b"\x00\x00\x08\x01" + payload[4:])
        with pytest.raises(IdxFormatError):
            read_idx_images(str(path))

    def test_bad_label_magic_is_rejected(self, tmp_path):
        path = tmp_path / "labels"
        payload = idx_label_bytes(np.zeros(4, dtype=np.uint8))
        path.write_bytes(b"\x00\x00\x08\x03" + payload[4:])
        with pytest.raises(IdxFormatError):
            read_idx_labels(str(path))

    def test_truncated_image_payload_is_rejected(self, tmp_path):
        path = tmp_path / "imgs"
        payload = idx_image_bytes(np.zeros((2, 28, 28), dtype=np.uint8))
        path.write_bytes(payload[:-10])
        with pytest.raises(IdxFormatError):
            read_idx_images(str(path))

    def test_truncated_header_is_rejected(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(IdxFormatError):
            read_idx_images(str(path))

    def test_label_values_above_nine_are_rejected(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(idx_label_bytes(np.array([3, 11], dtype=np.uint8)))
        with pytest.raises(IdxFormatError):
            read_idx_labels(str(path))


class TestCacheManagement:
    def test_missing_cache_without_download_fails(self, tmp_path):
        with pytest.raises(MnistUnavailableError):
            ensure_mnist(str(tmp_path / "empty"), allow_download=False)

    def test_existing_cache_is_accepted_and_manifested(self, tmp_path):
        write_synthetic_cache(tmp_path)
        cache = ensure_mnist(str(tmp_path), allow_download=False)
        assert cache == str(tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert set(manifest) == set(FILES)

    def test_checksum_mismatch_is_detected(self, tmp_path):
        write_synthetic_cache(tmp_path)
        ensure_mnist(str(tmp_path), allow_download=False)
        target = tmp_path / FILES["train_labels"]
        raw = bytearray(target.read_bytes())
        raw[-1] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(MnistUnavailableError):
            ensure_mnist(str(tmp_path), allow_download=False)

    def test_cache_dir_override_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BLOCKOPS_DATA_DIR", str(tmp_path / "env"))
        assert mnist_cache_dir(str(tmp_path / "given")) == str(tmp_path / "given")
        assert mnist_cache_dir(None) == str(tmp_path / "env" / "mnist")


class TestLoadMnist:
    def test_load_returns_scaled_splits(self, tmp_path):
        arrays = write_synthetic_cache(tmp_path, train_n=20, test_n=8)
        data = load_mnist(str(tmp_path))
        assert data["train_images"].shape == (20, 28, 28)
        assert data["test_images"].shape == (8, 28, 28)
        assert np.array_equal(data["train_labels"], arrays["train"][1])
        assert data["train_images"].max() <= 1.0

    def test_count_mismatch_is_rejected(self, tmp_path):
        write_synthetic_cache(tmp_path, train_n=20, test_n=8)
        (tmp_path / FILES["train_labels"]).write_bytes(
            idx_label_bytes(np.zeros(19, dtype=np.uint8)))
        with pytest.raises(IdxFormatError):
            load_mnist(str(tmp_path))
