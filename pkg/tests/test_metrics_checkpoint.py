import json
import math
from pathlib import Path

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from mvcond.checkpoint import (
    BLOB,
    MANIFEST,
    CheckpointError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    validate_manifest,
)
from mvcond.metrics import PSNR_CAP, psnr, ssim


class TestPSNR:
    def test_identical_is_capped(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        assert psnr(img, img) == PSNR_CAP == 99.0

    def test_zeros_vs_half(self):
        assert abs(psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)) - 10 * math.log10(4)) < 1e-6
        assert psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)

    def test_matches_skimage(self, rng):
        for _ in range(10):
            a, b = rng.uniform(size=(2, 20, 20, 3))
            assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-9)

    def test_max_val(self, rng):
        a, b = rng.uniform(size=(2, 8, 8))
        assert psnr(255 * a, 255 * b, max_val=255) == pytest.approx(psnr(a, b), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical(self, rng):
        img = rng.uniform(size=(32, 32, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-6

    def test_negated_contrast(self, rng):
        img = rng.uniform(size=(32, 32, 3))
        assert ssim(img, 1.0 - img) < 0.5

    def test_matches_skimage(self, rng):
        for shape in [(32, 32, 3), (24, 40, 1), (64, 64, 3)]:
            a = rng.uniform(size=shape)
            b = np.clip(a + rng.normal(0, 0.1, size=shape), 0, 1)
            expected = structural_similarity(
                a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
            )
            assert ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_grayscale(self, rng):
        a = rng.uniform(size=(16, 16))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


@pytest.fixture
def tensors(rng):
    return {
        "param/a": rng.normal(size=(3, 4)).astype(np.float32),
        "param/b": rng.normal(size=(5,)).astype(np.float32),
        "adam_m/a": np.zeros((3, 4), np.float32),
        "scalar": np.array(2.5, np.float32),
        "empty": np.zeros((0, 3), np.float32),
    }


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "ck", tensors, "abc123", {"stage": 1, "step": 7})
        ck = load_checkpoint(tmp_path / "ck", expected_hash="abc123")
        assert list(ck.tensors) == list(tensors)
        for k, v in tensors.items():
            assert ck.tensors[k].dtype == np.float32 and ck.tensors[k].shape == v.shape
            assert ck.tensors[k].tobytes() == v.tobytes()
        assert ck.extra == {"stage": 1, "step": 7}
        assert ck.config_hash == "abc123"

    def test_resave_is_byte_identical(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "a", tensors, "h")
        ck = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", ck.tensors, ck.config_hash, ck.extra)
        for f in (MANIFEST, BLOB):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_blob_is_little_endian_float32(self, tmp_path):
        save_checkpoint(tmp_path, {"x": np.array([1.0, -2.0], np.float64)}, "h")
        assert (tmp_path / BLOB).read_bytes() == np.array([1.0, -2.0], "<f4").tobytes()

    def test_hash_mismatch(self, tmp_path, tensors):
        save_checkpoint(tmp_path, tensors, "abc")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path, expected_hash="xyz")

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")
        save_checkpoint(tmp_path / "ck", {"x": np.zeros(2)}, "h")
        (tmp_path / "ck" / BLOB).unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_corrupt_manifest(self, tmp_path, tensors):
        save_checkpoint(tmp_path, tensors, "h")
        (tmp_path / MANIFEST).write_text("{not json")
        with pytest.raises(CheckpointError):
            read_manifest(tmp_path)

    @pytest.mark.parametrize(
        "field, value",
        [
            ("byte_offset", 10_000),
            ("byte_offset", -4),
            ("byte_offset", 4),
            ("byte_len", 8),
            ("shape", [7, 4]),
            ("shape", [-3, -4]),
            ("dtype", "float64"),
        ],
    )
    def test_tampering_detected_before_load(self, tmp_path, tensors, monkeypatch, field, value):
        save_checkpoint(tmp_path, tensors, "h")
        manifest = json.loads((tmp_path / MANIFEST).read_text())
        manifest["entries"][0][field] = value
        (tmp_path / MANIFEST).write_text(json.dumps(manifest))

        def forbidden(self):
            raise AssertionError("tensor blob read before the manifest was validated")

        monkeypatch.setattr(Path, "read_bytes", forbidden)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_duplicate_and_version(self):
        e = {"name": "a", "shape": [1], "dtype": "float32", "byte_offset": 0, "byte_len": 4}
        with pytest.raises(CheckpointError):
            validate_manifest({"format_version": 1, "entries": [e, dict(e, byte_offset=4)]}, 8)
        with pytest.raises(CheckpointError):
            validate_manifest({"format_version": 2, "entries": [e]}, 4)
        with pytest.raises(CheckpointError):
            validate_manifest({"format_version": 1, "entries": [{"name": "a"}]}, 4)
        validate_manifest({"format_version": 1, "entries": [e]}, 4)
