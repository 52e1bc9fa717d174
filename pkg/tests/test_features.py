import struct
import zlib

import numpy as np
import pytest

from patchbag.binio import FileFormatError, FormatErrorCode
from patchbag.features import (
    DescriptorSet,
    extract_baseline,
    extract_set_baseline,
    read_feature_file,
    write_feature_file,
)
from patchbag.labels import Label


def reference_pbfv_bytes(extractor_id, label, scale, region_id, values):
    """Independent writer for the feature file layout (test oracle)."""
    n, r, d = values.shape
    body = b"PBFV"
    body += struct.pack("<H", 1)
    eid = extractor_id.encode()
    body += struct.pack("<H", len(eid)) + eid
    body += struct.pack("<BB", label, scale)
    rid = region_id.encode()
    body += struct.pack("<H", len(rid)) + rid
    body += struct.pack("<III", n, r, d)
    body += np.ascontiguousarray(values, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return body


class TestBaselineExtractor:
    def test_constant_gray_patch(self):
        patch = np.full((256, 256, 3), 128, dtype=np.uint8)
        desc = extract_baseline(patch)
        assert desc.shape == (16, 16)
        assert np.allclose(desc, desc[0])  # all cells identical
        assert np.allclose(desc[:, 3:6], 0.0)  # RGB stds
        assert np.allclose(desc[:, 6:14], 0.0)  # zero-gradient convention
        assert np.allclose(desc[:, 0:3], 128 / 255.0)
        assert np.allclose(desc[:, 14:16], 128 / 255.0)  # p10 == p90 == value

    def test_vertical_stripes_concentrate_horizontal_bin(self):
        patch = np.zeros((256, 256, 3), dtype=np.uint8)
        patch[:, ::2] = 200  # vertical stripes -> gradients along x
        desc = extract_baseline(patch)
        hist = desc[:, 6:14]
        assert np.allclose(hist[:, 0], 1.0)  # orientation 0 = horizontal gradient
        assert np.allclose(hist[:, 1:], 0.0)

    def test_random_patch_matches_cell_oracle(self, rng):
        patch = rng.integers(0, 255, size=(256, 256, 3), dtype=np.uint8)
        desc = extract_baseline(patch, grid=4)
        # oracle: recompute one cell's statistics from raw pixels, independently
        r, c = 2, 1
        cell = patch[r * 64 : (r + 1) * 64, c * 64 : (c + 1) * 64].astype(np.float64)
        row = desc[r * 4 + c]
        np.testing.assert_allclose(row[0:3], cell.mean((0, 1)) / 255.0, rtol=1e-6)
        np.testing.assert_allclose(row[3:6], cell.std((0, 1)) / 255.0, rtol=1e-6)
        gray = cell @ [0.299, 0.587, 0.114]
        np.testing.assert_allclose(
            row[14:16], np.percentile(gray, [10, 90]) / 255.0, rtol=1e-6
        )
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ori = np.arctan2(gy, gx) % np.pi
        bins = np.minimum((ori / (np.pi / 8)).astype(int), 7)
        hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=8)
        hist = hist / hist.sum()
        np.testing.assert_allclose(row[6:14], hist, rtol=1e-5, atol=1e-7)

    def test_translation_consistency(self, rng):
        patch = rng.integers(0, 255, size=(256, 256, 3), dtype=np.uint8)
        full = extract_baseline(patch, grid=4)
        for r, c in [(0, 0), (1, 3), (3, 2)]:
            cell = patch[r * 64 : (r + 1) * 64, c * 64 : (c + 1) * 64]
            alone = extract_baseline(cell, grid=1)
            assert np.array_equal(alone[0], full[r * 4 + c])

    def test_determinism(self, rng):
        patch = rng.integers(0, 255, size=(256, 256, 3), dtype=np.uint8)
        assert np.array_equal(extract_baseline(patch), extract_baseline(patch.copy()))

    def test_bad_grid(self):
        patch = np.zeros((256, 256, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            extract_baseline(patch, grid=3)


def sample_set(rng, n=5, r=16, d=16, region="regA", label=Label.IN_SITU, scale=0):
    return DescriptorSet(
        region_id=region,
        label=label,
        scale=scale,
        extractor_id="test/ext",
        descriptors=rng.normal(size=(n, r, d)).astype(np.float32),
    )


class TestFeatureFile:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        dset = sample_set(rng)
        path = tmp_path / "a.pbfv"
        write_feature_file(dset, path)
        loaded = read_feature_file(path)
        assert loaded.region_id == dset.region_id
        assert loaded.label is dset.label
        assert loaded.scale == dset.scale
        assert loaded.extractor_id == dset.extractor_id
        assert loaded.descriptors.tobytes() == dset.descriptors.tobytes()
        # writing the loaded set reproduces the file bytes exactly
        path2 = tmp_path / "b.pbfv"
        write_feature_file(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_reader_accepts_reference_writer(self, tmp_path, rng):
        values = rng.normal(size=(48, 1, 1024)).astype(np.float32)
        path = tmp_path / "ref.pbfv"
        path.write_bytes(reference_pbfv_bytes("cnn/pooled", 3, 1, "slide_7", values))
        dset = read_feature_file(path)
        assert dset.n_patches == 48
        assert (dset.r, dset.d) == (1, 1024)
        assert dset.label is Label.INVASIVE
        assert dset.scale == 1
        assert np.array_equal(dset.descriptors, values)

    def test_truncation_detected(self, tmp_path, rng):
        dset = sample_set(rng)
        path = tmp_path / "t.pbfv"
        write_feature_file(dset, path)
        data = path.read_bytes()
        cut = path.with_suffix(".cut")
        cut.write_bytes(data[: len(data) // 2])
        with pytest.raises(FileFormatError) as err:
            read_feature_file(cut)
        assert err.value.code in (FormatErrorCode.TRUNCATED, FormatErrorCode.BAD_CRC)

    def test_bad_magic(self, tmp_path, rng):
        path = tmp_path / "m.pbfv"
        write_feature_file(sample_set(rng), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FileFormatError) as err:
            read_feature_file(path)
        assert err.value.code is FormatErrorCode.BAD_MAGIC

    def test_bad_version(self, tmp_path, rng):
        path = tmp_path / "v.pbfv"
        write_feature_file(sample_set(rng), path)
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 9)
        body = bytes(data[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(FileFormatError) as err:
            read_feature_file(path)
        assert err.value.code is FormatErrorCode.BAD_VERSION

    def test_corrupt_crc_rejected(self, tmp_path, rng):
        path = tmp_path / "c.pbfv"
        write_feature_file(sample_set(rng), path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FileFormatError) as err:
            read_feature_file(path)
        assert err.value.code is FormatErrorCode.BAD_CRC

    def test_non_finite_write_rejected(self, tmp_path, rng):
        dset = sample_set(rng)
        dset.descriptors[2, 3, 4] = np.nan
        with pytest.raises(FileFormatError) as err:
            write_feature_file(dset, tmp_path / "n.pbfv")
        assert err.value.code is FormatErrorCode.NON_FINITE
        assert list(tmp_path.iterdir()) == []  # nothing half-written

    def test_non_finite_read_rejected(self, tmp_path):
        values = np.zeros((2, 1, 3), dtype=np.float32)
        values[1, 0, 1] = np.inf
        path = tmp_path / "inf.pbfv"
        path.write_bytes(reference_pbfv_bytes("x", 0, 0, "r", values))
        with pytest.raises(FileFormatError) as err:
            read_feature_file(path)
        assert err.value.code is FormatErrorCode.NON_FINITE

    def test_bad_shape_rejected(self, tmp_path):
        values = np.zeros((2, 1, 3), dtype=np.float32)
        raw = bytearray(reference_pbfv_bytes("x", 0, 0, "r", values))
        # force d=0 in the header (offset: 4 magic + 2 ver + 2+1 eid + 2 + 2+1 rid + 4 + 4)
        d_off = 4 + 2 + 3 + 2 + 3 + 8
        raw[d_off : d_off + 4] = struct.pack("<I", 0)
        body = bytes(raw[:-4])
        path = tmp_path / "s.pbfv"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(FileFormatError) as err:
            read_feature_file(path)
        assert err.value.code is FormatErrorCode.BAD_SHAPE

    def test_empty_set_round_trip(self, tmp_path):
        dset = extract_set_baseline([], "empty", Label.NORMAL, 0)
        path = tmp_path / "e.pbfv"
        write_feature_file(dset, path)
        loaded = read_feature_file(path)
        assert loaded.n_patches == 0
        assert (loaded.r, loaded.d) == (16, 16)
