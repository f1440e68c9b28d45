"""Loaders, batching, and MultiMNIST synthesis."""

import struct

import numpy as np
import pytest

from capsroute.data import (
    DatasetSplit,
    batches,
    make_multimnist,
    make_synthetic_digits,
    overlay_pair,
    read_cifar10,
    read_idx,
    write_idx,
    write_multimnist,
)
from capsroute.errors import ConfigError, DataError, FormatError


def split_from_labels(images, flat_labels, **kw):
    return DatasetSplit(images, [(int(c),) for c in flat_labels], **kw)


class TestIdx:
    def test_image_header(self, tmp_path):
        path = tmp_path / "cube"
        payload = bytes(range(8))
        path.write_bytes(struct.pack(">BBBB", 0, 0, 8, 3) + struct.pack(">3I", 2, 2, 2) + payload)
        arr = read_idx(str(path), "images")
        assert arr.shape == (2, 2, 2)
        np.testing.assert_allclose(arr.ravel() * 255.0, np.arange(8), atol=1e-12)

    def test_label_file(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(struct.pack(">BBBB", 0, 0, 8, 1) + struct.pack(">I", 3) + bytes([0, 5, 9]))
        np.testing.assert_array_equal(read_idx(str(path), "labels"), [0, 5, 9])

    def test_rank_mismatch_is_format_error(self, tmp_path):
        path = tmp_path / "matrix"
        path.write_bytes(struct.pack(">BBBB", 0, 0, 8, 2) + struct.pack(">2I", 2, 2) + bytes(4))
        with pytest.raises(FormatError):
            read_idx(str(path), "images")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x12\x34\x08\x03" + struct.pack(">3I", 1, 1, 1) + bytes(1))
        with pytest.raises(FormatError, match="byte 0"):
            read_idx(str(path), "images")

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">BBBB", 0, 0, 8, 3) + struct.pack(">3I", 2, 2, 2) + bytes(5))
        with pytest.raises(FormatError, match="truncated"):
            read_idx(str(path), "images")

    def test_round_trip_is_byte_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(4, 6, 6)).astype(np.uint8)
        path = tmp_path / "fixture"
        write_idx(str(path), raw)
        back = read_idx(str(path), "images")
        np.testing.assert_array_equal(np.round(back * 255.0).astype(np.uint8), raw)
        # and the serialized bytes themselves survive a write/read/write loop
        write_idx(str(tmp_path / "again"), back)
        assert (tmp_path / "again").read_bytes() == path.read_bytes()


class TestCifar10:
    def _record(self, label, fill):
        return bytes([label]) + bytes([fill]) * 3072

    def test_two_record_fixture(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(self._record(1, 10) + self._record(9, 200))
        split = read_cifar10(str(path))
        assert split.images.shape == (2, 3, 32, 32)
        assert split.labels == [(1,), (9,)]
        np.testing.assert_allclose(split.images[1], 200 / 255.0)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            read_cifar10(str(path))

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(self._record(10, 0))
        with pytest.raises(FormatError, match="label"):
            read_cifar10(str(path))


class TestMultimnist:
    def _base(self, n=40, seed=0):
        return make_synthetic_digits(n, seed=seed)

    def test_canvas_is_36(self):
        split = make_multimnist(self._base(), 5, seed=0)
        assert split.images.shape[2:] == (36, 36)

    def test_zero_digit_overlay_keeps_other_centered(self):
        base = self._base()
        zero = np.zeros_like(base.images[0])
        digit = base.images[1]
        out = overlay_pair(zero, digit, (0, 0), (0, 0))
        np.testing.assert_array_equal(out[:, 4:32, 4:32], digit)
        border = out.copy()
        border[:, 4:32, 4:32] = 0.0
        assert not border.any()

    def test_deterministic_per_seed(self):
        base = self._base()
        a = make_multimnist(base, 10, seed=7)
        b = make_multimnist(base, 10, seed=7)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels == b.labels

    def test_shift_range_and_distinct_classes(self):
        base = self._base(100)
        split, meta = make_multimnist(base, 200, seed=3, with_meta=True)
        for (ia, ib, sa, sb), labels, img in zip(meta, split.labels, split.images):
            assert all(-4 <= s <= 4 for s in (*sa, *sb))
            assert len(set(labels)) == 2
            np.testing.assert_array_equal(img, overlay_pair(base.images[ia], base.images[ib], sa, sb))

    def test_single_class_base_rejected(self):
        base = self._base()
        ones = DatasetSplit(base.images[:5], [(1,)] * 5)
        with pytest.raises(DataError):
            make_multimnist(ones, 3, seed=0)

    def test_export_files(self, tmp_path):
        split = make_multimnist(self._base(), 6, seed=1)
        img_path, lab_path = str(tmp_path / "imgs"), str(tmp_path / "labels.csv")
        write_multimnist(split, img_path, lab_path)
        head = open(img_path, "rb").read(16)
        assert struct.unpack(">BBBB3I", head) == (0, 0, 8, 3, 6, 36, 36)
        lines = open(lab_path).read().strip().splitlines()
        assert len(lines) == 6 and all("," in ln for ln in lines)


class TestBatches:
    def _split(self, n):
        rng = np.random.default_rng(0)
        return split_from_labels(rng.random((n, 1, 4, 4)), rng.integers(0, 10, n))

    def test_partial_final_batch(self):
        sizes = [b.size for b in batches(self._split(10), 3, shuffle_seed=0)]
        assert sizes == [3, 3, 3, 1]

    def test_same_seed_same_order(self):
        split = self._split(12)
        a = [b.images.tobytes() for b in batches(split, 5, shuffle_seed=9)]
        b = [b.images.tobytes() for b in batches(split, 5, shuffle_seed=9)]
        assert a == b

    def test_full_batch_preserves_multiset(self):
        split = self._split(10)
        (batch,) = list(batches(split, 10, shuffle_seed=2))
        assert sorted(map(tuple, batch.images.reshape(10, -1).tolist())) == sorted(
            map(tuple, split.images.reshape(10, -1).tolist())
        )

    def test_oversized_batch_rejected(self):
        with pytest.raises(ConfigError):
            next(batches(self._split(4), 5, shuffle_seed=0))


class TestSyntheticDigits:
    def test_pixel_range_and_balance(self):
        split = make_synthetic_digits(200, seed=0)
        assert split.images.min() >= 0.0 and split.images.max() <= 1.0
        counts = np.bincount([t[0] for t in split.labels], minlength=10)
        assert counts.min() == 20 and counts.max() == 20

    def test_deterministic(self):
        a = make_synthetic_digits(30, seed=5)
        b = make_synthetic_digits(30, seed=5)
        assert a.images.tobytes() == b.images.tobytes()

    def test_split_validation(self):
        with pytest.raises(DataError):
            DatasetSplit(np.full((2, 1, 4, 4), 1.5), [(0,), (1,)])
        with pytest.raises(DataError):
            DatasetSplit(np.zeros((2, 1, 4, 4)), [(0, 0), (1,)])
