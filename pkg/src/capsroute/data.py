"""Dataset loading, batching, and MultiMNIST synthesis.

Supported sources: MNIST / Fashion-MNIST IDX files (optionally gzipped),
CIFAR-10 binary batches (3073-byte records), MultiMNIST images synthesized
on the fly from a 28x28 base split, and a self-contained procedurally
rendered digit set for environments without the real files.

All loaders produce pixel values in [0, 1]; every split is validated for
that range on construction.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError
from .rng import substream

IDX_UBYTE = 0x08

# canvas / shift geometry for overlapped-digit synthesis
MULTIMNIST_SIDE = 36
MULTIMNIST_MAX_SHIFT = 4


@dataclass(frozen=True)
class LabeledImage:
    """One image with its set of one or two distinct class labels."""

    pixels: np.ndarray  # C,H,W in [0,1]
    labels: tuple[int, ...]


@dataclass
class DatasetSplit:
    """A named split stored densely: images [N,C,H,W], one label tuple per image."""

    images: np.ndarray
    labels: list[tuple[int, ...]]
    name: str = "train"
    source: str = "mnist"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DataError(f"split needs a non-empty [N,C,H,W] image array, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} label tuples")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixel range [{lo}, {hi}] outside [0, 1]")
        for t in self.labels:
            if len(t) not in (1, 2) or len(set(t)) != len(t):
                raise DataError(f"label tuple {t} must hold 1 or 2 distinct classes")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], self.labels[i])

    @property
    def num_classes(self) -> int:
        return max(max(t) for t in self.labels) + 1


@dataclass
class Batch:
    """A minibatch: images [p,C,H,W] plus one label tuple per image."""

    images: np.ndarray
    labels: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.images)


def _open_maybe_gzip(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: str, kind: str) -> np.ndarray:
    """Parse an IDX file of unsigned bytes.

    ``kind='images'`` expects rank 3 and returns float64 [N,H,W] scaled by
    1/255; ``kind='labels'`` expects rank 1 and returns int64 [N].
    """
    if kind not in ("images", "labels"):
        raise ConfigError(f"kind must be 'images' or 'labels', got {kind!r}")
    with _open_maybe_gzip(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise FormatError(f"{path}: truncated header at byte {len(head)}")
        zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", head)
        if zero1 != 0 or zero2 != 0 or dtype_code != IDX_UBYTE:
            raise FormatError(
                f"{path}: bad magic {head.hex()} at byte 0 (want 0000{IDX_UBYTE:02x}<ndim>)"
            )
        want_ndim = 3 if kind == "images" else 1
        if ndim != want_ndim:
            raise FormatError(f"{path}: rank {ndim} at byte 3, {kind} files must be rank {want_ndim}")
        dim_bytes = f.read(4 * ndim)
        if len(dim_bytes) < 4 * ndim:
            raise FormatError(f"{path}: truncated dimension header at byte {4 + len(dim_bytes)}")
        dims = struct.unpack(f">{ndim}I", dim_bytes)
        expected = int(np.prod(dims))
        payload = f.read(expected + 1)  # read one extra byte to detect trailing junk cheaply
        if len(payload) < expected:
            raise FormatError(
                f"{path}: truncated payload at byte {4 + 4 * ndim + len(payload)} "
                f"(expected {expected} data bytes)"
            )
    raw = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)
    if kind == "images":
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.int64)


def write_idx(path: str, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (inverse of read_idx).

    Float image arrays in [0,1] are quantized with round(x*255); integer
    arrays are written as-is and must fit in a byte.
    """
    a = np.asarray(array)
    if np.issubdtype(a.dtype, np.floating):
        data = np.round(a * 255.0).astype(np.uint8)
    else:
        if a.min() < 0 or a.max() > 255:
            raise DataError(f"integer payload out of byte range [{a.min()}, {a.max()}]")
        data = a.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, IDX_UBYTE, data.ndim))
        f.write(struct.pack(f">{data.ndim}I", *data.shape))
        f.write(np.ascontiguousarray(data).tobytes())


CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


def read_cifar10(path: str, name: str = "train") -> DatasetSplit:
    """Read one CIFAR-10 binary batch into a DatasetSplit of [N,3,32,32] images."""
    with _open_maybe_gzip(path) as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD}")
    n = len(blob) // CIFAR_RECORD
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label byte {labels[bad]} out of range at record {bad}")
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return DatasetSplit(images, [(int(c),) for c in labels], name=name, source="cifar10")


def overlay_pair(
    img_a: np.ndarray,
    img_b: np.ndarray,
    shift_a: tuple[int, int],
    shift_b: tuple[int, int],
    side: int = MULTIMNIST_SIDE,
) -> np.ndarray:
    """Compose two [C,28,28] digits on a side x side canvas by pixel-wise max.

    A digit at shift (dy, dx) starts at canvas row/column 4+dy/4+dx, which
    for shifts in [-4, +4] lies in [0, 8]; 28 + 8 = 36, so the digit always
    fits and no pixels are cropped.
    """
    c, h, w = img_a.shape
    canvas = np.zeros((c, side, side), dtype=img_a.dtype)
    for img, (dy, dx) in ((img_a, shift_a), (img_b, shift_b)):
        if abs(dy) > MULTIMNIST_MAX_SHIFT or abs(dx) > MULTIMNIST_MAX_SHIFT:
            raise DataError(f"shift ({dy}, {dx}) outside +/-{MULTIMNIST_MAX_SHIFT}")
        r, col = MULTIMNIST_MAX_SHIFT + dy, MULTIMNIST_MAX_SHIFT + dx
        region = canvas[:, r : r + h, col : col + w]
        np.maximum(region, img, out=region)
    return canvas


def make_multimnist(
    base: DatasetSplit, count: int, seed: int, with_meta: bool = False
):
    """Overlay pairs of different-class base digits on a 36x36 canvas.

    Each digit is independently shifted by integer offsets in [-4, +4] on
    both axes; composition is pixel-wise maximum (keeps both strokes and the
    [0,1] range).  Deterministic given the seed.  With ``with_meta`` the
    per-sample (index_a, index_b, shift_a, shift_b) draws are returned too.
    """
    n, c, h, w = base.images.shape
    if (h, w) != (28, 28) or any(len(t) != 1 for t in base.labels):
        raise DataError("multimnist base must be a 28x28 single-label split")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    flat = np.array([t[0] for t in base.labels])
    if len(np.unique(flat)) < 2:
        raise DataError("multimnist base needs at least 2 distinct classes")
    rng = substream(seed, "multimnist")
    out = np.zeros((count, c, MULTIMNIST_SIDE, MULTIMNIST_SIDE), dtype=base.images.dtype)
    labels: list[tuple[int, ...]] = []
    meta = []
    for i in range(count):
        ia = int(rng.integers(0, n))
        ib = int(rng.integers(0, n))
        while flat[ib] == flat[ia]:
            ib = int(rng.integers(0, n))
        sa = tuple(int(x) for x in rng.integers(-MULTIMNIST_MAX_SHIFT, MULTIMNIST_MAX_SHIFT + 1, 2))
        sb = tuple(int(x) for x in rng.integers(-MULTIMNIST_MAX_SHIFT, MULTIMNIST_MAX_SHIFT + 1, 2))
        out[i] = overlay_pair(base.images[ia], base.images[ib], sa, sb)
        labels.append(tuple(sorted((int(flat[ia]), int(flat[ib])))))
        meta.append((ia, ib, sa, sb))
    split = DatasetSplit(out, labels, name=base.name, source="multimnist")
    return (split, meta) if with_meta else split


def write_multimnist(split: DatasetSplit, image_path: str, label_path: str) -> None:
    """Export a MultiMNIST split: IDX image file plus a two-column label file."""
    write_idx(image_path, split.images[:, 0])
    with open(label_path, "w") as f:
        for t in split.labels:
            f.write(f"{t[0]},{t[1]}\n")


def batches(split: DatasetSplit, p: int, shuffle_seed: int):
    """Yield one shuffled epoch of Batch objects; the final partial batch is kept."""
    n = len(split)
    if p < 1:
        raise ConfigError(f"batch size must be >= 1, got {p}")
    if p > n:
        raise ConfigError(f"batch size {p} exceeds split size {n}")
    order = substream(shuffle_seed, "batch-order").permutation(n)
    for start in range(0, n, p):
        idx = order[start : start + p]
        yield Batch(split.images[idx], [split.labels[i] for i in idx])


# ---------------------------------------------------------------------------
# Procedural digit rendering (desk-scale stand-in when IDX files are absent)
# ---------------------------------------------------------------------------

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_canvas(digit: int, side: int) -> np.ndarray:
    bitmap = np.array([[int(ch) for ch in row] for row in _GLYPHS[digit]], dtype=np.float64)
    glyph = np.kron(bitmap, np.ones((3, 3)))  # 21 x 15
    canvas = np.zeros((side, side))
    r0 = (side - glyph.shape[0]) // 2
    c0 = (side - glyph.shape[1]) // 2
    canvas[r0 : r0 + glyph.shape[0], c0 : c0 + glyph.shape[1]] = glyph
    return canvas


def make_synthetic_digits(count: int, seed: int, name: str = "train", side: int = 28) -> DatasetSplit:
    """Render a balanced 10-class digit set with random rotation/scale/shift.

    Stands in for MNIST at reduced scale: deterministic given the seed,
    28x28 single-channel images in [0, 1].
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    rng = substream(seed, f"synthetic-digits-{name}")
    classes = rng.permutation(np.arange(count) % 10)
    images = np.zeros((count, 1, side, side), dtype=np.float64)
    center = (side - 1) / 2.0
    for i, cls in enumerate(classes):
        theta = rng.uniform(-0.25, 0.25)
        scale = rng.uniform(0.85, 1.2)
        ty, tx = rng.uniform(-3.0, 3.0, size=2)
        cosv, sinv = np.cos(theta) / scale, np.sin(theta) / scale
        mat = np.array([[cosv, -sinv], [sinv, cosv]])
        offset = np.array([center, center]) - mat @ np.array([center + ty, center + tx])
        img = ndimage.affine_transform(
            _glyph_canvas(int(cls), side), mat, offset=offset, order=1, mode="constant"
        )
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return DatasetSplit(images, [(int(c),) for c in classes], name=name, source="synthetic")


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(data_dir: str, base: str) -> str:
    for cand in (base, base + ".gz", base.replace("-idx", ".idx"), base.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(data_dir, cand)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no IDX file {base}[.gz] under {data_dir}")


def load_idx_split(data_dir: str, name: str, source: str = "mnist") -> DatasetSplit:
    """Load an MNIST-layout split (train or test) from a directory of IDX files."""
    img_base, lab_base = _IDX_NAMES[name]
    images = read_idx(_find_idx(data_dir, img_base), "images")
    labels = read_idx(_find_idx(data_dir, lab_base), "labels")
    if len(images) != len(labels):
        raise FormatError(f"{data_dir}: {len(images)} images vs {len(labels)} labels")
    if labels.min() < 0 or labels.max() > 9:
        raise FormatError(f"{data_dir}: labels outside [0, 9]")
    return DatasetSplit(images[:, None, :, :], [(int(c),) for c in labels], name=name, source=source)


def load_cifar10_split(data_dir: str, name: str) -> DatasetSplit:
    """Load the standard CIFAR-10 binary batches (1-5 for train, test_batch for test)."""
    files = [f"data_batch_{i}.bin" for i in range(1, 6)] if name == "train" else ["test_batch.bin"]
    parts = []
    for fn in files:
        path = os.path.join(data_dir, fn)
        if not os.path.exists(path):
            path = os.path.join(data_dir, fn.removesuffix(".bin"))
        parts.append(read_cifar10(path, name=name))
    images = np.concatenate([s.images for s in parts])
    labels = [t for s in parts for t in s.labels]
    return DatasetSplit(images, labels, name=name, source="cifar10")


def load_dataset(
    dataset: str,
    data_dir: str | None,
    name: str,
    limit: int = 0,
    seed: int = 0,
    multimnist_count: int = 10000,
) -> DatasetSplit:
    """Dispatch on dataset id; ``limit`` > 0 truncates to the first N items.

    ``synthetic`` renders digits locally and needs no files.  ``multimnist``
    synthesizes overlapped digits from the MNIST files in ``data_dir``.
    """
    if dataset in ("mnist", "fashion"):
        split = load_idx_split(data_dir, name, source=dataset)
    elif dataset == "cifar10":
        split = load_cifar10_split(data_dir, name)
    elif dataset == "multimnist":
        base = load_idx_split(data_dir, name, source="mnist")
        split = make_multimnist(base, multimnist_count, seed=seed)
    elif dataset == "synthetic":
        split = make_synthetic_digits(limit if limit > 0 else 10000, seed=seed, name=name)
        return split
    else:
        raise ConfigError(f"unknown dataset {dataset!r}")
    if limit > 0:
        split = DatasetSplit(split.images[:limit], split.labels[:limit], name=name, source=split.source)
    return split
