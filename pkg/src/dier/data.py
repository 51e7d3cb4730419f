"""Dataset readers, synthetic shape sets and preprocessing into network input."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class LabeledImageSet:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    class_count: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int | None) -> "LabeledImageSet":
        if count is None or count >= len(self):
            return self
        return LabeledImageSet(self.images[:count], self.labels[:count], self.class_count, self.name)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, magic: int, ndim: int, path) -> tuple:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: {len(raw)} bytes, too short for an IDX header ({need} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4:need])


def read_idx(images_path, labels_path, name: str = "") -> LabeledImageSet:
    """Read an MNIST-style image/label IDX pair (plain or gzip)."""
    raw_i = _read_bytes(images_path)
    n, h, w = _header(raw_i, IDX_IMAGES, 3, images_path)
    body = raw_i[16:]
    if len(body) != n * h * w:
        raise FormatError(
            f"{images_path}: payload at offset 16 has {len(body)} bytes, header declares {n * h * w}")
    raw_l = _read_bytes(labels_path)
    (m,) = _header(raw_l, IDX_LABELS, 1, labels_path)
    lbody = raw_l[8:]
    if len(lbody) != m:
        raise FormatError(f"{labels_path}: payload at offset 8 has {len(lbody)} bytes, header declares {m}")
    if m != n:
        raise FormatError(f"image count {n} does not match label count {m}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w).copy()
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    classes = int(labels.max()) + 1 if m else 0
    return LabeledImageSet(images, labels, max(classes, 10 if classes <= 10 else classes),
                           name or Path(images_path).name)


def write_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Write a single-channel set in the IDX layout (inverse of :func:`read_idx`)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError(f"IDX image files hold one channel, set has {c}")
    if dataset.labels.max(initial=0) > 255:
        raise FormatError("IDX label files hold uint8 labels")
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES, n, h, w) + dataset.images.astype(np.uint8).tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS, n) + dataset.labels.astype(np.uint8).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_idx_pair(directory, split: str) -> tuple[Path, Path]:
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (directory / cand).exists():
                found.append(directory / cand)
                break
        else:
            raise FileNotFoundError(f"{directory}: no {stem}[.gz]")
    return found[0], found[1]


def write_idx_split(images: np.ndarray, labels: np.ndarray, directory, test_count: int,
                    seed: int = 0) -> tuple[int, int]:
    """Shuffle ``[N, H, W]`` uint8 digits and write MNIST-named train/test IDX pairs.

    The test split takes ``test_count`` items stratified by label so both
    splits keep the class balance of the source.
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim == 3:
        images = images[:, None]
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = test_count // len(classes)
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(labels == c))[:per_class] for c in classes])
    test_idx = test_idx[:test_count]
    train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", rng.permutation(train_idx)), ("test", rng.permutation(test_idx))):
        ip, lp = MNIST_FILES[split]
        write_idx(LabeledImageSet(images[idx], labels[idx], int(labels.max()) + 1), directory / ip, directory / lp)
    return len(train_idx), len(test_idx)


def load_mnist_dir(directory, split: str = "train") -> LabeledImageSet:
    img, lab = find_idx_pair(directory, split)
    return read_idx(img, lab, name=f"mnist-{split}")


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("disc", "square", "cross", "stripes", "triangle", "ring", "diamond", "bar")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "cross":
        arm = max(0.9, r * 0.3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "stripes":
        period = 2 + int(rng.integers(0, 2))
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & (np.floor(yy) % period == 0)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "bar":
        return (np.abs(dy) <= max(0.9, r * 0.3)) & (np.abs(dx) <= r)
    raise ConfigError(f"unknown shape kind {kind!r}")


def synth_shapes(n_per_class: int, classes: int = 4, size: int = 16, seed: int = 0,
                 name: str = "shapes") -> LabeledImageSet:
    """Grayscale images of one bright shape each on a dark, noisy background.

    Position and scale vary per image, so class identity is not a linear
    function of the raw pixels, while the shape outline stays the dominant
    image content.
    """
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    if not 1 <= classes <= len(SHAPE_KINDS):
        raise ConfigError(f"classes must be in [1, {len(SHAPE_KINDS)}], got {classes}")
    rng = np.random.default_rng(seed)
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        r = rng.uniform(0.25, 0.42) * size
        cy, cx = rng.uniform(r * 0.8, size - r * 0.8, size=2)
        mask = _shape_mask(SHAPE_KINDS[lab], size, cy, cx, r, rng)
        bg = rng.uniform(20, 60)
        fg = bg + rng.uniform(120, 180)
        img = np.where(mask, fg, bg) + rng.normal(0, 8, size=(size, size))
        images[i, 0] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels.astype(np.int64), classes, name)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of ``[N, C, H, W]`` to ``size x size``."""
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images
    rows = np.minimum((np.arange(size) * h / size).astype(np.int64), h - 1)
    cols = np.minimum((np.arange(size) * w / size).astype(np.int64), w - 1)
    return images[..., rows[:, None], cols[None, :]]


def to_unit_range(images: np.ndarray) -> np.ndarray:
    """uint8 ``[0, 255]`` -> float32 ``[-1, 1]``."""
    return (images.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def from_unit_range(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


class BatchStream:
    """Float batches of a preprocessed set; ordering is a pure function of (seed, epoch)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int,
                 augment_flip: bool, seed: int):
        self.images = images
        self.labels = labels
        self.batch_size = batch_size
        self.augment_flip = augment_flip
        self.seed = seed

    def __len__(self) -> int:
        return math.ceil(len(self.images) / self.batch_size)

    def epoch(self, index: int, shuffle: bool = True):
        n = len(self.images)
        rng = np.random.default_rng([self.seed, index])
        order = rng.permutation(n) if shuffle else np.arange(n)
        flips = rng.random(n) < 0.5 if self.augment_flip else np.zeros(n, dtype=bool)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.images[idx]
            if self.augment_flip:
                x = np.where(flips[idx][:, None, None, None], hflip(x), x)
            yield x, self.labels[idx]


def preprocess(dataset: LabeledImageSet, target_size: int | None = None, augment_flip: bool = False,
               seed: int = 0, batch_size: int = 32) -> BatchStream:
    """Resize (nearest, upsampling only), map to [-1, 1] and wrap in a seeded batch stream."""
    images = dataset.images
    if target_size is not None:
        if target_size < images.shape[-1]:
            raise ConfigError(f"target size {target_size} smaller than source {images.shape[-1]}")
        images = resize_nearest(images, target_size)
    return BatchStream(to_unit_range(images), dataset.labels, batch_size, augment_flip, seed)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) from uint8 ``[H, W]``, ``[1, H, W]`` or ``[3, H, W]``."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8).reshape(image.shape[-2:])
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file back as uint8 ``[H, W]`` or ``[H, W, 3]``."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    kind, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or kind not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM header")
    chans = 3 if kind == b"P6" else 1
    body = raw[len(raw) - w * h * chans:]
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if chans == 3 else arr.reshape(h, w)
