"""Dataset ingestion and synthetic generators.

Real datasets arrive as IDX files (big-endian headers) or CIFAR-10
binary batches (3073-byte records). Pixels are scaled from [0, 255]
to [-1, 1]: value (2p - 255) / 255, so 0 -> -1.0 and 255 -> +1.0.
The symmetric range matches the +-1 first-layer accumulation and is
the same scaling the generated C applies on-device.

The synthetic generators exist so the training and screening tests do
not depend on dataset files being present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelFormatError
from .inference import InputTensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class LabeledDataset:
    """Immutable-by-convention sample/label pairs.

    samples are InputTensor (f32 planes); labels are integer class
    indices below class_count.
    """

    samples: list[InputTensor]
    labels: np.ndarray
    class_count: int
    _stack: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but "
                             f"{len(self.labels)} labels")
        if self.class_count <= 0:
            raise ValueError("class_count must be positive")
        if len(self.labels) and not (0 <= self.labels.min()
                                     and self.labels.max() < self.class_count):
            raise ValueError("labels out of range for class_count "
                             f"{self.class_count}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.samples[0].shape

    def stacked(self) -> np.ndarray:
        """All samples as one (n, c, h, w) f32 array (cached)."""
        if self._stack is None:
            self._stack = np.stack([s.data for s in self.samples])
        return self._stack

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset([self.samples[i] for i in idx],
                              self.labels[idx], self.class_count)

    def split(self, eval_fraction: float, seed: int):
        """Deterministic shuffled (train, eval) partition."""
        if not 0.0 <= eval_fraction < 1.0:
            raise ValueError(f"eval_fraction {eval_fraction} not in [0, 1)")
        order = np.random.default_rng(seed).permutation(len(self))
        n_eval = int(round(len(self) * eval_fraction))
        return self.subset(order[n_eval:]), self.subset(order[:n_eval])


def _scale_pixels(raw: np.ndarray) -> np.ndarray:
    # (2p - 255) / 255 lands every pixel on a fixed f32 grid
    return ((2.0 * raw.astype(np.float64) - 255.0) / 255.0).astype(np.float32)


def _read_idx_header(blob: bytes, path, expect_magic: int, ndim: int):
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise ModelFormatError(f"{path}: truncated IDX header", len(blob))
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expect_magic:
        raise ModelFormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected "
            f"0x{expect_magic:08x}", 0)
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    return dims, head


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (the MNIST distribution format)."""
    with open(images_path, "rb") as f:
        img_blob = f.read()
    with open(labels_path, "rb") as f:
        lab_blob = f.read()

    (n, rows, cols), img_off = _read_idx_header(
        img_blob, images_path, IDX_IMAGES_MAGIC, 3)
    need = img_off + n * rows * cols
    if len(img_blob) < need:
        raise ModelFormatError(
            f"{images_path}: expected {need} bytes for {n} images of "
            f"{rows}x{cols}, got {len(img_blob)}", len(img_blob))

    (n_labels,), lab_off = _read_idx_header(
        lab_blob, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab_blob) < lab_off + n_labels:
        raise ModelFormatError(
            f"{labels_path}: expected {lab_off + n_labels} bytes for "
            f"{n_labels} labels, got {len(lab_blob)}", len(lab_blob))
    if n_labels != n:
        raise ModelFormatError(
            f"image/label count mismatch: {n} images vs {n_labels} labels")

    pixels = np.frombuffer(img_blob, dtype=np.uint8, count=n * rows * cols,
                           offset=img_off).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_blob, dtype=np.uint8, count=n,
                           offset=lab_off).astype(np.int64)
    scaled = _scale_pixels(pixels)
    samples = [InputTensor.from_array(scaled[i]) for i in range(n)]
    return LabeledDataset(samples, labels, 10)


def load_cifar10(batch_path) -> LabeledDataset:
    """Load one CIFAR-10 binary batch (3073-byte records, RGB planes)."""
    with open(batch_path, "rb") as f:
        blob = f.read()
    if not blob or len(blob) % CIFAR_RECORD_BYTES:
        raise ModelFormatError(
            f"{batch_path}: size {len(blob)} is not a multiple of "
            f"{CIFAR_RECORD_BYTES}-byte records", len(blob))
    n = len(blob) // CIFAR_RECORD_BYTES
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(n, 3, 32, 32)
    scaled = _scale_pixels(pixels)
    samples = [InputTensor.from_array(scaled[i]) for i in range(n)]
    return LabeledDataset(samples, labels, 10)


def _quantize_grid(x: np.ndarray) -> np.ndarray:
    """Snap to the same (2p - 255) / 255 grid the pixel loaders produce."""
    p = np.clip(np.round((x + 1.0) * (255.0 / 2.0)), 0, 255)
    return ((2.0 * p - 255.0) / 255.0).astype(np.float32)


def synth_separable(dim: int, classes: int, n: int, seed: int) -> LabeledDataset:
    """Linearly separable point clouds, one per class, balanced round-robin.

    Class centroids sit on distinct lattice points spaced so pairwise
    centroid distance (>= 0.75) exceeds 4x the cloud radius (0.1 plus
    grid snap): separability holds by construction. n is the total
    sample count; samples are (1, 1, dim) tensors.
    """
    if min(dim, classes, n) <= 0:
        raise ValueError("dim, classes and n must be positive")
    rng = np.random.default_rng(seed)
    spacing, radius = 0.75, 0.1
    centroids = np.zeros((classes, dim))
    for j in range(classes):
        centroids[j, j % dim] = spacing * (1 + j // dim)
    half_side = radius / np.sqrt(dim)  # cube inscribed in the radius ball
    labels = np.arange(n, dtype=np.int64) % classes
    noise = rng.uniform(-half_side, half_side, size=(n, dim))
    points = _quantize_grid(centroids[labels] + noise)
    samples = [InputTensor.from_array(points[i].reshape(1, 1, dim))
               for i in range(n)]
    return LabeledDataset(samples, labels, classes)


# 7x7 glyphs, upscaled 4x to 28x28 by synth_images. Roughly digit-shaped;
# what matters is that they are distinct under small shifts and noise.
_GLYPHS = [
    """.#####.
       #.....#
       #...#.#
       #..#..#
       #.#...#
       #.....#
       .#####.""",
    """...#...
       ..##...
       .#.#...
       ...#...
       ...#...
       ...#...
       .#####.""",
    """.#####.
       #.....#
       ......#
       .#####.
       #......
       #......
       #######""",
    """######.
       ......#
       ......#
       .#####.
       ......#
       ......#
       ######.""",
    """#....#.
       #....#.
       #....#.
       #######
       .....#.
       .....#.
       .....#.""",
    """#######
       #......
       #......
       ######.
       ......#
       ......#
       ######.""",
    """.#####.
       #......
       #......
       ######.
       #.....#
       #.....#
       .#####.""",
    """#######
       .....#.
       ....#..
       ...#...
       ..#....
       .#.....
       #......""",
    """.#####.
       #.....#
       #.....#
       .#####.
       #.....#
       #.....#
       .#####.""",
    """.#####.
       #.....#
       #.....#
       .######
       ......#
       ......#
       .#####.""",
]


def _glyph_planes() -> np.ndarray:
    planes = np.empty((10, 7, 7), dtype=np.float32)
    for i, art in enumerate(_GLYPHS):
        rows = [r.strip() for r in art.strip().splitlines()]
        planes[i] = [[1.0 if ch == "#" else -1.0 for ch in row]
                     for row in rows]
    return planes


def synth_images(n: int, seed: int, noise: float = 0.25) -> LabeledDataset:
    """28x28 glyph classification set: ten fixed 7x7 shapes upscaled 4x,
    jittered by +-2 pixel shifts and additive noise, snapped to the
    pixel grid. A stand-in for digit data when no files are available."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    base = np.kron(_glyph_planes(), np.ones((4, 4), dtype=np.float32))
    labels = np.arange(n, dtype=np.int64) % 10
    samples = []
    for i in range(n):
        canvas = np.full((28, 28), -1.0, dtype=np.float32)
        dy, dx = rng.integers(-2, 3, size=2)
        ys, xs = max(0, dy), max(0, dx)
        ye, xe = 28 + min(0, dy), 28 + min(0, dx)
        canvas[ys:ye, xs:xe] = base[labels[i], ys - dy:ye - dy, xs - dx:xe - dx]
        canvas += rng.uniform(-noise, noise, size=(28, 28)).astype(np.float32)
        samples.append(InputTensor.from_array(
            _quantize_grid(canvas).reshape(1, 28, 28)))
    return LabeledDataset(samples, labels, 10)
