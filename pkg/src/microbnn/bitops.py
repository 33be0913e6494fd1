"""Bit-level primitives for binarized tensors.

Math values are +1/-1; storage is 1/0 (+1 -> 1, -1 -> 0). Rows pack
LSB-first: logical bit i of a row lands in byte i // 8 at bit position
i % 8. Pad bits up to the byte boundary are always zero, so whole-byte
xor/popcount needs no tail masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Engine limit: one packed row must fit a u16 bit index.
MAX_WIDTH = 1 << 16


def row_stride_bytes(width: int) -> int:
    """Bytes per packed row: ceil(width / 8)."""
    return (width + 7) // 8


def popcount(x: int) -> int:
    """Number of set bits of a non-negative integer of any size."""
    if x < 0:
        raise ValueError("popcount requires a non-negative integer")
    return x.bit_count()


def binary_activation(x: float) -> int:
    """Deterministic sign binarization: negatives to -1, zero and positives to +1."""
    if math.isnan(x):
        raise ValueError("binary_activation: input is NaN")
    return -1 if x < 0 else 1


def pack_row(values) -> bytes:
    """Pack a 1-d sequence of +-1 values into LSB-first bytes with zero pads."""
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"pack_row expects a 1-d sequence, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("pack_row expects at least one value")
    if not np.isin(arr, (-1, 1)).all():
        raise ValueError("pack_row values must be -1 or +1")
    return np.packbits(arr > 0, bitorder="little").tobytes()


def unpack_row(data, width: int) -> np.ndarray:
    """Inverse of pack_row: bytes back to an int8 array of +-1."""
    if width < 1:
        raise ValueError("unpack_row width must be positive")
    if len(data) != row_stride_bytes(width):
        raise ValueError(f"unpack_row: {len(data)} bytes cannot hold width {width}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=width, bitorder="little")
    return bits.astype(np.int8) * 2 - 1


def xnor_popcount_dot(a, b, n: int) -> int:
    """+-1 dot product of two packed rows of n bits: n - 2*popcount(a xor b).

    Requires zero pad bits on both rows; a mismatched pad bit would leak
    into the popcount.
    """
    if len(a) != len(b):
        raise ValueError(f"xnor_popcount_dot: row lengths differ, {len(a)} vs {len(b)} bytes")
    if n < 1 or len(a) != row_stride_bytes(n):
        raise ValueError(f"xnor_popcount_dot: {len(a)} bytes does not match n={n}")
    diff = int.from_bytes(a, "little") ^ int.from_bytes(b, "little")
    return n - 2 * diff.bit_count()


@dataclass(eq=False)
class BitTensor:
    """Bit-packed tensor of shape (channels, height, width).

    Row (c, y) occupies row_stride bytes starting at byte
    (c * height + y) * row_stride. data may view caller-owned storage
    (the inference arena wraps its buffers this way); writers must keep
    pad bits zero.
    """

    channels: int
    height: int
    width: int
    row_stride: int
    data: memoryview

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("BitTensor dimensions must be positive")
        if self.width > MAX_WIDTH:
            raise ValueError(f"BitTensor width {self.width} exceeds {MAX_WIDTH}")
        if self.row_stride != row_stride_bytes(self.width):
            raise ValueError("BitTensor row_stride must be ceil(width/8)")
        if len(self.data) != self.nbytes:
            raise ValueError(f"BitTensor data holds {len(self.data)} B, shape needs {self.nbytes}")

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "BitTensor":
        stride = row_stride_bytes(width)
        buf = bytearray(channels * height * stride)
        return cls(channels, height, width, stride, memoryview(buf))

    @classmethod
    def wrap(cls, buf, channels: int, height: int, width: int) -> "BitTensor":
        """View the leading bytes of an existing buffer; no copy."""
        stride = row_stride_bytes(width)
        need = channels * height * stride
        view = memoryview(buf)
        if len(view) < need:
            raise ValueError(f"buffer holds {len(view)} B, tensor needs {need}")
        return cls(channels, height, width, stride, view[:need])

    @classmethod
    def from_planes(cls, planes) -> "BitTensor":
        """Pack a (channels, height, width) array of +-1 values."""
        arr = np.asarray(planes)
        if arr.ndim != 3:
            raise ValueError(f"from_planes expects 3 dimensions, got shape {arr.shape}")
        if not np.isin(arr, (-1, 1)).all():
            raise ValueError("from_planes values must be -1 or +1")
        c, h, w = arr.shape
        out = cls.zeros(c, h, w)
        packed = np.packbits(arr.reshape(c * h, w) > 0, axis=1, bitorder="little")
        out.data[:] = packed.tobytes()
        return out

    @property
    def nbytes(self) -> int:
        return self.channels * self.height * self.row_stride

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def _row_offset(self, c: int, y: int) -> int:
        return (c * self.height + y) * self.row_stride

    def row(self, c: int, y: int) -> memoryview:
        off = self._row_offset(c, y)
        return self.data[off:off + self.row_stride]

    def row_int(self, c: int, y: int) -> int:
        return int.from_bytes(self.row(c, y), "little")

    def set_row_int(self, c: int, y: int, bits: int) -> None:
        if bits >> self.width:
            raise ValueError("row value has bits beyond width; pads must stay zero")
        off = self._row_offset(c, y)
        self.data[off:off + self.row_stride] = bits.to_bytes(self.row_stride, "little")

    def rows_as_ints(self) -> list[int]:
        """All rows as little-endian integers, flat index c * height + y."""
        stride = self.row_stride
        raw = self.data
        return [int.from_bytes(raw[i * stride:(i + 1) * stride], "little")
                for i in range(self.channels * self.height)]

    def get_bit(self, c: int, y: int, x: int) -> int:
        """Single element as +-1."""
        byte = self.data[self._row_offset(c, y) + (x >> 3)]
        return 1 if (byte >> (x & 7)) & 1 else -1

    def to_planes(self) -> np.ndarray:
        """Unpack to an int8 array of +-1, shape (channels, height, width)."""
        rows = np.frombuffer(self.data, dtype=np.uint8)
        rows = rows.reshape(self.channels * self.height, self.row_stride)
        bits = np.unpackbits(rows, axis=1, count=self.width, bitorder="little")
        return (bits.astype(np.int8) * 2 - 1).reshape(self.shape)

    def pads_zero(self) -> bool:
        w = self.width
        return all(r >> w == 0 for r in self.rows_as_ints())

    def tobytes(self) -> bytes:
        return bytes(self.data)

    def copy(self) -> "BitTensor":
        out = BitTensor.zeros(self.channels, self.height, self.width)
        out.data[:] = self.data
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and self.tobytes() == other.tobytes()
