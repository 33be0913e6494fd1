"""Unfused oracle: conv -> pool -> BN -> sign as separate full-plane passes.

Deliberately simple and slow. Every block materializes its full
floating-point plane (im2col matrix products, whole-plane pooling,
vectorized BN), taking a route through numpy that shares no code with
the fused engine's per-element bit walk. Used by the equivalence tests;
results must match the fused path bit for bit.

BN is evaluated in the canonical f32 expression (x - mean) * inv + beta
with inv = gamma / sqrt(var + epsilon), each step rounded to f32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitops import BitTensor
from .errors import ValidationError
from .inference import InputTensor
from . import memory
from . import model as m


@dataclass
class FloatPlane:
    """Full floating-point intermediate, shape (channels, height, width)."""

    channels: int
    height: int
    width: int
    data: np.ndarray

    @classmethod
    def from_array(cls, arr) -> "FloatPlane":
        a = np.ascontiguousarray(arr, dtype=np.float32)
        return cls(a.shape[0], a.shape[1], a.shape[2], a)


@dataclass
class ReferenceResult:
    scores: np.ndarray
    label: int
    intermediates: list
    peak_temp_bytes: int


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patches as rows: (oh*ow, c*kernel*kernel), f64."""
    c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    cols = np.empty((oh * ow, c * kernel * kernel), dtype=np.float64)
    i = 0
    for y in range(oh):
        for xx in range(ow):
            patch = x[:, y * stride:y * stride + kernel, xx * stride:xx * stride + kernel]
            cols[i] = patch.reshape(-1)
            i += 1
    return cols, oh, ow


def _conv_plane(x: np.ndarray, block) -> np.ndarray:
    """Convolution as an im2col matrix product, cast to f32 (exact sums for
    grid-quantized inputs, so the cast is the only rounding)."""
    k = block.kernel
    cols, oh, ow = _im2col(x.astype(np.float64), k, block.stride)
    wmat = block.weights.to_planes().astype(np.float64)
    wmat = wmat.reshape(block.filters, block.in_channels * k * k)
    z = cols @ wmat.T  # (oh*ow, filters)
    return z.T.reshape(block.filters, oh, ow).astype(np.float32)


def _maxpool_plane(z: np.ndarray, size: int, stride: int) -> np.ndarray:
    c, h, w = z.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    out = np.empty((c, oh, ow), dtype=np.float32)
    for py in range(oh):
        for px in range(ow):
            win = z[:, py * stride:py * stride + size, px * stride:px * stride + size]
            out[:, py, px] = win.max(axis=(1, 2))
    return out


def _batchnorm_plane(z: np.ndarray, bn: list[m.BnParams]) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float32)
    for c, p in enumerate(bn):
        t = np.float32(np.float32(p.var) + np.float32(p.epsilon))
        s = np.float32(np.sqrt(t))
        inv = np.float32(np.float32(p.gamma) / s)
        out[c] = (z[c] - np.float32(p.mean)) * inv + np.float32(p.beta)
    return out


def _binarize_plane(y: np.ndarray) -> BitTensor:
    return BitTensor.from_planes(np.where(y >= 0, 1, -1).astype(np.int8))


def reference_forward(net: m.Network, inp) -> ReferenceResult:
    """Unfused forward pass; returns per-block binary intermediates and the
    float-temporary accounting figure for the conventional layout."""
    violations = m.validate(net)
    if violations:
        raise ValidationError(violations)
    spec = net.input_spec
    if isinstance(inp, InputTensor):
        if spec.kind != "real" or inp.shape != spec.shape:
            raise ValueError(f"input {inp.shape} does not match declared "
                             f"{spec.kind} {spec.shape}")
        x = inp.data.astype(np.float32)
    elif isinstance(inp, BitTensor):
        if spec.kind != "binary" or inp.shape != spec.shape:
            raise ValueError(f"input {inp.shape} does not match declared "
                             f"{spec.kind} {spec.shape}")
        x = inp.to_planes().astype(np.float32)
    else:
        raise TypeError(f"unsupported input type {type(inp).__name__}")

    scores = None
    intermediates: list[BitTensor] = []
    for i, block in enumerate(net.blocks):
        if isinstance(block, m.FusedFC):
            # BN is per output unit; the stored layout is one packed row
            xv = x.reshape(-1).astype(np.float64)
            wmat = block.weights.to_planes()[0].astype(np.float64)
            z64 = np.array([np.dot(wmat[j], xv) for j in range(block.out_units)])
            z = z64.astype(np.float32).reshape(block.out_units, 1, 1)
            layout = (1, 1, block.out_units)
        else:
            z = _conv_plane(x, block)
            if isinstance(block, m.FusedConvPool):
                z = _maxpool_plane(z, block.pool_size, block.pool_stride)
            layout = z.shape
        if i == len(net.blocks) - 1:
            scores = z.reshape(-1).copy()
        y = _batchnorm_plane(z, block.bn)
        bits = _binarize_plane(y.reshape(layout))
        intermediates.append(bits)
        x = bits.to_planes().astype(np.float32)

    label = int(np.argmax(scores))
    return ReferenceResult(scores=scores, label=label, intermediates=intermediates,
                           peak_temp_bytes=memory.bnn_temp_bytes(net))
