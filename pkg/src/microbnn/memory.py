"""Byte-exact memory accounting: M = P + 2T plus the float-temporary comparator.

P sums packed weight bytes and 16 B of BN per output channel. T is the
largest bit-packed block output (byte-aligned rows, so at worst 7 wasted
bits per row). M = P + 2T covers parameters plus the double-buffered
binary temporaries; the input sample buffer is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import model as m
from .bitops import row_stride_bytes

FLOAT_BYTES = 4


def param_bytes(block) -> int:
    return m.param_bytes(block)


def temp_bytes_of_shape(shape: tuple[int, int, int]) -> int:
    """Packed bytes of a (channels, height, width) binary tensor."""
    c, h, w = shape
    return c * h * row_stride_bytes(w)


def waste_bits_of_shape(shape: tuple[int, int, int]) -> int:
    """Pad bits per packed row; always 0..7."""
    return row_stride_bytes(shape[2]) * 8 - shape[2]


def ebnn_temp_bytes(net: m.Network) -> int:
    """T: max packed block-output bytes across the network."""
    shapes = m.network_shapes(net)
    return max((temp_bytes_of_shape(s) for s in shapes), default=0)


def _accounting_channels(block) -> int:
    # Conventional-BNN float planes are counted with the larger of input
    # and output channel count on the block's output grid; this reproduces
    # the per-input-channel bookkeeping of single-filter examples while
    # staying an upper bound when filters exceed input channels.
    if isinstance(block, m.FusedFC):
        return 1
    return max(block.in_channels, block.filters)


def bnn_temp_bytes(net: m.Network) -> int:
    """Float temporaries an unfused BNN would keep: max over blocks of
    accounting_channels x out_height x out_width x 4 bytes."""
    shapes = m.network_shapes(net)
    best = 0
    for block, s in zip(net.blocks, shapes):
        c = _accounting_channels(block)
        best = max(best, c * s[1] * s[2] * FLOAT_BYTES)
    return best


def bnn_temp_bytes_of_block(block, out_shape: tuple[int, int, int]) -> int:
    return _accounting_channels(block) * out_shape[1] * out_shape[2] * FLOAT_BYTES


def input_buffer_bytes(spec: m.InputSpec) -> int:
    if spec.kind == "real":
        return spec.length * FLOAT_BYTES
    return spec.channels * spec.height * row_stride_bytes(spec.width)


@dataclass
class MemoryReport:
    param_bytes_per_block: list
    temp_bytes_per_block: list
    waste_bits_per_row: list
    P: int
    T: int
    M: int
    bnn_temp_bytes: int
    input_bytes: int


def memory_report(net: m.Network) -> MemoryReport:
    shapes = m.network_shapes(net)
    params = [m.param_bytes(b) for b in net.blocks]
    temps = [temp_bytes_of_shape(s) for s in shapes]
    waste = [waste_bits_of_shape(s) for s in shapes]
    p = sum(params)
    t = max(temps, default=0)
    return MemoryReport(
        param_bytes_per_block=params,
        temp_bytes_per_block=temps,
        waste_bits_per_row=waste,
        P=p,
        T=t,
        M=p + 2 * t,
        bnn_temp_bytes=bnn_temp_bytes(net),
        input_bytes=input_buffer_bytes(net.input_spec),
    )


def fits(net: m.Network, budget_bytes: int, include_input: bool = False) -> bool:
    r = memory_report(net)
    total = r.M + (r.input_bytes if include_input else 0)
    return total <= budget_bytes


def report_table(r: MemoryReport) -> str:
    """Aligned human-readable table."""
    lines = [f"{'block':>5}  {'params B':>9}  {'temp B':>7}  {'waste bits':>10}"]
    for i, (p, t, w) in enumerate(zip(r.param_bytes_per_block, r.temp_bytes_per_block,
                                      r.waste_bits_per_row)):
        lines.append(f"{i:>5}  {p:>9}  {t:>7}  {w:>10}")
    lines.append(f"P = {r.P} B, T = {r.T} B, M = P + 2T = {r.M} B")
    lines.append(f"unfused float temporaries = {r.bnn_temp_bytes} B")
    lines.append(f"input buffer (separate) = {r.input_bytes} B")
    return "\n".join(lines)


def report_records(r: MemoryReport) -> str:
    """Machine-readable key=value lines."""
    lines = [f"P={r.P}", f"T={r.T}", f"M={r.M}",
             f"bnn_temp_bytes={r.bnn_temp_bytes}", f"input_bytes={r.input_bytes}"]
    for i, (p, t, w) in enumerate(zip(r.param_bytes_per_block, r.temp_bytes_per_block,
                                      r.waste_bits_per_row)):
        lines.append(f"block{i}.param_bytes={p}")
        lines.append(f"block{i}.temp_bytes={t}")
        lines.append(f"block{i}.waste_bits={w}")
    return "\n".join(lines)
