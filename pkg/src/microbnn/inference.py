"""Fused feedforward execution.

Each block is evaluated one output element at a time: a single real
accumulator collects the full convolution (or dot product), max pooling
folds into the same accumulator, and only the thresholded sign bit is
stored. Inter-block data lives in two bit-packed buffers that alternate
roles, so peak working storage is 2T bytes plus the 4-byte accumulator.

Iteration order is fixed: filter-major, then pool-cell row-major, then
window row-major. The generated C walks the same order, which is what
makes outputs bit-identical.

Numeric conventions shared with the generated C: binary-input blocks
accumulate exact integers; real-input blocks accumulate in double and
round once to f32; comparisons are f32 against f32 thresholds. Python
floats are doubles, so comparing f32-exact values here equals the f32
comparison in C.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitops import BitTensor, row_stride_bytes
from .errors import CapacityError
from . import model as m
from . import memory


@dataclass
class InputTensor:
    """Real-valued sample, shape (channels, height, width), f32 storage."""

    channels: int
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != (self.channels, self.height, self.width):
            if arr.size != self.channels * self.height * self.width:
                raise ValueError(f"InputTensor data has {arr.size} elements, "
                                 f"shape needs {self.channels * self.height * self.width}")
            arr = arr.reshape(self.channels, self.height, self.width)
        self.data = arr

    @classmethod
    def from_array(cls, arr) -> "InputTensor":
        a = np.ascontiguousarray(arr, dtype=np.float32)
        if a.ndim != 3:
            raise ValueError(f"InputTensor.from_array expects 3 dimensions, got {a.shape}")
        return cls(a.shape[0], a.shape[1], a.shape[2], a)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class TempArena:
    """Double-buffered working storage: two T-byte bit buffers plus one f32."""

    buf_a: bytearray
    buf_b: bytearray
    accum: float = 0.0

    @classmethod
    def for_capacity(cls, t_bytes: int) -> "TempArena":
        return cls(bytearray(t_bytes), bytearray(t_bytes))

    @classmethod
    def for_network(cls, net: m.Network) -> "TempArena":
        return cls.for_capacity(memory.ebnn_temp_bytes(net))

    @property
    def size_bytes(self) -> int:
        return len(self.buf_a) + len(self.buf_b) + 4


@dataclass
class Trace:
    """Operation counter; events kept only when record_events is set."""

    convolutions: int = 0
    dots: int = 0
    stores: int = 0
    record_events: bool = False
    events: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.convolutions + self.dots + self.stores

    def conv(self, f: int, y: int, x: int) -> None:
        self.convolutions += 1
        if self.record_events:
            self.events.append(("conv", f, y, x))

    def dot(self, j: int) -> None:
        self.dots += 1
        if self.record_events:
            self.events.append(("dot", j))

    def store(self, f: int, y: int, x: int) -> None:
        self.stores += 1
        if self.record_events:
            self.events.append(("store", f, y, x))


@dataclass
class ForwardResult:
    scores: np.ndarray
    label: int
    intermediates: list | None = None


def _fold_pair(block):
    # (thresholds, flips) tuple cached per block
    cache = block._cache.get("folds")
    if cache is None:
        folds = [m.fold_bn(p) for p in block.bn]
        cache = ([f.threshold for f in folds], [f.flip for f in folds])
        block._cache["folds"] = cache
    return cache


def _thresholded(acc, tau: float, flip: bool) -> int:
    # acc may be an exact int (binary path) or an f32-exact float
    return (acc <= tau) if flip else (acc >= tau)


# ---------------------------------------------------------------------------
# fully connected

def _fc_weight_rows(block: m.FusedFC) -> list[int]:
    rows = block._cache.get("wrows")
    if rows is None:
        rows = [block.weights.row_int(0, j) for j in range(block.out_units)]
        block._cache["wrows"] = rows
    return rows


def _fc_weight_segments(block: m.FusedFC, shape: tuple[int, int, int]) -> list[list[int]]:
    """Weight row j split into per-input-row segments of `width` bits each,
    so padded input rows can be xor'ed directly."""
    key = ("wsegs", shape)
    segs = block._cache.get(key)
    if segs is None:
        c, h, w = shape
        mask = (1 << w) - 1
        segs = []
        for wrow in _fc_weight_rows(block):
            row_segs = []
            off = 0
            for _ in range(c * h):
                row_segs.append((wrow >> off) & mask)
                off += w
            segs.append(row_segs)
        block._cache[key] = segs
    return segs


def _fc_weight_matrix(block: m.FusedFC) -> np.ndarray:
    mat = block._cache.get("wmat")
    if mat is None:
        mat = block.weights.to_planes()[0].astype(np.float64)
        block._cache["wmat"] = mat
    return mat


def fused_fc_forward(inp, block: m.FusedFC, out: BitTensor,
                     trace: Trace | None = None, scores_out=None) -> None:
    """One xnor-popcount (or signed-add) dot per unit, thresholded to one bit."""
    if out.shape != (1, 1, block.out_units):
        raise ValueError(f"output shape {out.shape} does not match "
                         f"(1, 1, {block.out_units})")
    taus, flips = _fold_pair(block)
    out_bits = 0

    if isinstance(inp, BitTensor):
        if inp.channels * inp.height * inp.width != block.in_length:
            raise ValueError(f"input shape {inp.shape} has "
                             f"{inp.channels * inp.height * inp.width} elements, "
                             f"block expects {block.in_length}")
        n = block.in_length
        in_rows = inp.rows_as_ints()
        segs = _fc_weight_segments(block, inp.shape)
        for j in range(block.out_units):
            wsegs = segs[j]
            pc = 0
            for r, wseg in zip(in_rows, wsegs):
                pc += (r ^ wseg).bit_count()
            acc = n - 2 * pc
            if trace is not None:
                trace.dot(j)
            if scores_out is not None:
                scores_out[j] = np.float32(acc)
            if _thresholded(acc, taus[j], flips[j]):
                out_bits |= 1 << j
            if trace is not None:
                trace.store(0, 0, j)
    elif isinstance(inp, InputTensor):
        if inp.channels * inp.height * inp.width != block.in_length:
            raise ValueError(f"input shape {inp.shape} has "
                             f"{inp.channels * inp.height * inp.width} elements, "
                             f"block expects {block.in_length}")
        x = inp.data.reshape(-1).astype(np.float64)
        wmat = _fc_weight_matrix(block)
        z = wmat @ x  # exact for grid-quantized f32 inputs; see module docstring
        for j in range(block.out_units):
            acc = np.float32(z[j])
            if trace is not None:
                trace.dot(j)
            if scores_out is not None:
                scores_out[j] = acc
            if _thresholded(acc, taus[j], flips[j]):
                out_bits |= 1 << j
            if trace is not None:
                trace.store(0, 0, j)
    else:
        raise TypeError(f"unsupported input type {type(inp).__name__}")

    out.set_row_int(0, 0, out_bits)


# ---------------------------------------------------------------------------
# convolution (with optional fused pooling)

def _conv_weight_segments(block) -> list[list[list[int]]]:
    """kernel-bit integers indexed [filter][channel][kernel_row]."""
    segs = block._cache.get("wsegs")
    if segs is None:
        k = block.kernel
        mask = (1 << k) - 1
        segs = []
        for f in range(block.filters):
            per_c = []
            for c in range(block.in_channels):
                row = block.weights.row_int(f, c)
                per_c.append([(row >> (ky * k)) & mask for ky in range(k)])
            segs.append(per_c)
        block._cache["wsegs"] = segs
    return segs


def _conv_weight_kernels(block) -> np.ndarray:
    kern = block._cache.get("wkern")
    if kern is None:
        k = block.kernel
        planes = block.weights.to_planes().astype(np.float64)
        kern = planes.reshape(block.filters, block.in_channels, k, k)
        block._cache["wkern"] = kern
    return kern


def _check_conv_input(inp, block) -> tuple[int, int]:
    c, h, w = inp.shape
    if c != block.in_channels:
        raise ValueError(f"input has {c} channels, block expects {block.in_channels}")
    if h < block.kernel or w < block.kernel:
        raise ValueError(f"input {h}x{w} smaller than kernel {block.kernel}")
    return h, w


def _conv_executor(inp, block):
    """Returns conv(f, y, x) evaluating one window; int for binary input,
    f32-exact float for real input."""
    k = block.kernel
    stride = block.stride
    if isinstance(inp, BitTensor):
        h, _ = _check_conv_input(inp, block)
        in_rows = inp.rows_as_ints()
        wsegs = _conv_weight_segments(block)
        nk = block.in_channels * k * k
        channels = block.in_channels
        kmask = (1 << k) - 1

        def conv(f: int, y: int, x: int):
            x0 = x * stride
            y0 = y * stride
            pc = 0
            per_c = wsegs[f]
            for c in range(channels):
                base = c * h + y0
                rows_c = per_c[c]
                for ky in range(k):
                    iseg = (in_rows[base + ky] >> x0) & kmask
                    pc += (iseg ^ rows_c[ky]).bit_count()
            return nk - 2 * pc

        return conv

    if isinstance(inp, InputTensor):
        _check_conv_input(inp, block)
        x32 = inp.data
        kern = _conv_weight_kernels(block)

        def conv(f: int, y: int, x: int):
            y0 = y * stride
            x0 = x * stride
            # f32 slice times +-1 f64 kernel upcasts: products and sum are
            # exact, rounding happens once at the f32 cast
            s = np.sum(x32[:, y0:y0 + k, x0:x0 + k] * kern[f])
            return np.float32(s)

        return conv

    raise TypeError(f"unsupported input type {type(inp).__name__}")


def fused_conv_forward(inp, block: m.FusedConv, out: BitTensor,
                       trace: Trace | None = None) -> None:
    """Full cross-channel convolution per output position; one bit stored."""
    h, w = _check_conv_input(inp, block)
    oh, ow = m.conv_output_hw(h, w, block.kernel, block.stride)
    if out.shape != (block.filters, oh, ow):
        raise ValueError(f"output shape {out.shape} does not match "
                         f"({block.filters}, {oh}, {ow})")
    conv = _conv_executor(inp, block)
    taus, flips = _fold_pair(block)
    for f in range(block.filters):
        tau = taus[f]
        flip = flips[f]
        for y in range(oh):
            row_bits = 0
            for x in range(ow):
                acc = conv(f, y, x)
                if trace is not None:
                    trace.conv(f, y, x)
                if _thresholded(acc, tau, flip):
                    row_bits |= 1 << x
                if trace is not None:
                    trace.store(f, y, x)
            out.set_row_int(f, y, row_bits)


def fused_conv_pool_forward(inp, block: m.FusedConvPool, out: BitTensor,
                            trace: Trace | None = None, window_order=None) -> None:
    """Convolution and max pooling share one accumulator.

    For each pool cell the window's convolution results fold into the
    running max (seeded with the first window element, row-major);
    positions shared by overlapping windows are recomputed. window_order
    is a test hook permuting the window positions; the folded max makes
    the output order-independent.
    """
    h, w = _check_conv_input(inp, block)
    ch, cw = m.conv_output_hw(h, w, block.kernel, block.stride)
    p, ps = block.pool_size, block.pool_stride
    oh = (ch - p) // ps + 1
    ow = (cw - p) // ps + 1
    if out.shape != (block.filters, oh, ow):
        raise ValueError(f"output shape {out.shape} does not match "
                         f"({block.filters}, {oh}, {ow})")
    conv = _conv_executor(inp, block)
    taus, flips = _fold_pair(block)
    window = [(wy, wx) for wy in range(p) for wx in range(p)]
    if window_order is not None:
        window = window_order(window)
    for f in range(block.filters):
        tau = taus[f]
        flip = flips[f]
        for py in range(oh):
            row_bits = 0
            y0 = py * ps
            for px in range(ow):
                x0 = px * ps
                acc = None
                for wy, wx in window:
                    z = conv(f, y0 + wy, x0 + wx)
                    if trace is not None:
                        trace.conv(f, y0 + wy, x0 + wx)
                    if acc is None or z > acc:
                        acc = z
                if _thresholded(acc, tau, flip):
                    row_bits |= 1 << px
                if trace is not None:
                    trace.store(f, py, px)
            out.set_row_int(f, py, row_bits)


# ---------------------------------------------------------------------------
# whole network

def _check_input_matches(net: m.Network, inp) -> None:
    spec = net.input_spec
    if spec.kind == "real":
        if not isinstance(inp, InputTensor):
            raise ValueError(f"network expects a real-valued InputTensor, "
                             f"got {type(inp).__name__}")
    else:
        if not isinstance(inp, BitTensor):
            raise ValueError(f"network expects a binary BitTensor input, "
                             f"got {type(inp).__name__}")
    if inp.shape != spec.shape:
        raise ValueError(f"input shape {inp.shape} does not match "
                         f"declared {spec.shape}")


def network_forward(net: m.Network, inp, arena: TempArena | None = None,
                    trace: Trace | None = None,
                    record_intermediates: bool = False) -> ForwardResult:
    """Run all blocks through the double-buffered arena.

    Scores are the final block's pre-binarization accumulators; label is
    argmax with ties resolved to the lowest index. record_intermediates
    copies each block's packed output (instrumentation only; defeats the
    fixed-memory property).
    """
    m.ensure_valid(net)
    _check_input_matches(net, inp)
    shapes = m.network_shapes(net)
    need = max(memory.temp_bytes_of_shape(s) for s in shapes)
    if arena is None:
        arena = TempArena.for_capacity(need)
    elif len(arena.buf_a) < need or len(arena.buf_b) < need:
        raise CapacityError(f"arena buffers hold {len(arena.buf_a)} B, "
                            f"network needs {need} B per buffer")

    scores = np.zeros(net.classes, dtype=np.float32)
    intermediates = [] if record_intermediates else None
    cur = inp
    last = len(net.blocks) - 1
    for i, block in enumerate(net.blocks):
        buf = arena.buf_a if i % 2 == 0 else arena.buf_b
        out = BitTensor.wrap(buf, *shapes[i])
        if isinstance(block, m.FusedFC):
            fused_fc_forward(cur, block, out, trace=trace,
                             scores_out=scores if i == last else None)
        elif isinstance(block, m.FusedConvPool):
            fused_conv_pool_forward(cur, block, out, trace=trace)
        elif isinstance(block, m.FusedConv):
            fused_conv_forward(cur, block, out, trace=trace)
        else:
            raise TypeError(f"unknown block type {type(block).__name__}")
        if record_intermediates:
            intermediates.append(out.copy())
        cur = out
    arena.accum = float(scores[-1])
    label = int(np.argmax(scores))
    return ForwardResult(scores=scores, label=label, intermediates=intermediates)
