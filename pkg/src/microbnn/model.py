"""Network model: fused binary blocks, BN folding, validation, serialization.

A network is an input declaration plus a chain of fused blocks. All real
parameters are kept in 32-bit single precision end to end (values are
rounded on construction), which is what makes library and generated-C
results bit-exact.

Model file format (little-endian, documented in docs/model_format.md):
magic "EBNN", u16 version, input record, u16 block count, block records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .bitops import MAX_WIDTH, BitTensor, row_stride_bytes
from .errors import ModelFormatError, UnsupportedVersionError, ValidationError

FORMAT_MAGIC = b"EBNN"
FORMAT_VERSION = 1
DEFAULT_EPSILON = 1e-4
BN_BYTES_PER_CHANNEL = 16  # 4 x f32 (gamma, beta, mean, var)
MAX_KERNEL = 16  # engine limit: kernel*kernel bits per packed weight row

_VARIANT_FC = 1
_VARIANT_CONV = 2
_VARIANT_CONVPOOL = 3

_KIND_REAL = 0
_KIND_BINARY = 1


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass
class BnParams:
    """Per-channel batch normalization parameters, stored as f32 values."""

    gamma: float
    beta: float
    mean: float
    var: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.gamma = _f32(self.gamma)
        self.beta = _f32(self.beta)
        self.mean = _f32(self.mean)
        self.var = _f32(self.var)
        self.epsilon = _f32(self.epsilon)


@dataclass(frozen=True)
class BnFold:
    """BN + sign collapsed to one comparison: x >= threshold, or x <= threshold
    when flip is set (negative gamma reverses the inequality)."""

    threshold: float
    flip: bool


def fold_bn(bn: BnParams) -> BnFold:
    """Collapse batch norm followed by sign into a threshold comparison.

    threshold = mean - beta * sqrt(var + epsilon) / gamma, every step
    rounded to f32. The same expression shape is used by the generated C
    (raw-BN mode), so thresholds agree bit for bit.
    """
    if bn.gamma == 0.0:
        raise ValueError("degenerate BN parameters: gamma is 0")
    t = np.float32(np.float32(bn.var) + np.float32(bn.epsilon))
    s = np.float32(np.sqrt(t))
    num = np.float32(np.float32(bn.beta) * s)
    q = np.float32(num / np.float32(bn.gamma))
    tau = np.float32(np.float32(bn.mean) - q)
    return BnFold(float(tau), bn.gamma < 0.0)


@dataclass
class InputSpec:
    """Shape and element kind of the sample fed to the first block."""

    kind: str  # "real" | "binary"
    channels: int
    height: int
    width: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def length(self) -> int:
        return self.channels * self.height * self.width


@dataclass(eq=False)
class FusedFC:
    """Fully connected block: out_units xnor-popcount dots, BN fold, sign.

    weights has shape (1, out_units, in_length); row j holds unit j's
    weight bits in the input's (channel, row, column) order.
    """

    out_units: int
    in_length: int
    weights: BitTensor
    bn: list[BnParams]
    _cache: dict = field(default_factory=dict, init=False, repr=False)


@dataclass(eq=False)
class FusedConv:
    """Valid (no-pad) binary convolution block.

    weights has shape (filters, in_channels, kernel*kernel); row (f, c)
    holds the kernel bits of filter f over channel c, row-major.
    """

    filters: int
    in_channels: int
    kernel: int
    stride: int
    weights: BitTensor
    bn: list[BnParams]
    _cache: dict = field(default_factory=dict, init=False, repr=False)


@dataclass(eq=False)
class FusedConvPool:
    """Convolution fused with max pooling; same weight layout as FusedConv."""

    filters: int
    in_channels: int
    kernel: int
    stride: int
    pool_size: int
    pool_stride: int
    weights: BitTensor
    bn: list[BnParams]
    _cache: dict = field(default_factory=dict, init=False, repr=False)


Block = FusedFC | FusedConv | FusedConvPool


@dataclass(eq=False)
class Network:
    """Immutable-by-convention model: input declaration plus block chain."""

    input_spec: InputSpec
    blocks: list
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def classes(self) -> int:
        if not self.blocks or not isinstance(self.blocks[-1], FusedFC):
            raise ValueError("network has no final fully connected block")
        return self.blocks[-1].out_units


def variant_name(block: Block) -> str:
    if isinstance(block, FusedConvPool):
        return "convpool"
    if isinstance(block, FusedConv):
        return "conv"
    if isinstance(block, FusedFC):
        return "fc"
    raise TypeError(f"unknown block type {type(block).__name__}")


def out_channels(block: Block) -> int:
    return block.out_units if isinstance(block, FusedFC) else block.filters


def param_bytes(block: Block) -> int:
    """Flash bytes for one block: packed weight rows plus 16 B BN per channel."""
    return block.weights.nbytes + BN_BYTES_PER_CHANNEL * out_channels(block)


def conv_output_hw(h: int, w: int, kernel: int, stride: int) -> tuple[int, int]:
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output dimension for kernel {kernel} on {h}x{w}")
    return oh, ow


def block_output_shape(block: Block, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Output (channels, height, width) of a block for the given input shape."""
    c, h, w = in_shape
    if isinstance(block, FusedFC):
        return (1, 1, block.out_units)
    oh, ow = conv_output_hw(h, w, block.kernel, block.stride)
    if isinstance(block, FusedConvPool):
        oh = (oh - block.pool_size) // block.pool_stride + 1
        ow = (ow - block.pool_size) // block.pool_stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"non-positive output dimension for pool {block.pool_size}")
    return (block.filters, oh, ow)


def network_shapes(net: Network) -> list[tuple[int, int, int]]:
    """Per-block output shapes, in order."""
    shapes = []
    cur = net.input_spec.shape
    for block in net.blocks:
        cur = block_output_shape(block, cur)
        shapes.append(cur)
    return shapes


def _validate_bn(bn: list[BnParams], want: int, where: str, out: list[str]) -> None:
    if len(bn) != want:
        out.append(f"{where}: {len(bn)} BN records for {want} output channels")
        return
    eps = bn[0].epsilon
    for i, p in enumerate(bn):
        for name in ("gamma", "beta", "mean", "var", "epsilon"):
            if not np.isfinite(getattr(p, name)):
                out.append(f"{where}: BN channel {i} has non-finite {name}")
        if p.gamma == 0.0:
            out.append(f"{where}: BN channel {i} has gamma = 0")
        if p.var < 0.0:
            out.append(f"{where}: BN channel {i} has negative variance")
        if p.epsilon <= 0.0:
            out.append(f"{where}: BN channel {i} has non-positive epsilon")
        if p.epsilon != eps:
            out.append(f"{where}: epsilon differs across channels ({p.epsilon} vs {eps})")


def _validate_weights(block, width: int, where: str, out: list[str]) -> None:
    w = block.weights
    expect = (block.filters, block.in_channels) if not isinstance(block, FusedFC) \
        else (1, block.out_units)
    if w.shape != (*expect, width):
        out.append(f"{where}: weight tensor shape {w.shape}, expected {(*expect, width)}")
        return
    if not w.pads_zero():
        out.append(f"{where}: weight rows have non-zero pad bits")


def validate(net: Network) -> list[str]:
    """Every violated structural invariant, with its location. Empty means ok."""
    out: list[str] = []
    spec = net.input_spec
    if spec.kind not in ("real", "binary"):
        out.append(f"input: unknown element kind {spec.kind!r}")
    if min(spec.channels, spec.height, spec.width) < 1:
        out.append("input: non-positive dimension")
    if spec.width > MAX_WIDTH:
        out.append(f"input: width {spec.width} exceeds {MAX_WIDTH}")
    if not net.blocks:
        out.append("network: no blocks")
        return out

    cur = spec.shape
    for i, block in enumerate(net.blocks):
        where = f"block {i} ({variant_name(block)})"
        if isinstance(block, FusedFC):
            if block.out_units < 1:
                out.append(f"{where}: non-positive out_units")
                continue
            if block.in_length != cur[0] * cur[1] * cur[2]:
                out.append(f"{where}: in_length {block.in_length} does not match "
                           f"input shape {cur} ({cur[0] * cur[1] * cur[2]} elements)")
                continue
            if block.in_length > MAX_WIDTH:
                out.append(f"{where}: in_length {block.in_length} exceeds {MAX_WIDTH}")
                continue
            _validate_weights(block, block.in_length, where, out)
            _validate_bn(block.bn, block.out_units, where, out)
            cur = (1, 1, block.out_units)
            continue

        # conv / convpool
        if min(block.filters, block.in_channels, block.kernel, block.stride) < 1:
            out.append(f"{where}: non-positive geometry field")
            continue
        if block.kernel > MAX_KERNEL:
            out.append(f"{where}: kernel {block.kernel} exceeds {MAX_KERNEL}")
            continue
        if block.in_channels != cur[0]:
            out.append(f"{where}: expects {block.in_channels} input channels, "
                       f"previous output shape is {cur}")
            continue
        try:
            oh, ow = conv_output_hw(cur[1], cur[2], block.kernel, block.stride)
        except ValueError as e:
            out.append(f"{where}: {e}")
            continue
        if isinstance(block, FusedConvPool):
            if min(block.pool_size, block.pool_stride) < 1:
                out.append(f"{where}: non-positive pool field")
                continue
            if block.pool_size > oh or block.pool_size > ow:
                out.append(f"{where}: pool {block.pool_size} exceeds conv output {oh}x{ow}")
                continue
        _validate_weights(block, block.kernel * block.kernel, where, out)
        _validate_bn(block.bn, block.filters, where, out)
        cur = block_output_shape(block, (cur[0], cur[1], cur[2]))

    if not isinstance(net.blocks[-1], FusedFC):
        out.append("network: final block must be fully connected")
    elif net.blocks[-1].out_units < 2:
        out.append("network: final block needs at least 2 classes")
    return out


def ensure_valid(net: Network) -> None:
    """Validate once per network object; raise ValidationError on violations."""
    if net._cache.get("valid"):
        return
    violations = validate(net)
    if violations:
        raise ValidationError(violations)
    net._cache["valid"] = True


# ---------------------------------------------------------------------------
# serialization

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise ModelFormatError(f"truncated stream reading {what}", offset=self.off)
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals[0] if len(vals) == 1 else vals


def _bn_to_bytes(bn: list[BnParams]) -> bytes:
    parts = [struct.pack("<4f", p.gamma, p.beta, p.mean, p.var) for p in bn]
    return b"".join(parts)


def serialize(net: Network) -> bytes:
    """Encode a validated network; deserialize() inverts this exactly."""
    violations = validate(net)
    if violations:
        raise ValidationError(violations)
    spec = net.input_spec
    out = [FORMAT_MAGIC,
           struct.pack("<H", FORMAT_VERSION),
           struct.pack("<B3H", _KIND_REAL if spec.kind == "real" else _KIND_BINARY,
                       spec.channels, spec.height, spec.width),
           struct.pack("<H", len(net.blocks))]
    for block in net.blocks:
        if isinstance(block, FusedFC):
            out.append(struct.pack("<BIH", _VARIANT_FC, block.in_length, block.out_units))
        elif isinstance(block, FusedConvPool):
            out.append(struct.pack("<B2H4B", _VARIANT_CONVPOOL, block.in_channels,
                                   block.filters, block.kernel, block.stride,
                                   block.pool_size, block.pool_stride))
        else:
            out.append(struct.pack("<B2H2B", _VARIANT_CONV, block.in_channels,
                                   block.filters, block.kernel, block.stride))
        out.append(struct.pack("<f", block.bn[0].epsilon))
        wb = block.weights.tobytes()
        out.append(struct.pack("<I", len(wb)))
        out.append(wb)
        out.append(_bn_to_bytes(block.bn))
    return b"".join(out)


def _read_weights(r: _Reader, channels: int, height: int, width: int) -> BitTensor:
    n = r.unpack("I", "weight byte count")
    t = BitTensor.zeros(channels, height, width)
    if n != t.nbytes:
        raise ModelFormatError(
            f"weight byte count {n} does not match shape "
            f"({channels}, {height}, {width}) needing {t.nbytes}", offset=r.off - 4)
    t.data[:] = r.take(n, "weight bits")
    return t


def _read_bn(r: _Reader, units: int, eps: float) -> list[BnParams]:
    bn = []
    for _ in range(units):
        g, b, m, v = r.unpack("4f", "BN record")
        bn.append(BnParams(g, b, m, v, eps))
    return bn


def deserialize(data: bytes) -> Network:
    """Parse a model stream; structural violations raise ValidationError."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != FORMAT_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {FORMAT_MAGIC!r}", offset=0)
    version = r.unpack("H", "format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported format version {version}, this build reads {FORMAT_VERSION}",
            offset=4)
    kind, c, h, w = r.unpack("B3H", "input record")
    if kind not in (_KIND_REAL, _KIND_BINARY):
        raise ModelFormatError(f"unknown input element kind {kind}", offset=r.off - 7)
    spec = InputSpec("real" if kind == _KIND_REAL else "binary", c, h, w)
    nblocks = r.unpack("H", "block count")
    blocks: list[Block] = []
    for _ in range(nblocks):
        variant = r.unpack("B", "block variant")
        if variant == _VARIANT_FC:
            in_length, out_units = r.unpack("IH", "fc geometry")
            eps = r.unpack("f", "epsilon")
            weights = _read_weights(r, 1, out_units, in_length)
            blocks.append(FusedFC(out_units, in_length, weights, _read_bn(r, out_units, eps)))
        elif variant in (_VARIANT_CONV, _VARIANT_CONVPOOL):
            if variant == _VARIANT_CONVPOOL:
                in_c, filters, kernel, stride, psize, pstride = r.unpack("2H4B", "conv geometry")
            else:
                in_c, filters, kernel, stride = r.unpack("2H2B", "conv geometry")
            eps = r.unpack("f", "epsilon")
            weights = _read_weights(r, filters, in_c, kernel * kernel)
            bn = _read_bn(r, filters, eps)
            if variant == _VARIANT_CONVPOOL:
                blocks.append(FusedConvPool(filters, in_c, kernel, stride, psize, pstride,
                                            weights, bn))
            else:
                blocks.append(FusedConv(filters, in_c, kernel, stride, weights, bn))
        else:
            raise ModelFormatError(f"unknown block variant {variant}", offset=r.off - 1)
    if r.off != len(data):
        raise ModelFormatError(f"{len(data) - r.off} trailing bytes after last block",
                               offset=r.off)
    net = Network(spec, blocks)
    violations = validate(net)
    if violations:
        raise ValidationError(violations)
    return net


def summary(net: Network) -> str:
    """One line per block: variant, shapes, strides, parameter bytes."""
    spec = net.input_spec
    lines = [f"input {spec.kind} {spec.channels}x{spec.height}x{spec.width}"]
    cur = spec.shape
    for i, block in enumerate(net.blocks):
        nxt = block_output_shape(block, cur)
        stride = ""
        if isinstance(block, (FusedConv, FusedConvPool)):
            stride = f" k{block.kernel} s{block.stride}"
            if isinstance(block, FusedConvPool):
                stride += f" pool{block.pool_size}/{block.pool_stride}"
        lines.append(f"{i}: {variant_name(block)} {cur[0]}x{cur[1]}x{cur[2]} -> "
                     f"{nxt[0]}x{nxt[1]}x{nxt[2]}{stride} params {param_bytes(block)} B")
        cur = nxt
    return "\n".join(lines)
