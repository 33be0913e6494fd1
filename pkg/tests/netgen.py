"""Random-network generator for the equivalence property suite.

BN parameters are constructed margin-safe: thresholds land on the
midpoint grid between attainable accumulator values (integers for binary
blocks, the 1/256 input grid for real first blocks), so f32 evaluation
error can never move a sign decision and zero-tolerance comparisons are
meaningful.
"""

from __future__ import annotations

import numpy as np

from microbnn.bitops import BitTensor
from microbnn.inference import InputTensor
from microbnn.model import (BnParams, DEFAULT_EPSILON, FusedConv, FusedConvPool, FusedFC,
                            InputSpec, Network, block_output_shape, conv_output_hw, fold_bn)

# block sequences; the final fc is appended by the generator
_TEMPLATES = [
    (),
    ("fc",),
    ("fc", "fc"),
    ("conv",),
    ("convpool",),
    ("conv", "fc"),
    ("convpool", "fc"),
    ("conv", "conv"),
    ("conv", "convpool"),
    ("convpool", "convpool"),
]


def _random_bits(rng: np.random.Generator, c: int, h: int, w: int) -> BitTensor:
    planes = rng.integers(0, 2, size=(c, h, w)) * 2 - 1
    return BitTensor.from_planes(planes)


def _margin_safe_bn(rng: np.random.Generator, n_terms: int, grid: int) -> BnParams:
    """BN whose folded threshold sits on the (k + 0.5)/grid line.

    Accumulators are multiples of 1/grid with |acc| <= n_terms, so the
    decision margin is at least 1/(2*grid) minus a few ULPs of fold
    round-off, orders of magnitude above f32 evaluation error.
    """
    k = int(rng.integers(-n_terms * grid - 1, n_terms * grid + 1))
    tau = (k + 0.5) / grid
    gamma = float(rng.uniform(0.5, 2.0)) * (1 if rng.random() < 0.5 else -1)
    var = float(rng.uniform(0.25, 4.0))
    eps = DEFAULT_EPSILON
    s = float(np.float32(np.sqrt(np.float32(np.float32(var) + np.float32(eps)))))
    mean = tau + float(rng.uniform(-2.0, 2.0))
    beta = (mean - tau) * gamma / s
    return BnParams(gamma, beta, mean, var, eps)


def _bn_list(rng, units: int, n_terms: int, grid: int) -> list[BnParams]:
    return [_margin_safe_bn(rng, n_terms, grid) for _ in range(units)]


def random_network(rng: np.random.Generator) -> Network:
    """A valid network of depth 1..3 covering all block variants,
    strides 1..3, overlapped pooling and both BN signs."""
    kind = "real" if rng.random() < 0.5 else "binary"
    template = _TEMPLATES[rng.integers(0, len(_TEMPLATES))]
    c = int(rng.integers(1, 4))
    h = int(rng.integers(5, 13))
    w = int(rng.integers(5, 13))
    spec = InputSpec(kind, c, h, w)
    grid = 256 if kind == "real" else 1

    blocks = []
    cur = spec.shape
    for kind_name in template:
        if kind_name == "fc":
            in_len = cur[0] * cur[1] * cur[2]
            units = int(rng.integers(1, 33))
            blk = FusedFC(units, in_len, _random_bits(rng, 1, units, in_len),
                          _bn_list(rng, units, in_len, grid))
        else:
            kmax = min(3, cur[1], cur[2])
            k = int(rng.integers(1, kmax + 1))
            stride = int(rng.integers(1, 4))
            filters = int(rng.integers(1, 6))
            weights = _random_bits(rng, filters, cur[0], k * k)
            n_terms = cur[0] * k * k
            bn = _bn_list(rng, filters, n_terms, grid)
            if kind_name == "conv":
                blk = FusedConv(filters, cur[0], k, stride, weights, bn)
            else:
                ch, cw = conv_output_hw(cur[1], cur[2], k, stride)
                pmax = min(3, ch, cw)
                p = int(rng.integers(1, pmax + 1))
                ps = int(rng.integers(1, p + 1))  # ps < p exercises overlap
                blk = FusedConvPool(filters, cur[0], k, stride, p, ps, weights, bn)
        blocks.append(blk)
        cur = block_output_shape(blk, cur)
        grid = 1  # inter-block data is binary

    in_len = cur[0] * cur[1] * cur[2]
    classes = int(rng.integers(2, 6))
    blocks.append(FusedFC(classes, in_len, _random_bits(rng, 1, classes, in_len),
                          _bn_list(rng, classes, in_len, grid)))
    return Network(spec, blocks)


def random_input(rng: np.random.Generator, net: Network):
    """Matching random sample: 1/256-grid reals in [-1, 1], or packed bits."""
    spec = net.input_spec
    if spec.kind == "real":
        q = rng.integers(-256, 257, size=spec.shape)
        return InputTensor.from_array((q / 256.0).astype(np.float32))
    return _random_bits(rng, *spec.shape)


def coverage_stats(nets: list[Network]) -> dict:
    """What the generated population actually exercised."""
    stats = {"fc": 0, "conv": 0, "convpool": 0, "overlapped": 0,
             "neg_gamma": 0, "strides": set(), "depths": set(), "real": 0, "binary": 0}
    for net in nets:
        stats[net.input_spec.kind] += 1
        stats["depths"].add(len(net.blocks))
        for b in net.blocks:
            if isinstance(b, FusedConvPool):
                stats["convpool"] += 1
                if b.pool_stride < b.pool_size:
                    stats["overlapped"] += 1
                stats["strides"].add(b.stride)
            elif isinstance(b, FusedConv):
                stats["conv"] += 1
                stats["strides"].add(b.stride)
            else:
                stats["fc"] += 1
            if any(p.gamma < 0 for p in b.bn):
                stats["neg_gamma"] += 1
    return stats
