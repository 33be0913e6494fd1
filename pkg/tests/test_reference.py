"""The unfused oracle itself, pinned against hand-worked arithmetic.

The equivalence suite only proves fused == unfused; these tests anchor
the unfused side to values computed by hand so the pair cannot drift
together.
"""

import numpy as np
import pytest

from microbnn.bitops import BitTensor
from microbnn.errors import ValidationError
from microbnn.inference import InputTensor
from microbnn.model import (BnParams, FusedConv, FusedConvPool, FusedFC,
                            InputSpec, Network)
from microbnn.reference import (_conv_plane, _im2col, _maxpool_plane,
                                reference_forward)
from test_model import _bits, _bn


def test_im2col_rows_are_patches():
    x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3)
    cols, oh, ow = _im2col(x, 2, 1)
    assert (oh, ow) == (2, 2)
    # patch at (0, 0): channel 0 then channel 1, row-major inside each
    assert list(cols[0]) == [0, 1, 3, 4, 9, 10, 12, 13]
    assert list(cols[3]) == [4, 5, 7, 8, 13, 14, 16, 17]


def test_conv_plane_single_filter_hand_value():
    # 3x3 all-ones input, 2x2 filter [[+1,-1],[+1,+1]] -> every patch sums
    # to 1*1 - 1 + 1 + 1 = 2
    w = BitTensor.from_planes(np.array([[[1, -1, 1, 1]]], dtype=np.int8))
    blk = FusedConv(1, 1, 2, 1, w, _bn(1))
    z = _conv_plane(np.ones((1, 3, 3), dtype=np.float32), blk)
    assert z.shape == (1, 2, 2)
    assert np.all(z == 2.0)


def test_maxpool_plane_overlapping_windows():
    z = np.array([[[1, 5, 2],
                   [7, 3, 4],
                   [6, 8, 9]]], dtype=np.float32)
    out = _maxpool_plane(z, 2, 1)
    assert out.tolist() == [[[7, 5], [8, 9]]]


def test_two_block_hand_example():
    # conv: single 1x1 filter of +1 on a 2x2 binary input = identity;
    # BN with tau at 0.5 keeps only the +1 pixels. FC then counts matches
    # against a +1,+1,-1,-1 row.
    conv = FusedConv(1, 1, 1, 1,
                     BitTensor.from_planes(np.array([[[1]]], dtype=np.int8)),
                     [BnParams(1.0, -0.5, 0.0, 1.0 - 1e-4)])
    fc = FusedFC(2, 4, BitTensor.from_planes(
        np.array([[[1, 1, -1, -1], [1, 1, 1, 1]]], dtype=np.int8)),
        [BnParams(1.0, -0.5, 0.0, 1.0 - 1e-4)] * 2)
    net = Network(InputSpec("binary", 1, 2, 2), [conv, fc])
    x = BitTensor.from_planes(np.array([[[1, -1], [1, -1]]], dtype=np.int8))
    r = reference_forward(net, x)
    # conv scores: copies of input; after BN: +1 stays, -1 flips to -1
    assert r.intermediates[0] == x
    # fc unit 0: <(1,-1,1,-1), (1,1,-1,-1)> = 1-1-1+1 = 0; unit 1: sum = 0
    assert r.scores.tolist() == [0.0, 0.0]
    assert r.label == 0


def test_peak_temp_is_float_plane_figure():
    net = Network(InputSpec("binary", 1, 6, 6),
                  [FusedConv(3, 1, 3, 1, _bits(3, 1, 9), _bn(3)),
                   FusedFC(2, 3 * 16, _bits(1, 2, 48), _bn(2))])
    r = reference_forward(net, BitTensor.zeros(1, 6, 6))
    assert r.peak_temp_bytes == 3 * 4 * 4 * 4  # widest f32 plane


def test_rejects_wrong_input_kind():
    net = Network(InputSpec("binary", 1, 4, 4),
                  [FusedFC(2, 16, _bits(1, 2, 16), _bn(2))])
    with pytest.raises(ValueError, match="does not match declared"):
        reference_forward(net, InputTensor.from_array(np.zeros((1, 4, 4))))
    with pytest.raises(TypeError, match="unsupported input type"):
        reference_forward(net, np.zeros((1, 4, 4)))


def test_rejects_invalid_network():
    bad = Network(InputSpec("binary", 1, 4, 4),
                  [FusedConv(1, 1, 3, 1, _bits(1, 1, 9), _bn(1))])
    with pytest.raises(ValidationError):
        reference_forward(bad, BitTensor.zeros(1, 4, 4))
