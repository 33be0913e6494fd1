import numpy as np
import pytest
from hypothesis import given, strategies as st

from microbnn.bitops import (MAX_WIDTH, BitTensor, binary_activation, pack_row, popcount,
                             row_stride_bytes, unpack_row, xnor_popcount_dot)


def scalar_pack(values):
    """Independent bit packer: LSB-first, +1 -> 1, zero pads."""
    out = bytearray((len(values) + 7) // 8)
    for i, v in enumerate(values):
        if v == 1:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def scalar_dot(a_vals, b_vals):
    return sum(x * y for x, y in zip(a_vals, b_vals))


def test_pack_row_example():
    assert pack_row([1, -1, 1]) == b"\x05"


def test_pack_row_pads_zero():
    data = pack_row([1] * 9)
    assert len(data) == 2
    assert data[1] == 0x01  # bit 8 set, pads clear


def test_pack_row_rejects_other_values():
    with pytest.raises(ValueError):
        pack_row([1, 0, -1])
    with pytest.raises(ValueError):
        pack_row([])


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=200))
def test_pack_row_matches_scalar_packer(values):
    assert pack_row(values) == scalar_pack(values)


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=200))
def test_pack_unpack_roundtrip(values):
    assert list(unpack_row(pack_row(values), len(values))) == values


def test_unpack_row_length_check():
    with pytest.raises(ValueError):
        unpack_row(b"\x01\x02", 3)


def test_xnor_dot_example():
    # positions 0..3: a = +1,-1,+1,+1 and b = +1,-1,-1,+1 -> dot 2
    a = pack_row([1, -1, 1, 1])
    b = pack_row([1, -1, -1, 1])
    assert xnor_popcount_dot(a, b, 4) == 2


@given(st.integers(1, 150), st.integers(0, 2**32))
def test_xnor_dot_matches_scalar(n, seed):
    rng = np.random.default_rng(seed)
    av = rng.integers(0, 2, n) * 2 - 1
    bv = rng.integers(0, 2, n) * 2 - 1
    assert xnor_popcount_dot(pack_row(av), pack_row(bv), n) == scalar_dot(av, bv)


@given(st.integers(1, 150), st.integers(0, 2**32))
def test_xnor_dot_parity(n, seed):
    rng = np.random.default_rng(seed)
    av = rng.integers(0, 2, n) * 2 - 1
    bv = rng.integers(0, 2, n) * 2 - 1
    assert (xnor_popcount_dot(pack_row(av), pack_row(bv), n) - n) % 2 == 0


def test_xnor_dot_length_errors():
    with pytest.raises(ValueError):
        xnor_popcount_dot(b"\x00", b"\x00\x00", 8)
    with pytest.raises(ValueError):
        xnor_popcount_dot(b"\x00\x00", b"\x00\x00", 3)


def test_popcount():
    assert popcount(0) == 0
    assert popcount(0b1011) == 3
    assert popcount((1 << 200) - 1) == 200
    with pytest.raises(ValueError):
        popcount(-1)


def test_binary_activation():
    assert binary_activation(-0.5) == -1
    assert binary_activation(0.0) == 1
    assert binary_activation(3.0) == 1
    with pytest.raises(ValueError):
        binary_activation(float("nan"))


def test_row_stride():
    assert [row_stride_bytes(w) for w in (1, 8, 9, 16, 26)] == [1, 1, 2, 2, 4]


class TestBitTensor:
    def test_zeros_shape_and_stride(self):
        t = BitTensor.zeros(2, 3, 26)
        assert t.row_stride == 4
        assert t.nbytes == 2 * 3 * 4
        assert t.pads_zero()

    def test_from_planes_roundtrip(self):
        rng = np.random.default_rng(0)
        planes = (rng.integers(0, 2, (3, 4, 11)) * 2 - 1).astype(np.int8)
        t = BitTensor.from_planes(planes)
        assert np.array_equal(t.to_planes(), planes)
        assert t.pads_zero()

    def test_row_layout(self):
        planes = -np.ones((2, 2, 9), dtype=np.int8)
        planes[1, 0, 8] = 1
        t = BitTensor.from_planes(planes)
        # row (c=1, y=0) is the third row
        assert t.row_int(1, 0) == 1 << 8
        assert t.get_bit(1, 0, 8) == 1
        assert t.get_bit(0, 0, 8) == -1

    def test_set_row_int_rejects_pad_bits(self):
        t = BitTensor.zeros(1, 1, 9)
        t.set_row_int(0, 0, 0x1FF)
        with pytest.raises(ValueError):
            t.set_row_int(0, 0, 1 << 9)

    def test_wrap_views_buffer(self):
        buf = bytearray(10)
        t = BitTensor.wrap(buf, 1, 2, 8)
        t.set_row_int(0, 1, 0xAB)
        assert buf[1] == 0xAB
        with pytest.raises(ValueError):
            BitTensor.wrap(bytearray(3), 1, 2, 16)

    def test_width_limit(self):
        with pytest.raises(ValueError):
            BitTensor.zeros(1, 1, MAX_WIDTH + 1)

    def test_equality(self):
        a = BitTensor.from_planes([[[1, -1]]])
        b = BitTensor.from_planes([[[1, -1]]])
        c = BitTensor.from_planes([[[1, 1]]])
        assert a == b
        assert a != c
