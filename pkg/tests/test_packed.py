import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quik import _backend
from quik.errors import RangeError, ShapeError
from quik.packed import (
    PackedIntMatrix,
    accumulator_bound,
    int_matmul,
    pack_int4,
    pack_int8,
    row_bytes,
    unpack_int4,
)

from oracles import naive_gemm


def test_pack_definition_instance():
    m = pack_int4([[-8, 7, 0, -1]])
    assert m.tobytes() == bytes([0xF0, 0x78])


def test_pack_odd_length_pads_high_nibble():
    assert pack_int4([[7, 7, 7]]).tobytes() == bytes([0xFF, 0x0F])


def test_pack_empty_row():
    m = pack_int4(np.zeros((1, 0), dtype=np.int8))
    assert m.tobytes() == b""
    assert m.shape == (1, 0)


def test_unpack_examples():
    m = PackedIntMatrix.from_bytes(bytes([0xF0, 0x78]), 1, 4, 4)
    assert unpack_int4(m).tolist() == [[-8, 7, 0, -1]]
    z = PackedIntMatrix.from_bytes(bytes([0x00]), 1, 2, 4)
    assert unpack_int4(z).tolist() == [[-8, -8]]


def test_unpack_rejects_int8():
    with pytest.raises(TypeError):
        unpack_int4(pack_int8([[1, 2]]))


def test_range_error_names_position():
    with pytest.raises(RangeError, match=r"row 1.*col 2"):
        pack_int4([[0, 0, 0], [0, 0, 8]])
    with pytest.raises(RangeError):
        pack_int8([[-129]])


def test_nonzero_padding_rejected():
    with pytest.raises(ValueError):
        PackedIntMatrix.from_bytes(bytes([0xFF, 0xFF]), 1, 3, 4)


def test_byte_length_invariant():
    for cols in range(0, 10):
        assert row_bytes(cols, 4) == (cols + 1) // 2
        assert row_bytes(cols, 8) == cols
        m = pack_int4(np.zeros((3, cols), dtype=np.int8))
        assert m.nbytes == 3 * ((cols + 1) // 2)


def test_int8_is_twos_complement():
    m = pack_int8([[-1, -128, 127, 0]])
    assert m.tobytes() == bytes([0xFF, 0x80, 0x7F, 0x00])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 64).flatmap(lambda n: st.lists(st.integers(-8, 7), min_size=n, max_size=n)))
def test_int4_round_trip(values):
    v = np.array([values], dtype=np.int8).reshape(1, -1)
    m = pack_int4(v)
    assert np.array_equal(unpack_int4(m), v)
    assert np.array_equal(PackedIntMatrix.from_bytes(m.tobytes(), 1, v.shape[1], 4).to_ints(), v)


def test_full_range_all_lengths():
    full = np.arange(-8, 8, dtype=np.int8)
    for n in range(65):
        v = np.resize(full, n).reshape(1, n)
        assert np.array_equal(unpack_int4(pack_int4(v)), v)


def test_packed_is_immutable():
    m = pack_int4([[1, 2]])
    with pytest.raises(ValueError):
        m.data[0, 0] = 3


def test_gemm_hand_example():
    x = pack_int8([[1, -2], [3, 4]])
    w = pack_int8([[5, 6], [-7, 8]])
    assert int_matmul(x, w).tolist() == [[-7, -23], [39, 11]]


def test_gemm_zero_annihilates(rng):
    w = pack_int4(rng.integers(-8, 8, size=(5, 7)))
    x = pack_int4(np.zeros((3, 7), dtype=np.int8))
    out = int_matmul(x, w)
    assert out.dtype == np.int32
    assert not out.any()


def test_gemm_against_triple_loop(rng, backend):
    xv = rng.integers(-8, 8, size=(33, 17))
    wv = rng.integers(-8, 8, size=(9, 17))
    got = int_matmul(pack_int4(xv), pack_int4(wv))
    assert np.array_equal(got, naive_gemm(xv, wv))


def test_gemm_random_shapes(backend):
    rng = np.random.default_rng(7)
    for trial in range(120):
        bits = (4, 8)[trial % 2]
        lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1)
        t, n, k = rng.integers(1, 12, size=3)
        xv = rng.integers(lo, hi, size=(t, k))
        wv = rng.integers(lo, hi, size=(n, k))
        pack = pack_int4 if bits == 4 else pack_int8
        assert np.array_equal(int_matmul(pack(xv), pack(wv)), xv @ wv.T), (t, n, k, bits)


def test_gemm_large_accumulation_exact(backend):
    # extreme codes so every partial sum is as large as possible
    k = 4096
    x = np.full((2, k), -128, dtype=np.int8)
    w = np.full((3, k), -128, dtype=np.int8)
    out = int_matmul(pack_int8(x), pack_int8(w))
    assert (out == 128 * 128 * k).all()


def test_gemm_linearity(rng):
    xv = rng.integers(-8, 8, size=(6, 21))
    w1 = rng.integers(-4, 4, size=(5, 21))
    w2 = rng.integers(-4, 4, size=(5, 21))
    x = pack_int4(xv)
    lhs = int_matmul(x, pack_int4(w1 + w2))
    rhs = int_matmul(x, pack_int4(w1)) + int_matmul(x, pack_int4(w2))
    assert np.array_equal(lhs, rhs)


def test_gemm_dim_and_bits_mismatch():
    with pytest.raises(ShapeError):
        int_matmul(pack_int4([[1, 2]]), pack_int4([[1, 2, 3]]))
    with pytest.raises(ValueError):
        int_matmul(pack_int4([[1, 2]]), pack_int8([[1, 2]]))


def test_accumulator_bound():
    assert accumulator_bound(10, 4) == 640
    z = pack_int8(np.zeros((1, 2**17), dtype=np.int8))
    with pytest.raises(RangeError, match="overflow"):
        int_matmul(z, z)
    # one below the limit is still accepted
    ok = pack_int8(np.ones((1, 2**17 - 1), dtype=np.int8))
    assert int_matmul(ok, ok)[0, 0] == 2**17 - 1


def test_backends_agree(rng):
    names = _backend.available()
    xv = rng.integers(-8, 8, size=(13, 31)).astype(np.int8)
    wv = rng.integers(-8, 8, size=(11, 31)).astype(np.int8)
    results = [(_backend.get_backend(n).pack_int4(xv), _backend.get_backend(n).int_gemm(xv, wv))
               for n in names]
    for packed, acc in results[1:]:
        assert np.array_equal(packed, results[0][0])
        assert np.array_equal(acc, results[0][1])
