"""Packed signed-integer matrices and integer GEMM.

Layout (normative for this package):

* ``bits=4``: two elements per byte, row-major. The element with the even
  column index sits in the low nibble. Values are stored biased,
  ``stored = value + 8``. A row with an odd column count is padded with a
  zero high nibble in its last byte.
* ``bits=8``: one two's-complement byte per element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import RangeError, ShapeError


def _check_bits(bits):
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")


def signed_range(bits):
    """Closed range of representable signed values for ``bits``."""
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def row_bytes(cols, bits):
    return (cols * bits + 7) // 8


@dataclass(frozen=True, eq=False)
class PackedIntMatrix:
    """Row-major packed INT4/INT8 matrix.

    ``data`` is a ``(rows, row_bytes)`` uint8 array for ``bits=4`` and a
    ``(rows, cols)`` int8 array for ``bits=8``.
    """

    rows: int
    cols: int
    bits: int
    data: np.ndarray

    def __post_init__(self):
        _check_bits(self.bits)
        expected = (self.rows, row_bytes(self.cols, self.bits))
        if self.data.shape != expected:
            raise ShapeError(f"packed data shape {self.data.shape}, expected {expected}")
        want = np.uint8 if self.bits == 4 else np.int8
        if self.data.dtype != want:
            raise TypeError(f"packed data dtype {self.data.dtype}, expected {np.dtype(want)}")
        if self.bits == 4 and self.cols % 2 and self.rows and np.any(self.data[:, -1] & 0xF0):
            raise RangeError("padding nibble of odd-width row is not zero")
        self.data.setflags(write=False)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nbytes(self):
        return self.data.size

    def tobytes(self):
        return self.data.tobytes()

    @classmethod
    def from_ints(cls, values, bits):
        values = np.asarray(values)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        if bits == 4:
            return pack_int4(values)
        if bits == 8:
            return pack_int8(values)
        _check_bits(bits)

    @classmethod
    def from_bytes(cls, buf, rows, cols, bits):
        _check_bits(bits)
        dtype = np.uint8 if bits == 4 else np.int8
        data = np.frombuffer(buf, dtype=dtype).reshape(rows, row_bytes(cols, bits)).copy()
        return cls(rows, cols, bits, data)

    def to_ints(self):
        """Unpacked signed values as an int8 ``(rows, cols)`` array."""
        if self.bits == 4:
            return unpack_int4(self)
        return np.array(self.data, dtype=np.int8)

    def __eq__(self, other):
        if not isinstance(other, PackedIntMatrix):
            return NotImplemented
        return (self.shape, self.bits) == (other.shape, other.bits) and np.array_equal(
            self.data, other.data
        )

    def __repr__(self):
        return f"PackedIntMatrix(rows={self.rows}, cols={self.cols}, bits={self.bits})"


def _check_range(values, bits):
    lo, hi = signed_range(bits)
    bad = (values < lo) | (values > hi)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise RangeError(
            f"value {int(values[r, c])} at row {r}, col {c} outside int{bits} range [{lo}, {hi}]"
        )


def _as_int_matrix(values):
    values = np.asarray(values)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D integer matrix, got shape {values.shape}")
    if values.size and not np.issubdtype(values.dtype, np.integer):
        if not np.array_equal(values, np.round(values)):
            raise TypeError("non-integer values cannot be packed")
    return values.astype(np.int64, copy=False)


def pack_int4(values) -> PackedIntMatrix:
    """Pack a matrix (or a single row) of values in [-8, 7]."""
    v = _as_int_matrix(values)
    _check_range(v, 4)
    data = _backend.get().pack_int4(v.astype(np.int8))
    return PackedIntMatrix(v.shape[0], v.shape[1], 4, data)


def pack_int8(values) -> PackedIntMatrix:
    v = _as_int_matrix(values)
    _check_range(v, 8)
    return PackedIntMatrix(v.shape[0], v.shape[1], 8, np.ascontiguousarray(v, dtype=np.int8))


def unpack_int4(m: PackedIntMatrix) -> np.ndarray:
    if m.bits != 4:
        raise TypeError(f"unpack_int4 needs a 4-bit matrix, got bits={m.bits}")
    return _backend.get().unpack_int4(m.data, m.cols)


def accumulator_bound(k, bits):
    """Largest |acc| an int GEMM over ``k`` products can produce."""
    return k * (2 ** (bits - 1)) ** 2


def int_matmul(x: PackedIntMatrix, w: PackedIntMatrix) -> np.ndarray:
    """Exact ``x @ w.T`` for packed operands, accumulated in int32.

    ``x`` is ``(t, k)``, ``w`` is ``(n, k)``; returns an int32 ``(t, n)`` array.
    """
    if x.bits != w.bits:
        raise ShapeError(f"operand bit widths differ: {x.bits} vs {w.bits}")
    if x.cols != w.cols:
        raise ShapeError(f"inner dimensions differ: x has {x.cols} cols, w has {w.cols}")
    k = x.cols
    if accumulator_bound(k, x.bits) > np.iinfo(np.int32).max:
        raise RangeError(f"inner dimension {k} can overflow int32 at {x.bits} bits")
    if k == 0:
        return np.zeros((x.rows, w.rows), dtype=np.int32)
    return int_matmul_unpacked(x.to_ints(), w.to_ints(), x.bits)


def int_matmul_unpacked(x, w, bits):
    acc = _backend.get().int_gemm(x, w)
    # cheap insurance: the bound is a theorem, a violation means a kernel bug
    assert acc.size == 0 or int(np.abs(acc).max()) <= accumulator_bound(x.shape[1], bits)
    return acc
