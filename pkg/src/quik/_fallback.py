"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` and the two must agree
bit for bit. Floating-point steps are written out in the same order as the
C loops to keep that true.
"""
import numpy as np

NAME = "numpy"


def round_half_away(u):
    """Round to nearest, ties away from zero (``np.round`` ties to even)."""
    a = np.abs(u)
    f = np.floor(a)
    r = f + ((a - f) >= 0.5)
    return np.copysign(r, u)


def pack_int4(values):
    """Pack signed int4 values (already range checked) into nibble bytes."""
    values = np.asarray(values, dtype=np.int16)
    rows, cols = values.shape
    nbytes = (cols + 1) // 2
    biased = np.zeros((rows, nbytes * 2), dtype=np.uint8)
    biased[:, :cols] = (values + 8).astype(np.uint8)
    return (biased[:, 0::2] | (biased[:, 1::2] << 4)).astype(np.uint8)


def unpack_int4(data, cols):
    data = np.asarray(data, dtype=np.uint8)
    rows = data.shape[0]
    out = np.empty((rows, data.shape[1] * 2), dtype=np.int8)
    out[:, 0::2] = (data & 0x0F).astype(np.int8) - 8
    out[:, 1::2] = (data >> 4).astype(np.int8) - 8
    return np.ascontiguousarray(out[:, :cols])


def int_gemm(x, w):
    """``x @ w.T`` for int8 operands with exact int32 results.

    Products of small integers and their partial sums stay far below 2**53,
    so the float64 BLAS path is exact regardless of summation order.
    """
    acc = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    return acc.astype(np.int32)


def _row_scale_zero(x, bits):
    levels = float(2**bits - 1)
    if x.shape[1] == 0:
        t = x.shape[0]
        return np.ones(t, dtype=np.float32), np.zeros(t, dtype=np.float32)
    lo = x.min(axis=1)
    hi = x.max(axis=1)
    scale = ((hi.astype(np.float64) - lo.astype(np.float64)) / levels).astype(np.float32)
    scale[scale == 0] = 1.0
    return scale, lo.astype(np.float32)


def _codes(x, scale, zero, bits):
    half = 2 ** (bits - 1)
    u = (x.astype(np.float64) - zero.astype(np.float64)[:, None]) / scale.astype(np.float64)[:, None]
    q = round_half_away(u) - half
    return np.clip(q, -half, half - 1).astype(np.int8)


def quantize_rows(x, bits):
    """Per-row asymmetric quantization. Returns (codes int8, scale, zero)."""
    x = np.asarray(x, dtype=np.float32)
    scale, zero = _row_scale_zero(x, bits)
    return _codes(x, scale, zero, bits), scale, zero


def quantize_split(x, base_idx, out_idx, bits):
    """Split off outlier columns and quantize the rest in one call.

    Returns (stored, scale, zero, x_outlier) where ``stored`` is packed
    nibbles for bits=4 and int8 codes for bits=8.
    """
    x = np.asarray(x, dtype=np.float32)
    base = x[:, base_idx]
    codes, scale, zero = quantize_rows(base, bits)
    stored = pack_int4(codes) if bits == 4 else codes
    return stored, scale, zero, np.ascontiguousarray(x[:, out_idx])


def epilogue(acc, scale_act, zero_act, scale_w, wreduced, half, addend=None, bias=None):
    """Dequantize int32 accumulators; optionally add ``addend`` then ``bias``."""
    half = np.float32(half)
    out = acc.astype(np.float32) * scale_act[:, None] * scale_w[None, :]
    shift = (zero_act + half * scale_act)[:, None] * wreduced[None, :]
    out = out + shift
    if addend is not None:
        out = out + addend
    if bias is not None:
        out = out + bias[None, :]
    return out.astype(np.float32, copy=False)
