"""Offline weight quantization with outlier columns kept in floating point.

Weights are quantized symmetrically per output row onto the grid
``[-qmax, qmax]`` with ``qmax = 2**(bits-1) - 1``; the most negative code is
never used so zero stays exact. Rounding is to nearest, ties away from zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._fallback import round_half_away
from .calibration import OutlierSet
from .errors import NumericalError, ShapeError
from .packed import PackedIntMatrix

logger = logging.getLogger(__name__)

CLIP_GRID = tuple(k / 100 for k in range(100, 49, -1))  # 1.00 down to 0.50
DEFAULT_DAMPING = 0.01
DEFAULT_BLOCK = 128


def qmax_for(bits):
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    return 2 ** (bits - 1) - 1


def _to_grid(u, qmax):
    return np.clip(round_half_away(u), -qmax, qmax)


def _row_scales(W, bits, clip):
    qmax = qmax_for(bits)
    amax = np.abs(W).max(axis=1) if W.shape[1] else np.zeros(W.shape[0])
    scales = np.asarray(clip, dtype=np.float64) * amax / qmax
    scales[amax == 0] = 1.0
    return scales


def rtn_quantize_row(w_row, bits, clip_factor=1.0):
    """Round-to-nearest quantization of one row. Returns ``(q, scale)``.

    ``scale = clip_factor * max|w| / qmax``; an all-zero row gets scale 1.
    """
    w = np.asarray(w_row, dtype=np.float64).reshape(-1)
    qmax = qmax_for(bits)
    amax = float(np.abs(w).max()) if w.size else 0.0
    if amax == 0:
        return np.zeros(w.size, dtype=np.int8), 1.0
    scale = clip_factor * amax / qmax
    return _to_grid(w / scale, qmax).astype(np.int8), scale


def _sq_error(W, scales, bits):
    q = _to_grid(W / scales[:, None], qmax_for(bits))
    return ((W - q * scales[:, None]) ** 2).sum(axis=1)


def clip_search_rows(W, bits, grid=CLIP_GRID):
    """Per-row clip factor from ``grid`` minimizing squared RTN error; ties keep the larger factor."""
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    amax = np.abs(W).max(axis=1) if W.shape[1] else np.zeros(n)
    qmax = qmax_for(bits)
    best_c = np.ones(n)
    best_err = np.full(n, np.inf)
    for c in sorted(grid, reverse=True):
        scales = c * amax / qmax
        scales[amax == 0] = 1.0
        err = _sq_error(W, scales, bits)
        better = err < best_err
        best_err[better] = err[better]
        best_c[better] = c
    return best_c


def clip_search(w_row, bits, grid=CLIP_GRID):
    w = np.asarray(w_row, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise ValueError("clip_search needs a non-empty row")
    return float(clip_search_rows(w, bits, grid)[0])


@dataclass(frozen=True)
class Hessian:
    """``sum_t x_t x_t^T`` over calibration tokens, accumulated in float64.

    Damping ``damping_frac * mean(diag)`` is applied to the diagonal only
    when the inverse is needed (see :meth:`damped`), so rescaling the
    Hessian rescales the damping with it.
    """

    matrix: np.ndarray
    token_count: int
    damping_frac: float = DEFAULT_DAMPING

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def damping(self):
        return self.damping_frac * float(np.mean(np.diag(self.matrix)))

    def damped(self):
        return self.matrix + self.damping * np.eye(self.dim)

    def permuted(self, perm):
        return Hessian(self.matrix[np.ix_(perm, perm)], self.token_count, self.damping_frac)

    def scaled(self, alpha):
        return Hessian(self.matrix * alpha, self.token_count, self.damping_frac)

    @classmethod
    def identity(cls, dim, damping_frac=DEFAULT_DAMPING):
        return cls(np.eye(dim), 0, damping_frac)


def build_hessian(calib_inputs, damping_frac=DEFAULT_DAMPING) -> Hessian:
    """Accumulate ``X^T X`` over one ``(tokens, features)`` array or an iterable of them."""
    if isinstance(calib_inputs, np.ndarray):
        calib_inputs = [calib_inputs]
    H = None
    count = 0
    for batch in calib_inputs:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"calibration batch must be 2-D, got shape {x.shape}")
        if H is None:
            H = np.zeros((x.shape[1], x.shape[1]))
        elif x.shape[1] != H.shape[0]:
            raise ShapeError(f"batch has {x.shape[1]} features, expected {H.shape[0]}")
        H += x.T @ x
        count += x.shape[0]
    if count == 0:
        raise ValueError("build_hessian needs at least one calibration token")
    return Hessian(H, count, damping_frac)


@dataclass(frozen=True)
class SparsityMask:
    """Keep-mask over base weight positions (True = kept)."""

    mask: np.ndarray

    def validate(self):
        """Raise unless every whole, 4-aligned group keeps at most 2 weights."""
        n = self.mask.shape[1] // 4 * 4
        kept = self.mask[:, :n].reshape(self.mask.shape[0], -1, 4).sum(axis=2)
        if kept.size and kept.max() > 2:
            r, g = map(int, np.argwhere(kept > 2)[0])
            raise ValueError(f"row {r}, group {g} keeps {int(kept[r, g])} of 4 weights")
        return True


@dataclass(frozen=True, eq=False)
class QuantizedWeights:
    """Base weights in permuted column order plus FP outlier columns.

    ``scales`` and ``wreduced`` are float32 per output row; ``wreduced`` is
    ``scale * sum(q)`` over the base columns.
    """

    base: PackedIntMatrix
    scales: np.ndarray
    outlier_weights: np.ndarray
    wreduced: np.ndarray
    outliers: OutlierSet
    bits: int
    clip_factors: np.ndarray = None
    sparsity: SparsityMask = None

    @property
    def out_features(self):
        return self.base.rows

    @property
    def in_features(self):
        return self.outliers.feature_count

    def base_ints(self):
        return self.base.to_ints()

    def dequantized_base(self):
        """Base weights ``q * scale`` in float64, permuted order."""
        return self.base_ints().astype(np.float64) * self.scales.astype(np.float64)[:, None]

    def dense_weight(self):
        """Full float64 weight in the original column order."""
        full = np.concatenate([self.dequantized_base(), self.outlier_weights.astype(np.float64)], axis=1)
        return full[:, self.outliers.inverse_permutation]


def compute_wreduced(q, scales=None):
    """Per-row ``scale * sum(q)``. Accepts QuantizedWeights or ``(q, scales)``."""
    if isinstance(q, QuantizedWeights):
        q, scales = q.base_ints(), q.scales
    q = np.asarray(q, dtype=np.int64)
    scales = np.asarray(scales, dtype=np.float32).astype(np.float64)
    return (scales * q.sum(axis=1)).astype(np.float32)


def _pack(q, bits):
    return PackedIntMatrix.from_ints(q, bits)


def _assemble(q, scales, outlier_w, outliers, bits, clip, mask=None):
    scales32 = scales.astype(np.float32)
    base = _pack(q, bits)
    return QuantizedWeights(
        base=base,
        scales=scales32,
        outlier_weights=np.ascontiguousarray(outlier_w, dtype=np.float32),
        wreduced=compute_wreduced(q, scales32),
        outliers=outliers,
        bits=bits,
        clip_factors=np.asarray(clip, dtype=np.float64),
        sparsity=None if mask is None else SparsityMask(mask),
    )


def _prepare(W, n_in, outliers):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != n_in:
        raise ShapeError(f"weight shape {W.shape} does not match {n_in} input features")
    if outliers is None:
        outliers = OutlierSet.none(n_in)
    if outliers.feature_count != n_in:
        raise ShapeError(f"outlier set covers {outliers.feature_count} features, weight has {n_in}")
    return W, outliers


def rtn_quantize(W, outliers=None, bits=4, use_clipping=False) -> QuantizedWeights:
    """Round-to-nearest baseline: no error compensation, outlier columns untouched."""
    W = np.asarray(W, dtype=np.float64)
    W, outliers = _prepare(W, W.shape[1] if W.ndim == 2 else -1, outliers)
    Wp = W[:, outliers.permutation]
    nb = outliers.base_count
    base = Wp[:, :nb]
    clip = clip_search_rows(base, bits) if use_clipping and nb else np.ones(W.shape[0])
    scales = _row_scales(base, bits, clip)
    q = _to_grid(base / scales[:, None], qmax_for(bits)).astype(np.int8)
    return _assemble(q, scales, Wp[:, nb:], outliers, bits, clip)


def inverse_hessian_factor(Hd):
    """Upper Cholesky factor of ``Hd^-1``."""
    try:
        L = scipy.linalg.cholesky(Hd, lower=True)
        Hinv = scipy.linalg.cho_solve((L, True), np.eye(Hd.shape[0]))
        return scipy.linalg.cholesky(Hinv, lower=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        w = np.linalg.eigvalsh((Hd + Hd.T) / 2)
        raise NumericalError(
            f"Cholesky failed ({exc}); smallest eigenvalue of damped Hessian {w[0]:.3e}. "
            "Increase the damping fraction."
        ) from None


def _compensated_quantize(W, H, outliers, bits, use_clipping, block_size, prune):
    W, outliers = _prepare(W, H.dim, outliers)
    if not np.all(np.isfinite(W)):
        raise NumericalError("weight matrix contains non-finite values")
    if block_size < 1 or (prune and block_size % 4):
        raise ValueError("block_size must be positive (and a multiple of 4 when pruning)")
    n_out = W.shape[0]
    perm = outliers.permutation
    Wp = W[:, perm].copy()
    Hd = H.permuted(perm).damped()
    nb = outliers.base_count
    qmax = qmax_for(bits)

    clip = clip_search_rows(Wp[:, :nb], bits) if use_clipping and nb else np.ones(n_out)
    scales = _row_scales(Wp[:, :nb], bits, clip)
    C = inverse_hessian_factor(Hd)
    diag = np.diag(C)

    Q = np.zeros((n_out, nb), dtype=np.int8)
    mask = np.ones((n_out, nb), dtype=bool) if prune else None
    groups_end = nb // 4 * 4
    rows = np.arange(n_out)[:, None]

    for b0 in range(0, nb, block_size):
        b1 = min(b0 + block_size, nb)
        Wb = Wp[:, b0:b1]
        Err = np.zeros((n_out, b1 - b0))
        for j in range(b0, b1):
            jj = j - b0
            if prune and j % 4 == 0 and j < groups_end:
                sal = Wb[:, jj:jj + 4] ** 2 / diag[j:j + 4] ** 2
                drop = np.argsort(sal, axis=1, kind="stable")[:, :2]
                mask[rows, j + drop] = False
            w = Wb[:, jj]
            q = _to_grid(w / scales, qmax)
            if prune:
                q[~mask[:, j]] = 0
            err = (w - q * scales) / C[j, j]
            Wb[:, jj + 1:] -= np.outer(err, C[j, j + 1:b1])
            Err[:, jj] = err
            Q[:, j] = q
        Wp[:, b1:] -= Err @ C[b0:b1, b1:]

    return _assemble(Q, scales, Wp[:, nb:], outliers, bits, clip, mask)


def gptq_quantize(W, H: Hessian, outliers: OutlierSet | None = None, bits=4,
                  use_clipping=False, block_size=DEFAULT_BLOCK) -> QuantizedWeights:
    """GPTQ over the non-outlier columns with outliers moved to the tail.

    Columns are processed left to right in permuted order. Each column's
    rounding error is pushed onto every column to its right, outlier columns
    included, which are returned in floating point after absorbing it.
    Row scales are fixed once up front from the (optionally clipped)
    permuted base weights.
    """
    return _compensated_quantize(W, H, outliers, bits, use_clipping, block_size, prune=False)


def sparsegpt_joint(W, H: Hessian, outliers: OutlierSet | None = None, bits=4,
                    use_clipping=False, block_size=DEFAULT_BLOCK) -> QuantizedWeights:
    """Joint 2:4 pruning and quantization of the base columns.

    At the start of each aligned group of four base columns, the two
    weights per row with the smallest saliency ``w^2 / d_j^2`` are pruned,
    where ``d_j`` is the diagonal of the inverse-Hessian Cholesky factor
    used for compensation. Outlier columns stay dense. A trailing group of
    fewer than four columns is left dense.
    """
    return _compensated_quantize(W, H, outliers, bits, use_clipping, block_size, prune=True)


def proxy_loss(W, W_hat, H):
    """``tr(dW H dW^T)``, the layer output error induced by ``W_hat``."""
    H = H.matrix if isinstance(H, Hessian) else np.asarray(H, dtype=np.float64)
    dW = np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)
    return float(np.einsum("ij,jk,ik->", dW, H, dW))
