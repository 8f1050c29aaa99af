"""Wall-clock benchmarks for the pipeline variants and the kernel backends."""
from __future__ import annotations

import contextlib
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import _backend
from .calibration import OutlierSet
from .packed import int_matmul
from .quantizer import rtn_quantize
from .runtime import (
    VARIANTS,
    QuikLinearLayer,
    dequantize_epilogue,
    quantize_activations,
    quantize_activations_fused,
    quik_matmul,
    split_activations,
)


class NotBitIdentical(AssertionError):
    """Variants or backends disagree, so timing them would compare different work."""


@dataclass
class BenchRow:
    size: tuple
    variant: str
    backend: str
    stages: dict  # stage -> median seconds (None when fused into another stage)
    total: float
    repeats: int


def parse_size(text):
    """``"TxNxK"`` -> (tokens, out_features, in_features)."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"size {text!r} must look like TOKENSxOUTxIN")
    t, n, k = (int(p) for p in parts)
    if min(t, n, k) <= 0:
        raise ValueError(f"size {text!r} must be positive")
    return t, n, k


def synthetic_layer(n_out, n_in, bits=4, n_outliers=256, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n_out, n_in)).astype(np.float32)
    k = min(n_outliers, n_in)
    outliers = OutlierSet(rng.choice(n_in, size=k, replace=False), n_in)
    return QuikLinearLayer(rtn_quantize(W, outliers, bits), rng.standard_normal(n_out).astype(np.float32))


def _median_time(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def _stage_times(layer, x, variant, repeats):
    w = layer.weights
    st = {}
    if variant == "v1":
        st["split"], (xb, xo) = _median_time(lambda: split_activations(x, w.outliers), repeats)
        st["quantize"], a = _median_time(lambda: quantize_activations(xb, w.bits), repeats)
    else:
        st["split"] = None
        st["quantize"], (a, xo) = _median_time(
            lambda: quantize_activations_fused(x, w.outliers, w.bits), repeats)
    st["fp_matmul"], fp = _median_time(lambda: xo @ w.outlier_weights.T, repeats)
    st["matmul"], acc = _median_time(lambda: int_matmul(a.packed, w.base), repeats)
    if variant == "v3":
        st["dequantize"], _ = _median_time(
            lambda: dequantize_epilogue(acc, a, w.scales, w.wreduced, fp, layer.bias), repeats)
    else:
        st["dequantize"], _ = _median_time(
            lambda: dequantize_epilogue(acc, a, w.scales, w.wreduced) + fp + layer.bias, repeats)
    return st


def bench(sizes, variants=VARIANTS, repeats=5, bits=4, n_outliers=256, seed=0, backend=None):
    """Median stage timings per (size, variant).

    Before timing a size, all requested variants are run once and must
    produce bit-identical outputs; otherwise :class:`NotBitIdentical` is raised.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    rows = []
    ctx = _backend.use_backend(backend) if backend else contextlib.nullcontext()
    with ctx:
        name = _backend.get().NAME
        for i, size in enumerate(sizes):
            t, n, k = parse_size(size) if isinstance(size, str) else tuple(size)
            layer = synthetic_layer(n, k, bits, n_outliers, seed + i)
            x = np.random.default_rng(seed + 1000 + i).standard_normal((t, k)).astype(np.float32)
            outputs = {v: quik_matmul(layer, x, v) for v in variants}
            first = outputs[variants[0]]
            for v, out in outputs.items():
                if not np.array_equal(out, first):
                    raise NotBitIdentical(f"size {t}x{n}x{k}: {v} differs from {variants[0]}")
            for v in variants:
                stages = _stage_times(layer, x, v, repeats)
                total, _ = _median_time(lambda: quik_matmul(layer, x, v), repeats)
                rows.append(BenchRow((t, n, k), v, name, stages, total, repeats))
    return rows


def compare_backends(sizes, repeats=5, bits=4, n_outliers=256, seed=0):
    """Time each kernel under every available backend after checking they agree bit for bit."""
    rows = []
    for i, size in enumerate(sizes):
        t, n, k = parse_size(size) if isinstance(size, str) else tuple(size)
        layer = synthetic_layer(n, k, bits, n_outliers, seed + i)
        w = layer.weights
        x = np.random.default_rng(seed + 1000 + i).standard_normal((t, k)).astype(np.float32)
        results = {}
        timings = {}
        for name in _backend.available():
            kern = _backend.get_backend(name)
            qb, sc, ze, xo = kern.quantize_split(x, w.outliers.base_indices, w.outliers.indices, bits)
            xq = kern.unpack_int4(qb, w.outliers.base_count) if bits == 4 else qb
            wq = w.base_ints()
            acc = kern.int_gemm(xq, wq)
            fp = xo @ w.outlier_weights.T
            half = float(2 ** (bits - 1))
            out = kern.epilogue(acc, sc, ze, w.scales, w.wreduced, half, fp, layer.bias)
            results[name] = (qb, sc, ze, xo, acc, out)
            timings[name] = {
                "pack_int4": _median_time(lambda: kern.pack_int4(wq), repeats)[0] if bits == 4 else None,
                "quantize_split": _median_time(
                    lambda: kern.quantize_split(x, w.outliers.base_indices, w.outliers.indices, bits),
                    repeats)[0],
                "int_gemm": _median_time(lambda: kern.int_gemm(xq, wq), repeats)[0],
                "epilogue": _median_time(
                    lambda: kern.epilogue(acc, sc, ze, w.scales, w.wreduced, half, fp, layer.bias),
                    repeats)[0],
            }
        names = list(results)
        for other in names[1:]:
            for a, b in zip(results[names[0]], results[other]):
                if not np.array_equal(a, b):
                    raise NotBitIdentical(f"size {t}x{n}x{k}: backend {other} differs from {names[0]}")
        for name, tm in timings.items():
            rows.append({"size": (t, n, k), "backend": name, **tm})
    return rows
