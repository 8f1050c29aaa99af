import os
import subprocess
import sys

import numpy as np
import pytest

from quik import _backend
from quik.bench import NotBitIdentical, bench, compare_backends, parse_size
from quik import runtime


def test_parse_size():
    assert parse_size("16x32x64") == (16, 32, 64)
    for bad in ("16x32", "0x1x1", "axbxc"):
        with pytest.raises(ValueError):
            parse_size(bad)


def test_bench_rows_cover_request():
    rows = bench(["4x16x40", (3, 8, 24)], repeats=5, n_outliers=8)
    assert [(r.size, r.variant) for r in rows] == [
        ((4, 16, 40), v) for v in ("v1", "v2", "v3")] + [((3, 8, 24), v) for v in ("v1", "v2", "v3")]
    for r in rows:
        assert r.repeats == 5 and r.total > 0
        assert (r.stages["split"] is None) == (r.variant != "v1")
        assert r.stages["matmul"] >= 0


def test_bench_reports_median(monkeypatch):
    ticks = iter(range(1000))
    monkeypatch.setattr("quik.bench.time.perf_counter", lambda: next(ticks) ** 2 / 1e3)
    from quik.bench import _median_time
    t, out = _median_time(lambda: 7, 5)
    # durations (2k+1)^2 - (2k)^2 = 4k+1 -> 1, 5, 9, 13, 17 ms; median 9 ms
    assert out == 7 and t == pytest.approx(9e-3)


def test_bench_refuses_non_identical(monkeypatch):
    real = runtime.quik_matmul

    def skewed(layer, x, variant="v3"):
        out = real(layer, x, variant)
        return out + np.float32(1e-3) if variant == "v2" else out

    monkeypatch.setattr("quik.bench.quik_matmul", skewed)
    with pytest.raises(NotBitIdentical):
        bench(["2x4x8"], repeats=1, n_outliers=2)


def test_bench_rejects_bad_args():
    with pytest.raises(ValueError):
        bench(["2x4x8"], variants=("v9",))
    with pytest.raises(ValueError):
        bench(["2x4x8"], repeats=0)


@pytest.mark.parametrize("bits", [4, 8])
def test_compare_backends(bits):
    rows = compare_backends(["5x12x33"], repeats=1, bits=bits, n_outliers=3)
    assert [r["backend"] for r in rows] == _backend.available()
    assert all((r["pack_int4"] is None) == (bits == 8) for r in rows)


def test_backend_selection():
    assert "numpy" in _backend.available()
    with _backend.use_backend("numpy") as b:
        assert _backend.get() is b and b.NAME == "numpy"
    with pytest.raises(ValueError):
        _backend.get_backend("fortran")


def test_env_var_forces_fallback():
    env = dict(os.environ, QUIK_BACKEND="numpy")
    r = subprocess.run([sys.executable, "-c", "from quik import _backend; print(_backend.get().NAME)"],
                       capture_output=True, text=True, env=env, check=True)
    assert r.stdout.strip() == "numpy"


@pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")
def test_compiled_backend_is_default():
    env = {k: v for k, v in os.environ.items() if k != "QUIK_BACKEND"}
    r = subprocess.run([sys.executable, "-c", "from quik import _backend; print(_backend.get().NAME)"],
                       capture_output=True, text=True, env=env, check=True)
    assert r.stdout.strip() == "cython"


@pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")
def test_backends_bit_identical_kernels():
    c, n = _backend.get_backend("cython"), _backend.get_backend("numpy")
    for seed in range(30):
        rng = np.random.default_rng(seed)
        t, k = rng.integers(1, 30), rng.integers(1, 70)
        bits = (4, 8)[seed % 2]
        x = (rng.standard_normal((t, k)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        if seed % 5 == 0:
            x[0] = x[0, 0]  # constant row
        out_idx = np.sort(rng.choice(k, rng.integers(0, k + 1), replace=False)).astype(np.intp)
        base_idx = np.setdiff1d(np.arange(k), out_idx).astype(np.intp)
        a = c.quantize_split(x, base_idx, out_idx, bits)
        b = n.quantize_split(x, base_idx, out_idx, bits)
        for u, v in zip(a, b):
            assert np.array_equal(u, v), seed
        codes = c.unpack_int4(a[0], base_idx.size) if bits == 4 else a[0]
        w = rng.integers(-7, 8, size=(9, base_idx.size)).astype(np.int8)
        acc_c, acc_n = c.int_gemm(codes, w), n.int_gemm(codes, w)
        assert np.array_equal(acc_c, acc_n)
        sw = rng.uniform(0.01, 1, 9).astype(np.float32)
        wr = rng.standard_normal(9).astype(np.float32)
        add = rng.standard_normal((t, 9)).astype(np.float32)
        bias = rng.standard_normal(9).astype(np.float32)
        half = float(2 ** (bits - 1))
        for extra in ((None, None), (add, None), (None, bias), (add, bias)):
            assert np.array_equal(c.epilogue(acc_c, a[1], a[2], sw, wr, half, *extra),
                                  n.epilogue(acc_n, b[1], b[2], sw, wr, half, *extra))
