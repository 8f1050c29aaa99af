import json
import subprocess
import sys

import numpy as np
import pytest

from quik.cli import main
from quik.container import read_container, write_container


@pytest.fixture
def problem(tmp_path):
    assert main(["synth", "-o", str(tmp_path), "--in-features", "64", "--out-features", "32",
                 "--tokens", "256", "--heavy", "4", "--seed", "3"]) == 0
    return tmp_path


def _json(capsys, argv):
    capsys.readouterr()
    assert main(argv + ["--json"]) == 0
    return json.loads(capsys.readouterr().out)


def test_quantize_then_run_round_trip(problem, capsys):
    q = problem / "q"
    info = _json(capsys, ["quantize", str(problem / "layer"), "--calib", str(problem / "calib"),
                          "-o", str(q), "--outliers", "4"])
    assert info["outliers"] == 4 and info["bits"] == 4
    rep = _json(capsys, ["run", str(q), "--input", str(problem / "input")])
    assert rep["rel_frobenius"] < 0.05
    ref = _json(capsys, ["run", str(q), "--input", str(problem / "input"), "--mode", "reference"])
    assert ref["rel_frobenius"] == 0 and ref["max_abs"] == 0


def test_outliers_reduce_cli_error(problem, capsys):
    errs = []
    for k in ("0", "4"):
        out = problem / f"q{k}"
        assert main(["quantize", str(problem / "layer"), "--calib", str(problem / "calib"),
                     "-o", str(out), "--outliers", k]) == 0
        errs.append(_json(capsys, ["run", str(out), "--input", str(problem / "input")])["rel_frobenius"])
    assert errs[1] < errs[0]


def test_quantize_options(problem, capsys):
    out = problem / "s"
    info = _json(capsys, ["quantize", str(problem / "layer"), "--calib", str(problem / "calib"), "-o",
                          str(out), "--bits", "8", "--outlier-pct", "5", "--sparsity", "2:4",
                          "--clip-search"])
    assert info["method"] == "sparsegpt" and info["outliers"] == 16
    tensors, meta = read_container(out)
    assert meta["sparsity"] == "2:4" and "sparsity_mask" in tensors
    info = _json(capsys, ["quantize", str(problem / "layer"), "--calib", str(problem / "calib"), "-o",
                          str(out), "--threshold", "1e9"])
    assert info["outliers"] == 0


def test_run_writes_output(problem, tmp_path):
    q = problem / "q"
    main(["quantize", str(problem / "layer"), "--calib", str(problem / "calib"), "-o", str(q),
          "--method", "rtn", "--outliers", "4"])
    assert main(["run", str(q), "--input", f"{problem / 'input'}:x", "--mode", "weight-only",
                 "--output", str(tmp_path / "y")]) == 0
    t, meta = read_container(tmp_path / "y")
    assert t["output"].shape == (32, 32) and meta["mode"] == "weight-only"


def test_calibrate(tmp_path, capsys):
    rng = np.random.default_rng(0)
    u = 1 + 2 * rng.standard_normal((512, 16))
    g = 1 + 2 * rng.standard_normal((512, 16))
    write_container(tmp_path / "acts", {
        "up/0": u[:256].astype(np.float32), "up/1": u[256:].astype(np.float32),
        "down/0": (u * g).astype(np.float32),
    })
    meta = _json(capsys, ["calibrate", str(tmp_path / "acts"), "-o", str(tmp_path / "st")])
    assert meta["layers"]["up"]["token_count"] == 512
    assert [l["bits"] for l in meta["sensitivity"]["layers"]] == [4, 8]
    tensors, _ = read_container(tmp_path / "st")
    assert set(tensors) == {f"{n}/{s}" for n in ("up", "down") for s in ("max_abs", "mean", "variance")}


def test_analyze_flops_three_lines(capsys):
    assert main(["analyze", "flops", "--arch", "llama2-70b"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split(":")[0] for l in lines] == ["INT4", "INT8", "FP16"]
    assert lines[0] == "INT4: 70.01%"


def test_analyze_overrides(capsys):
    fr = _json(capsys, ["analyze", "flops", "--arch", "opt-66b", "--outliers", "0"])["fractions"]
    assert fr["int4"] == pytest.approx(1 - 9216 * 50272 / (64 * 12 * 9216**2 + 9216 * 50272))
    mem = _json(capsys, ["analyze", "memory", "--arch", "opt-66b"])
    assert mem["outlier_bytes"] == 2717908992
    rl = _json(capsys, ["analyze", "roofline", "--n", "8192", "--k", "8192", "--tokens", "1,16,128"])
    assert [r["bound"] for r in rl["results"]] == ["memory-bound", "memory-bound", "compute-bound"]
    custom = _json(capsys, ["analyze", "roofline", "--n", "8192", "--k", "8192", "--tokens", "128",
                            "--peak", "1e15", "--bandwidth", "1e12"])
    assert custom["results"][0]["bound"] == "memory-bound"
    rl = _json(capsys, ["analyze", "roofline", "--arch", "llama2-70b", "--tokens", "1"])
    assert len(rl["results"]) == 8


def test_bench_cli(capsys):
    rows = _json(capsys, ["bench", "--sizes", "4x16x40", "--repeats", "2", "--outliers", "8"])
    assert [r["variant"] for r in rows] == ["v1", "v2", "v3"]
    rows = _json(capsys, ["bench", "--sizes", "4x16x40", "--repeats", "1", "--compare-backends"])
    assert rows and all(r["int_gemm"] >= 0 for r in rows)


@pytest.mark.parametrize("argv", [
    [],
    ["analyze", "flops"],
    ["analyze", "roofline"],
    ["bench", "--sizes", "4x4"],
    ["bench", "--repeats", "0"],
    ["quantize", "x", "--calib", "c"],
    ["analyze", "nonsense"],
])
def test_usage_errors_exit_1(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_data_errors_exit_2(tmp_path, problem):
    assert main(["run", str(tmp_path / "nope"), "--input", str(problem / "input")]) == 2
    assert main(["analyze", "flops", "--arch", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["analyze", "memory", "--arch", str(tmp_path / "bad.json")]) == 2
    write_container(tmp_path / "w", {"weight": np.ones((2, 3), np.float32)})
    write_container(tmp_path / "c", {"a": np.ones((4, 5), np.float32)})
    assert main(["quantize", str(tmp_path / "w"), "--calib", str(tmp_path / "c"), "-o",
                 str(tmp_path / "o")]) == 2


def test_numerical_failure_exit_3(tmp_path):
    write_container(tmp_path / "w", {"weight": np.ones((2, 3), np.float32)})
    write_container(tmp_path / "c", {"a": np.zeros((4, 3), np.float32)})
    assert main(["quantize", str(tmp_path / "w"), "--calib", str(tmp_path / "c"), "-o",
                 str(tmp_path / "o"), "--damping", "0"]) == 3


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "quik", "analyze", "flops", "--arch", "opt-66b"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0 and "FP16: 2.77%" in r.stdout
