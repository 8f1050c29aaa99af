import json
import math
from fractions import Fraction

import numpy as np
import pytest

from quik.analysis import (
    DEVICES,
    DeviceSpec,
    ModelArchSpec,
    bundled_archs,
    error_report,
    flop_breakdown,
    load_arch,
    memory_estimate,
    roofline_classify,
)
from quik.errors import FormatError, ShapeError


def _toy(policy, head=False):
    layers = [{"name": "a", "in_features": 64, "out_features": 32, "count": 3, "class": "attn"},
              {"name": "d", "in_features": 128, "out_features": 64, "count": 3, "class": "mlp-down"}]
    if head:
        layers.append({"name": "h", "in_features": 64, "out_features": 100, "count": 1,
                       "class": "head"})
    return ModelArchSpec.from_dict({"name": "toy", "layers": layers, "policy": policy})


def test_bundled_archs_present():
    assert bundled_archs() == ["llama2-70b", "opt-66b"]
    a = load_arch("llama2-70b")
    assert a.source and len(a.layers) == 8
    assert load_arch("opt-66b.json").name == "opt-66b"


def test_llama_flop_breakdown_public_dims():
    # integer MAC counts from hidden 8192, ffn 28672, kv 1024, 80 blocks, vocab 32000
    a = load_arch("llama2-70b")
    fb = flop_breakdown(a)
    attn = 80 * (2 * 8192 * 8192 + 2 * 8192 * 1024)
    up_gate = 80 * 2 * 8192 * 28672
    down = 80 * 28672 * 8192
    head = 8192 * 32000
    fp = 256 * (attn + up_gate) // 8192 + 896 * down // 28672 + head
    total = attn + up_gate + down + head
    assert fb.macs["fp16"] == fp
    assert fb.fractions["fp16"] == Fraction(fp, total)
    assert sum(fb.fractions.values()) == 1
    f = fb.as_floats()
    assert 0.68 <= f["int4"] <= 0.72 and 0.25 <= f["int8"] <= 0.29
    assert abs(f["fp16"] - 0.031) <= 0.02


def test_opt_fp_fraction():
    f = flop_breakdown(load_arch("opt-66b")).as_floats()
    assert abs(f["fp16"] * 100 - 2.78) <= 0.05
    assert f["int8"] == 0


def test_zero_outliers_all_int4():
    fb = flop_breakdown(_toy({"attn": {"outliers": 0}, "mlp-down": {"outliers": 0}}))
    assert fb.fractions == {"int4": 1, "int8": 0, "fp16": 0}


def test_memory_estimates_match_table_targets():
    opt = memory_estimate(load_arch("opt-66b"))
    assert abs(opt.outlier_bytes / 1e9 - 2.71) <= 0.05 * 2.71
    llama = memory_estimate(load_arch("llama2-70b"))
    assert abs(llama.outlier_bytes / 1e9 - 4.06) <= 0.10 * 4.06
    # closed form: 64 blocks x 256 outlier columns x fp16 over every out row
    assert opt.outlier_bytes == 64 * 256 * 2 * (4 * 9216 + 36864 + 9216)


def test_memory_zero_outliers_base_is_half_macs():
    a = _toy({"attn": {"outliers": 16}, "mlp-down": {"outliers": 16}})
    m = memory_estimate(a, bits=4, outliers=0)
    assert m.base_bytes == sum(l.macs for l in a.layers) // 2
    assert m.outlier_bytes == 0


def test_memory_linear_in_outliers_and_monotone_in_bits():
    a = _toy({"attn": {}, "mlp-down": {}})
    o = [memory_estimate(a, outliers=k).outlier_bytes for k in (0, 16, 32, 48)]
    assert o[1] - o[0] == o[2] - o[1] == o[3] - o[2] > 0
    assert memory_estimate(a, bits=4).total_bytes < memory_estimate(a, bits=8).total_bytes
    with pytest.raises(ValueError):
        memory_estimate(a, bits=3)


def test_fp_layers_counted_at_two_bytes():
    a = _toy({"attn": {}, "mlp-down": {}, "head": {"precision": "fp16"}}, head=True)
    assert memory_estimate(a).fp_layer_bytes == 64 * 100 * 2


def test_ai_formula():
    r = roofline_classify(2, 2, 2, 4, DEVICES["rtx3090"])
    assert r.intensity == pytest.approx(16 / 48)
    assert r.flops == 16 and r.bytes_moved == 48


@pytest.mark.parametrize("device", sorted(DEVICES))
def test_roofline_fig2_pattern(device):
    dev = DEVICES[device]
    assert 5 <= dev.balance("fp32") <= 100
    bound = {m: roofline_classify(m, 8192, 8192, 4, dev).bound for m in (1, 16, 128, 256, 1024)}
    assert bound[1] == bound[16] == "memory-bound"
    assert all(bound[m] == "compute-bound" for m in (128, 256, 1024))


def test_roofline_monotone_in_m():
    dev = DeviceSpec("d", {"fp32": 35e12}, 1e12)
    seq = [roofline_classify(m, 4096, 4096, 4, dev) for m in range(1, 300, 7)]
    ai = [r.intensity for r in seq]
    assert ai == sorted(ai)
    bounds = [r.bound == "compute-bound" for r in seq]
    assert bounds == sorted(bounds)
    assert seq[0].attainable < seq[-1].attainable <= 35e12


def test_roofline_rejects_bad_dims():
    with pytest.raises(ValueError):
        roofline_classify(0, 1, 1, 4, DEVICES["a100"])
    with pytest.raises(ValueError):
        DeviceSpec("bad", {"fp32": 1.0}, 0)


def test_error_report_examples():
    I = np.eye(2)
    r = error_report(I, I)
    assert r.rel_frobenius == 0 and r.max_abs == 0
    A = I.copy()
    A[0, 0] += 0.1
    r = error_report(I, A)
    assert r.rel_frobenius == pytest.approx(0.1 / math.sqrt(2))
    assert r.max_abs == pytest.approx(0.1)
    assert error_report(np.zeros(2), np.ones(2)).rel_frobenius == math.inf
    assert error_report(np.zeros(2), np.zeros(2)).rel_frobenius == 0
    with pytest.raises(ShapeError):
        error_report(np.zeros(2), np.zeros(3))


def test_arch_validation(tmp_path):
    with pytest.raises(FormatError):
        ModelArchSpec.from_dict({"layers": [{"name": "x", "in_features": 0, "out_features": 1,
                                             "class": "attn"}]})
    with pytest.raises(FormatError):
        ModelArchSpec.from_dict({"layers": [{"name": "x", "in_features": 1, "out_features": 1,
                                             "class": "conv"}]})
    with pytest.raises(FormatError):
        ModelArchSpec.from_dict({"layers": [], "policy": {"fc": {"precision": "int2"}}})
    with pytest.raises(FormatError):
        load_arch(tmp_path / "missing.json")
    p = tmp_path / "a.json"
    p.write_text(json.dumps(load_arch("opt-66b").to_dict()))
    assert flop_breakdown(load_arch(p)).fractions == flop_breakdown(load_arch("opt-66b")).fractions
