"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import _backend
from .analysis import DEVICES, DeviceSpec, error_report, flop_breakdown, load_arch, memory_estimate, roofline_classify
from .bench import NotBitIdentical, bench, compare_backends, parse_size
from .calibration import (
    DEFAULT_VARIANCE_THRESHOLD,
    accumulate_stats,
    outlier_count_for_fraction,
    sensitivity_report,
    stats_to_tensors,
)
from .container import first_tensor, read_container, write_container
from .errors import FormatError, NumericalError, QuikError
from .quantizer import DEFAULT_DAMPING, proxy_loss
from .runtime import MODES, VARIANTS, QuikLinearLayer, quantize_linear, quik_matmul

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("quik")


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="quik", description="QUIK mixed-precision quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize one linear layer")
    q.add_argument("input", help="container with a 'weight' tensor (and optional 'bias')")
    q.add_argument("-o", "--output", required=True, help="output layer bundle directory")
    q.add_argument("--calib", required=True, help="container of calibration activations")
    q.add_argument("--bits", type=int, choices=(4, 8), default=4)
    q.add_argument("--outliers", type=int, default=256, help="outlier feature count")
    q.add_argument("--outlier-pct", type=float, help="outliers as a percentage of input features")
    q.add_argument("--threshold", type=float, help="zero outliers if activation-scale max < T")
    q.add_argument("--clip-search", action="store_true", help="linear search over clip factors")
    q.add_argument("--sparsity", choices=("none", "2:4"), default="none")
    q.add_argument("--method", choices=("gptq", "rtn"), default="gptq")
    q.add_argument("--damping", type=float, default=DEFAULT_DAMPING)
    q.add_argument("--json", action="store_true")

    r = sub.add_parser("run", help="run a quantized layer and report error vs FP reference")
    r.add_argument("layer", help="layer bundle directory")
    r.add_argument("--input", required=True, help="activation container (DIR or DIR:NAME)")
    r.add_argument("--mode", choices=MODES, default="quik")
    r.add_argument("--variant", choices=VARIANTS, default="v3")
    r.add_argument("--output", help="write the output tensor to this container directory")
    r.add_argument("--json", action="store_true")

    c = sub.add_parser("calibrate", help="collect activation statistics")
    c.add_argument("acts", help="container of activations; 'layer/batch' names group batches")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--bits", type=int, choices=(4, 8), default=4)
    c.add_argument("--variance-threshold", type=float, default=DEFAULT_VARIANCE_THRESHOLD)
    c.add_argument("--json", action="store_true")

    a = sub.add_parser("analyze", help="FLOP / memory / roofline accounting")
    a.add_argument("what", choices=("flops", "memory", "roofline"))
    a.add_argument("--arch", help="arch spec JSON file or bundled name")
    a.add_argument("--outliers", type=int, help="override outlier count for quantized classes")
    a.add_argument("--down-outliers", type=int, help="override the mlp-down outlier count")
    a.add_argument("--bits", type=int, choices=(4, 8), help="override base precision (memory)")
    a.add_argument("--device", choices=sorted(DEVICES), default="rtx3090")
    a.add_argument("--peak", type=float, help="peak ops/s (overrides the device preset)")
    a.add_argument("--bandwidth", type=float, help="memory bandwidth in bytes/s")
    a.add_argument("--tokens", type=_int_list, default=[1, 16, 128, 256, 512, 1024])
    a.add_argument("--n", type=int, help="matmul output width (roofline without --arch)")
    a.add_argument("--k", type=int, help="matmul inner width (roofline without --arch)")
    a.add_argument("--bytes", type=float, default=4.0, help="bytes per element (roofline)")
    a.add_argument("--json", action="store_true")

    s = sub.add_parser("synth", help="write a seeded synthetic layer, calibration set and input")
    s.add_argument("-o", "--output", required=True, help="directory to create")
    s.add_argument("--in-features", type=int, default=256)
    s.add_argument("--out-features", type=int, default=128)
    s.add_argument("--tokens", type=int, default=512, help="calibration tokens")
    s.add_argument("--heavy", type=int, default=8, help="input columns scaled up 100x")
    s.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="time the v1/v2/v3 pipeline variants")
    b.add_argument("--sizes", type=_size, nargs="+", default=[(256, 1024, 1024)],
                   help="TOKENSxOUTxIN")
    b.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--bits", type=int, choices=(4, 8), default=4)
    b.add_argument("--outliers", type=int, default=256)
    b.add_argument("--backend", choices=_backend.available())
    b.add_argument("--compare-backends", action="store_true",
                   help="time each kernel on every available backend")
    b.add_argument("--json", action="store_true")
    return p


def _emit(args, payload, lines):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, default=_json_default))
    else:
        print("\n".join(lines))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _calib_batches(path, n_in):
    tensors, _ = read_container(path)
    batches = [t for t in tensors.values() if isinstance(t, np.ndarray) and t.dtype == np.float32]
    if not batches:
        raise FormatError(f"{path}: no f32 activation tensors")
    for t in batches:
        if t.ndim != 2 or t.shape[1] != n_in:
            raise FormatError(f"{path}: calibration tensor shape {t.shape} != (*, {n_in})")
    return batches


def cmd_quantize(args):
    tensors, _ = read_container(args.input)
    if "weight" not in tensors:
        raise FormatError(f"{args.input}: no 'weight' tensor")
    W = tensors["weight"]
    if not isinstance(W, np.ndarray) or W.ndim != 2 or W.dtype != np.float32:
        raise FormatError(f"{args.input}: 'weight' must be a 2-D f32 tensor")
    bias = tensors.get("bias")
    n_in = W.shape[1]
    batches = _calib_batches(args.calib, n_in)
    k = args.outliers
    if args.outlier_pct is not None:
        k = outlier_count_for_fraction(n_in, args.outlier_pct / 100)
    method = "sparsegpt" if args.sparsity == "2:4" else args.method
    if method == "sparsegpt" and args.method == "rtn":
        raise UsageError("--sparsity 2:4 requires --method gptq")
    layer = quantize_linear(W, bias, batches, bits=args.bits, n_outliers=min(k, n_in), method=method,
                            use_clipping=args.clip_search, threshold=args.threshold,
                            damping=args.damping, name=Path(args.input).name)
    layer.save(args.output)
    X = np.concatenate(batches).astype(np.float64)
    H = X.T @ X
    loss = proxy_loss(W, layer.weights.dense_weight(), H)
    info = {"output": str(args.output), "bits": layer.bits, "outliers": len(layer.outliers),
            "method": method, "proxy_loss": loss,
            "in_features": layer.in_features, "out_features": layer.out_features}
    _emit(args, info, [f"wrote {args.output}: {layer.out_features}x{layer.in_features}, "
                       f"{layer.bits}-bit base, {len(layer.outliers)} outliers, {method}, "
                       f"proxy loss {loss:.6g}"])
    return EXIT_OK


def cmd_run(args):
    layer = QuikLinearLayer.load(args.layer)
    x = first_tensor(args.input)
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise FormatError(f"{args.input}: input must be a 2-D f32 tensor")
    out = quik_matmul(layer.with_mode(args.mode), x, args.variant)
    ref = quik_matmul(layer.with_mode("reference"), x)
    rep = error_report(ref, out)
    if args.output:
        write_container(args.output, {"output": np.asarray(out, dtype=np.float32)},
                        {"mode": args.mode, "variant": args.variant})
    rel = "inf" if math.isinf(rep.rel_frobenius) else f"{rep.rel_frobenius:.6e}"
    _emit(args, {"mode": args.mode, "variant": args.variant, **rep.as_dict()},
          [f"mode: {args.mode}", f"rel_frobenius: {rel}", f"max_abs: {rep.max_abs:.6e}"])
    return EXIT_OK


def cmd_calibrate(args):
    tensors, _ = read_container(args.acts)
    groups = {}
    for name, t in tensors.items():
        if not isinstance(t, np.ndarray) or t.dtype != np.float32 or t.ndim != 2:
            raise FormatError(f"{args.acts}: tensor {name} is not a 2-D f32 activation matrix")
        groups.setdefault(name.split("/", 1)[0], []).append(t)
    out_tensors, meta = {}, {"layers": {}}
    stats_list = []
    for layer, batches in groups.items():
        stats = None
        for b in batches:
            stats = accumulate_stats(stats, b)
        stats_list.append(stats)
        t, m = stats_to_tensors(stats, prefix=f"{layer}/")
        out_tensors.update(t)
        meta["layers"][layer] = m
    rep = sensitivity_report(stats_list, args.variance_threshold, names=list(groups))
    meta["sensitivity"] = rep.as_dict()
    write_container(args.output, out_tensors, meta)
    lines = [f"{'layer':<20} {'tokens':>8} {'mean var':>12} {'scale max':>12} bits"]
    for (layer, m), s, v, b in zip(meta["layers"].items(), stats_list, rep.variances, rep.precisions):
        lines.append(f"{layer:<20} {m['token_count']:>8} {v:>12.5g} "
                     f"{s.activation_scale_max(args.bits):>12.5g} {b}")
    _emit(args, meta, lines)
    return EXIT_OK


def _device(args):
    dev = DEVICES[args.device]
    peak = dict(dev.peak)
    if args.peak is not None:
        peak = {k: args.peak for k in peak}
    return DeviceSpec(dev.name if args.peak is None and args.bandwidth is None else "custom",
                      peak, args.bandwidth if args.bandwidth is not None else dev.bandwidth)


def _arch(args):
    if not args.arch:
        raise UsageError("--arch is required")
    arch = load_arch(args.arch)
    overrides = {}
    if args.outliers is not None:
        overrides = {c: args.outliers for c in {l.cls for l in arch.layers} if c != "mlp-down"}
        overrides["mlp-down"] = args.outliers
    if args.down_outliers is not None:
        overrides["mlp-down"] = args.down_outliers
    return arch.with_outliers(overrides) if overrides else arch


def cmd_analyze(args):
    if args.what == "flops":
        arch = _arch(args)
        fb = flop_breakdown(arch)
        fr = fb.as_floats()
        _emit(args, {"arch": arch.name, "fractions": fr, "macs": fb.macs, "per_layer": fb.per_layer},
              [f"INT4: {100 * fr['int4']:.2f}%", f"INT8: {100 * fr['int8']:.2f}%",
               f"FP16: {100 * fr['fp16']:.2f}%"])
    elif args.what == "memory":
        arch = _arch(args)
        m = memory_estimate(arch, bits=args.bits)
        d = m.as_dict()
        _emit(args, {"arch": arch.name, **d},
              [f"{k.removesuffix('_bytes')}: {v / 1e9:.3f} GB" for k, v in d.items()])
    else:
        dev = _device(args)
        shapes = []
        if args.n and args.k:
            shapes.append(("matmul", args.n, args.k))
        elif args.arch:
            shapes = [(l.name, l.out_features, l.in_features) for l in load_arch(args.arch).layers]
        else:
            raise UsageError("roofline needs --arch or both --n and --k")
        results, lines = [], [f"device {dev.name}"]
        for name, n, k in shapes:
            for m in args.tokens:
                r = roofline_classify(m, n, k, args.bytes, dev)
                results.append({"layer": name, "m": m, "n": n, "k": k, "intensity": r.intensity,
                                "machine_balance": r.machine_balance, "bound": r.bound})
                lines.append(f"{name:<10} m={m:<5} n={n:<6} k={k:<6} AI={r.intensity:9.2f} "
                             f"balance={r.machine_balance:7.2f} {r.bound}")
        _emit(args, {"device": dev.name, "results": results}, lines)
    return EXIT_OK


def synthetic_problem(n_in, n_out, tokens, heavy, seed):
    """Weights, bias, calibration and test activations with ``heavy`` outlier columns."""
    rng = np.random.default_rng(seed)
    col_scale = np.ones(n_in)
    col_scale[rng.choice(n_in, min(heavy, n_in), replace=False)] = 100.0
    W = (rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)).astype(np.float32)
    b = (0.1 * rng.standard_normal(n_out)).astype(np.float32)
    calib = (rng.standard_normal((tokens, n_in)) * col_scale).astype(np.float32)
    x = (rng.standard_normal((max(tokens // 8, 1), n_in)) * col_scale).astype(np.float32)
    return W, b, calib, x


def cmd_synth(args):
    if min(args.in_features, args.out_features, args.tokens) < 1 or args.heavy < 0:
        raise UsageError("sizes must be positive")
    W, b, calib, x = synthetic_problem(args.in_features, args.out_features, args.tokens,
                                       args.heavy, args.seed)
    out = Path(args.output)
    write_container(out / "layer", {"weight": W, "bias": b}, {"seed": args.seed})
    write_container(out / "calib", {"acts": calib})
    write_container(out / "input", {"x": x})
    print(f"wrote {out}/layer, {out}/calib, {out}/input")
    return EXIT_OK


def _fmt(t):
    return "fused" if t is None else f"{1e3 * t:9.3f}"


def cmd_bench(args):
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.compare_backends:
        rows = compare_backends(args.sizes, args.repeats, args.bits, args.outliers)
        lines = [f"{'size':<18} {'backend':<8} {'pack ms':>9} {'qsplit ms':>9} {'gemm ms':>9} {'epi ms':>9}"]
        for r in rows:
            lines.append(f"{'x'.join(map(str, r['size'])):<18} {r['backend']:<8} {_fmt(r['pack_int4'])} "
                         f"{_fmt(r['quantize_split'])} {_fmt(r['int_gemm'])} {_fmt(r['epilogue'])}")
        _emit(args, rows, lines)
        return EXIT_OK
    rows = bench(args.sizes, args.variants, args.repeats, args.bits, args.outliers, backend=args.backend)
    stages = ("split", "quantize", "matmul", "fp_matmul", "dequantize")
    lines = [f"backend {rows[0].backend if rows else '-'}, median of {args.repeats} (ms)",
             f"{'size':<18} {'var':<4} " + " ".join(f"{s:>10}" for s in stages) + f" {'total':>10}"]
    for r in rows:
        lines.append(f"{'x'.join(map(str, r.size)):<18} {r.variant:<4} "
                     + " ".join(f"{_fmt(r.stages[s]):>10}" for s in stages) + f" {_fmt(r.total):>10}")
    _emit(args, [r.__dict__ for r in rows], lines)
    return EXIT_OK


COMMANDS = {"quantize": cmd_quantize, "run": cmd_run, "calibrate": cmd_calibrate,
            "analyze": cmd_analyze, "synth": cmd_synth, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, NotBitIdentical) as exc:
        print(f"quik: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UsageError as exc:
        print(f"quik: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QuikError, ValueError, OSError) as exc:
        print(f"quik: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
