"""Forward pass of QUIK linear layers and small block graphs.

A layer's input is split column-wise into a base part, quantized per token
asymmetrically and multiplied in integer arithmetic, and a handful of
outlier columns multiplied in floating point. The int32 result is turned
back into floats by the epilogue::

    out[t, r] = acc[t, r] * scaleAct[t] * scaleW[r]
                + (zeroAct[t] + halfRange * scaleAct[t]) * wReduced[r]

Three execution variants produce bit-identical outputs:

* ``v1``: split, quantize, int matmul, dequantize, add FP result.
* ``v2``: split and quantize fused into one pass per token.
* ``v3``: as v2, with the FP result and bias added inside the epilogue.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .calibration import OutlierSet, accumulate_stats, select_outliers, zero_outlier_rule
from .container import read_container, write_container
from .errors import FormatError, GraphError, ShapeError
from .packed import PackedIntMatrix, int_matmul, pack_int4, pack_int8
from .quantizer import (
    DEFAULT_DAMPING,
    QuantizedWeights,
    SparsityMask,
    build_hessian,
    compute_wreduced,
    gptq_quantize,
    rtn_quantize,
    sparsegpt_joint,
)

MODES = ("quik", "weight-only", "reference")
VARIANTS = ("v1", "v2", "v3")


def half_range(bits):
    return 2 ** (bits - 1)


@dataclass(frozen=True, eq=False)
class ActQuantResult:
    """Per-token quantized activations; ``zero`` is the token minimum."""

    packed: PackedIntMatrix
    scale: np.ndarray
    zero: np.ndarray

    @property
    def bits(self):
        return self.packed.bits

    @property
    def half_range(self):
        return half_range(self.bits)

    def dequantize(self):
        """float64 activations ``(q + halfRange) * scale + zero``."""
        q = self.packed.to_ints().astype(np.float64)
        return (q + self.half_range) * self.scale.astype(np.float64)[:, None] + self.zero.astype(
            np.float64
        )[:, None]

    def same_as(self, other):
        return (
            self.packed == other.packed
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.zero, other.zero)
        )


def _as_fp32(x):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D activation matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("activations contain non-finite values")
    return np.ascontiguousarray(x, dtype=np.float32)


def _check_bits(bits):
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")


def split_activations(x, o: OutlierSet):
    """``(x_base, x_outlier)``: base columns in permuted order, outliers ascending."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != o.feature_count:
        raise ShapeError(f"activations {x.shape} do not match {o.feature_count} features")
    return np.ascontiguousarray(x[:, o.base_indices]), np.ascontiguousarray(x[:, o.indices])


def quantize_activations(x_base, bits) -> ActQuantResult:
    """Unfused per-token asymmetric quantization of the base activations."""
    _check_bits(bits)
    x = _as_fp32(x_base)
    codes, scale, zero = _backend.get().quantize_rows(x, bits)
    packed = pack_int4(codes) if bits == 4 else pack_int8(codes)
    return ActQuantResult(packed, scale, zero)


def quantize_activations_fused(x, o: OutlierSet, bits):
    """Split and quantize in one pass per token. Returns ``(ActQuantResult, x_outlier)``."""
    _check_bits(bits)
    x = _as_fp32(x)
    if x.shape[1] != o.feature_count:
        raise ShapeError(f"activations {x.shape} do not match {o.feature_count} features")
    stored, scale, zero, x_out = _backend.get().quantize_split(x, o.base_indices, o.indices, bits)
    packed = PackedIntMatrix(x.shape[0], o.base_count, bits, stored)
    return ActQuantResult(packed, scale, zero), x_out


def dequantize_epilogue(acc, a: ActQuantResult, scales, wreduced, addend=None, bias=None):
    """Float32 output from int32 accumulators, with optional fused add of ``addend`` and ``bias``."""
    acc = np.asarray(acc)
    t, n = acc.shape
    if a.scale.shape != (t,) or np.shape(scales) != (n,) or np.shape(wreduced) != (n,):
        raise ShapeError(
            f"accumulator {acc.shape} does not match {a.scale.shape[0]} tokens / "
            f"{np.shape(scales)[0]} output rows"
        )
    if addend is not None and np.shape(addend) != (t, n):
        raise ShapeError(f"addend shape {np.shape(addend)} != {(t, n)}")
    if bias is not None and np.shape(bias) != (n,):
        raise ShapeError(f"bias shape {np.shape(bias)} != {(n,)}")
    return _backend.get().epilogue(
        acc, a.scale, a.zero, np.asarray(scales, dtype=np.float32),
        np.asarray(wreduced, dtype=np.float32), float(a.half_range), addend, bias,
    )


@dataclass(frozen=True, eq=False)
class QuikLinearLayer:
    """``y = x W^T + b`` with W stored as quantized base + FP outlier columns."""

    weights: QuantizedWeights
    bias: np.ndarray | None = None
    mode: str = "quik"
    reference_weight: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        w = self.weights
        if w.outlier_weights.shape != (w.out_features, len(w.outliers)):
            raise ShapeError("outlier weight columns do not match the outlier set")
        if self.bias is not None:
            object.__setattr__(self, "bias", np.ascontiguousarray(self.bias, dtype=np.float32))
            if self.bias.shape != (w.out_features,):
                raise ShapeError(f"bias length {self.bias.shape} != {w.out_features}")
        if self.reference_weight is not None and np.shape(self.reference_weight) != (
            w.out_features, w.in_features
        ):
            raise ShapeError("reference weight shape does not match the layer")

    @property
    def in_features(self):
        return self.weights.in_features

    @property
    def out_features(self):
        return self.weights.out_features

    @property
    def bits(self):
        return self.weights.bits

    @property
    def outliers(self):
        return self.weights.outliers

    def with_mode(self, mode):
        return dataclasses.replace(self, mode=mode)

    def __call__(self, x, variant="v3"):
        return quik_matmul(self, x, variant=variant)

    def save(self, path):
        w = self.weights
        tensors = {
            "base": w.base,
            "scales": w.scales,
            "wreduced": w.wreduced,
            "outlier_weights": w.outlier_weights,
        }
        if self.bias is not None:
            tensors["bias"] = self.bias
        if w.clip_factors is not None:
            tensors["clip_factors"] = w.clip_factors.astype(np.float32)
        if w.sparsity is not None:
            tensors["sparsity_mask"] = w.sparsity.mask.astype(np.int8)
        if self.reference_weight is not None:
            tensors["reference_weight"] = np.asarray(self.reference_weight, dtype=np.float32)
        meta = {
            "kind": "quik-linear",
            "name": self.name,
            "bits": w.bits,
            "in_features": w.in_features,
            "out_features": w.out_features,
            "mode": self.mode,
            "sparsity": "2:4" if w.sparsity is not None else "none",
            "outlier_indices": [int(i) for i in w.outliers.indices],
            "permutation": [int(i) for i in w.outliers.permutation],
        }
        return write_container(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = read_container(path)
        if meta.get("kind") != "quik-linear":
            raise FormatError(f"{path}: not a quik-linear layer bundle")
        try:
            bits = int(meta["bits"])
            n_in, n_out = int(meta["in_features"]), int(meta["out_features"])
            outliers = OutlierSet(np.asarray(meta["outlier_indices"], dtype=np.int64), n_in)
            base = tensors["base"]
            scales, wred, w_out = tensors["scales"], tensors["wreduced"], tensors["outlier_weights"]
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: incomplete layer bundle ({exc})") from None
        if list(outliers.permutation) != list(meta.get("permutation", outliers.permutation)):
            raise FormatError(f"{path}: stored permutation disagrees with outlier indices")
        if bits == 8 and isinstance(base, np.ndarray):
            base = PackedIntMatrix(base.shape[0], base.shape[1], 8, base)
        if not isinstance(base, PackedIntMatrix) or base.bits != bits:
            raise FormatError(f"{path}: base tensor does not hold {bits}-bit weights")
        if base.shape != (n_out, outliers.base_count):
            raise FormatError(f"{path}: base shape {base.shape} inconsistent with metadata")
        if scales.shape != (n_out,) or wred.shape != (n_out,):
            raise FormatError(f"{path}: scales/wreduced must have {n_out} entries")
        if not np.array_equal(compute_wreduced(base.to_ints(), scales), wred):
            raise FormatError(f"{path}: wreduced does not match base weights and scales")
        mask = tensors.get("sparsity_mask")
        clip = tensors.get("clip_factors")
        weights = QuantizedWeights(
            base=base, scales=scales, outlier_weights=w_out, wreduced=wred, outliers=outliers,
            bits=bits, clip_factors=None if clip is None else clip.astype(np.float64),
            sparsity=None if mask is None else SparsityMask(mask.astype(bool)),
        )
        try:
            return cls(weights, tensors.get("bias"), meta.get("mode", "quik"),
                       tensors.get("reference_weight"), meta.get("name", ""))
        except (ShapeError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from None


def _reference(layer, x):
    W = layer.reference_weight
    if W is None:
        W = layer.weights.dense_weight()
    out = np.asarray(x, dtype=np.float64) @ np.asarray(W, dtype=np.float64).T
    if layer.bias is not None:
        out = out + layer.bias.astype(np.float64)
    return out


def _weight_only(layer, x):
    w = layer.weights
    xb, xo = split_activations(_as_fp32(x), w.outliers)
    out = xb @ w.dequantized_base().astype(np.float32).T + xo @ w.outlier_weights.T
    if layer.bias is not None:
        out = out + layer.bias
    return out.astype(np.float32, copy=False)


def quik_matmul(layer: QuikLinearLayer, x, variant="v3"):
    """Apply ``layer`` to ``x`` (tokens x in_features)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"input {x.shape} does not match {layer.in_features} input features")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if layer.mode == "reference":
        return _reference(layer, x)
    if layer.mode == "weight-only":
        return _weight_only(layer, x)

    w = layer.weights
    if variant == "v1":
        xb, xo = split_activations(_as_fp32(x), w.outliers)
        a = quantize_activations(xb, w.bits)
    else:
        a, xo = quantize_activations_fused(x, w.outliers, w.bits)
    acc = int_matmul(a.packed, w.base)
    fp = xo @ w.outlier_weights.T
    if variant == "v3":
        return dequantize_epilogue(acc, a, w.scales, w.wreduced, addend=fp, bias=layer.bias)
    out = dequantize_epilogue(acc, a, w.scales, w.wreduced) + fp
    if layer.bias is not None:
        out = out + layer.bias
    return out


def quantize_linear(W, b=None, calib=None, bits=4, n_outliers=256, method="gptq",
                    use_clipping=False, threshold=None, damping=DEFAULT_DAMPING, name="",
                    keep_reference=True):
    """Calibrate and quantize one linear layer.

    ``calib`` is a ``(tokens, in_features)`` array or a list of them. Outliers
    are the ``n_outliers`` input features with largest max-abs; with
    ``threshold`` set, a layer whose activation-scale max is below it gets
    none. ``method`` is ``"gptq"``, ``"rtn"`` or ``"sparsegpt"`` (2:4).
    """
    W = np.asarray(W, dtype=np.float32)
    n_in = W.shape[1]
    batches = [calib] if isinstance(calib, np.ndarray) else list(calib or [])
    if not batches and method != "rtn":
        raise ValueError(f"method {method!r} needs calibration inputs")
    stats = None
    for batch in batches:
        stats = accumulate_stats(stats, batch)
    k = min(n_outliers, n_in)
    if stats is not None and threshold is not None:
        k = zero_outlier_rule([stats.activation_scale_max(bits)], threshold, k)[0]
    outliers = select_outliers(stats, k) if stats is not None else OutlierSet(np.arange(k), n_in)
    if method == "rtn":
        qw = rtn_quantize(W, outliers, bits, use_clipping)
    else:
        H = build_hessian(batches, damping)
        fn = {"gptq": gptq_quantize, "sparsegpt": sparsegpt_joint}.get(method)
        if fn is None:
            raise ValueError(f"unknown method {method!r}")
        qw = fn(W, H, outliers, bits, use_clipping)
    return QuikLinearLayer(qw, b, "quik", W if keep_reference else None, name)


# ---------------------------------------------------------------------------
# precision policy and block graphs


@dataclass(frozen=True)
class LayerPrecisionPolicy:
    """Base precision (4, 8 or "fp") and outlier count per layer class."""

    bits: dict = field(default_factory=lambda: {"mlp-down": 8})
    outliers: dict = field(default_factory=dict)
    default_bits: int = 4
    default_outliers: int = 256

    def bits_for(self, cls):
        return self.bits.get(cls, self.default_bits)

    def outliers_for(self, cls):
        return self.outliers.get(cls, self.default_outliers)

    @classmethod
    def quik_default(cls, outliers=256, down_outliers=None, down_bits=8):
        """8-bit down-projection; down-proj outliers default to 3.5x the others."""
        if down_outliers is None:
            down_outliers = int(outliers * 3.5)
        return cls({"mlp-down": down_bits}, {"mlp-down": down_outliers}, 4, outliers)

    @classmethod
    def from_sensitivity(cls, report, classes, outliers=256):
        """8-bit for every class with a layer flagged by ``report``."""
        bits = {}
        for c, b in zip(classes, report.precisions):
            bits[c] = max(bits.get(c, 4), b)
        return cls(bits, {}, 4, outliers)


OPS = {"linear": 1, "silu": 1, "mul": 2, "add": 2}


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple
    layer: QuikLinearLayer | None = None


def silu(x):
    return x / (1 + np.exp(-x))


def validate_graph(nodes, input_name="x"):
    seen = {input_name}
    for n in nodes:
        if n.op not in OPS:
            raise GraphError(f"node {n.name!r}: unsupported op {n.op!r}")
        if len(n.inputs) != OPS[n.op]:
            raise GraphError(f"node {n.name!r}: {n.op} takes {OPS[n.op]} inputs, got {len(n.inputs)}")
        missing = [i for i in n.inputs if i not in seen]
        if missing:
            raise GraphError(f"node {n.name!r}: undefined inputs {missing}")
        if n.op == "linear" and n.layer is None:
            raise GraphError(f"node {n.name!r}: linear node without a layer")
        if n.name in seen:
            raise GraphError(f"duplicate node name {n.name!r}")
        seen.add(n.name)
    if not nodes:
        raise GraphError("empty graph")


def forward_model(nodes, x, mode=None, variant="v3", input_name="x", capture=None):
    """Evaluate a node list in order; returns the last node's value.

    ``mode`` overrides every layer's mode. ``capture``, if a dict, receives
    each linear node's input keyed by node name.
    """
    validate_graph(nodes, input_name)
    env = {input_name: np.asarray(x, dtype=np.float64 if mode == "reference" else np.float32)}
    for n in nodes:
        args = [env[i] for i in n.inputs]
        if n.op == "linear":
            layer = n.layer if mode is None else n.layer.with_mode(mode)
            if capture is not None:
                capture[n.name] = args[0]
            val = quik_matmul(layer, args[0], variant)
        elif n.op == "silu":
            val = silu(args[0])
        elif n.op == "mul":
            val = args[0] * args[1]
        else:
            val = args[0] + args[1]
        env[n.name] = val
    return env[nodes[-1].name]


def mlp_block(up, gate, down):
    """up/gate projections, SiLU on gate, Hadamard product, down projection."""
    return [
        Node("up", "linear", ("x",), up),
        Node("gate", "linear", ("x",), gate),
        Node("act", "silu", ("gate",)),
        Node("h", "mul", ("act", "up")),
        Node("down", "linear", ("h",), down),
    ]


def quantize_mlp_block(w_up, w_gate, w_down, calib, policy: LayerPrecisionPolicy, method="gptq",
                       use_clipping=False):
    """Quantize an up/gate/down block; the down layer is calibrated on FP64 block activations."""
    calib = np.asarray(calib, dtype=np.float64)
    h = silu(calib @ np.asarray(w_gate, np.float64).T) * (calib @ np.asarray(w_up, np.float64).T)
    layers = {}
    for name, cls, W, X in (("up", "mlp-up", w_up, calib), ("gate", "mlp-gate", w_gate, calib),
                            ("down", "mlp-down", w_down, h)):
        bits = policy.bits_for(cls)
        layer = quantize_linear(
            W, None, X.astype(np.float32), bits=8 if bits == "fp" else bits,
            n_outliers=policy.outliers_for(cls), method=method, use_clipping=use_clipping, name=name,
        )
        layers[name] = layer.with_mode("reference") if bits == "fp" else layer
    return mlp_block(layers["up"], layers["gate"], layers["down"])


def load_layer(path):
    return QuikLinearLayer.load(Path(path))
