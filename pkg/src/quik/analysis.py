"""Analytic accounting: FLOP split by precision, weight memory, roofline, error metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

LAYER_CLASSES = ("attn", "mlp-up", "mlp-gate", "mlp-down", "fc", "head")
PRECISIONS = ("int4", "int8", "fp16")
_BITS = {"int4": 4, "int8": 8, "fp16": 16}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_features: int
    out_features: int
    count: int
    cls: str

    @property
    def macs(self):
        return self.in_features * self.out_features * self.count


@dataclass(frozen=True)
class ClassPolicy:
    precision: str = "int4"
    outliers: int = 256


@dataclass(frozen=True)
class ModelArchSpec:
    name: str
    layers: tuple
    policy: dict
    source: str = ""

    def __post_init__(self):
        for l in self.layers:
            if min(l.in_features, l.out_features, l.count) <= 0:
                raise ValueError(f"layer {l.name}: dimensions and count must be positive")
            if l.cls not in LAYER_CLASSES:
                raise ValueError(f"layer {l.name}: unknown class {l.cls!r}")
        for cls, p in self.policy.items():
            if cls not in LAYER_CLASSES:
                raise ValueError(f"policy references unknown class {cls!r}")
            if p.precision not in PRECISIONS or p.outliers < 0:
                raise ValueError(f"invalid policy for {cls}: {p}")

    def policy_for(self, cls):
        return self.policy.get(cls, ClassPolicy())

    def with_outliers(self, outliers):
        """Copy with outlier counts replaced: an int for every quantized class, or a dict per class."""
        new = {}
        for cls in {l.cls for l in self.layers} | set(self.policy):
            p = self.policy_for(cls)
            k = outliers.get(cls, p.outliers) if isinstance(outliers, dict) else outliers
            new[cls] = ClassPolicy(p.precision, 0 if p.precision == "fp16" else int(k))
        return ModelArchSpec(self.name, self.layers, new, self.source)

    def with_precision(self, precision, classes=None):
        """Copy with base precision replaced for ``classes`` (default: every non-FP class)."""
        new = dict(self.policy)
        for cls in {l.cls for l in self.layers} | set(self.policy):
            p = self.policy_for(cls)
            if (classes is None and p.precision != "fp16") or (classes and cls in classes):
                new[cls] = ClassPolicy(precision, p.outliers)
        return ModelArchSpec(self.name, self.layers, new, self.source)

    @classmethod
    def from_dict(cls, d):
        try:
            layers = tuple(
                LayerSpec(l["name"], int(l["in_features"]), int(l["out_features"]),
                          int(l.get("count", 1)), l["class"])
                for l in d["layers"]
            )
            policy = {
                k: ClassPolicy(v.get("precision", "int4"), int(v.get("outliers", 0)))
                for k, v in d.get("policy", {}).items()
            }
            return cls(d.get("name", ""), layers, policy, d.get("source", ""))
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"malformed architecture spec: missing/invalid {exc}") from None
        except ValueError as exc:
            raise FormatError(f"invalid architecture spec: {exc}") from None

    def to_dict(self):
        return {
            "name": self.name,
            "source": self.source,
            "layers": [
                {"name": l.name, "in_features": l.in_features, "out_features": l.out_features,
                 "count": l.count, "class": l.cls}
                for l in self.layers
            ],
            "policy": {k: {"precision": p.precision, "outliers": p.outliers}
                       for k, p in self.policy.items()},
        }


def bundled_archs():
    return sorted(p.name[:-5] for p in resources.files("quik").joinpath("archs").iterdir()
                  if p.name.endswith(".json"))


def load_arch(spec) -> ModelArchSpec:
    """Load an arch spec from a JSON file path or a bundled name (``llama2-70b``, ``opt-66b``)."""
    path = Path(spec)
    if not path.exists():
        name = str(spec).removesuffix(".json")
        res = resources.files("quik").joinpath("archs", f"{name}.json")
        if not res.is_file():
            raise FormatError(f"no arch spec file {spec!r}; bundled: {bundled_archs()}")
        text = res.read_text()
    else:
        text = path.read_text()
    try:
        return ModelArchSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{spec}: invalid JSON ({exc})") from None


def _split(layer, policy):
    """(precision, macs) parts of one layer; outlier columns run in fp16."""
    p = policy.policy_for(layer.cls)
    if p.precision == "fp16":
        return [("fp16", layer.macs)]
    k = min(p.outliers, layer.in_features)
    fp = k * layer.out_features * layer.count
    return [(p.precision, layer.macs - fp), ("fp16", fp)]


@dataclass(frozen=True)
class FlopBreakdown:
    fractions: dict  # precision -> Fraction
    macs: dict  # precision -> int
    per_layer: list

    def as_floats(self):
        return {k: float(v) for k, v in self.fractions.items()}


def flop_breakdown(arch: ModelArchSpec) -> FlopBreakdown:
    """Share of multiply-accumulates executed at each precision, exact."""
    macs = dict.fromkeys(PRECISIONS, 0)
    per_layer = []
    for layer in arch.layers:
        parts = _split(layer, arch)
        for prec, m in parts:
            macs[prec] += m
        per_layer.append({"name": layer.name, "class": layer.cls, **{p: m for p, m in parts}})
    total = sum(macs.values())
    fractions = {p: Fraction(m, total) for p, m in macs.items()}
    return FlopBreakdown(fractions, macs, per_layer)


@dataclass(frozen=True)
class MemoryEstimate:
    base_bytes: int
    outlier_bytes: int
    meta_bytes: int
    fp_layer_bytes: int

    @property
    def total_bytes(self):
        return self.base_bytes + self.outlier_bytes + self.meta_bytes + self.fp_layer_bytes

    def as_dict(self):
        return {"base_bytes": self.base_bytes, "outlier_bytes": self.outlier_bytes,
                "meta_bytes": self.meta_bytes, "fp_layer_bytes": self.fp_layer_bytes,
                "total_bytes": self.total_bytes}


FP16_BYTES = 2


def memory_estimate(arch: ModelArchSpec, bits=None, outliers=None) -> MemoryEstimate:
    """Weight storage in bytes with FP quantities counted at FP16 width.

    Base weights are packed per row to whole bytes. Each quantized row also
    carries one scale and one wReduced value. ``bits`` overrides the base
    precision of every quantized layer; ``outliers`` overrides outlier
    counts (int, or dict per class).
    """
    if bits is not None and bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    if outliers is not None:
        arch = arch.with_outliers(outliers)
    base = outl = meta = fp = 0
    for layer in arch.layers:
        p = arch.policy_for(layer.cls)
        if p.precision == "fp16":
            fp += layer.macs * FP16_BYTES
            continue
        b = bits if bits is not None else _BITS[p.precision]
        k = min(p.outliers, layer.in_features)
        rows = layer.out_features * layer.count
        base += rows * math.ceil((layer.in_features - k) * b / 8)
        outl += rows * k * FP16_BYTES
        meta += rows * 2 * FP16_BYTES
    return MemoryEstimate(base, outl, meta, fp)


@dataclass(frozen=True)
class DeviceSpec:
    """Peak throughput (ops/s) per precision and memory bandwidth (bytes/s)."""

    name: str
    peak: dict
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0 or any(v <= 0 for v in self.peak.values()):
            raise ValueError("device peaks and bandwidth must be positive")

    def balance(self, precision="fp32"):
        return self.peak[precision] / self.bandwidth


# vendor datasheet figures (dense, no sparsity)
DEVICES = {
    "rtx3090": DeviceSpec("rtx3090", {"fp32": 35.6e12, "fp16": 71e12, "int8": 284e12,
                                      "int4": 568e12}, 936e9),
    "a100": DeviceSpec("a100", {"fp32": 19.5e12, "fp16": 312e12, "int8": 624e12,
                                "int4": 1248e12}, 1555e9),
}
_PRECISION_OF_BYTES = {4: "fp32", 2: "fp16", 1: "int8", 0.5: "int4"}


@dataclass(frozen=True)
class RooflineResult:
    m: int
    n: int
    k: int
    flops: int
    bytes_moved: float
    intensity: float
    machine_balance: float
    bound: str
    peak: float

    @property
    def attainable(self):
        """Roofline-attainable throughput in ops/s."""
        return min(self.peak, self.intensity * self.peak / self.machine_balance)


def roofline_classify(m_tokens, n, k, bytes_per_element, device: DeviceSpec, precision=None):
    """Memory- or compute-bound for an (m x k) @ (k x n) matmul.

    A and B are read once and C written once; no cache modelling.
    """
    if min(m_tokens, n, k) <= 0 or bytes_per_element <= 0:
        raise ValueError("dimensions and element size must be positive")
    if precision is None:
        precision = _PRECISION_OF_BYTES.get(bytes_per_element, "fp32")
    flops = 2 * m_tokens * n * k
    moved = bytes_per_element * (m_tokens * k + k * n + m_tokens * n)
    ai = flops / moved
    balance = device.balance(precision)
    return RooflineResult(m_tokens, n, k, flops, moved, ai, balance,
                          "compute-bound" if ai >= balance else "memory-bound",
                          device.peak[precision])


@dataclass(frozen=True)
class ErrorReport:
    rel_frobenius: float
    max_abs: float
    per_layer: dict = field(default_factory=dict)

    def as_dict(self):
        return {"rel_frobenius": self.rel_frobenius, "max_abs": self.max_abs,
                "per_layer": {k: v.as_dict() for k, v in self.per_layer.items()}}


def error_report(reference, actual, per_layer=None) -> ErrorReport:
    """``||A - R||_F / ||R||_F`` (0 if both vanish, inf if only R does) and max |A - R|."""
    R = np.asarray(reference, dtype=np.float64)
    A = np.asarray(actual, dtype=np.float64)
    if R.shape != A.shape:
        raise ShapeError(f"reference shape {R.shape} != actual shape {A.shape}")
    diff = np.linalg.norm(A - R)
    ref = np.linalg.norm(R)
    if ref == 0:
        rel = 0.0 if diff == 0 else math.inf
    else:
        rel = float(diff / ref)
    max_abs = float(np.abs(A - R).max()) if R.size else 0.0
    return ErrorReport(rel, max_abs, dict(per_layer or {}))
