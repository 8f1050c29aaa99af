"""Calibration statistics, outlier selection and layer precision rules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class CalibStats:
    """Streaming per-feature statistics over calibration tokens.

    ``m2`` is the sum of squared deviations from the running mean, which
    merges exactly under Chan's parallel rule. ``max_token_range`` is the
    largest per-token (max - min) seen, used for the activation-scale rule.
    """

    feature_count: int
    token_count: int = 0
    max_abs: np.ndarray = None
    mean: np.ndarray = None
    m2: np.ndarray = None
    max_token_range: float = 0.0

    def __post_init__(self):
        n = self.feature_count
        for name in ("max_abs", "mean", "m2"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.zeros(n))
            elif getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")

    @classmethod
    def empty(cls, feature_count):
        return cls(feature_count)

    @property
    def variance(self):
        """Population variance per feature."""
        if self.token_count == 0:
            return np.zeros(self.feature_count)
        return np.maximum(self.m2 / self.token_count, 0.0)

    def activation_scale_max(self, bits=4):
        """Largest per-token asymmetric activation scale seen in calibration."""
        return self.max_token_range / (2**bits - 1)

    def merge(self, other: "CalibStats") -> "CalibStats":
        if other.feature_count != self.feature_count:
            raise ShapeError(
                f"cannot merge stats over {self.feature_count} and {other.feature_count} features"
            )
        if other.token_count == 0:
            return self
        if self.token_count == 0:
            return other
        na, nb = self.token_count, other.token_count
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * (nb / n)
        m2 = self.m2 + other.m2 + delta**2 * (na * nb / n)
        return CalibStats(
            self.feature_count,
            n,
            np.maximum(self.max_abs, other.max_abs),
            mean,
            m2,
            max(self.max_token_range, other.max_token_range),
        )


def batch_stats(batch) -> CalibStats:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"calibration batch must be 2-D, got shape {x.shape}")
    t, n = x.shape
    if t == 0:
        return CalibStats.empty(n)
    mean = x.mean(axis=0)
    return CalibStats(
        n,
        t,
        np.abs(x).max(axis=0),
        mean,
        ((x - mean) ** 2).sum(axis=0),
        float((x.max(axis=1) - x.min(axis=1)).max()) if n else 0.0,
    )


def accumulate_stats(stats: CalibStats | None, batch) -> CalibStats:
    """Fold one ``(tokens, features)`` batch into ``stats`` (``None`` starts fresh)."""
    b = batch_stats(batch)
    if stats is None:
        return b
    if b.feature_count != stats.feature_count:
        raise ShapeError(f"batch has {b.feature_count} columns, stats track {stats.feature_count}")
    return stats.merge(b)


@dataclass(frozen=True)
class OutlierSet:
    """Outlier column indices over ``feature_count`` input features.

    The induced permutation lists non-outlier columns first and outlier
    columns last, both in ascending index order.
    """

    indices: np.ndarray
    feature_count: int
    permutation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.feature_count):
            raise ValueError(f"outlier index out of range [0, {self.feature_count})")
        if np.unique(idx).size != idx.size:
            raise ValueError("outlier indices must be unique")
        idx = np.sort(idx)
        mask = np.zeros(self.feature_count, dtype=bool)
        mask[idx] = True
        perm = np.concatenate([np.flatnonzero(~mask), idx]).astype(np.int64)
        idx.setflags(write=False)
        perm.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "permutation", perm)

    @classmethod
    def none(cls, feature_count):
        return cls(np.zeros(0, dtype=np.int64), feature_count)

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, OutlierSet):
            return NotImplemented
        return self.feature_count == other.feature_count and np.array_equal(self.indices, other.indices)

    @property
    def base_count(self):
        return self.feature_count - len(self)

    @property
    def base_indices(self):
        return self.permutation[: self.base_count]

    @property
    def inverse_permutation(self):
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.feature_count)
        return inv


def select_outliers(stats, k: int) -> OutlierSet:
    """The ``k`` features with the largest max-abs; ties go to the lower index.

    ``stats`` is a CalibStats or a plain per-feature max-abs vector.
    """
    max_abs = stats.max_abs if isinstance(stats, CalibStats) else np.asarray(stats, dtype=np.float64)
    n = max_abs.size
    if not 0 <= k <= n:
        raise ValueError(f"outlier count {k} out of range [0, {n}]")
    order = np.argsort(-max_abs, kind="stable")
    return OutlierSet(order[:k], n)


def outlier_count_for_fraction(feature_count, fraction, multiple=16):
    """ceil(fraction * features), rounded up to ``multiple``, capped at the feature count."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"outlier fraction {fraction} outside [0, 1]")
    k = math.ceil(fraction * feature_count)
    k = -(-k // multiple) * multiple
    return min(k, feature_count)


def zero_outlier_rule(scale_maxima, threshold, default_k):
    """Per-layer outlier counts: 0 where the activation-scale max is below ``threshold``.

    ``default_k`` is a single count or one count per layer.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    maxima = list(scale_maxima)
    if np.ndim(default_k) == 0:
        defaults = [int(default_k)] * len(maxima)
    else:
        defaults = [int(k) for k in default_k]
        if len(defaults) != len(maxima):
            raise ShapeError("default_k length does not match the layer count")
    return [0 if m < threshold else k for m, k in zip(maxima, defaults)]


@dataclass(frozen=True)
class SensitivityReport:
    names: list
    variances: list
    precisions: list  # 4 or 8 per layer
    threshold: float

    def as_dict(self):
        return {
            "threshold": self.threshold,
            "layers": [
                {"name": n, "mean_variance": v, "bits": b}
                for n, v, b in zip(self.names, self.variances, self.precisions)
            ],
        }


DEFAULT_VARIANCE_THRESHOLD = 10.0


def sensitivity_report(per_layer_stats, variance_threshold=DEFAULT_VARIANCE_THRESHOLD, names=None):
    """Recommend 8-bit for layers whose mean input-feature variance exceeds the threshold."""
    stats = list(per_layer_stats)
    if not stats:
        raise ValueError("sensitivity_report needs at least one layer")
    if names is None:
        names = [f"layer{i}" for i in range(len(stats))]
    variances = [float(s.variance.mean()) if s.feature_count else 0.0 for s in stats]
    precisions = [8 if v > variance_threshold else 4 for v in variances]
    return SensitivityReport(list(names), variances, precisions, float(variance_threshold))


def permute_columns(m, o: OutlierSet, inverse=False):
    """Output column i is input column ``perm[i]``; ``inverse`` applies perm^-1."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != o.feature_count:
        raise ShapeError(f"matrix with shape {m.shape} does not match {o.feature_count} features")
    perm = o.inverse_permutation if inverse else o.permutation
    return np.ascontiguousarray(m[:, perm])


def stats_to_tensors(stats: CalibStats, prefix=""):
    tensors = {
        f"{prefix}max_abs": stats.max_abs.astype(np.float32),
        f"{prefix}mean": stats.mean.astype(np.float32),
        f"{prefix}variance": stats.variance.astype(np.float32),
    }
    meta = {"token_count": stats.token_count, "feature_count": stats.feature_count,
            "max_token_range": stats.max_token_range}
    return tensors, meta


def stats_from_tensors(tensors, meta, prefix=""):
    n = int(meta["feature_count"])
    count = int(meta["token_count"])
    var = tensors[f"{prefix}variance"].astype(np.float64)
    return CalibStats(
        n,
        count,
        tensors[f"{prefix}max_abs"].astype(np.float64),
        tensors[f"{prefix}mean"].astype(np.float64),
        var * count,
        float(meta.get("max_token_range", 0.0)),
    )
