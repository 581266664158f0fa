"""Evaluation metrics for long-tail classification.

All values are fractions in [0, 1]; formatting as percent happens at the
edges (CLI, reports).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ClassCounts, head_classes_for, write_csv_atomic, write_text_atomic
from .errors import DataError, DimensionError, InvalidInputError, MissingClassError


def _labels(pred, true):
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise DimensionError("predicted and true labels must be equal-length 1-d arrays")
    if true.size == 0:
        raise DataError("empty evaluation set")
    return pred, true


def per_class_accuracy(pred, true, k=None):
    """Per-class accuracy (nan for classes without samples) and sample counts."""
    pred, true = _labels(pred, true)
    if k is None:
        k = int(max(true.max(), pred.max())) + 1
    n = np.bincount(true, minlength=k)
    hits = np.bincount(true[pred == true], minlength=k)
    acc = np.full(k, np.nan)
    acc[n > 0] = hits[n > 0] / n[n > 0]
    return acc, n


def acc_pc(pred, true, classes=None):
    """Mean of per-class accuracies over the classes present in ``true``.

    With ``classes`` given, every listed class must have samples and the mean
    is taken over exactly those classes.
    """
    acc, n = per_class_accuracy(pred, true)
    if classes is None:
        return float(np.mean(acc[n > 0]))
    classes = np.asarray(classes, dtype=np.int64)
    missing = [int(c) for c in classes if c >= n.size or n[c] == 0]
    if missing:
        raise MissingClassError(f"classes without evaluation samples: {missing[:10]}")
    return float(np.mean(acc[classes]))


def acc_lt(pred, true, p_train):
    """Per-class accuracy weighted by the training class distribution."""
    p = np.asarray(p_train, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError("p_train must be non-negative and sum to 1")
    acc, n = per_class_accuracy(pred, true, k=p.size)
    if acc.size > p.size:
        raise DimensionError("labels exceed the length of p_train")
    missing = np.flatnonzero((p > 0) & (n == 0))
    if missing.size:
        raise MissingClassError(f"classes with training mass but no evaluation samples: {missing[:10].tolist()}")
    used = p > 0
    return float(np.sum(p[used] * acc[used]))


def acc_h(acc_ms, acc_fs):
    """Harmonic mean of many-shot and few-shot accuracy; 0 if either is 0."""
    if acc_ms <= 0 or acc_fs <= 0:
        return 0.0
    return 2.0 * acc_ms * acc_fs / (acc_ms + acc_fs)


def bucket_of(counts, thresholds=(100, 20)):
    """Bucket name per class: many (> hi), medium (lo..hi inclusive), few (< lo)."""
    hi, lo = thresholds
    c = np.asarray(counts.counts if isinstance(counts, ClassCounts) else counts)
    return np.where(c > hi, "many", np.where(c >= lo, "medium", "few"))


def bucketed_acc(pred, true, counts, thresholds=(100, 20)):
    """``{"many": .., "medium": .., "few": ..}``; an empty bucket maps to None."""
    c = counts.counts if isinstance(counts, ClassCounts) else np.asarray(counts)
    acc, n = per_class_accuracy(pred, true, k=c.size)
    if acc.size > c.size:
        raise DimensionError("counts do not cover every evaluated class")
    buckets = bucket_of(c, thresholds)
    out = {}
    for name in ("many", "medium", "few"):
        members = (buckets == name) & (n > 0)
        out[name] = float(np.mean(acc[members])) if np.any(members) else None
    return out


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    mean_confidence: float | None
    accuracy: float | None
    count: int


def reliability(probs, true, num_bins=10):
    """Equal-width confidence bins over [1/k, 1] (right-inclusive) and the ECE.

    Confidence is the max-probability of each row; rows are renormalized
    first so unnormalized fusion scores can be passed directly.
    """
    if num_bins < 1:
        raise InvalidInputError("num_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    true = np.asarray(true, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise DataError("empty evaluation set")
    if true.shape != (probs.shape[0],):
        raise DimensionError("one label per row required")
    probs = probs / probs.sum(axis=1, keepdims=True)
    k = probs.shape[1]
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == true).astype(np.float64)
    lo = 1.0 / k
    edges = np.linspace(lo, 1.0, num_bins + 1)
    width = (1.0 - lo) / num_bins
    idx = np.ceil((conf - lo) / width).astype(np.int64) - 1 if width > 0 else np.zeros(conf.size, dtype=np.int64)
    idx = np.clip(idx, 0, num_bins - 1)
    n = conf.size
    bins, ece = [], 0.0
    for b in range(num_bins):
        m = idx == b
        cnt = int(m.sum())
        if cnt:
            mc, ac = float(conf[m].mean()), float(correct[m].mean())
            ece += cnt / n * abs(mc - ac)
        else:
            mc = ac = None
        bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), mc, ac, cnt))
    return bins, float(ece)


def confusion_matrix(pred, true, counts):
    """k x k confusion counts with rows/columns ordered head to tail.

    Entry (i, j) counts samples of the rank-i class predicted as rank j.
    Returns ``(matrix, order)`` where ``order[i]`` is the class at rank i.
    """
    pred, true = _labels(pred, true)
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(counts)
    k = counts.k
    if max(pred.max(), true.max()) >= k or min(pred.min(), true.min()) < 0:
        raise InvalidInputError("labels outside the class range")
    order = counts.rank_order()
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    mat = np.zeros((k, k), dtype=np.int64)
    np.add.at(mat, (rank[true], rank[pred]), 1)
    return mat, order


def head_skew(matrix):
    """Ratio of off-diagonal mass predicted toward the head (left of the
    diagonal) to mass predicted toward the tail."""
    left = np.tril(matrix, -1).sum()
    right = np.triu(matrix, 1).sum()
    if right == 0:
        return float("inf") if left else 1.0
    return float(left / right)


# -- reports --------------------------------------------------------------------


@dataclass
class MetricsReport:
    acc_pc: float
    acc_lt: float | None
    acc_ms: float | None
    acc_fs: float | None
    acc_h: float | None
    buckets: dict
    ece: float
    reliability_bins: list
    per_class_accuracy: list
    confusion: list = field(repr=False)
    class_order: list = field(repr=False)
    n_samples: int = 0

    def to_dict(self):
        d = asdict(self)
        d["reliability_bins"] = [asdict(b) if not isinstance(b, dict) else b for b in self.reliability_bins]
        return d

    def headline(self):
        return {k: getattr(self, k) for k in ("acc_pc", "acc_lt", "acc_ms", "acc_fs", "acc_h", "ece")}


def evaluate(scores, true, counts, num_bins=10, thresholds=(100, 20), head_classes=None):
    """Full metric suite for a score matrix (rows need not be normalized).

    Many-shot / few-shot accuracy for the harmonic mean uses the head/tail
    levels when ``counts`` has exactly two levels (or ``head_classes`` is
    given) and the many/few buckets otherwise.
    """
    scores = np.asarray(scores, dtype=np.float64)
    true = np.asarray(true, dtype=np.int64)
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(counts)
    k = counts.k
    if scores.ndim != 2 or scores.shape[1] != k:
        raise DimensionError(f"scores must be n x {k}")
    pred = np.argmax(scores, axis=1)
    acc, n = per_class_accuracy(pred, true, k=k)
    present = n > 0

    try:
        lt = acc_lt(pred, true, counts.prior)
    except MissingClassError:
        lt = None

    levels = np.unique(counts.counts[counts.counts > 0])
    if head_classes is None and levels.size == 2:
        head_classes = head_classes_for(counts)
    if head_classes is not None:
        head = np.zeros(k, dtype=bool)
        head[np.asarray(head_classes, dtype=np.int64)] = True
        ms_mask, fs_mask = head & present, ~head & present
    else:
        b = bucket_of(counts, thresholds)
        ms_mask, fs_mask = (b == "many") & present, (b == "few") & present
    ms = float(np.mean(acc[ms_mask])) if np.any(ms_mask) else None
    fs = float(np.mean(acc[fs_mask])) if np.any(fs_mask) else None
    h = acc_h(ms, fs) if ms is not None and fs is not None else None

    bins, ece = reliability(scores, true, num_bins)
    mat, order = confusion_matrix(pred, true, counts)
    return MetricsReport(
        acc_pc=float(np.mean(acc[present])),
        acc_lt=lt,
        acc_ms=ms,
        acc_fs=fs,
        acc_h=h,
        buckets=bucketed_acc(pred, true, counts, thresholds),
        ece=ece,
        reliability_bins=bins,
        per_class_accuracy=[None if np.isnan(a) else float(a) for a in acc],
        confusion=mat.tolist(),
        class_order=order.tolist(),
        n_samples=int(true.size),
    )


def save_report(report, path):
    write_text_atomic(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def save_reliability_csv(bins, path):
    rows = [["bin", "lower", "upper", "mean_confidence", "accuracy", "count"]]
    for i, b in enumerate(bins):
        rows.append([
            str(i), repr(b.lower), repr(b.upper),
            "" if b.mean_confidence is None else repr(b.mean_confidence),
            "" if b.accuracy is None else repr(b.accuracy),
            str(b.count),
        ])
    write_csv_atomic(path, rows)


def save_confusion_csv(matrix, order, path):
    order = list(order)
    rows = [["true_class"] + [f"pred_{c}" for c in order]]
    for c, row in zip(order, matrix):
        rows.append([str(c)] + [str(int(v)) for v in row])
    write_csv_atomic(path, rows)


def pct(x):
    """Percent with one decimal, the way result tables print accuracies."""
    return "-" if x is None else f"{100.0 * x:.1f}"
