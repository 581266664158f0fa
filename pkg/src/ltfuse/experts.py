"""Expert classifiers as opaque prediction matrices.

Real experts (a CNN's softmax, an attribute model) enter through the CSV
format. For desk-scale work :func:`simulate_expert` produces predictions
with a controllable familiarity bias: confidence and accuracy that follow
the class's training count.
"""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .core import softmax
from .data import ClassCounts, write_csv_atomic
from .errors import DataError, DimensionError, FormatError, InvalidInputError

ROW_SUM_TOL = 1e-9
LOAD_ROW_SUM_TOL = 1e-6


@dataclass
class PredictionMatrix:
    probs: np.ndarray
    sample_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or 0 in self.probs.shape:
            raise DimensionError(f"prediction matrix must be 2-d and nonempty, got {self.probs.shape}")
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.shape != (self.n,):
            raise DimensionError("one sample id per row required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DimensionError("one label per row required")
        bad = row_sum_violations(self.probs, ROW_SUM_TOL)
        if bad.size:
            raise InvalidInputError(f"row {int(bad[0])} is not a probability vector")

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def k(self):
        return self.probs.shape[1]

    def argmax(self):
        return np.argmax(self.probs, axis=1)

    def take(self, ids):
        """Rows for the given sample ids, in that order."""
        pos = {int(s): i for i, s in enumerate(self.sample_ids)}
        try:
            rows = np.array([pos[int(s)] for s in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"sample {exc.args[0]} has no prediction row") from exc
        return PredictionMatrix(
            self.probs[rows], self.sample_ids[rows], None if self.labels is None else self.labels[rows]
        )


def row_sum_violations(probs, tol):
    sums = probs.sum(axis=1)
    bad = (np.abs(sums - 1.0) > tol) | np.any(probs < 0, axis=1) | np.any(probs > 1, axis=1)
    bad |= ~np.all(np.isfinite(probs), axis=1)
    return np.flatnonzero(bad)


def check_aligned(a, b):
    if a.n != b.n or not np.array_equal(a.sample_ids, b.sample_ids):
        raise DataError("prediction files are not row-aligned (sample_id mismatch)")
    if a.k != b.k:
        raise DataError(f"prediction files disagree on class count ({a.k} vs {b.k})")


# -- simulation ---------------------------------------------------------------


@dataclass
class ExpertProfile:
    """Parameters of a simulated expert.

    Each sample is either recognized or not. The chance of recognizing a
    sample of class ``y`` is ``skill(m_y)``, where ``m`` is the class's
    normalized training count: ``s_min + (s_max - s_min) * m**gamma`` for a
    visual-biased expert, ``... * (1 - m)**gamma`` for a semantic-biased one
    and flat ``s_max`` for ``custom``.

    Logits start as standard normal noise plus ``familiarity * m_c`` (a
    learned class prior that favors the head). A recognized sample gets
    ``margin`` added to its true-class logit. The softmax temperature is
    ``tau * exp(difficulty * N(0, 1))`` per sample, so confident mistakes
    happen as well as flat outputs.
    """

    kind: str = "visual"
    s_min: float = 0.05
    s_max: float = 0.95
    gamma: float = 1.0
    tau: float = 0.5
    familiarity: float = 0.0
    difficulty: float = 0.0
    margin: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("visual", "semantic", "custom"):
            raise InvalidInputError(f"unknown expert kind {self.kind!r}")
        if not 0 <= self.s_min <= self.s_max <= 1:
            raise InvalidInputError("need 0 <= s_min <= s_max <= 1")
        if not self.tau > 0:
            raise InvalidInputError("tau must be > 0")
        if self.gamma < 0 or self.difficulty < 0 or self.margin < 0:
            raise InvalidInputError("gamma, difficulty and margin must be >= 0")

    @classmethod
    def visual(cls, **kw):
        base = dict(kind="visual", s_min=0.05, s_max=0.95, gamma=1.0, tau=0.5,
                    familiarity=3.0, difficulty=0.7, margin=5.0, seed=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def semantic(cls, **kw):
        base = dict(kind="semantic", s_min=0.3, s_max=0.7, gamma=1.0, tau=0.5,
                    familiarity=0.0, difficulty=0.7, margin=5.0, seed=2)
        base.update(kw)
        return cls(**base)

    def skill(self, normalized_counts):
        m = np.asarray(normalized_counts, dtype=np.float64)
        span = self.s_max - self.s_min
        if self.kind == "visual":
            return self.s_min + span * m**self.gamma
        if self.kind == "semantic":
            return self.s_min + span * (1.0 - m) ** self.gamma
        return np.full_like(m, self.s_max)

    def to_dict(self):
        return asdict(self)


def sample_rng(seed, sample_id):
    """Per-sample generator.

    The stream for a sample depends only on ``(seed, sample_id)`` through
    numpy's SeedSequence hashing, so any range of samples can be generated
    independently (and in parallel) with identical results.
    """
    return np.random.default_rng([int(seed), int(sample_id)])


def simulate_expert(sample_ids, labels, counts, profile):
    """Predictions of a simulated expert that was fit on data with ``counts``.

    Refitting an expert on a different training subset amounts to calling
    this again with that subset's counts. Per sample the draws are, in
    order: k logit noises, the recognition uniform, the temperature noise.
    """
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if sample_ids.size == 0:
        raise DataError("cannot simulate an expert on an empty sample set")
    if labels.shape != sample_ids.shape:
        raise DimensionError("one label per sample required")
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(counts)
    k = counts.k
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidInputError("labels outside the class range")
    m = counts.normalized
    skill = profile.skill(m)

    n = sample_ids.size
    noise = np.empty((n, k))
    u = np.empty(n)
    eta = np.empty(n)
    for i, sid in enumerate(sample_ids):
        rng = sample_rng(profile.seed, sid)
        noise[i] = rng.standard_normal(k)
        u[i] = rng.random()
        eta[i] = rng.standard_normal()
    logits = noise + profile.familiarity * m
    recognized = u < skill[labels]
    logits[np.arange(n), labels] += profile.margin * recognized
    temp = profile.tau * np.exp(profile.difficulty * eta)
    probs = softmax(logits / temp[:, None], axis=1)
    return PredictionMatrix(probs, sample_ids, labels)


def simulate_on_split(split, profile, counts=None, parts=("test",)):
    ids, labels, _ = split.subset(*parts)
    if counts is None:
        counts = split.train_counts()
    return simulate_expert(ids, labels, counts, profile)


# -- CSV ------------------------------------------------------------------------


def save_predictions(matrix, path):
    """CSV with header ``sample_id,label,p_0,...``; unknown labels are written as -1."""
    header = ["sample_id", "label"] + [f"p_{j}" for j in range(matrix.k)]
    labels = matrix.labels if matrix.labels is not None else np.full(matrix.n, -1)
    rows = [header]
    for sid, lab, p in zip(matrix.sample_ids, labels, matrix.probs):
        rows.append([str(int(sid)), str(int(lab))] + [repr(float(v)) for v in p])
    write_csv_atomic(path, rows)
    return Path(path)


def load_predictions(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["sample_id", "label"] or len(header) < 3:
            raise FormatError(f"{path}: expected header sample_id,label,p_0,...")
        k = len(header) - 2
        if header[2:] != [f"p_{j}" for j in range(k)]:
            raise FormatError(f"{path}: probability columns must be p_0..p_{k - 1}")
        ids, labels, probs = [], [], []
        for i, row in enumerate(reader):
            if len(row) != k + 2:
                raise FormatError(f"header declares {k} classes but row has {len(row) - 2} values", row=i)
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                probs.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise FormatError(f"malformed value ({exc})", row=i) from exc
    if not probs:
        raise FormatError(f"{path}: no prediction rows")
    probs = np.asarray(probs, dtype=np.float64)
    bad = row_sum_violations(probs, LOAD_ROW_SUM_TOL)
    if bad.size:
        r = int(bad[0])
        raise FormatError(f"probabilities sum to {probs[r].sum():.6g}, not 1", row=r)
    probs = probs / probs.sum(axis=1, keepdims=True)
    labels = np.asarray(labels)
    return PredictionMatrix(probs, ids, None if np.all(labels < 0) else labels)


# -- bias analysis --------------------------------------------------------------


@dataclass
class BiasReport:
    mean_confidence: np.ndarray  # nan where a class has no evaluation samples
    counts: np.ndarray
    eval_counts: np.ndarray
    correlation: float

    @property
    def present(self):
        return self.eval_counts > 0

    def rows(self):
        """Per-class rows ordered head to tail, for plotting."""
        order = np.argsort(-self.counts, kind="stable")
        out = []
        for rank, y in enumerate(order):
            mc = self.mean_confidence[y]
            out.append({
                "rank": rank,
                "class": int(y),
                "train_count": int(self.counts[y]),
                "eval_count": int(self.eval_counts[y]),
                "mean_confidence": None if np.isnan(mc) else float(mc),
            })
        return out


def spearman_or_zero(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    return float(spearmanr(a, b).statistic)


def bias_report(preds, labels, counts):
    """Mean true-class confidence per class and its rank correlation with counts."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("bias report needs labeled samples")
    if labels.shape != (preds.n,):
        raise DimensionError("labels do not match prediction rows")
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(counts)
    if counts.k != preds.k:
        raise DimensionError("counts and predictions disagree on the class count")
    k = preds.k
    true_conf = preds.probs[np.arange(preds.n), labels]
    n_eval = np.bincount(labels, minlength=k)
    sums = np.bincount(labels, weights=true_conf, minlength=k)
    mean = np.full(k, np.nan)
    present = n_eval > 0
    mean[present] = sums[present] / n_eval[present]
    rho = spearman_or_zero(counts.counts[present], mean[present])
    return BiasReport(mean, counts.counts.copy(), n_eval, rho)


def restricted_accuracy(preds, labels, class_subset):
    """Accuracy on samples of ``class_subset`` with argmax over those columns only."""
    subset = np.unique(np.asarray(class_subset, dtype=np.int64))
    if subset.size == 0:
        raise InvalidInputError("class subset is empty")
    if subset.min() < 0 or subset.max() >= preds.k:
        raise InvalidInputError("class subset contains an unknown class")
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.isin(labels, subset)
    if not np.any(rows):
        raise DataError("no samples belong to the class subset")
    pred = subset[np.argmax(preds.probs[rows][:, subset], axis=1)]
    return float(np.mean(pred == labels[rows]))
