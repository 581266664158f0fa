"""Class-frequency profiles, dataset splits and the synthetic labeled task."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidInputError

PARTITIONS = ("train", "holdout", "validation", "test")


@dataclass(frozen=True)
class ClassCounts:
    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInputError("class counts must be a nonempty 1-d sequence")
        if np.any(arr < 0) or not np.all(arr == np.round(arr)):
            raise InvalidInputError("class counts must be non-negative integers")
        object.__setattr__(self, "counts", arr.astype(np.int64))

    @property
    def k(self):
        return self.counts.size

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def normalized(self):
        """``n_y / max_y n_y``; all zeros if every class is empty."""
        top = self.counts.max()
        if top == 0:
            return np.zeros(self.k)
        return self.counts / float(top)

    @property
    def prior(self):
        if self.total == 0:
            raise InvalidInputError("prior of an empty count vector")
        return self.counts / float(self.total)

    def rank_order(self):
        """Class indices from head to tail; ties go to the lower class index."""
        return np.argsort(-self.counts, kind="stable")

    def tolist(self):
        return [int(c) for c in self.counts]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def exponential_profile(k, n_max, n_min, rank_order=None):
    """Counts decaying as ``n_max * b**-rank`` from ``n_max`` down to ``n_min``.

    ``rank_order`` optionally lists class indices from head to tail (e.g. to
    align tail classes with an existing benchmark); by default class ``r``
    has rank ``r``.
    """
    if k < 2:
        raise InvalidInputError("exponential profile needs k >= 2")
    if n_min < 1:
        raise InvalidInputError("n_min must be >= 1")
    if n_min > n_max:
        raise InvalidInputError(f"n_min ({n_min}) exceeds n_max ({n_max})")
    b = (n_max / n_min) ** (1.0 / (k - 1))
    by_rank = [_round_half_up(n_max * b ** (-r)) for r in range(k)]
    by_rank[0] = n_max
    by_rank[-1] = n_min
    return ClassCounts(_place(by_rank, rank_order))


def two_level_profile(k_head, n_head, k_tail, shots, rank_order=None):
    for name, val in (("k_head", k_head), ("n_head", n_head), ("k_tail", k_tail), ("shots", shots)):
        if val < 1:
            raise InvalidInputError(f"{name} must be >= 1")
    by_rank = [n_head] * k_head + [shots] * k_tail
    return ClassCounts(_place(by_rank, rank_order))


def _place(by_rank, rank_order):
    if rank_order is None:
        return np.asarray(by_rank)
    order = np.asarray(rank_order)
    if sorted(order.tolist()) != list(range(len(by_rank))):
        raise InvalidInputError("rank_order must be a permutation of the class indices")
    out = np.empty(len(by_rank), dtype=np.int64)
    out[order] = by_rank
    return out


@dataclass
class FrequencyProfile:
    kind: str = "exponential"
    k: int = 50
    n_max: int = 100
    n_min: int = 5
    k_head: int = 0
    n_head: int = 0
    k_tail: int = 0
    shots: int = 0
    rank_order: list | None = None

    def counts(self):
        if self.kind == "exponential":
            return exponential_profile(self.k, self.n_max, self.n_min, self.rank_order)
        if self.kind == "two-level":
            return two_level_profile(self.k_head, self.n_head, self.k_tail, self.shots, self.rank_order)
        raise InvalidInputError(f"unknown profile kind {self.kind!r}")

    @property
    def num_classes(self):
        return self.k if self.kind == "exponential" else self.k_head + self.k_tail

    def to_dict(self):
        return asdict(self)


def profile_stats(counts):
    """Summary numbers in the style of a dataset statistics table."""
    c = counts.counts
    return {
        "classes": counts.k,
        "total": counts.total,
        "max": int(c.max()),
        "min": int(c.min()),
        "mean": float(c.mean()),
        "median": float(np.median(c)),
    }


# -- pools and splits ---------------------------------------------------------


@dataclass
class LabeledPool:
    sample_ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None
    num_classes: int = 0
    centroids: np.ndarray | None = None

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0


def synthetic_task(k, dim, counts, separation, seed, reserve=40, noise=1.0):
    """Gaussian-cluster pool with ``counts[y] + reserve`` samples per class.

    Class means are drawn uniformly on the sphere of radius ``separation``;
    samples are isotropic Gaussians around them with std ``noise``. The
    reserve gives every class the same number of evaluation samples.
    """
    if k < 1 or dim < 1:
        raise InvalidInputError("k and dim must be >= 1")
    if not separation > 0:
        raise InvalidInputError("separation must be > 0")
    if isinstance(counts, ClassCounts):
        counts = counts.counts
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size != k:
        raise InvalidInputError(f"counts has {counts.size} entries, expected {k}")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((k, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centroids = separation * directions / norms
    sizes = counts + reserve
    labels = np.repeat(np.arange(k), sizes)
    features = centroids[labels] + noise * rng.standard_normal((labels.size, dim))
    return LabeledPool(np.arange(labels.size), labels, features, k, centroids)


@dataclass
class DatasetSplit:
    sample_ids: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    num_classes: int
    requested: ClassCounts
    seed: int = 0
    val_per_class: int = 0
    profile: dict = field(default_factory=dict)
    features: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def mask(self, *parts):
        for p in parts:
            if p not in PARTITIONS:
                raise InvalidInputError(f"unknown partition {p!r}")
        return np.isin(self.partition, parts)

    def ids(self, *parts):
        return self.sample_ids[self.mask(*parts)]

    def labels_of(self, *parts):
        return self.labels[self.mask(*parts)]

    def features_of(self, *parts):
        if self.features is None:
            return None
        return self.features[self.mask(*parts)]

    def counts_of(self, *parts):
        return ClassCounts(np.bincount(self.labels_of(*parts), minlength=self.num_classes))

    def train_counts(self):
        """Counts of the whole training data (fit samples plus hold-out)."""
        return self.counts_of("train", "holdout")

    def subset(self, *parts):
        m = self.mask(*parts)
        return (
            self.sample_ids[m],
            self.labels[m],
            None if self.features is None else self.features[m],
        )


def draw_split(pool, counts, val_fraction=0.2, seed=0, truncate=False, allow_empty=False):
    """Sample train/validation/test partitions from ``pool``.

    Train takes ``counts[y]`` samples of class y without replacement. The
    validation set has the same size ``c`` for every class, the largest
    integer with ``k * c <= val_fraction * train_size`` (at least 1). Whatever
    remains goes to test. With ``truncate`` the train counts are cut to what
    the pool can supply and the affected classes are listed in
    ``split.flags["truncated"]``.
    """
    if isinstance(counts, ClassCounts):
        requested = counts
    else:
        requested = ClassCounts(counts)
    k = requested.k
    if k < pool.num_classes:
        raise InvalidInputError("counts cover fewer classes than the pool")
    if requested.total == 0 and not allow_empty:
        raise DataError("all requested counts are zero; pass allow_empty=True to allow it")

    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(pool.labels == y) for y in range(k)]
    avail = np.array([len(ix) for ix in by_class])
    train_n = requested.counts.copy()
    truncated = []
    short = np.flatnonzero(train_n > avail)
    if short.size:
        if not truncate:
            y = int(short[0])
            raise DataError(f"class {y} requests {train_n[y]} samples but the pool has {avail[y]}")
        truncated = short.tolist()
        train_n = np.minimum(train_n, avail)

    val_c = max(1, int(Fraction(val_fraction).limit_denominator(10**9) * int(train_n.sum()) // k))
    partition = np.full(pool.labels.size, "test", dtype=object)
    short_val = []
    for y, ix in enumerate(by_class):
        perm = rng.permutation(ix)
        n = int(train_n[y])
        partition[perm[:n]] = "train"
        v = perm[n : n + val_c]
        if len(v) < val_c and n > 0:
            short_val.append(y)
        partition[v] = "validation"
    flags = {"truncated": truncated}
    if short_val:
        if not truncate:
            raise DataError(f"class {short_val[0]} has too few pool samples for the validation set")
        flags["short_validation"] = short_val
    return DatasetSplit(
        sample_ids=pool.sample_ids.copy(),
        labels=pool.labels.copy(),
        partition=partition.astype(str),
        num_classes=k,
        requested=requested,
        seed=seed,
        val_per_class=val_c,
        features=None if pool.features is None else pool.features.copy(),
        flags=flags,
    )


def head_classes_for(counts):
    """Default head/tail boundary.

    Two distinct positive levels: the higher one is head. Otherwise classes
    above the count median are head.
    """
    c = counts.counts
    levels = np.unique(c[c > 0])
    if levels.size == 2:
        return np.flatnonzero(c == levels[1])
    return np.flatnonzero(c > np.median(c))


def _ceil_frac(frac, n):
    return math.ceil(Fraction(frac).limit_denominator(10**6) * n)


def holdout_split(split, tail_fraction=0.5, head_fraction=0.2, head_classes=None, seed=0):
    """Move part of each class's train samples into the ``holdout`` partition.

    Tail classes lose ``ceil(tail_fraction * n_y)`` samples, head classes
    ``ceil(head_fraction * n_y)``. A class keeps at least one fit sample; when
    the rule would empty it (n_y = 1) nothing is moved and the class is listed
    in ``flags["holdout_kept"]``. Returns a new split.
    """
    for frac in (tail_fraction, head_fraction):
        if not 0 <= frac <= 1:
            raise InvalidInputError("hold-out fractions must lie in [0, 1]")
    counts = split.counts_of("train")
    if head_classes is None:
        head_classes = head_classes_for(counts)
    head = np.zeros(split.num_classes, dtype=bool)
    head[np.asarray(head_classes, dtype=np.int64)] = True

    rng = np.random.default_rng(seed)
    partition = split.partition.copy()
    kept = []
    for y in range(split.num_classes):
        ix = np.flatnonzero((split.labels == y) & (partition == "train"))
        n = ix.size
        take = _ceil_frac(head_fraction if head[y] else tail_fraction, n)
        if take >= n and n > 0 and take > 0:
            kept.append(y)
            continue
        if take:
            partition[rng.permutation(ix)[:take]] = "holdout"
    flags = dict(split.flags)
    flags["holdout_kept"] = kept
    flags["head_classes"] = np.flatnonzero(head).tolist()
    return DatasetSplit(
        sample_ids=split.sample_ids,
        labels=split.labels,
        partition=partition,
        num_classes=split.num_classes,
        requested=split.requested,
        seed=split.seed,
        val_per_class=split.val_per_class,
        profile=split.profile,
        features=split.features,
        flags=flags,
    )


# -- manifest I/O -------------------------------------------------------------

MANIFEST_FORMAT = "ltfuse-split"
MANIFEST_VERSION = 1


def save_split(split, manifest_path, features_path=None):
    """Write a JSON split manifest and, if features exist, a companion CSV."""
    manifest_path = Path(manifest_path)
    parts = {}
    for p in PARTITIONS:
        m = split.partition == p
        if np.any(m):
            parts[p] = [[int(i), int(l)] for i, l in zip(split.sample_ids[m], split.labels[m])]
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_classes": split.num_classes,
        "profile": split.profile,
        "seed": split.seed,
        "requested_counts": split.requested.tolist(),
        "val_per_class": split.val_per_class,
        "flags": split.flags,
        "partitions": parts,
    }
    if split.features is not None:
        features_path = Path(features_path or manifest_path.with_suffix(".features.csv"))
        save_features(features_path, split.sample_ids, split.labels, split.features)
        doc["features"] = features_path.name
    write_text_atomic(manifest_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_split(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: not a version-{MANIFEST_VERSION} split manifest")
    ids, labels, tags = [], [], []
    for p, rows in doc["partitions"].items():
        if p not in PARTITIONS:
            raise FormatError(f"unknown partition {p!r}")
        for sid, lab in rows:
            ids.append(sid)
            labels.append(lab)
            tags.append(p)
    order = np.argsort(ids, kind="stable")
    ids = np.asarray(ids, dtype=np.int64)[order]
    labels = np.asarray(labels, dtype=np.int64)[order]
    tags = np.asarray(tags, dtype=str)[order]
    features = None
    if "features" in doc:
        f_ids, f_labels, features = load_features(manifest_path.parent / doc["features"])
        pos = {int(s): i for i, s in enumerate(f_ids)}
        try:
            features = features[[pos[int(s)] for s in ids]]
        except KeyError as exc:
            raise FormatError(f"sample {exc.args[0]} has no feature row") from exc
    return DatasetSplit(
        sample_ids=ids,
        labels=labels,
        partition=tags,
        num_classes=int(doc["num_classes"]),
        requested=ClassCounts(doc["requested_counts"]),
        seed=doc["seed"],
        val_per_class=doc["val_per_class"],
        profile=doc.get("profile", {}),
        features=features,
        flags=doc.get("flags", {}),
    )


def save_features(path, sample_ids, labels, features):
    dim = features.shape[1]
    rows = [["sample_id", "label"] + [f"x_{j}" for j in range(dim)]]
    for sid, lab, x in zip(sample_ids, labels, features):
        rows.append([str(int(sid)), str(int(lab))] + [repr(float(v)) for v in x])
    write_csv_atomic(path, rows)


def load_features(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["sample_id", "label"]:
            raise FormatError(f"{path}: expected header sample_id,label,x_0,...")
        dim = len(header) - 2
        ids, labels, feats = [], [], []
        for i, row in enumerate(reader):
            if len(row) != dim + 2:
                raise FormatError(f"expected {dim + 2} fields, got {len(row)}", row=i)
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                feats.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise FormatError(str(exc), row=i) from exc
    return np.asarray(ids), np.asarray(labels), np.asarray(feats, dtype=np.float64).reshape(-1, dim)


def load_counts(path):
    """Class counts from a split manifest (train + hold-out) or a count CSV.

    The CSV form is either ``class,count`` rows with a header or a single
    ``count`` column.
    """
    path = Path(path)
    if path.suffix == ".json":
        return load_split(path).train_counts()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty count file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:] if not header[-1].lstrip("-").isdigit() else rows
    try:
        if len(body[0]) == 1:
            values = [int(r[0]) for r in body]
        else:
            pairs = sorted((int(r[0]), int(r[1])) for r in body)
            if [c for c, _ in pairs] != list(range(len(pairs))):
                raise FormatError(f"{path}: class indices must be 0..k-1")
            values = [n for _, n in pairs]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ClassCounts(values)


def save_counts(path, counts):
    rows = [["class", "count"]] + [[str(y), str(n)] for y, n in enumerate(counts.tolist())]
    write_csv_atomic(path, rows)


def write_text_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_csv_atomic(path, rows):
    write_text_atomic(path, "".join(",".join(r) + "\n" for r in rows))
