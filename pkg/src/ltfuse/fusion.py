"""Late-fusion module that debiases two expert prediction vectors.

Per sample the module

1. stacks the two experts' prediction rows into a k x 2 matrix and sorts
   its rows by one expert's confidence (order statistics),
2. runs F 2x2 filters down the sorted class axis and averages over filters,
   giving a (k-1)-vector ``h``,
3. maps ``h`` through affine heads to polynomial coefficients and to the
   expert trade-off ``lam = sigmoid(f0 - beta)``,
4. scores class y as
   ``lam * w_v(y) * p_v(y) + (1 - lam) * w_s(y) * p_s(y)`` with
   ``w(y) = sigmoid(sum_j c_j * m_y**j)`` and ``m_y = n_y / max n``.

The single-modality variant drops the second expert: the sorted input is
k x 1, the filters are 2 x 1, ``lam`` is fixed at 1 and only ``w_v`` is
learned.

Every function accepts either one sample (1-d rows) or a batch (2-d).
"""

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import core
from .core import sigmoid
from .data import ClassCounts, write_text_atomic
from .errors import (
    ConfigError,
    DegenerateScoreError,
    DimensionError,
    FormatError,
    InvalidInputError,
)

CHECKPOINT_VERSION = 1
SORT_CHOICES = ("visual", "semantic")


@dataclass(frozen=True)
class FusionConfig:
    degree: int = 3
    filters: int = 2
    sort_by: str = "visual"
    beta: float = 0.0
    single_modality: bool = False
    per_class: bool = False
    l2: float = 0.0
    lr: float = 1e-3

    def validate(self, strict=True):
        problems = []
        if self.degree not in (2, 3, 4) and (strict or self.degree < 1):
            problems.append(("degree", f"must be in {{2,3,4}}, got {self.degree}"))
        if self.filters not in (1, 2, 3, 4) and (strict or self.filters < 1):
            problems.append(("filters", f"must be in 1..4, got {self.filters}"))
        if self.sort_by not in SORT_CHOICES:
            problems.append(("sort_by", f"must be one of {SORT_CHOICES}"))
        if not -2 <= self.beta <= 2 and strict:
            problems.append(("beta", f"must lie in [-2, 2], got {self.beta}"))
        if self.single_modality and self.sort_by != "visual":
            problems.append(("sort_by", "single-modality fusion can only sort by the visual expert"))
        if self.l2 < 0 or self.lr <= 0:
            problems.append(("lr/l2", "lr must be > 0 and l2 >= 0"))
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return asdict(self)


_PARAM_NAMES = ("conv_w", "conv_b", "v_w", "v_b", "s_w", "s_b", "lam_w", "lam_b")


@dataclass
class FusionParams:
    """Trainable arrays; heads that a configuration does not use are None.

    Shapes: conv_w (F, 2, C) with C = 2 (or 1 single-modality), conv_b (F,),
    v_w / s_w (d, k-1), v_b / s_b (d,), lam_w (k-1,), lam_b (1,).
    """

    conv_w: np.ndarray
    conv_b: np.ndarray
    v_w: np.ndarray | None
    v_b: np.ndarray
    s_w: np.ndarray | None = None
    s_b: np.ndarray | None = None
    lam_w: np.ndarray | None = None
    lam_b: np.ndarray | None = None

    def named(self):
        return [(n, getattr(self, n)) for n in _PARAM_NAMES if getattr(self, n) is not None]

    @property
    def n_params(self):
        return sum(a.size for _, a in self.named())

    def ravel(self):
        return np.concatenate([a.ravel() for _, a in self.named()])

    def unravel(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} values, got {vec.size}")
        out, pos = {}, 0
        for name, a in self.named():
            out[name] = vec[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return replace(self, **out)

    def zeros_like(self):
        return replace(self, **{n: np.zeros_like(a) for n, a in self.named()})

    def copy(self):
        return replace(self, **{n: a.copy() for n, a in self.named()})


def init_params(k, config, seed=0, conv_scale=0.1):
    """Zero heads (so the module starts as a uniform 0.5 reweighting) and
    small uniform conv filters."""
    if k < 2:
        raise InvalidInputError("fusion needs at least two classes")
    rng = np.random.default_rng(seed)
    d, f = config.degree, config.filters
    cols = 1 if config.single_modality else 2
    conv_w = rng.uniform(-conv_scale, conv_scale, size=(f, 2, cols))
    head_w = None if config.per_class else np.zeros((d, k - 1))
    p = FusionParams(conv_w=conv_w, conv_b=np.zeros(f), v_w=head_w, v_b=np.zeros(d))
    if not config.single_modality:
        p.s_w = None if config.per_class else np.zeros((d, k - 1))
        p.s_b = np.zeros(d)
        p.lam_w = np.zeros(k - 1)
        p.lam_b = np.zeros(1)
    return p


def check_params(params, k, config):
    cols = 1 if config.single_modality else 2
    d, f = config.degree, config.filters
    expected = {"conv_w": (f, 2, cols), "conv_b": (f,), "v_b": (d,)}
    if not config.per_class:
        expected["v_w"] = (d, k - 1)
    if not config.single_modality:
        expected.update(s_b=(d,), lam_w=(k - 1,), lam_b=(1,))
        if not config.per_class:
            expected["s_w"] = (d, k - 1)
    present = dict(params.named())
    if set(present) != set(expected):
        raise DimensionError(f"parameter set {sorted(present)} does not match config {sorted(expected)}")
    for name, shape in expected.items():
        if present[name].shape != shape:
            raise DimensionError(f"{name} has shape {present[name].shape}, expected {shape}")


def count_params(k, config):
    return init_params(k, config).n_params


# -- building blocks ------------------------------------------------------------


def _rows(x, k=None, name="row"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise DimensionError(f"{name} must be 1-d or 2-d")
    if k is not None and x.shape[-1] != k:
        raise DimensionError(f"{name} has {x.shape[-1]} classes, expected {k}")
    return x


def stack_and_sort(p_v, p_s, sort_by="visual"):
    """Stack the expert rows to (..., k, 2) and sort classes by descending
    confidence of ``sort_by``. Ties keep ascending class index.

    Returns ``(sorted, perm)``; ``sorted[..., r, :]`` holds class ``perm[..., r]``.
    With ``p_s=None`` the result is (..., k, 1).
    """
    p_v = _rows(p_v, name="p_v")
    cols = [p_v]
    if p_s is not None:
        p_s = _rows(p_s, p_v.shape[-1], name="p_s")
        if p_s.shape != p_v.shape:
            raise DimensionError("expert rows have different shapes")
        cols.append(p_s)
    if sort_by not in SORT_CHOICES or (sort_by == "semantic" and p_s is None):
        raise InvalidInputError(f"cannot sort by {sort_by!r}")
    key = p_v if sort_by == "visual" else p_s
    perm = np.argsort(-key, axis=-1, kind="stable")
    stacked = np.stack([np.take_along_axis(c, perm, axis=-1) for c in cols], axis=-1)
    return stacked, perm


def backbone(sorted_scores, params):
    """Conv over the sorted score matrix, then the mean over filters."""
    sorted_scores = np.asarray(sorted_scores, dtype=np.float64)
    if sorted_scores.shape[-2] < 2:
        raise InvalidInputError("backbone needs k >= 2")
    z = core.conv2x2_forward(sorted_scores, params.conv_w, params.conv_b)
    return core.avg_pool_filters_forward(z)


def poly_features(counts, degree):
    """(k, d) matrix of ``m_y**j``; ``0**0`` is 1."""
    m = counts.normalized if isinstance(counts, ClassCounts) else np.asarray(counts, dtype=np.float64)
    return m[:, None] ** np.arange(degree)


def coefficients(h, params, side="visual"):
    w, b = (params.v_w, params.v_b) if side == "visual" else (params.s_w, params.s_b)
    if b is None:
        raise InvalidInputError(f"no {side} coefficient head in these parameters")
    if w is None:
        # per-class ablation: one global coefficient set, h is ignored
        return np.broadcast_to(b, np.shape(h)[:-1] + b.shape).copy()
    return core.dense_forward(h, w, b)


def debias_weights(h, counts, params, side="visual"):
    c = coefficients(h, params, side)
    P = poly_features(counts, c.shape[-1])
    if P.shape[0] != np.shape(h)[-1] + 1:
        raise DimensionError("counts and h disagree on the number of classes")
    return sigmoid(c @ P.T)


def lambda_head(h, params, beta, single_modality=False):
    """Platt-scaled trade-off ``sigmoid(f0 - beta)``; exactly 1 for a single expert."""
    h = np.asarray(h, dtype=np.float64)
    if single_modality:
        return np.ones(h.shape[:-1]) if h.ndim > 1 else 1.0
    f0 = h @ params.lam_w + params.lam_b[0]
    return sigmoid(f0 - beta)


def fuse(p_v, p_s, lam, w_v, w_s):
    p_v, w_v = np.asarray(p_v, dtype=np.float64), np.asarray(w_v, dtype=np.float64)
    p_s, w_s = np.asarray(p_s, dtype=np.float64), np.asarray(w_s, dtype=np.float64)
    if not (p_v.shape == p_s.shape == w_v.shape == w_s.shape):
        raise DimensionError("fuse inputs must share one shape")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim:
        lam = lam[..., None]
    return lam * w_v * p_v + (1.0 - lam) * w_s * p_s


# -- full module ----------------------------------------------------------------


@dataclass
class FusionOutput:
    scores: np.ndarray
    lam: np.ndarray | float
    w_v: np.ndarray
    w_s: np.ndarray | None
    perm: np.ndarray

    def decision(self):
        return np.argmax(self.scores, axis=-1)


@dataclass
class _Cache:
    x: np.ndarray
    h: np.ndarray
    P: np.ndarray
    p_v: np.ndarray
    p_s: np.ndarray | None
    w_v: np.ndarray
    w_s: np.ndarray | None
    lam: np.ndarray
    lam_fixed: bool


def _forward(p_v, p_s, counts, params, config, lambda_override=None):
    p_v = np.atleast_2d(_rows(p_v, name="p_v"))
    k = p_v.shape[1]
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(counts)
    if counts.k != k:
        raise DimensionError(f"counts cover {counts.k} classes, predictions {k}")
    check_params(params, k, config)
    if config.single_modality:
        x, perm = stack_and_sort(p_v, None, "visual")
    else:
        p_s = np.atleast_2d(_rows(p_s, k, name="p_s"))
        x, perm = stack_and_sort(p_v, p_s, config.sort_by)
    h = backbone(x, params)
    P = poly_features(counts, config.degree)
    w_v = sigmoid(coefficients(h, params, "visual") @ P.T)
    if config.single_modality:
        lam = np.ones(p_v.shape[0])
        scores = w_v * p_v
        w_s = None
        lam_fixed = True
    else:
        w_s = sigmoid(coefficients(h, params, "semantic") @ P.T)
        if lambda_override is None:
            lam = lambda_head(h, params, config.beta)
            lam_fixed = False
        else:
            lam = np.full(p_v.shape[0], float(lambda_override))
            lam_fixed = True
        scores = fuse(p_v, p_s, lam, w_v, w_s)
    cache = _Cache(x, h, P, p_v, p_s, w_v, w_s, lam, lam_fixed)
    return FusionOutput(scores, lam, w_v, w_s, perm), cache


def _squeeze(out, single):
    if not single:
        return out
    return FusionOutput(
        out.scores[0], float(out.lam[0]), out.w_v[0], None if out.w_s is None else out.w_s[0], out.perm[0]
    )


def forward(p_v, p_s, counts, params, config, lambda_override=None):
    """Fused scores for one sample (1-d rows) or a batch (2-d).

    ``lambda_override`` pins the trade-off to a constant and bypasses the
    lambda head.
    """
    if config.single_modality:
        raise InvalidInputError("single-modality config: use smdragon_forward")
    out, _ = _forward(p_v, p_s, counts, params, config, lambda_override)
    return _squeeze(out, np.ndim(p_v) == 1)


def smdragon_forward(p_v, counts, params, config):
    """Single-expert variant: scores ``w_v(y) * p_v(y)``."""
    if not config.single_modality:
        raise InvalidInputError("smdragon_forward needs a single-modality config")
    out, _ = _forward(p_v, None, counts, params, config)
    return out.scores[0] if np.ndim(p_v) == 1 else out.scores


def per_class_weight_ablation(p_v, p_s, counts, params, config):
    """Forward pass of the ablation where the coefficient heads ignore ``h``:
    each class gets one weight shared by all samples."""
    if not config.per_class:
        raise InvalidInputError("per-class ablation needs a config with per_class=True")
    return forward(p_v, p_s, counts, params, config)


def predict_scores(p_v, p_s, counts, params, config):
    """Score matrix for either variant; ``p_s`` is ignored for single-modality."""
    if config.single_modality:
        return smdragon_forward(p_v, counts, params, config)
    return forward(p_v, p_s, counts, params, config).scores


def _backward(d_scores, cache, params, config):
    grads = params.zeros_like()
    d_h = np.zeros_like(cache.h)
    sides = [("visual", cache.w_v, cache.p_v, cache.lam)]
    if not config.single_modality:
        sides.append(("semantic", cache.w_s, cache.p_s, 1.0 - cache.lam))
    for side, w, p, mix in sides:
        d_z = d_scores * mix[:, None] * p * w * (1.0 - w)
        d_c = d_z @ cache.P
        wname, bname = ("v_w", "v_b") if side == "visual" else ("s_w", "s_b")
        head_w = getattr(params, wname)
        if head_w is None:
            setattr(grads, bname, d_c.sum(axis=0))
        else:
            d_h_side, dw, db = core.dense_backward(cache.h, head_w, d_c)
            d_h += d_h_side
            setattr(grads, wname, dw)
            setattr(grads, bname, db)
    if not config.single_modality and not cache.lam_fixed:
        d_lam = np.sum(d_scores * (cache.w_v * cache.p_v - cache.w_s * cache.p_s), axis=1)
        d_f0 = d_lam * cache.lam * (1.0 - cache.lam)
        grads.lam_w = cache.h.T @ d_f0
        grads.lam_b = np.array([d_f0.sum()])
        d_h += d_f0[:, None] * params.lam_w
    d_z = core.avg_pool_filters_backward(d_h, config.filters)
    _, grads.conv_w, grads.conv_b = core.conv2x2_backward(cache.x, params.conv_w, d_z)
    return grads


def training_loss(p_v, p_s, labels, counts, params, config, balanced=False, class_weights=None):
    """Mean cross-entropy of the normalized fused scores plus ``l2 * |params|^2``.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``params``. With
    ``balanced`` each sample is weighted by ``1/n_y`` (rescaled to mean 1).
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size == 0:
        raise InvalidInputError("empty training batch")
    out, cache = _forward(p_v, p_s, counts, params, config)
    scores = out.scores
    if scores.shape[0] != labels.size:
        raise DimensionError("one label per sample required")
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise IndexError("label out of range")
    total = scores.sum(axis=1)
    if np.any(total <= 0):
        raise DegenerateScoreError("fused scores sum to zero")
    if class_weights is None:
        counts_arr = counts.counts if isinstance(counts, ClassCounts) else np.asarray(counts)
        class_weights = core.balanced_class_weights(counts_arr) if balanced else None
    sw = np.ones(labels.size) if class_weights is None else np.asarray(class_weights)[labels]
    b = labels.size
    rows = np.arange(b)
    norm = scores / total[:, None]
    picked = norm[rows, labels]
    loss = float(np.mean(-sw * np.log(picked + core.CE_FLOOR)))
    d_picked = -sw / (picked + core.CE_FLOOR) / b
    onehot = np.zeros_like(norm)
    onehot[rows, labels] = 1.0
    d_scores = (d_picked / total)[:, None] * (onehot - picked[:, None])
    grads = _backward(d_scores, cache, params, config)
    if config.l2 > 0:
        theta = params.ravel()
        loss += config.l2 * float(theta @ theta)
        grads = grads.unravel(grads.ravel() + 2.0 * config.l2 * theta)
    return loss, grads


# -- baselines --------------------------------------------------------------------


@dataclass
class MixtureGate:
    """Logistic gate over sample features giving the visual-expert weight."""

    weights: np.ndarray
    bias: float

    def __call__(self, features):
        return sigmoid(np.asarray(features, dtype=np.float64) @ self.weights + self.bias)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "bias": self.bias}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]))


def train_mixture_gate(features, p_v, p_s, labels, epochs=200, lr=0.05, seed=0):
    """Fit the gate by ADAM on the mixture likelihood
    ``-log(g * p_v[y] + (1 - g) * p_s[y])`` (full batch)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(labels.size)
    a = np.asarray(p_v)[rows, labels]
    c = np.asarray(p_s)[rows, labels]
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    xs = (x - mu) / sd
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, 0.01, size=x.shape[1] + 1)
    state = core.AdamState.zeros(theta.size, lr=lr)
    for _ in range(epochs):
        g = sigmoid(xs @ theta[:-1] + theta[-1])
        mix = g * a + (1 - g) * c + core.CE_FLOOR
        d_g = -(a - c) / mix / labels.size
        d_pre = d_g * g * (1 - g)
        grad = np.concatenate([xs.T @ d_pre, [d_pre.sum()]])
        theta, state = core.adam_step(theta, grad, state)
    # fold the standardization into the affine map
    w = theta[:-1] / sd
    return MixtureGate(w, float(theta[-1] - mu @ w))


BASELINE_MODES = ("max", "avg", "product", "mixture")


def fusion_baselines(p_v, p_s, mode, gate=None, features=None):
    p_v = _rows(p_v, name="p_v")
    p_s = _rows(p_s, p_v.shape[-1], name="p_s")
    if p_v.shape != p_s.shape:
        raise DimensionError("expert rows have different shapes")
    if mode == "max":
        return np.maximum(p_v, p_s)
    if mode == "avg":
        return 0.5 * (p_v + p_s)
    if mode == "product":
        prod = p_v * p_s
        total = prod.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise DegenerateScoreError("expert products vanish on every class")
        return prod / total
    if mode == "mixture":
        if gate is None or features is None:
            raise InvalidInputError("mixture fusion needs a trained gate and sample features")
        g = np.asarray(gate(features))
        if g.ndim:
            g = g[..., None]
        return g * p_v + (1 - g) * p_s
    raise InvalidInputError(f"unknown baseline mode {mode!r}")


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, params, config, counts, extra=None):
    check_params(params, counts.k, config)
    doc = {
        "format": "ltfuse-fusion",
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "counts": counts.tolist(),
        "params": {n: {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]} for n, a in params.named()},
    }
    if extra:
        doc.update(extra)
    write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


def load_checkpoint(path):
    """Returns ``(params, config, counts, doc)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != "ltfuse-fusion" or doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    known = {f.name for f in fields(FusionConfig)}
    config = FusionConfig(**{k: v for k, v in doc["config"].items() if k in known})
    counts = ClassCounts(doc["counts"])
    k = counts.k
    template = init_params(k, config)
    arrays = {}
    for name, a in template.named():
        entry = doc["params"].get(name)
        if entry is None or tuple(entry["shape"]) != a.shape or len(entry["data"]) != a.size:
            raise FormatError(f"{path}: parameter {name} missing or has the wrong shape")
        arrays[name] = np.asarray(entry["data"], dtype=np.float64).reshape(a.shape)
    extra_names = set(doc["params"]) - set(arrays)
    if extra_names:
        raise FormatError(f"{path}: unexpected parameters {sorted(extra_names)}")
    params = replace(template, **arrays)
    return params, config, counts, doc
