"""Three-stage training protocol, grid search and early stopping.

Small-scale path: experts are fit on the training data minus a hold-out set,
the fusion module is trained on the experts' hold-out predictions, then the
experts are refit on all training data and paired with the trained module
for inference. Large-scale path: no hold-out; experts are fit on all
training data and the module is trained on their training-set predictions.
"""

import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import core, data, experts, fusion, metrics
from .data import ClassCounts
from .errors import ConfigError, DataError
from .experts import ExpertProfile

log = logging.getLogger(__name__)

SCENARIOS = ("smooth-tail", "two-level", "vision-only")
METRICS = ("acc_lt", "acc_pc")
PAPER_GRID = {
    "filters": [1, 2, 3, 4],
    "degree": [2, 3, 4],
    "lr": [1e-5, 1e-4, 1e-3],
    "beta": [-2.0, -1.0, 0.0, 1.0, 2.0],
}
L2_GRID = [1e-5, 1e-4, 1e-3]
SEED_ENV = "LTFUSE_SEED"


# -- configuration ----------------------------------------------------------------


@dataclass
class DataSpec:
    profile: str = "exponential"
    k: int = 50
    n_max: int = 200
    n_min: int = 5
    k_head: int = 0
    n_head: int = 0
    k_tail: int = 0
    shots: int = 0
    dim: int = 16
    separation: float = 4.0
    reserve: int = 60
    val_fraction: float = 0.2
    tail_fraction: float = 0.5
    head_fraction: float = 0.2

    def frequency_profile(self):
        return data.FrequencyProfile(
            kind=self.profile, k=self.k, n_max=self.n_max, n_min=self.n_min,
            k_head=self.k_head, n_head=self.n_head, k_tail=self.k_tail, shots=self.shots,
        )


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``experts`` holds either simulated profiles
    (``{"visual": {...}, "semantic": {...}}``, fields of
    :class:`~ltfuse.experts.ExpertProfile` overriding the presets) or
    prediction files (``{"files": {"fusion_v": ..., "fusion_s": ...,
    "val_v": ..., "val_s": ..., "test_v": ..., "test_s": ...}, "counts": path}``).
    """

    scenario: str = "smooth-tail"
    data: DataSpec = field(default_factory=DataSpec)
    experts: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    sort_by: str = "visual"
    variant: str = "per-sample"
    epochs: int = 500
    batch_size: int = 64
    patience: int = 10
    seed: int = 0
    metric: str | None = None
    large_scale: bool = False
    fusion_train_on: str = "holdout"
    balanced: bool = False
    strict_grid: bool = True

    @property
    def selection_metric(self):
        if self.metric:
            return self.metric
        return "acc_pc" if self.scenario == "two-level" else "acc_lt"

    def resolved_grid(self):
        g = {k: list(v) for k, v in PAPER_GRID.items()}
        g["l2"] = list(L2_GRID) if self.large_scale else [0.0]
        g.update({k: list(v) for k, v in self.grid.items()})
        return g

    def fusion_configs(self):
        g = self.resolved_grid()
        single = self.scenario == "vision-only"
        per_class = self.variant == "per-class"
        out = []
        for f, d, lr, beta, l2 in itertools.product(g["filters"], g["degree"], g["lr"], g["beta"], g["l2"]):
            out.append(fusion.FusionConfig(
                degree=int(d), filters=int(f), sort_by=self.sort_by, beta=float(beta),
                single_modality=single, per_class=per_class, l2=float(l2), lr=float(lr),
            ))
        return out

    def validate(self):
        problems = []
        if self.scenario not in SCENARIOS:
            problems.append(("scenario", f"must be one of {SCENARIOS}"))
        if self.variant not in ("per-sample", "per-class"):
            problems.append(("variant", "must be per-sample or per-class"))
        if self.data.profile not in ("exponential", "two-level"):
            problems.append(("data.profile", "must be exponential or two-level"))
        if self.metric is not None and self.metric not in METRICS:
            problems.append(("metric", f"must be one of {METRICS}"))
        for name in ("epochs", "patience", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "epochs" else 1):
                problems.append((name, "must be a non-negative integer" if name == "epochs" else "must be >= 1"))
        if self.fusion_train_on not in ("holdout", "holdout+fit"):
            problems.append(("fusion_train_on", "must be holdout or holdout+fit"))
        g = self.resolved_grid()
        for key, values in g.items():
            if key not in ("filters", "degree", "lr", "beta", "l2"):
                problems.append((f"grid.{key}", "unknown grid axis"))
            elif not values:
                problems.append((f"grid.{key}", "must not be empty"))
        if not problems:
            for i, fc in enumerate(self.fusion_configs()):
                try:
                    fc.validate(strict=self.strict_grid)
                except ConfigError as exc:
                    problems += [(f"grid[{i}].{p}", m) for p, m in exc.problems]
                    break
        if "files" not in self.experts:
            for side in ("visual", "semantic"):
                try:
                    self.expert_profile(side)
                except (TypeError, ValueError) as exc:
                    problems.append((f"experts.{side}", str(exc)))
        elif "counts" not in self.experts:
            problems.append(("experts.counts", "required with prediction files"))
        if problems:
            raise ConfigError(problems)
        return self

    def expert_profile(self, side):
        overrides = dict(self.experts.get(side, {}))
        base_seed = overrides.pop("seed", 1 if side == "visual" else 2)
        seed = int(np.random.SeedSequence([self.seed, base_seed]).generate_state(1)[0])
        factory = ExpertProfile.visual if side == "visual" else ExpertProfile.semantic
        return factory(seed=seed, **overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d, apply_env=True):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([(u, "unknown field") for u in unknown])
        data_d = d.pop("data", {}) or {}
        known_data = {f.name for f in fields(DataSpec)}
        bad = sorted(set(data_d) - known_data)
        if bad:
            raise ConfigError([(f"data.{b}", "unknown field") for b in bad])
        try:
            cfg = cls(data=DataSpec(**data_d), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if apply_env and os.environ.get(SEED_ENV):
            try:
                cfg.seed = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError([(SEED_ENV, "must be an integer")]) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path, apply_env=True):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([("", f"{path}: invalid JSON ({exc})")]) from exc
        cfg = cls.from_dict(d, apply_env=apply_env)
        files = cfg.experts.get("files")
        if files:
            base = Path(path).parent
            cfg.experts["files"] = {k: str(base / v) for k, v in files.items()}
            cfg.experts["counts"] = str(base / cfg.experts["counts"])
        return cfg


# -- early stopping -----------------------------------------------------------------


class EarlyStopping:
    """Tracks the best validation metric; ``update`` returns True when the
    run has gone ``patience`` epochs without a strict improvement."""

    def __init__(self, patience):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.snapshot = None
        self.since = 0

    def update(self, epoch, metric, snapshot=None):
        if metric > self.best:
            self.best, self.best_epoch, self.since = metric, epoch, 0
            self.snapshot = None if snapshot is None else np.array(snapshot, copy=True)
            return False
        self.since += 1
        return self.since >= self.patience


def early_stop(stream, patience, max_epochs=None):
    """Apply the stopping rule to a metric stream (epochs numbered from 1).

    Returns ``(selected_epoch, stopped_epoch)``.
    """
    tracker = EarlyStopping(patience)
    last = 0
    for epoch, value in enumerate(stream, start=1):
        if max_epochs is not None and epoch > max_epochs:
            break
        last = epoch
        if tracker.update(epoch, value):
            break
    return tracker.best_epoch, last


# -- experiment data -------------------------------------------------------------------


@dataclass
class StageData:
    """Expert predictions for one group of samples, row-aligned."""

    labels: np.ndarray
    p_v: np.ndarray
    p_s: np.ndarray | None
    features: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    @property
    def n(self):
        return self.labels.size


@dataclass
class ExperimentData:
    counts: ClassCounts
    fusion_train: StageData
    validation: StageData
    test: StageData | None
    split: data.DatasetSplit | None = None
    expert_counts: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)


def _stage(split, parts, counts, profiles):
    ids, labels, feats = split.subset(*parts)
    pv = experts.simulate_expert(ids, labels, counts, profiles["visual"])
    ps = experts.simulate_expert(ids, labels, counts, profiles["semantic"]) if "semantic" in profiles else None
    return StageData(labels, pv.probs, None if ps is None else ps.probs, feats, ids)


def build_experiment(cfg):
    """Generate the dataset and every expert prediction the protocol needs."""
    if "files" in cfg.experts:
        return _files_experiment(cfg)
    spec = cfg.data
    profile = spec.frequency_profile()
    requested = profile.counts()
    pool = data.synthetic_task(requested.k, spec.dim, requested, spec.separation, cfg.seed, spec.reserve)
    split = data.draw_split(pool, requested, spec.val_fraction, cfg.seed)
    split.profile = profile.to_dict()
    train_counts = split.train_counts()
    profiles = {"visual": cfg.expert_profile("visual")}
    if cfg.scenario != "vision-only":
        profiles["semantic"] = cfg.expert_profile("semantic")

    if cfg.large_scale:
        fit_counts = train_counts
        fusion_parts = ("train",)
    else:
        split = data.holdout_split(split, spec.tail_fraction, spec.head_fraction, seed=cfg.seed)
        if not np.any(split.mask("holdout")):
            raise DataError("hold-out set is empty; the small-scale path needs one")
        fit_counts = split.counts_of("train")
        fusion_parts = ("holdout",) if cfg.fusion_train_on == "holdout" else ("holdout", "train")
    # stage 1: experts fit without the hold-out; stage 3: refit on all training data
    fusion_train = _stage(split, fusion_parts, fit_counts, profiles)
    validation = _stage(split, ("validation",), train_counts, profiles)
    test = _stage(split, ("test",), train_counts, profiles)
    return ExperimentData(
        counts=train_counts,
        fusion_train=fusion_train,
        validation=validation,
        test=test,
        split=split,
        expert_counts={"stage1": fit_counts.tolist(), "stage3": train_counts.tolist()},
        flags=dict(split.flags),
    )


def _load_pair(files, stem, single):
    pv = experts.load_predictions(files[f"{stem}_v"])
    if pv.labels is None:
        raise DataError(f"{files[f'{stem}_v']}: labels are required")
    ps = None
    if not single:
        ps = experts.load_predictions(files[f"{stem}_s"])
        experts.check_aligned(pv, ps)
    return StageData(pv.labels, pv.probs, None if ps is None else ps.probs, None, pv.sample_ids)


def _files_experiment(cfg):
    files = cfg.experts["files"]
    single = cfg.scenario == "vision-only"
    counts = data.load_counts(cfg.experts["counts"])
    test = _load_pair(files, "test", single) if "test_v" in files else None
    return ExperimentData(
        counts=counts,
        fusion_train=_load_pair(files, "fusion", single),
        validation=_load_pair(files, "val", single),
        test=test,
        flags={"source": "files"},
    )


# -- training --------------------------------------------------------------------------


def selection_value(metric, scores, labels, counts):
    pred = np.argmax(scores, axis=1)
    if metric == "acc_pc":
        return metrics.acc_pc(pred, labels)
    return metrics.acc_lt(pred, labels, counts.prior)


@dataclass
class FitResult:
    config: fusion.FusionConfig
    params: fusion.FusionParams
    metric: float
    selected_epoch: int
    history: list


def train_fusion(fc, train, val, counts, metric, epochs, batch_size, patience, seed, balanced=False):
    """ADAM training of one fusion configuration with early stopping.

    Epoch 0 is the initialization; the returned parameters are the snapshot
    from the epoch with the best validation metric.
    """
    k = counts.k
    params = fusion.init_params(k, fc, seed=seed)
    theta = params.ravel()
    state = core.AdamState.zeros(theta.size, lr=fc.lr)
    class_weights = core.balanced_class_weights(counts.counts) if balanced else None
    rng = np.random.default_rng(seed)

    def val_metric(p):
        scores = fusion.predict_scores(val.p_v, val.p_s, counts, p, fc)
        return selection_value(metric, scores, val.labels, counts)

    tracker = EarlyStopping(patience)
    m0 = val_metric(params)
    history = [{"epoch": 0, "train_loss": None, "val_metric": m0}]
    tracker.update(0, m0, theta)
    n = train.n
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = fusion.training_loss(
                train.p_v[idx], None if train.p_s is None else train.p_s[idx], train.labels[idx],
                counts, params, fc, class_weights=class_weights,
            )
            total += loss * idx.size
            theta, state = core.adam_step(theta, grads.ravel(), state)
            params = params.unravel(theta)
        m = val_metric(params)
        history.append({"epoch": epoch, "train_loss": total / n, "val_metric": m})
        if tracker.update(epoch, m, theta):
            break
    best = params.unravel(tracker.snapshot)
    return FitResult(fc, best, tracker.best, tracker.best_epoch, history)


def derive_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def grid_search(cfg, exp=None):
    """Exhaustive search over the configuration grid.

    Returns ``(best FitResult, leaderboard)``. The leaderboard is sorted by
    validation metric (descending), then parameter count, then learning rate.
    Each grid point trains with its own derived seed, so the result does not
    depend on evaluation order.
    """
    if exp is None:
        exp = build_experiment(cfg)
    metric = cfg.selection_metric
    results = []
    for i, fc in enumerate(cfg.fusion_configs()):
        r = train_fusion(
            fc, exp.fusion_train, exp.validation, exp.counts, metric,
            cfg.epochs, cfg.batch_size, cfg.patience, derive_seed(cfg.seed, i), cfg.balanced,
        )
        n_params = r.params.n_params
        results.append((r, {
            "index": i,
            "config": fc.to_dict(),
            "metric": r.metric,
            "selected_epoch": r.selected_epoch,
            "epochs_run": len(r.history) - 1,
            "n_params": n_params,
        }))
        log.info("grid point %d %s: %s=%.4f", i, fc, metric, r.metric)
    results.sort(key=lambda t: (-t[1]["metric"], t[1]["n_params"], t[0].config.lr, t[1]["index"]))
    return results[0][0], [entry for _, entry in results]


# -- evaluation ---------------------------------------------------------------------------


def method_scores(stage, counts, fit, gate=None):
    """Score matrices for the trained module, the single experts and the
    fixed fusion baselines on one stage's predictions."""
    out = {"dragon": fusion.predict_scores(stage.p_v, stage.p_s, counts, fit.params, fit.config)}
    out["visual"] = stage.p_v
    if stage.p_s is not None:
        out["semantic"] = stage.p_s
        for mode in ("max", "avg", "product"):
            out[mode] = fusion.fusion_baselines(stage.p_v, stage.p_s, mode)
        if gate is not None and stage.features is not None:
            out["mixture"] = fusion.fusion_baselines(stage.p_v, stage.p_s, "mixture", gate, stage.features)
    return out


def evaluate_methods(stage, counts, fit, gate=None):
    res = {}
    for name, scores in method_scores(stage, counts, fit, gate).items():
        res[name] = metrics.evaluate(scores, stage.labels, counts)
    return res


@dataclass
class TrainReport:
    scenario: str
    metric: str
    best_config: dict
    best_metric: float
    selected_epoch: int
    history: list
    leaderboard: list
    params: fusion.FusionParams
    fusion_config: fusion.FusionConfig
    counts: ClassCounts
    validation: dict
    test: dict
    sizes: dict
    flags: dict
    gate: fusion.MixtureGate | None = None

    def to_dict(self):
        def summary(block):
            return {name: r.headline() for name, r in block.items()}

        return {
            "scenario": self.scenario,
            "metric": self.metric,
            "best_config": self.best_config,
            "best_metric": self.best_metric,
            "selected_epoch": self.selected_epoch,
            "n_params": self.params.n_params,
            "history": self.history,
            "leaderboard": self.leaderboard,
            "counts": self.counts.tolist(),
            "validation": summary(self.validation),
            "test": summary(self.test),
            "sizes": self.sizes,
            "flags": _jsonable(self.flags),
        }


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def three_stage_train(cfg, exp=None):
    if exp is None:
        exp = build_experiment(cfg)
    best, board = grid_search(cfg, exp)
    gate = None
    tr = exp.fusion_train
    if tr.features is not None and tr.p_s is not None:
        gate = fusion.train_mixture_gate(tr.features, tr.p_v, tr.p_s, tr.labels, seed=cfg.seed)
    validation = evaluate_methods(exp.validation, exp.counts, best, gate)
    test = evaluate_methods(exp.test, exp.counts, best, gate) if exp.test is not None else {}
    sizes = {
        "fusion_train": exp.fusion_train.n,
        "validation": exp.validation.n,
        "test": 0 if exp.test is None else exp.test.n,
        "train_total": exp.counts.total,
    }
    flags = dict(exp.flags)
    flags["path"] = "large-scale" if cfg.large_scale else "small-scale"
    if exp.expert_counts:
        flags["expert_counts"] = exp.expert_counts
    return TrainReport(
        scenario=cfg.scenario,
        metric=cfg.selection_metric,
        best_config=best.config.to_dict(),
        best_metric=best.metric,
        selected_epoch=best.selected_epoch,
        history=best.history,
        leaderboard=board,
        params=best.params,
        fusion_config=best.config,
        counts=exp.counts,
        validation=validation,
        test=test,
        sizes=sizes,
        flags=flags,
        gate=gate,
    )


def save_report(report, path):
    data.write_text_atomic(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
