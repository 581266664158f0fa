"""Command-line entry point.

Every command writes a run manifest next to its outputs. ``ltfuse rerun
MANIFEST`` replays the recorded command line with the recorded seed, which
reproduces the outputs byte for byte.
"""

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, data, experts, fusion, metrics, training
from .data import write_csv_atomic, write_text_atomic
from .errors import ConfigError, DataError, FormatError, InvalidInputError, LtfuseError, NumericError
from .training import SEED_ENV

log = logging.getLogger("ltfuse")

MANIFEST_FORMAT = "ltfuse-run"
EVAL_MODES = ("dragon", "smdragon", "max", "avg", "product", "mixture", "per-class-ablation")


class UsageError(ConfigError):
    pass


# -- run manifest ------------------------------------------------------------------


def resolve_seed(flag_value, default=0):
    """``LTFUSE_SEED`` wins over the flag, which wins over the default."""
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError([(SEED_ENV, "must be an integer")]) from exc
    return default if flag_value is None else int(flag_value)


def write_manifest(path, command, argv, config, seed, artifacts, started):
    doc = {
        "format": MANIFEST_FORMAT,
        "tool_version": __version__,
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "env": {SEED_ENV: os.environ.get(SEED_ENV)},
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "duration_s": round(time.monotonic() - started, 3),
    }
    write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _file_manifest(out):
    out = Path(out)
    return out.with_name(out.stem + ".run.json")


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args, argv, started):
    if args.profile == "exp":
        extra = [f for f in ("k_head", "n_head", "k_tail", "shots") if getattr(args, f) is not None]
        if extra:
            raise UsageError([(f"--{e.replace('_', '-')}", "only valid with --profile two-level") for e in extra])
        profile = data.FrequencyProfile("exponential", k=args.k, n_max=args.n_max, n_min=args.n_min)
    else:
        missing = [f for f in ("k_head", "n_head", "k_tail", "shots") if getattr(args, f) is None]
        if missing:
            raise UsageError([(f"--{m.replace('_', '-')}", "required with --profile two-level") for m in missing])
        profile = data.FrequencyProfile(
            "two-level", k_head=args.k_head, n_head=args.n_head, k_tail=args.k_tail, shots=args.shots
        )
    try:
        counts = profile.counts()
    except (InvalidInputError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    seed = resolve_seed(args.seed)
    pool = data.synthetic_task(counts.k, args.dim, counts, args.separation, seed, args.reserve)
    split = data.draw_split(pool, counts, args.val_fraction, seed)
    split.profile = profile.to_dict()
    if args.holdout:
        split = data.holdout_split(split, seed=seed)
    out = Path(args.out)
    features = out.with_suffix(".features.csv")
    data.save_split(split, out, features)
    stats = data.profile_stats(split.train_counts())
    print(
        f"classes {stats['classes']}  total {stats['total']}  max {stats['max']}  min {stats['min']}"
        f"  mean {stats['mean']:.1f}  median {stats['median']:.1f}"
    )
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    config["profile_spec"] = profile.to_dict()
    write_manifest(_file_manifest(out), "gen-data", argv, config, seed,
                   {"split": out, "features": features}, started)


def _profile_overrides(args):
    keys = ("s_min", "s_max", "gamma", "tau", "familiarity", "difficulty", "margin")
    return {k: getattr(args, k) for k in keys if getattr(args, k) is not None}


def cmd_simulate(args, argv, started):
    split = data.load_split(args.split)
    seed = resolve_seed(args.seed, default=1 if args.profile == "visual" else 2)
    factory = experts.ExpertProfile.visual if args.profile == "visual" else experts.ExpertProfile.semantic
    try:
        profile = factory(seed=seed, **_profile_overrides(args))
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    counts = split.counts_of("train") if args.stage == 1 else split.train_counts()
    parts = tuple(p.strip() for p in args.parts.split(","))
    preds = experts.simulate_on_split(split, profile, counts, parts)
    out = Path(args.out)
    experts.save_predictions(preds, out)
    report = experts.bias_report(preds, preds.labels, counts)
    print(f"spearman rho(count, mean true-class confidence) = {report.correlation:.4f}")
    artifacts = {"predictions": out}
    if args.bias_out:
        write_csv_atomic(args.bias_out, _curve_rows(report))
        artifacts["bias"] = args.bias_out
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    config["expert"] = profile.to_dict()
    write_manifest(_file_manifest(out), "simulate", argv, config, seed, artifacts, started)


def _load_config(path):
    if not Path(path).is_file():
        raise UsageError([("--config", f"{path}: no such file")])
    return training.ExperimentConfig.load(path)


def _leaderboard_rows(board):
    head = ["rank", "index", "filters", "degree", "lr", "beta", "l2", "metric", "selected_epoch", "n_params"]
    rows = [head]
    for r, e in enumerate(board):
        c = e["config"]
        rows.append([str(r), str(e["index"]), str(c["filters"]), str(c["degree"]), repr(c["lr"]),
                     repr(c["beta"]), repr(c["l2"]), repr(e["metric"]), str(e["selected_epoch"]), str(e["n_params"])])
    return rows


def _save_stage_predictions(exp, out_dir):
    """Per-stage expert predictions plus counts, so ``eval`` can run on them."""
    paths = {}
    stages = {"fusion": exp.fusion_train, "val": exp.validation, "test": exp.test}
    for name, st in stages.items():
        if st is None:
            continue
        for side, probs in (("v", st.p_v), ("s", st.p_s)):
            if probs is None:
                continue
            p = out_dir / f"{name}_{side}.csv"
            experts.save_predictions(experts.PredictionMatrix(probs, st.sample_ids, st.labels), p)
            paths[f"{name}_{side}"] = p
        if st.features is not None:
            p = out_dir / f"{name}_features.csv"
            data.save_features(p, st.sample_ids, st.labels, st.features)
            paths[f"{name}_features"] = p
    p = out_dir / "counts.csv"
    data.save_counts(p, exp.counts)
    paths["counts"] = p
    return paths


def cmd_train(args, argv, started):
    cfg = _load_config(args.config)
    out_dir = Path(args.out_dir)
    exp = training.build_experiment(cfg)
    report = training.three_stage_train(cfg, exp)
    artifacts = {"report": out_dir / "report.json", "checkpoint": out_dir / "checkpoint.json",
                 "leaderboard": out_dir / "leaderboard.csv"}
    training.save_report(report, artifacts["report"])
    extra = {"gate": report.gate.to_dict()} if report.gate is not None else None
    fusion.save_checkpoint(artifacts["checkpoint"], report.params, report.fusion_config, report.counts, extra)
    write_csv_atomic(artifacts["leaderboard"], _leaderboard_rows(report.leaderboard))
    if args.save_predictions:
        artifacts.update(_save_stage_predictions(exp, out_dir))
    print(f"best {report.best_config} {report.metric}={report.best_metric:.4f} (epoch {report.selected_epoch})")
    for block, res in (("validation", report.validation), ("test", report.test)):
        for name, r in res.items():
            print(f"{block:10s} {name:9s} acc_pc {metrics.pct(r.acc_pc)}  acc_lt {metrics.pct(r.acc_lt)}"
                  f"  acc_h {metrics.pct(r.acc_h)}")
    write_manifest(out_dir / "run_manifest.json", "train", argv, training._jsonable(cfg.to_dict()), cfg.seed,
                   artifacts, started)


def cmd_gridsearch(args, argv, started):
    cfg = _load_config(args.config)
    out_dir = Path(args.out_dir)
    best, board = training.grid_search(cfg)
    artifacts = {"leaderboard": out_dir / "leaderboard.json", "leaderboard_csv": out_dir / "leaderboard.csv"}
    doc = {"metric": cfg.selection_metric, "best_config": best.config.to_dict(), "best_metric": best.metric,
           "leaderboard": board}
    write_text_atomic(artifacts["leaderboard"], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_csv_atomic(artifacts["leaderboard_csv"], _leaderboard_rows(board))
    for r, e in enumerate(board[:10]):
        print(f"{r:3d} {e['config']['filters']}F d{e['config']['degree']} lr {e['config']['lr']:g}"
              f" beta {e['config']['beta']:g}  {cfg.selection_metric} {e['metric']:.4f}")
    write_manifest(out_dir / "run_manifest.json", "gridsearch", argv, training._jsonable(cfg.to_dict()), cfg.seed,
                   artifacts, started)


def _read_labels(path):
    ids, labels, _ = data.load_features(path)
    return ids, labels


def _curve_rows(report):
    rows = [["rank", "class", "train_count", "eval_count", "mean_confidence"]]
    for r in report.rows():
        mc = "" if r["mean_confidence"] is None else repr(r["mean_confidence"])
        rows.append([str(r["rank"]), str(r["class"]), str(r["train_count"]), str(r["eval_count"]), mc])
    return rows


def _mode_scores(args, p_v, p_s, counts):
    mode = args.mode
    if mode in ("max", "avg", "product"):
        _need(p_s, "--preds-s", mode)
        return fusion.fusion_baselines(p_v.probs, p_s.probs, mode)
    if mode == "mixture":
        _need(p_s, "--preds-s", mode)
        if not args.checkpoint or not args.features:
            raise UsageError([("--mode mixture", "needs --checkpoint (with a gate) and --features")])
        _, _, _, doc = fusion.load_checkpoint(args.checkpoint)
        if "gate" not in doc:
            raise DataError(f"{args.checkpoint}: checkpoint has no mixture gate")
        gate = fusion.MixtureGate.from_dict(doc["gate"])
        f_ids, _, feats = data.load_features(args.features)
        pos = {int(s): i for i, s in enumerate(f_ids)}
        try:
            feats = feats[[pos[int(s)] for s in p_v.sample_ids]]
        except KeyError as exc:
            raise DataError(f"sample {exc.args[0]} has no feature row") from exc
        return fusion.fusion_baselines(p_v.probs, p_s.probs, "mixture", gate, feats)
    if not args.checkpoint:
        raise UsageError([("--checkpoint", f"required with --mode {mode}")])
    params, config, ck_counts, _ = fusion.load_checkpoint(args.checkpoint)
    if ck_counts.k != counts.k:
        raise DataError("checkpoint and --counts disagree on the class count")
    if mode == "smdragon":
        if not config.single_modality:
            raise UsageError([("--mode smdragon", "checkpoint is not single-modality")])
        return fusion.smdragon_forward(p_v.probs, counts, params, config)
    _need(p_s, "--preds-s", mode)
    if mode == "per-class-ablation":
        if not config.per_class:
            raise UsageError([("--mode per-class-ablation", "checkpoint was not trained per-class")])
        return fusion.per_class_weight_ablation(p_v.probs, p_s.probs, counts, params, config).scores
    if config.single_modality or config.per_class:
        raise UsageError([("--mode dragon", "checkpoint is single-modality or per-class")])
    return fusion.forward(p_v.probs, p_s.probs, counts, params, config).scores


def _need(value, flag, mode):
    if value is None:
        raise UsageError([(flag, f"required with --mode {mode}")])


def cmd_eval(args, argv, started):
    if args.acc_ms is not None or args.acc_fs is not None:
        if args.acc_ms is None or args.acc_fs is None:
            raise UsageError([("--acc-ms/--acc-fs", "give both")])
        print(f"acc_h {metrics.acc_h(args.acc_ms, args.acc_fs):.1f}")
        if not args.preds_v:
            return
    for flag in ("preds_v", "counts", "out"):
        if not getattr(args, flag):
            raise UsageError([(f"--{flag.replace('_', '-')}", "required")])
    p_v = experts.load_predictions(args.preds_v)
    p_s = experts.load_predictions(args.preds_s) if args.preds_s else None
    if p_s is not None:
        experts.check_aligned(p_v, p_s)
    counts = data.load_counts(args.counts)
    if counts.k != p_v.k:
        raise DataError(f"counts cover {counts.k} classes but predictions have {p_v.k}")
    labels = p_v.labels
    if args.labels:
        l_ids, l_labels = _read_labels(args.labels)
        pos = {int(s): i for i, s in enumerate(l_ids)}
        try:
            labels = l_labels[[pos[int(s)] for s in p_v.sample_ids]]
        except KeyError as exc:
            raise DataError(f"sample {exc.args[0]} has no label") from exc
    if labels is None:
        raise DataError("no labels: prediction files carry none and --labels was not given")

    scores = _mode_scores(args, p_v, p_s, counts)
    report = metrics.evaluate(scores, labels, counts, num_bins=args.bins)
    out = Path(args.out)
    artifacts = {"metrics": out / "metrics.json", "reliability": out / "reliability.csv",
                 "confidence_curve": out / "confidence_curve.csv", "confusion": out / "confusion.csv"}
    metrics.save_report(report, artifacts["metrics"])
    metrics.save_reliability_csv(report.reliability_bins, artifacts["reliability"])
    normalized = experts.PredictionMatrix(scores / scores.sum(axis=1, keepdims=True), p_v.sample_ids, labels)
    write_csv_atomic(artifacts["confidence_curve"], _curve_rows(experts.bias_report(normalized, labels, counts)))
    metrics.save_confusion_csv(np.asarray(report.confusion), report.class_order, artifacts["confusion"])

    wanted = [m.strip() for m in args.metric_set.split(",")]
    head = report.headline()
    unknown = [m for m in wanted if m not in head]
    if unknown:
        raise UsageError([("--metric-set", f"unknown metrics {unknown}; choose from {sorted(head)}")])
    print(f"mode {args.mode}: " + "  ".join(
        f"{m} {head[m]:.4f}" if m == "ece" else f"{m} {metrics.pct(head[m])}" for m in wanted))
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    write_manifest(out / "run_manifest.json", "eval", argv, config, None, artifacts, started)


OUTPUT_FLAGS = {"gen-data": "--out", "simulate": "--out", "train": "--out-dir", "gridsearch": "--out-dir",
                "eval": "--out"}


@contextmanager
def _replay_env(doc):
    saved_cwd, saved_seed = os.getcwd(), os.environ.get(SEED_ENV)
    recorded = (doc.get("env") or {}).get(SEED_ENV)
    if recorded is None:
        os.environ.pop(SEED_ENV, None)
    else:
        os.environ[SEED_ENV] = recorded
    os.chdir(doc.get("cwd") or saved_cwd)
    try:
        yield
    finally:
        os.chdir(saved_cwd)
        if saved_seed is None:
            os.environ.pop(SEED_ENV, None)
        else:
            os.environ[SEED_ENV] = saved_seed


def cmd_rerun(args, argv, started):
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such manifest") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a run manifest")
    replay = list(doc["argv"])
    if args.out:
        flag = OUTPUT_FLAGS[doc["command"]]
        new = str(Path(args.out).resolve())
        for i, a in enumerate(replay):
            if a == flag and i + 1 < len(replay):
                replay[i + 1] = new
            elif a.startswith(flag + "="):
                replay[i] = f"{flag}={new}"
    with _replay_env(doc):
        return run(replay)


# -- parser ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ltfuse", description="Late fusion of long-tail experts.")
    p.add_argument("--version", action="version", version=f"ltfuse {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic long-tail split")
    g.add_argument("--profile", choices=("exp", "two-level"), default="exp", help="class-frequency profile")
    g.add_argument("--k", type=int, default=50, help="classes (exp)")
    g.add_argument("--n-max", type=int, default=200, help="head class count (exp)")
    g.add_argument("--n-min", type=int, default=5, help="tail class count (exp)")
    g.add_argument("--k-head", type=int, help="many-shot classes (two-level)")
    g.add_argument("--n-head", type=int, help="samples per many-shot class (two-level)")
    g.add_argument("--k-tail", type=int, help="few-shot classes (two-level)")
    g.add_argument("--shots", type=int, help="samples per few-shot class (two-level)")
    g.add_argument("--dim", type=int, default=16, help="feature dimension")
    g.add_argument("--separation", type=float, default=4.0, help="centroid radius in noise units")
    g.add_argument("--reserve", type=int, default=60, help="extra samples per class for validation/test")
    g.add_argument("--val-fraction", type=float, default=0.2, help="validation size relative to train/k")
    g.add_argument("--holdout", action="store_true", help="also carve the fusion hold-out out of train")
    g.add_argument("--seed", type=int, help=f"random seed (default 0; {SEED_ENV} overrides)")
    g.add_argument("--out", required=True, help="split manifest path (.json)")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="simulate an expert's predictions on a split")
    s.add_argument("--split", required=True, help="split manifest from gen-data")
    s.add_argument("--profile", choices=("visual", "semantic"), required=True, help="expert bias preset")
    s.add_argument("--seed", type=int, help=f"expert seed (default 1 visual, 2 semantic; {SEED_ENV} overrides)")
    s.add_argument("--parts", default="test", help="comma-separated partitions to predict")
    s.add_argument("--stage", type=int, choices=(1, 3), default=3,
                   help="1: expert fit without the hold-out, 3: fit on all training data")
    for name in ("s-min", "s-max", "gamma", "tau", "familiarity", "difficulty", "margin"):
        s.add_argument(f"--{name}", type=float, help=f"override the preset's {name.replace('-', '_')}")
    s.add_argument("--bias-out", help="also write the per-class confidence curve CSV here")
    s.add_argument("--out", required=True, help="prediction CSV path")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="three-stage training with grid search")
    t.add_argument("--config", required=True, help="experiment config (JSON)")
    t.add_argument("--out-dir", required=True, help="directory for report, checkpoint and manifest")
    t.add_argument("--save-predictions", action="store_true", help="also write per-stage expert predictions")
    t.set_defaults(func=cmd_train)

    gs = sub.add_parser("gridsearch", help="grid search only; writes the leaderboard")
    gs.add_argument("--config", required=True, help="experiment config (JSON)")
    gs.add_argument("--out-dir", required=True, help="directory for the leaderboard and manifest")
    gs.set_defaults(func=cmd_gridsearch)

    e = sub.add_parser("eval", help="evaluate a fusion mode on prediction files")
    e.add_argument("--mode", choices=EVAL_MODES, default="dragon", help="fusion method")
    e.add_argument("--checkpoint", help="trained module (dragon, smdragon, per-class-ablation, mixture gate)")
    e.add_argument("--preds-v", help="visual expert prediction CSV")
    e.add_argument("--preds-s", help="semantic expert prediction CSV")
    e.add_argument("--counts", help="training counts: split manifest or count CSV")
    e.add_argument("--labels", help="CSV with sample_id,label columns, if predictions carry no labels")
    e.add_argument("--features", help="feature CSV for the mixture gate")
    e.add_argument("--metric-set", default="acc_pc,acc_lt,acc_ms,acc_fs,acc_h,ece", help="metrics to print")
    e.add_argument("--bins", type=int, default=10, help="reliability bins")
    e.add_argument("--acc-ms", type=float, help="many-shot accuracy, to print acc_h directly")
    e.add_argument("--acc-fs", type=float, help="few-shot accuracy, to print acc_h directly")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rerun", help="replay a command from its run manifest")
    r.add_argument("manifest", help="run manifest JSON")
    r.add_argument("--out", help="redirect the command's output to this path")
    r.set_defaults(func=cmd_rerun)
    return p


def run(argv):
    """Parse and execute; raises on error (``main`` maps errors to exit codes)."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args, argv, time.monotonic())


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        run(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except LtfuseError as exc:
        print(f"ltfuse: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"ltfuse: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"ltfuse: numeric error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
