"""One test per acceptance criterion. Each prints a PASS/FAIL line (collected
again in the terminal summary) and then asserts."""

import time

import numpy as np

from ltfuse import core, data, experts, fusion, metrics, training
from ltfuse.data import ClassCounts

from cli_flow import rerun_in_place_identical, rerun_redirected_identical, run_every_command
from oracles import profile_by_summation, random_rows

END_TO_END_CONFIG = {
    "seed": 0,
    "grid": {"filters": [1, 2], "degree": [2, 3], "lr": [1e-4, 1e-3], "beta": [-1.0, 0.0, 1.0]},
    "patience": 50,
    "batch_size": 32,
    "metric": "acc_pc",
}


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


def test_criterion_01_gradients(acceptance):
    t0 = time.perf_counter()
    errs, seen = [], set()
    for seed in range(24):
        r = np.random.default_rng(1000 + seed)
        k, d, F = int(r.integers(4, 13)), int(r.integers(2, 5)), int(r.integers(1, 5))
        seen.add((d, F))
        cfg = fusion.FusionConfig(degree=d, filters=F, beta=float(r.uniform(-2, 2)),
                                  sort_by=str(r.choice(["visual", "semantic"])))
        counts = ClassCounts(r.integers(1, 200, k))
        p0 = fusion.init_params(k, cfg, seed=seed)
        p = p0.unravel(r.normal(scale=0.5, size=p0.n_params))
        P_v, P_s = random_rows(r, 4, k, sharp=2.0), random_rows(r, 4, k, sharp=2.0)
        y = r.integers(0, k, 4)

        def f(theta):
            return fusion.training_loss(P_v, P_s, y, counts, p.unravel(theta), cfg)[0]

        g = fusion.training_loss(P_v, P_s, y, counts, p, cfg)[1].ravel()
        errs.append(_rel_err(g, core.finite_diff_grad(f, p.ravel(), eps=1e-5)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-4 and len(errs) >= 20 and elapsed < 10
    acceptance(1, ok, f"{len(errs)} instances, max rel err {max(errs):.2e}, {len(seen)} (d,F) pairs, {elapsed:.2f}s")
    assert ok


def test_criterion_02_harmonic_mean(acceptance):
    a, b = metrics.acc_h(72.7, 0.6), metrics.acc_h(71.5, 1.2)
    ok = abs(a - 1.2) <= 0.05 and abs(b - 2.4) <= 0.05
    acceptance(2, ok, f"acc_h(72.7,0.6)={a:.3f}, acc_h(71.5,1.2)={b:.3f}")
    assert ok


def test_criterion_03_metric_identities(acceptance):
    r = np.random.default_rng(3)
    worst_lt = 0.0
    for _ in range(100):
        k = int(r.integers(2, 30))
        true = np.r_[np.arange(k), r.integers(0, k, int(r.integers(0, 200)))]
        pred = np.where(r.random(true.size) < 0.6, true, r.integers(0, k, true.size))
        diff = abs(metrics.acc_lt(pred, true, np.full(k, 1 / k)) - metrics.acc_pc(pred, true))
        worst_lt = max(worst_lt, diff)
    xs = r.random(100)
    worst_h = max(abs(metrics.acc_h(x, x) - x) for x in xs)
    ok = worst_lt <= 1e-12 and worst_h <= 1e-12
    acceptance(3, ok, f"max |acc_lt - acc_pc| {worst_lt:.1e}, max |acc_h(x,x) - x| {worst_h:.1e}")
    assert ok


def test_criterion_04_permutation_equivariance(acceptance):
    r = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        k = int(r.integers(3, 20))
        cfg = fusion.FusionConfig(filters=int(r.integers(1, 5)), degree=int(r.integers(2, 5)))
        p0 = fusion.init_params(k, cfg, seed=i)
        p = p0.unravel(r.normal(scale=0.5, size=p0.n_params))
        counts = r.integers(1, 300, k)
        p_v, p_s = r.dirichlet(np.ones(k)), r.dirichlet(np.ones(k))
        if np.unique(p_v).size < k:
            continue
        rho = r.permutation(k)
        a = fusion.forward(p_v, p_s, counts, p, cfg).scores
        b = fusion.forward(p_v[rho], p_s[rho], counts[rho], p, cfg).scores
        worst = max(worst, np.max(np.abs(b - a[rho])))
    ok = worst < 1e-12
    acceptance(4, ok, f"100 permutations, max |delta| {worst:.1e}")
    assert ok


def test_criterion_05_smdragon_argmax(acceptance):
    r = np.random.default_rng(5)
    violations = 0
    for i in range(1000):
        k = int(r.integers(2, 40))
        cfg = fusion.FusionConfig(single_modality=True, filters=int(r.integers(1, 5)), degree=int(r.integers(2, 5)))
        p0 = fusion.init_params(k, cfg, seed=i)
        p = p0.unravel(r.normal(size=p0.n_params))
        # only the constant term may vary; the count terms are switched off
        p.v_w[1:] = 0.0
        p.v_b[1:] = 0.0
        p_v = r.dirichlet(np.full(k, 0.5))
        counts = r.integers(1, 500, k)
        s = fusion.smdragon_forward(p_v, counts, p, cfg)
        violations += int(np.argmax(s) != np.argmax(p_v))
    ok = violations == 0
    acceptance(5, ok, f"1000 inputs, {violations} argmax violations")
    assert ok


def test_criterion_06_profile(acceptance):
    c = data.exponential_profile(200, 43, 3).counts
    want, want_total = profile_by_summation(200, 43, 3)
    ok = (c[0] == 43 and c[-1] == 3 and bool(np.all(np.diff(c) <= 0))
          and int(c.sum()) == want_total and c.tolist() == want)
    acceptance(6, ok, f"endpoints {c[0]}/{c[-1]}, total {c.sum()} vs oracle {want_total}")
    assert ok


def test_criterion_07_holdout_fractions(acceptance):
    r = np.random.default_rng(7)
    mismatches, classes = 0, 0
    for i in range(50):
        k = int(r.integers(4, 30))
        counts = data.exponential_profile(k, int(r.integers(20, 120)), int(r.integers(2, 8)))
        pool = data.synthetic_task(k, 3, counts, 3.0, seed=i, reserve=40)
        split = data.holdout_split(data.draw_split(pool, counts, 0.2, seed=i), seed=i)
        n = counts.counts
        head = n > np.median(n)
        assert split.flags["head_classes"] == np.flatnonzero(head).tolist()
        for y in range(k):
            want = -(-int(n[y]) // 5) if head[y] else -(-int(n[y]) // 2)
            got = int(np.sum((split.labels == y) & (split.partition == "holdout")))
            mismatches += int(got != want)
            classes += 1
    ok = mismatches == 0
    acceptance(7, ok, f"50 splits, {classes} classes, {mismatches} size mismatches")
    assert ok


def test_criterion_08_familiarity_bias(acceptance):
    t0 = time.perf_counter()
    cfg = training.ExperimentConfig.from_dict({"seed": 0}, apply_env=False)
    exp = training.build_experiment(cfg)
    st = exp.test
    preds = experts.PredictionMatrix(st.p_v, st.sample_ids, st.labels)
    rho = experts.bias_report(preds, st.labels, exp.counts).correlation
    mat, _ = metrics.confusion_matrix(preds.argmax(), st.labels, exp.counts)
    skew = metrics.head_skew(mat)
    elapsed = time.perf_counter() - t0
    ok = exp.counts.k == 50 and rho > 0.5 and skew > 1.5 and elapsed < 30
    acceptance(8, ok, f"spearman rho {rho:.3f}, head skew {skew:.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_09_end_to_end(acceptance):
    t0 = time.perf_counter()
    reports = {}
    for variant in ("per-sample", "per-class"):
        cfg = training.ExperimentConfig.from_dict(dict(END_TO_END_CONFIG, variant=variant), apply_env=False)
        reports[variant] = training.three_stage_train(cfg)
    elapsed = time.perf_counter() - t0
    a = {n: r.acc_pc for n, r in reports["per-sample"].test.items()}
    per_class = reports["per-class"].test["dragon"].acc_pc
    ok = (a["dragon"] > a["visual"] and a["dragon"] > a["semantic"]
          and a["dragon"] >= max(a["max"], a["avg"], a["product"])
          and a["dragon"] >= per_class and elapsed < 300)
    detail = "  ".join(f"{n} {v:.3f}" for n, v in a.items())
    acceptance(9, ok, f"test acc_pc: {detail}  per-class {per_class:.3f}  ({elapsed:.0f}s)")
    assert ok


def test_criterion_10_parameter_budget(acceptance):
    n = fusion.count_params(200, fusion.FusionConfig(degree=3, filters=2))
    ok = 1015 / 2 <= n <= 1015 * 2
    acceptance(10, ok, f"{n} trainable parameters vs 1015")
    assert ok


def test_criterion_11_rerun_determinism(acceptance, tmp_path):
    manifests = run_every_command(tmp_path / "run")
    bad = {}
    for command, manifest in manifests.items():
        in_place = rerun_in_place_identical(manifest)
        ext = {"gen-data": "x.json", "simulate": "x.csv"}.get(command, "x")
        moved = rerun_redirected_identical(command, manifest, tmp_path / command / ext)
        if in_place or moved:
            bad[command] = in_place + moved
    ok = not bad
    acceptance(11, ok, f"{len(manifests)} commands rerun, differing artifacts: {bad or 'none'}")
    assert ok
