import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltfuse import data, experts, metrics
from ltfuse.data import ClassCounts
from ltfuse.errors import DataError, DimensionError, FormatError, InvalidInputError

from oracles import random_rows


@pytest.fixture(scope="module")
def task():
    """50-class exponential split with 50 evaluation samples per class."""
    counts = data.exponential_profile(50, 200, 5)
    pool = data.synthetic_task(50, 8, counts, 4.0, seed=0, reserve=60)
    split = data.draw_split(pool, counts, 0.2, seed=0)
    return split, counts


def test_prediction_matrix_validates_rows():
    with pytest.raises(InvalidInputError):
        experts.PredictionMatrix([[0.5, 0.6]], [0])
    with pytest.raises(InvalidInputError):
        experts.PredictionMatrix([[1.2, -0.2]], [0])
    with pytest.raises(DimensionError):
        experts.PredictionMatrix(np.zeros((0, 3)), [])
    with pytest.raises(DimensionError):
        experts.PredictionMatrix([[0.5, 0.5]], [0, 1])


def test_take_reorders_by_id():
    m = experts.PredictionMatrix([[1.0, 0.0], [0.0, 1.0]], [7, 3], [0, 1])
    t = m.take([3, 7])
    assert t.sample_ids.tolist() == [3, 7]
    assert t.labels.tolist() == [1, 0]
    with pytest.raises(DataError):
        m.take([4])


def test_check_aligned():
    a = experts.PredictionMatrix([[1.0, 0.0]], [1])
    with pytest.raises(DataError):
        experts.check_aligned(a, experts.PredictionMatrix([[1.0, 0.0]], [2]))


# profiles


def test_profile_invariants():
    with pytest.raises(InvalidInputError):
        experts.ExpertProfile(s_min=0.8, s_max=0.5)
    with pytest.raises(InvalidInputError):
        experts.ExpertProfile(tau=0.0)
    with pytest.raises(InvalidInputError):
        experts.ExpertProfile(kind="acoustic")


def test_skill_curves():
    m = np.array([0.0, 0.25, 1.0])
    v = experts.ExpertProfile.visual(gamma=2.0)
    assert np.allclose(v.skill(m), v.s_min + (v.s_max - v.s_min) * m**2)
    s = experts.ExpertProfile.semantic()
    assert np.allclose(s.skill(m), s.s_min + (s.s_max - s.s_min) * (1 - m))
    assert np.all(experts.ExpertProfile(kind="custom", s_max=0.7).skill(m) == 0.7)


# simulation


def test_simulation_rows_are_stochastic_and_reproducible(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    p = experts.ExpertProfile.visual(seed=5)
    a = experts.simulate_expert(ids, labels, counts, p)
    b = experts.simulate_expert(ids, labels, counts, p)
    assert np.array_equal(a.probs, b.probs)
    assert np.all(np.abs(a.probs.sum(axis=1) - 1) < 1e-9)


def test_simulation_is_per_sample(task):
    """A sample's row does not depend on which other samples are simulated."""
    split, counts = task
    ids, labels, _ = split.subset("test")
    p = experts.ExpertProfile.semantic(seed=3)
    full = experts.simulate_expert(ids, labels, counts, p)
    part = experts.simulate_expert(ids[100:140], labels[100:140], counts, p)
    assert np.array_equal(full.probs[100:140], part.probs)


def test_simulation_empty_split_rejected():
    with pytest.raises(DataError):
        experts.simulate_expert([], [], [3, 2], experts.ExpertProfile())


def test_low_temperature_limit_head_classes_correct(task):
    """With certain recognition and a margin well above the noise, a
    near-zero temperature makes the argmax the true label."""
    split, counts = task
    ids, labels, _ = split.subset("test")
    p = experts.ExpertProfile.visual(s_min=1.0, s_max=1.0, tau=1e-3, difficulty=0.0, margin=20.0, seed=4)
    preds = experts.simulate_expert(ids, labels, counts, p)
    head = np.isin(labels, data.head_classes_for(counts))
    assert np.all(preds.argmax()[head] == labels[head])


def test_visual_profile_correlation_positive(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    preds = experts.simulate_expert(ids, labels, counts, experts.ExpertProfile.visual(seed=11))
    assert experts.bias_report(preds, labels, counts).correlation > 0.5


def test_semantic_profile_correlation_negative(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    preds = experts.simulate_expert(ids, labels, counts, experts.ExpertProfile.semantic(seed=12))
    assert experts.bias_report(preds, labels, counts).correlation < -0.5


def test_semantic_beats_visual_few_among_few(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    tail = np.setdiff1d(np.arange(counts.k), data.head_classes_for(counts))
    vis = experts.simulate_expert(ids, labels, counts, experts.ExpertProfile.visual(seed=1))
    sem = experts.simulate_expert(ids, labels, counts, experts.ExpertProfile.semantic(seed=2))
    assert experts.restricted_accuracy(sem, labels, tail) > experts.restricted_accuracy(vis, labels, tail)


def test_refit_on_fewer_counts_lowers_visual_tail_skill(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    p = experts.ExpertProfile.visual(seed=1)
    full = experts.simulate_expert(ids, labels, counts, p)
    halved = ClassCounts(np.r_[counts.counts[:1], counts.counts[1:] // 2])
    fewer = experts.simulate_expert(ids, labels, halved, p)
    tail = labels >= 25
    acc = lambda m: np.mean(m.argmax()[tail] == labels[tail])  # noqa: E731
    assert acc(fewer) < acc(full)


# CSV


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_predictions_round_trip(tmp_path_factory, n, k, seed):
    r = np.random.default_rng(seed)
    m = experts.PredictionMatrix(random_rows(r, n, k, sharp=3.0), r.permutation(1000)[:n], r.integers(0, k, n))
    path = tmp_path_factory.mktemp("csv") / "p.csv"
    experts.save_predictions(m, path)
    back = experts.load_predictions(path)
    assert np.max(np.abs(back.probs - m.probs)) < 1e-12
    assert np.array_equal(back.sample_ids, m.sample_ids)
    assert np.array_equal(back.labels, m.labels)


def test_unlabeled_round_trip(tmp_path):
    m = experts.PredictionMatrix([[0.25, 0.75]], [4])
    experts.save_predictions(m, tmp_path / "p.csv")
    assert experts.load_predictions(tmp_path / "p.csv").labels is None


def test_load_rejects_bad_row_sum_with_index(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sample_id,label,p_0,p_1\n0,0,0.5,0.5\n1,1,0.4,0.4\n")
    with pytest.raises(FormatError, match="row 1") as exc:
        experts.load_predictions(p)
    assert exc.value.row == 1


def test_load_rejects_column_count_mismatch(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sample_id,label,p_0,p_1,p_2\n0,0,0.25,0.25,0.25,0.25\n")
    with pytest.raises(FormatError):
        experts.load_predictions(p)


def test_load_rejects_bad_header(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,label,p_0\n0,0,1.0\n")
    with pytest.raises(FormatError):
        experts.load_predictions(p)


def test_load_renormalizes_within_tolerance(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sample_id,label,p_0,p_1\n0,0,0.5000004,0.5\n")
    probs = experts.load_predictions(p).probs
    assert abs(probs.sum() - 1) < 1e-15


# bias analysis


def test_bias_report_uniform_rows():
    k = 4
    m = experts.PredictionMatrix(np.full((8, k), 1 / k), np.arange(8))
    labels = np.arange(8) % k
    r = experts.bias_report(m, labels, [40, 30, 20, 10])
    assert np.allclose(r.mean_confidence, 1 / k)
    assert r.correlation == 0.0


def test_bias_report_perfect_predictions_and_absent_class():
    labels = np.array([0, 0, 1])
    m = experts.PredictionMatrix(np.eye(3)[labels], np.arange(3))
    r = experts.bias_report(m, labels, [5, 3, 1])
    assert r.mean_confidence[0] == r.mean_confidence[1] == 1.0
    assert np.isnan(r.mean_confidence[2])
    assert r.rows()[2]["mean_confidence"] is None


def test_bias_report_needs_labels():
    m = experts.PredictionMatrix(np.eye(2), [0, 1])
    with pytest.raises(DataError):
        experts.bias_report(m, [], [1, 1])


def test_restricted_accuracy_examples(rng):
    probs = random_rows(rng, 40, 5)
    labels = rng.integers(0, 5, 40)
    m = experts.PredictionMatrix(probs, np.arange(40))
    assert experts.restricted_accuracy(m, labels, range(5)) == pytest.approx(np.mean(m.argmax() == labels))
    assert experts.restricted_accuracy(m, labels, [2]) == 1.0
    with pytest.raises(InvalidInputError):
        experts.restricted_accuracy(m, labels, [7])


def test_visual_expert_confusion_is_head_skewed(task):
    split, counts = task
    ids, labels, _ = split.subset("test")
    preds = experts.simulate_expert(ids, labels, counts, experts.ExpertProfile.visual(seed=1))
    mat, _ = metrics.confusion_matrix(preds.argmax(), labels, counts)
    assert metrics.head_skew(mat) > 1.5
