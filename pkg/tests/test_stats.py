import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessimlab import stats
from pessimlab.stats import UndefinedStatistic
import oracles


def test_spearman_examples():
    assert stats.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert stats.spearman([1, 2, 3], [30, 20, 10]) == -1.0
    x, y = [1, 2, 2, 3], [1, 3, 2, 4]
    assert stats.spearman(x, y) == oracles.spearman(x, y)
    assert list(stats.rank_average(x)) == oracles.average_ranks(x) == [1, 2.5, 2.5, 4]
    with pytest.raises(UndefinedStatistic, match="undefined correlation"):
        stats.spearman([1, 1, 1], [1, 2, 3])


def test_pearson_and_moments():
    x = np.random.default_rng(0).normal(size=50)
    assert stats.pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert stats.skewness([-1, 0, 1]) == 0.0
    with pytest.raises(UndefinedStatistic):
        stats.pearson([2, 2], [1, 3])
    with pytest.raises(UndefinedStatistic):
        stats.kurtosis([4, 4, 4])
    with pytest.raises(ValueError):
        stats.skewness([1, 2])


def test_moment_conventions():
    x = np.random.default_rng(1).gamma(2.0, size=1000)
    d = x - x.mean()
    m2, m3, m4 = (d ** 2).mean(), (d ** 3).mean(), (d ** 4).mean()
    assert stats.skewness(x) == pytest.approx(m3 / m2 ** 1.5, rel=1e-12)
    assert stats.kurtosis(x) == pytest.approx(m4 / m2 ** 2 - 3, rel=1e-12)


def test_normal_excess_kurtosis_near_zero():
    assert -0.05 <= stats.kurtosis(np.random.default_rng(2).standard_normal(10 ** 6)) <= 0.05


def test_classifier_examples():
    y = np.array([0, 1, 1, 0, 1], bool)
    assert stats.roc_auc(y.astype(float), y) == 1.0 and stats.average_precision(y.astype(float), y) == 1.0
    assert stats.roc_auc(np.ones(5), y) == 0.5
    with pytest.raises(UndefinedStatistic):
        stats.roc_auc([1, 2], [True, True])
    curve = stats.pr_curve([0.9, 0.8, 0.8, 0.1], [True, False, True, False])
    assert curve == [(0.5, 1.0, 0.9), (1.0, 2 / 3, 0.8), (1.0, 0.5, 0.1)]


def _instance(rng, n=None, ties=True):
    n = n or int(rng.integers(2, 201))
    x = rng.integers(0, max(2, n // 3), size=n).astype(float) if ties and rng.random() < 0.5 else rng.normal(size=n)
    return x


def test_brute_force_equivalence_50_instances():
    rng = np.random.default_rng(123)
    done = 0
    while done < 50:
        x, y = _instance(rng), None
        n = len(x)
        y = _instance(rng, n)
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        if len(set(x)) < 2 or len(set(y)) < 2 or labels.all() or not labels.any():
            continue
        assert stats.spearman(x, y) == oracles.spearman(x.tolist(), y.tolist())
        assert stats.roc_auc(x, labels) == oracles.auc(x.tolist(), labels.tolist())
        assert stats.average_precision(x, labels) == oracles.average_precision(x.tolist(), labels.tolist())
        tasks = int(rng.integers(1, 5))
        xs = [_instance(rng, int(rng.integers(1, 40))) for _ in range(tasks)]
        ys = [_instance(rng, int(rng.integers(1, 40))) for _ in range(tasks)]
        assert stats.probability_of_improvement(xs, ys) == oracles.prob_improvement(
            [a.tolist() for a in xs], [b.tolist() for b in ys])
        done += 1


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite, st.booleans()), min_size=3, max_size=60),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_monotone_invariance(rows, a, b):
    x = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    lab = np.array([r[2] for r in rows])
    x = np.round(x, 3) / 1e3  # keep exp(x) finite and distinct values distinct
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    for f in (np.exp, lambda v: a * v + b):
        fx = f(x)
        if len(set(fx)) != len(set(x)):
            continue  # the map merged values through rounding
        assert stats.spearman(fx, y) == pytest.approx(stats.spearman(x, y), abs=1e-12)
        if lab.any() and not lab.all():
            assert stats.roc_auc(fx, lab) == stats.roc_auc(x, lab)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-100, 100), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b, c, d):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert stats.pearson(a * x + b, c * y + d) == pytest.approx(stats.pearson(x, y), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_complement_and_self_improvement(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=int(rng.integers(2, 100)))
    lab = rng.random(s.size) < 0.5
    if lab.all() or not lab.any():
        return
    assert stats.roc_auc(s, lab) + stats.roc_auc(-s, lab) == pytest.approx(1.0, abs=1e-12)
    xs = {"a": rng.normal(size=7), "b": rng.integers(0, 3, size=5).astype(float)}
    assert stats.probability_of_improvement(xs, xs) == 0.5


def test_probability_of_improvement_examples():
    assert stats.probability_of_improvement([[1, 2, 3]], [[1, 2, 3]]) == 0.5
    assert stats.probability_of_improvement({"t": [5, 6]}, {"t": [1, 2, 3]}) == 1.0
    with pytest.raises(ValueError, match="different tasks"):
        stats.probability_of_improvement({"a": [1]}, {"b": [1]})


def test_bootstrap_examples():
    assert stats.bootstrap_ci({"a": [2.0] * 10, "b": [2.0] * 4}, "iqm") == (2.0, 2.0, 2.0)
    vals = {"a": [1.0, 4.0, 2.0], "b": [8.0, 3.0]}
    pooled = [1.0, 4.0, 2.0, 8.0, 3.0]
    assert stats.bootstrap_ci(vals, "mean")[0] == np.mean(pooled)
    assert stats.bootstrap_ci(vals, "median")[0] == np.median(pooled)
    assert stats.bootstrap_ci(vals, "mean", seed=4) == stats.bootstrap_ci(vals, "mean", seed=4)
    with pytest.raises(ValueError):
        stats.bootstrap_ci(vals, resamples=50)


def test_bootstrap_stratified_resampling_keeps_task_sizes():
    # a task with a single value contributes that value to every resample
    _, lo, hi = stats.bootstrap_ci({"fixed": [10.0], "noisy": [0.0, 1.0]}, "mean", resamples=500)
    assert lo >= 10.0 / 3 and hi <= 4.0


def test_bootstrap_coverage():
    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(100):
        _, lo, hi = stats.bootstrap_ci({"u": rng.random(1000)}, "mean", resamples=2000, seed=trial)
        hits += lo <= 0.5 <= hi
    assert hits >= 93


def test_iqm():
    assert stats.iqm([1, 2, 3, 4, 5, 6, 7, 100]) == pytest.approx(4.5)


def test_welch_against_scipy():
    from scipy import stats as sps
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=12), rng.normal(1, 3, size=20)
    t, dof, p = stats.welch_t_test(a, b)
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert t == pytest.approx(ref.statistic, rel=1e-12) and p == pytest.approx(ref.pvalue, rel=1e-10)


def test_aggregate_report_bracketing():
    rng = np.random.default_rng(1)
    x = {f"t{i}": rng.normal(size=5) for i in range(4)}
    y = {f"t{i}": rng.normal(size=5) - 1 for i in range(4)}
    rep = stats.aggregate(x, y, resamples=400)
    for iv in list(rep.metrics.values()) + [rep.probability_of_improvement]:
        assert iv.lo <= iv.point <= iv.hi
    assert rep.probability_of_improvement.point > 0.5
    assert set(rep.to_dict()["metrics"]) == {"mean", "median", "iqm"}
