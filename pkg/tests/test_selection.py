import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradshift import model as mdl
from gradshift import selection as sel
from gradshift.data import LabeledSet, UnlabeledSet
from gradshift.errors import InvalidArgument, NumericError, StateError


def linear(dim=2, k=2):
    # a linear model's feature map is the identity
    return mdl.init_classifier([dim, k], seed=0)


def test_score_targets_examples():
    t = UnlabeledSet(np.zeros((3, 2)))
    assert np.allclose(sel.score_targets(lambda x: np.full((len(x), 4), 0.25), t).scores, 0.25)
    assert np.allclose(sel.score_targets(lambda x: np.tile(np.eye(3)[1], (len(x), 1)), t).scores, 1.0)
    assert sel.score_targets(np.array([[0.8, 0.2]])).scores.tolist() == [0.8]
    with pytest.raises(NumericError):
        sel.score_targets(np.array([[np.nan, 0.5]]))


def test_select_top_examples():
    assert sel.select_top(np.array([0.9, 0.5, 0.7, 0.3]), 2).tolist() == [1, 0, 1, 0]
    assert sel.select_top(np.array([0.9, 0.5, 0.7, 0.3]), 4).tolist() == [1, 1, 1, 1]
    assert sel.select_top(np.array([0.5, 0.5, 0.5]), 2).tolist() == [1, 1, 0]
    with pytest.raises(InvalidArgument):
        sel.select_top(np.array([0.5]), 2)


scores_st = st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), min_size=1, max_size=60)


@given(scores_st, st.data())
def test_select_top_cardinality_and_rank_invariance(scores, data):
    s = np.array(scores)
    k = data.draw(st.integers(0, s.size))
    ind = sel.select_top(s, k)
    assert ind.sum() == k
    # strictly monotone transform keeps the selection
    assert np.array_equal(sel.select_top(np.exp(3 * s) - 7, k), ind)
    # chosen scores dominate the rest, and ties break by index
    if 0 < k < s.size:
        chosen, rest = s[ind == 1], s[ind == 0]
        assert chosen.min() >= rest.max()
        tie = s == chosen.min()
        tie_idx = np.flatnonzero(tie)
        picked = ind[tie_idx]
        assert np.all(np.diff(picked) <= 0)


@given(scores_st, st.data())
def test_select_top_is_nested(scores, data):
    s = np.array(scores)
    k = data.draw(st.integers(0, s.size))
    j = data.draw(st.integers(k, s.size))
    a, b = sel.select_top(s, k), sel.select_top(s, j)
    assert np.all(b[a == 1] == 1)


def test_random_indicator():
    assert sel.random_indicator(5, 0, seed=1).tolist() == [0] * 5
    assert sel.random_indicator(5, 5, seed=1).tolist() == [1] * 5
    a = sel.random_indicator(50, 20, seed=3)
    assert a.sum() == 20
    assert np.array_equal(a, sel.random_indicator(50, 20, seed=3))


def test_prototypes_examples():
    c = linear()
    t = UnlabeledSet(np.array([[0.0, 2.0], [2.0, 0.0]]))
    p = sel.compute_prototypes(c, t, pseudo_labels=np.array([1, 1]))
    assert np.allclose(p.centers[1], [1.0, 1.0])
    assert p.counts.tolist() == [0, 2]
    assert np.all(np.isnan(p.centers[0])) and p.nonempty.tolist() == [False, True]
    single = sel.compute_prototypes(c, t, pseudo_labels=np.array([0, 1]))
    assert np.allclose(single.centers, t.features)


@given(st.integers(0, 1000))
def test_prototypes_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 2))
    lab = rng.integers(0, 3, 12)
    perm = rng.permutation(12)
    c = linear(2, 3)
    a = sel.compute_prototypes(c, UnlabeledSet(x), pseudo_labels=lab)
    b = sel.compute_prototypes(c, UnlabeledSet(x[perm]), pseudo_labels=lab[perm])
    assert np.allclose(np.nan_to_num(a.centers), np.nan_to_num(b.centers))
    assert np.array_equal(a.counts, b.counts)


def test_kernel_value_matches_hand_computation():
    # d^2 = 1 to the own prototype and 4 to the other one
    c = linear()
    protos = sel.Prototypes(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([1, 1]))
    src = LabeledSet(np.array([[0.0, 0.0]]), np.array([0]), 2)
    s = sel.score_sources(c, protos, src).scores[0]
    assert s == pytest.approx(np.exp(-1) / (np.exp(-1) + np.exp(-4)), abs=1e-12)
    assert s == pytest.approx(0.9526, abs=1e-4)


def test_score_sources_examples():
    c = linear()
    protos = sel.Prototypes(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([3, 3]))
    src = LabeledSet(np.array([[0.0, 0.0], [-1.0, 0.0]]), np.array([1, 0]), 2)
    s = sel.score_sources(c, protos, src).scores
    assert s[0] == pytest.approx(0.5)
    far = sel.Prototypes(np.array([[-1.0, 0.0], [50.0, 0.0]]), np.array([3, 3]))
    assert sel.score_sources(c, far, src).scores[1] == pytest.approx(1.0)


def test_score_sources_empty_classes():
    c = linear(2, 3)
    protos = sel.Prototypes(np.array([[0.0, 0.0], [np.nan, np.nan], [3.0, 0.0]]), np.array([2, 0, 1]))
    src = LabeledSet(np.array([[0.1, 0.0], [0.0, 0.0]]), np.array([0, 1]), 3)
    s = sel.score_sources(c, protos, src).scores
    assert s[1] == 0.0
    assert 0.5 < s[0] <= 1.0
    with pytest.raises(StateError):
        sel.score_sources(c, sel.Prototypes(np.full((3, 2), np.nan), np.zeros(3, dtype=int)), src)


@given(st.integers(0, 1000), st.floats(0, 100))
def test_score_sources_shift_invariance(seed, const):
    rng = np.random.default_rng(seed)
    d2 = rng.uniform(0, 5, size=(6, 3))
    mask = np.ones(3, dtype=bool)
    a = sel.masked_softmax(sel.kernel_logits(d2), mask)
    b = sel.masked_softmax(sel.kernel_logits(d2 + const), mask)
    assert np.allclose(a, b)


def test_student_kernel_is_a_distinct_reading():
    d2 = np.array([[1.0, 4.0]])
    p = sel.masked_softmax(sel.kernel_logits(d2, "student_exp"), np.ones(2, dtype=bool))
    e = np.exp([1 / 2, 1 / 5])
    assert np.allclose(p, e / e.sum())
    with pytest.raises(InvalidArgument):
        sel.kernel_logits(d2, "gauss")


def test_stage_counts_endpoints():
    assert sel.stage_counts(1, 2, 10, 10) == (5, 5)
    for M in (1, 2, 7, 20, 50):
        assert sel.stage_counts(M, M, 37, 41) == (37, 0)
        assert sel.stage_counts(0, M, 37, 41) == (0, 41)
    # the last intermediate stage keeps round(n_s / M) sources
    assert sel.stage_counts(19, 20, 500, 500) == (475, 25)
    assert sel.stage_counts(1, 4, 2, 2) == (1, 2)  # 0.5 rounds up, 1.5 rounds up


@given(st.integers(1, 60), st.integers(0, 500), st.integers(0, 500))
def test_stage_counts_monotone(M, nt, ns):
    prev = (-1, ns + 1)
    for m in range(0, M + 1):
        kt, ks = sel.stage_counts(m, M, nt, ns)
        assert 0 <= kt <= nt and 0 <= ks <= ns
        assert kt >= prev[0] and ks <= prev[1]
        prev = (kt, ks)
    assert prev == (nt, 0)


def test_build_intermediate():
    ts = np.linspace(0, 1, 10)
    ss = np.linspace(1, 0, 10)
    pl = np.arange(10) % 2
    d = sel.build_intermediate(1, 2, ts, ss, pl)
    assert (d.n_target_active, d.n_source_active) == (5, 5)
    assert d.target_active[5:].tolist() == [1] * 5
    assert np.all(d.target_pseudo_labels[d.target_active == 0] == -1)
    last = sel.build_intermediate(2, 2, ts, ss, pl)
    assert (last.n_target_active, last.n_source_active) == (10, 0)


def test_csv_outputs(tmp_path):
    sel.ScoreTable(np.array([0.25, 1.0])).to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["index,score", "0,0.25", "1,1.0"]
    sel.indicator_to_csv(np.array([1, 0]), tmp_path / "i.csv")
    assert (tmp_path / "i.csv").read_text().splitlines() == ["index,active", "0,1", "1,0"]
    with pytest.raises(NumericError):
        sel.ScoreTable(np.array([1.5]))
