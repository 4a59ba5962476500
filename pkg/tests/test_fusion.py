from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synthscreen.fusion import below_counts, rank_average, rank_average_columns, rank_threshold_select
from synthscreen.scoring import ScoreVector

from oracles import rank_avg_pairwise, strictly_increasing_remap


def _table(s_c, s_s):
    return rank_average([ScoreVector(str(i), a, b) for i, (a, b) in enumerate(zip(s_c, s_s))])


def test_examples():
    assert _table([0.3], [0.9]).rank_avg.tolist() == [1.0]
    t = _table([0.9, 0.5, 0.1], [0.2, 0.8, 0.4])
    assert t.rank_avg.tolist() == pytest.approx([4 / 6, 5 / 6, 3 / 6], abs=0)
    assert rank_threshold_select(t, 0.8) == ["1"]
    assert rank_threshold_select(t, 0.0) == ["1", "0", "2"]
    assert rank_threshold_select(t, 1 + 1e-12) == []
    top = _table([0.1, 0.9, 0.5], [0.2, 0.95, 0.3])
    assert top.rank_avg[1] == 1.0


def test_ties_share_lowest_rank():
    t = _table([0.5, 0.5, 0.1], [0.5, 0.5, 0.1])
    assert t.ranks["c"].tolist() == [2, 2, 1]


def test_errors():
    with pytest.raises(ValueError):
        rank_average([ScoreVector("a", 0.1, None)])
    with pytest.raises(ValueError):
        rank_average_columns(["a"], {"c": [float("nan")]})
    with pytest.raises(ValueError):
        rank_average_columns([], {"c": []})


score_cols = st.integers(1, 60).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.sampled_from([0.0, 0.5, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
))


@given(score_cols)
def test_matches_pairwise_oracle(cols):
    s_c, s_s = cols
    t = _table(s_c, s_s)
    expected = rank_avg_pairwise([s_c, s_s])
    n = len(s_c)
    # exact: both sides are k/(2N) computed from integer counts
    assert [Fraction(int(round(v * 2 * n)), 2 * n) for v in t.rank_avg] == expected
    assert t.rank_avg.tolist() == [float(e) for e in expected]
    assert np.all(t.rank_avg >= 1 / n) and np.all(t.rank_avg <= 1)


@given(score_cols, st.randoms())
def test_monotone_transform_invariance(cols, rnd):
    s_c, s_s = cols
    base = _table(s_c, s_s)
    moved = _table(strictly_increasing_remap(s_c, rnd), strictly_increasing_remap(s_s, rnd))
    assert moved.rank_avg.tolist() == base.rank_avg.tolist()
    assert moved.rank_avg.sum() == base.rank_avg.sum()


@given(score_cols, st.randoms())
def test_permutation_invariance(cols, rnd):
    s_c, s_s = cols
    ids = [f"id{i}" for i in range(len(s_c))]
    base = rank_average_columns(ids, {"c": s_c, "s": s_s})
    perm = list(range(len(ids)))
    rnd.shuffle(perm)
    shuffled = rank_average_columns([ids[k] for k in perm], {"c": [s_c[k] for k in perm], "s": [s_s[k] for k in perm]})
    by_id = dict(zip(shuffled.ids, shuffled.rank_avg.tolist()))
    assert [by_id[i] for i in ids] == base.rank_avg.tolist()
    assert rank_threshold_select(base, 0.5) == rank_threshold_select(shuffled, 0.5)


def test_below_counts():
    assert below_counts(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [2, 0, 2, 1]


def test_m_columns():
    t = rank_average_columns(["a", "b"], {"x": [0, 1], "y": [1, 0], "z": [0, 1]})
    assert t.rank_avg.tolist() == pytest.approx([4 / 6, 5 / 6])


def test_csv(tmp_path):
    t = _table([0.9, 0.5], [0.2, 0.8])
    text = t.to_csv(tmp_path / "r.csv")
    assert text.splitlines()[0] == "id,s_c,s_s,rank_c,rank_s,rank_avg"
    assert (tmp_path / "r.csv").read_text() == text
