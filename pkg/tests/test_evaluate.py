import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from deepmachining.evaluate import EvalReport, mae, pearson_corr, rmse
from deepmachining.signal_io import DataError


def hand_stats(y, p):
    n = len(y)
    ae = sum(abs(a - b) for a, b in zip(y, p)) / n
    se = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, p)) / n)
    my, mp = sum(y) / n, sum(p) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, p))
    vy = sum((a - my) ** 2 for a in y)
    vp = sum((b - mp) ** 2 for b in p)
    return ae, se, cov / math.sqrt(vy * vp)


def test_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0 and rmse([1, 2, 3], [1, 2, 3]) == 0
    assert pearson_corr([1, 2, 3], [1, 2, 3]) == pytest.approx(1)
    assert mae([0, 0], [3, -4]) == 3.5
    assert rmse([0, 0], [3, -4]) == pytest.approx(math.sqrt(12.5))
    assert pearson_corr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1)


def test_against_hand_computation_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        y, p = rng.standard_normal(n).tolist(), rng.standard_normal(n).tolist()
        ae, se, r = hand_stats(y, p)
        assert abs(mae(y, p) - ae) < 1e-6 and abs(rmse(y, p) - se) < 1e-6 and abs(pearson_corr(y, p) - r) < 1e-6


finite = st.floats(-100, 100, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=2, max_size=30))
def test_metric_invariants(pairs):
    y, p = [a for a, _ in pairs], [b for _, b in pairs]
    assert 0 <= mae(y, p) <= rmse(y, p) + 1e-9
    r = pearson_corr(y, p)
    assert r is None or -1 <= r <= 1


@given(
    st.lists(finite, min_size=3, max_size=20),
    st.floats(0.1, 10),
    st.floats(-50, 50),
)
def test_corr_affine_invariance(y, a, b):
    assume(np.std(y) > 1e-3)
    p = [v * 0.5 + (i % 3) for i, v in enumerate(y)]
    assume(np.std(p) > 1e-3)
    r = pearson_corr(y, p)
    assert pearson_corr([a * v + b for v in y], p) == pytest.approx(r, abs=1e-6)
    assert pearson_corr([-a * v + b for v in y], p) == pytest.approx(-r, abs=1e-6)


def test_constant_series_is_undefined():
    assert pearson_corr([1, 1, 1], [1, 2, 3]) is None
    rep = EvalReport.from_pairs([2, 2, 2], [1, 2, 3])
    assert rep.corr_undefined and "corr=undefined" in rep.lines()


def test_errors():
    with pytest.raises(DataError):
        mae([], [])
    with pytest.raises(DataError):
        mae([1, 2], [1])


def test_report_files(tmp_path):
    rep = EvalReport.from_pairs([0.01, 0.02], [0.011, 0.018], ids=["a", "b"])
    rep.write(tmp_path / "r.txt", tmp_path / "s.csv")
    assert (tmp_path / "r.txt").read_text().splitlines()[0].startswith("mae=")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "id,y_mm,y_hat_mm" and rows[1].startswith("a,0.01,0.011")
