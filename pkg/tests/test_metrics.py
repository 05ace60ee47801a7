import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexmoe.errors import InvalidParameter
from flexmoe.metrics import UsageHistory, cv, maxmin_gap, mean_client_accuracy


def test_cv_examples():
    assert cv([4, 4, 4]) == 0.0
    assert cv([0, 0]) == 0.0
    assert cv([1, 3]) == 0.5


def test_gap_examples():
    assert maxmin_gap([3, 3]) == 0.0
    assert maxmin_gap([5, 2, 9]) == 7.0
    assert maxmin_gap([4]) == 0.0
    with pytest.raises(InvalidParameter):
        maxmin_gap([])


def test_mean_accuracy():
    assert mean_client_accuracy([1.0, 0.0]) == 0.5
    assert mean_client_accuracy([0.3]) == 0.3
    with pytest.raises(InvalidParameter):
        mean_client_accuracy([])


@settings(max_examples=100, deadline=None)
@given(loads=st.lists(st.floats(0, 1e4), min_size=1, max_size=12), lam=st.floats(1e-3, 1e3))
def test_scaling(loads, lam):
    x = np.array(loads)
    assert cv(lam * x) == pytest.approx(cv(x), rel=1e-9, abs=1e-12)
    assert maxmin_gap(lam * x) == pytest.approx(lam * maxmin_gap(x), rel=1e-9, abs=1e-9)


def test_window_load():
    h = UsageHistory(2)
    h.append([3, 1])
    h.append([1, 3])
    assert h.window_load(2, 1).tolist() == [1, 3]
    assert h.window_load(2, 2).tolist() == [4, 4]
    assert h.window_load(1, 5).tolist() == [3, 1]
    assert h.window_load(2, 100).tolist() == [4, 4]


def test_window_capacity():
    h = UsageHistory(1, capacity=3)
    for u in range(1, 6):
        h.append([u])
    assert h.window_load(5, 3).tolist() == [12]
    with pytest.raises(InvalidParameter):
        h.window_load(5, 4)
    with pytest.raises(InvalidParameter):
        h.window_load(6, 1)


def test_history_rejects_bad_usage():
    h = UsageHistory(2)
    with pytest.raises(InvalidParameter):
        h.append([1, 2, 3])
    with pytest.raises(InvalidParameter):
        h.append([1, -1])
