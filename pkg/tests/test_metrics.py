import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drcl import metrics as M
from drcl.errors import DataError, StateError, UndefinedMetricError
from drcl.model import NetworkSpec
from oracles import loop_avg_accuracy, loop_bwt, loop_forgetting, loop_group_forgetting, loop_incremental

R2 = [[0.9, np.nan], [0.8, 0.7]]


def random_lower(T, rng):
    r = np.tril(rng.uniform(0, 1, (T, T)))
    r[np.triu_indices(T, 1)] = np.nan
    return r


def test_two_by_two_examples():
    assert M.avg_forgetting(R2) == pytest.approx(0.1, abs=1e-15)
    assert M.avg_incremental_accuracy(R2) == pytest.approx(0.825, abs=1e-15)
    assert M.avg_accuracy(R2) == pytest.approx(0.75, abs=1e-15)
    assert M.backward_transfer(R2) == pytest.approx(-0.1, abs=1e-15)


@pytest.mark.parametrize("r", [[[0.6, np.nan], [0.65, 0.9]], [[0.9, np.nan], [0.95, 0.7]]])
def test_backward_transfer_positive_example(r):
    assert M.backward_transfer(r) == pytest.approx(0.05, abs=1e-15)


def test_group_forgetting_example():
    r = [[0.9, np.nan, np.nan], [0.85, 0.8, np.nan], [0.8, 0.75, 0.7]]
    # tasks 0 and 1 at t=2: (0.9 - 0.8 + 0.8 - 0.75) / 2
    assert M.group_forgetting(r, [0, 1], 2) == pytest.approx(0.075, abs=1e-15)
    assert M.group_forgetting(r, [0], 1) == pytest.approx(0.05, abs=1e-15)


def test_group_forgetting_rejects_future_members():
    r = [[0.9, np.nan], [0.8, 0.7]]
    with pytest.raises(DataError):
        M.group_forgetting(r, [1], 1)


def test_metrics_match_loops_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(2, 21))
        r = random_lower(T, rng)
        rows = r.tolist()
        assert abs(M.avg_accuracy(r) - loop_avg_accuracy(rows)) <= 1e-12
        assert abs(M.avg_forgetting(r) - loop_forgetting(rows)) <= 1e-12
        assert abs(M.avg_incremental_accuracy(r) - loop_incremental(rows)) <= 1e-12
        assert abs(M.backward_transfer(r) - loop_bwt(rows)) <= 1e-12
        t = int(rng.integers(1, T))
        group = sorted(set(rng.integers(0, t, size=3).tolist()))
        assert abs(M.group_forgetting(r, group, t) - loop_group_forgetting(rows, group, t)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_metric_ranges(T, seed):
    r = random_lower(T, np.random.default_rng(seed))
    assert 0 <= M.avg_accuracy(r) <= 1
    assert 0 <= M.avg_incremental_accuracy(r) <= 1
    # the max over earlier rows includes the diagonal entry
    assert M.avg_forgetting(r) >= -M.backward_transfer(r) - 1e-12


def test_constant_matrix_has_no_forgetting():
    r = np.tril(np.full((5, 5), 0.7))
    r[np.triu_indices(5, 1)] = np.nan
    assert M.avg_forgetting(r) == 0.0 and M.backward_transfer(r) == 0.0


def test_single_task_metrics():
    m = M.AccuracyMatrix.from_array([[0.8]])
    with pytest.raises(UndefinedMetricError):
        M.avg_forgetting(m)
    s = M.summarize(m)
    assert s["avg_accuracy"] == 0.8 and s["avg_forgetting"] is None and s["backward_transfer"] is None


def test_incomplete_matrix_is_rejected():
    m = M.AccuracyMatrix(3)
    m.set(0, 0, 0.9)
    with pytest.raises(StateError):
        M.avg_forgetting(m)


def test_matrix_rejects_upper_triangle_and_range():
    m = M.AccuracyMatrix(2)
    with pytest.raises(DataError):
        m.set(0, 1, 0.5)
    with pytest.raises(DataError):
        m.set(1, 0, 1.5)


def test_effective_stability_example():
    x_old = np.array([1.0, 1.0, 0.0, 2.0])
    x_new = np.array([1.01, 1.2, 0.0, 2.0])
    assert M.effective_stability(x_new, x_old, 0.05) == 0.75


def test_effective_stability_floor_for_zero_weights():
    assert M.effective_stability(np.array([1e-9]), np.array([0.0]), 0.05) == 0.0
    assert M.effective_stability(np.array([1e-11]), np.array([0.0]), 0.05) == 1.0


def test_update_sparsity():
    dx = np.array([0.0, 0.0, 1e-9, -2.0])
    assert M.update_sparsity(dx) == 0.5
    assert M.update_sparsity(dx, atol=1e-6) == 0.75
    with pytest.raises(DataError):
        M.update_sparsity(dx, atol=-1.0)


def test_layer_sparsity_names_every_layer():
    spec = NetworkSpec(2, [3], 2, 2)
    dx = np.zeros(spec.n_params)
    dx[0] = 1.0
    grid = M.layer_sparsity(dx, spec)
    assert len(grid) == 3
    assert min(grid.values()) == pytest.approx(8 / 9)


def test_update_trace_norms():
    tr = M.UpdateTrace()
    tr.add(np.array([3.0, 4.0]), np.zeros(2))
    tr.add(np.array([3.0, 4.0]), np.array([3.0, 4.0]))
    assert tr.norms == [5.0, 0.0] and len(tr) == 2
