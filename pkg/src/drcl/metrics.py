"""Forgetting and plasticity metrics over accuracy matrices and parameter updates.

The accuracy matrix ``r`` is lower-triangular: ``r[i, j]`` is the test
accuracy on task ``j`` after training through task ``i`` (0-based), defined
for ``j <= i``. Undefined entries are stored as NaN.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError, StateError, UndefinedMetricError
from .model import NetworkSpec, layer_names, layer_slices

STABILITY_FLOOR = 1e-8


class AccuracyMatrix:
    def __init__(self, T: int):
        if T < 1:
            raise DataError(f"accuracy matrix needs T >= 1, got {T}")
        self.T = T
        self.r = np.full((T, T), np.nan)

    @classmethod
    def from_array(cls, r) -> "AccuracyMatrix":
        r = np.asarray(r, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise DataError(f"accuracy matrix must be square, got shape {r.shape}")
        m = cls(r.shape[0])
        for i in range(m.T):
            for j in range(i + 1):
                if not np.isnan(r[i, j]):
                    m.set(i, j, r[i, j])
        return m

    def set(self, i: int, j: int, value: float):
        if j > i:
            raise DataError(f"entry ({i}, {j}) lies above the diagonal")
        if not 0.0 <= value <= 1.0:
            raise DataError(f"accuracy {value} outside [0, 1]")
        self.r[i, j] = value

    def row_complete(self, i: int) -> bool:
        return not np.any(np.isnan(self.r[i, :i + 1]))

    def _require_rows(self, rows):
        for i in rows:
            if not self.row_complete(i):
                raise StateError(f"row {i} of the accuracy matrix is not fully populated")

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.r, other.r, equal_nan=True)


def _as_matrix(m) -> AccuracyMatrix:
    return m if isinstance(m, AccuracyMatrix) else AccuracyMatrix.from_array(m)


def avg_accuracy(m) -> float:
    """Mean accuracy over all tasks after the final task."""
    m = _as_matrix(m)
    m._require_rows([m.T - 1])
    return float(np.mean(m.r[m.T - 1]))


def avg_forgetting(m) -> float:
    """``(1/(T-1)) sum_{j<T-1} max_{j<=l<T-1} (r[l, j] - r[T-1, j])``."""
    m = _as_matrix(m)
    if m.T < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    m._require_rows(range(m.T))
    last = m.T - 1
    drops = [np.max(m.r[j:last, j]) - m.r[last, j] for j in range(last)]
    return float(np.mean(drops))


def avg_incremental_accuracy(m) -> float:
    m = _as_matrix(m)
    m._require_rows(range(m.T))
    return float(np.mean([np.mean(m.r[t, :t + 1]) for t in range(m.T)]))


def backward_transfer(m) -> float:
    """``(1/(T-1)) sum_{j<T-1} (r[T-1, j] - r[j, j])``; negative means forgetting."""
    m = _as_matrix(m)
    if m.T < 2:
        raise UndefinedMetricError("backward transfer needs at least two tasks")
    m._require_rows(range(m.T))
    last = m.T - 1
    return float(np.mean(m.r[last, :last] - np.diag(m.r)[:last]))


def group_forgetting(m, group, t: int) -> float:
    """Mean over ``k`` in ``group`` of ``max_{k<=j<t} A[k, j] - A[k, t]``.

    ``A[k, j]`` is the accuracy on task ``k`` after learning task ``j``, i.e.
    ``r[j, k]``. All indices are 0-based and ``t`` is a task index.
    """
    m = _as_matrix(m)
    group = sorted(set(int(k) for k in group))
    if not group:
        raise DataError("group is empty")
    if t >= m.T:
        raise DataError(f"t={t} beyond the {m.T} learned tasks")
    for k in group:
        if k >= t or k < 0:
            raise DataError(f"group member {k} must precede t={t}")
    m._require_rows(range(group[0], t + 1))
    return float(np.mean([np.max(m.r[k:t, k]) - m.r[t, k] for k in group]))


def effective_stability(x_new: np.ndarray, x_old: np.ndarray, eps: float = 0.05) -> float:
    """Fraction of coordinates with ``|dx| / max(|x_old|, 1e-8) < eps``."""
    x_new, x_old = np.asarray(x_new, dtype=np.float64), np.asarray(x_old, dtype=np.float64)
    if x_new.shape != x_old.shape:
        raise DataError(f"length mismatch: {x_new.shape} vs {x_old.shape}")
    if not eps > 0:
        raise DataError(f"eps must be > 0, got {eps}")
    rel = np.abs(x_new - x_old) / np.maximum(np.abs(x_old), STABILITY_FLOOR)
    return float(np.mean(rel < eps))


def update_sparsity(dx: np.ndarray, atol: float = 0.0) -> float:
    if atol < 0:
        raise DataError(f"atol must be >= 0, got {atol}")
    return float(np.mean(np.abs(np.asarray(dx)) <= atol))


def layer_sparsity(dx: np.ndarray, spec: NetworkSpec, atol: float = 0.0) -> dict:
    """Exact-zero update fraction per named layer, for heatmaps."""
    return {name: update_sparsity(dx[s], atol) for name, s in zip(layer_names(spec), layer_slices(spec))}


class UpdateTrace:
    """Per-task parameter changes ``dx_t = x_t - x_{t-1}``."""

    def __init__(self):
        self.deltas: list[np.ndarray] = []

    def add(self, x_new, x_prev):
        self.deltas.append(np.asarray(x_new, dtype=np.float64) - np.asarray(x_prev, dtype=np.float64))

    @property
    def norms(self) -> list[float]:
        return [float(np.linalg.norm(d)) for d in self.deltas]

    def __len__(self):
        return len(self.deltas)


def summarize(m) -> dict:
    """All scalar matrix metrics; those undefined for ``T == 1`` are ``None``."""
    m = _as_matrix(m)
    out = {"avg_accuracy": avg_accuracy(m), "avg_incremental_accuracy": avg_incremental_accuracy(m)}
    if m.T >= 2:
        out["avg_forgetting"] = avg_forgetting(m)
        out["backward_transfer"] = backward_transfer(m)
    else:
        out["avg_forgetting"] = out["backward_transfer"] = None
    return out
