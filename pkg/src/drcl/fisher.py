"""Diagonal Fisher information as per-parameter importance weights."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, DRCLError
from .model import Batch, NetworkSpec, predictive_probs, squared_score_sum

FISHER_MODES = ("true", "empirical")
ACCUMULATE_MODES = ("none", "sum", "max")


@dataclass(frozen=True)
class ImportanceWeights:
    f: np.ndarray
    normalized: bool = False
    sample_count: int = 0

    def __post_init__(self):
        f = np.asarray(self.f, dtype=np.float64)
        if f.ndim != 1:
            raise DataError(f"importance weights must be 1-D, got shape {f.shape}")
        object.__setattr__(self, "f", f)

    def __len__(self):
        return self.f.size

    @classmethod
    def zeros(cls, d: int) -> "ImportanceWeights":
        return cls(np.zeros(d), normalized=True, sample_count=0)


def default_n_samples(dataset_size: int) -> int:
    return min(1000, 4 * dataset_size)


def estimate_fisher(params: np.ndarray, data: Batch, spec: NetworkSpec, n_samples: int | None = None,
                    seed: int = 0, mode: str = "true", chunk: int = 512) -> ImportanceWeights:
    """Estimate the diagonal Fisher ``f_i = mean_s (d log p(v_s|u_s) / dx_i)**2``.

    Inputs ``u_s`` are drawn from ``data`` with a seeded RNG: without
    replacement when ``n_samples <= len(data)``, with replacement otherwise.
    In ``"true"`` mode the labels ``v_s`` are sampled from the model's own
    softmax; ``"empirical"`` uses the dataset labels. Result is unnormalized.
    """
    if mode not in FISHER_MODES:
        raise ConfigError(f"fisher mode must be one of {FISHER_MODES}, got {mode!r}")
    if len(data) == 0:
        raise DataError("cannot estimate Fisher information on an empty dataset")
    n = len(data)
    n_samples = default_n_samples(n) if n_samples is None else int(n_samples)
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")

    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_samples, replace=n_samples > n)
    sample = data.subset(np.sort(idx))
    if mode == "true":
        probs = predictive_probs(params, sample, spec)
        u = rng.random(len(sample))
        labels = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        labels = np.minimum(labels, spec.classes_per_head - 1)
    else:
        labels = sample.labels

    # fixed reduction order over chunks keeps the result reproducible
    total = np.zeros(spec.n_params)
    for start in range(0, len(sample), chunk):
        part = slice(start, start + chunk)
        total += squared_score_sum(params, sample.subset(part), spec, labels=labels[part])
    return ImportanceWeights(total / n_samples, normalized=False, sample_count=n_samples)


def mean_normalize(w: ImportanceWeights) -> ImportanceWeights:
    """Divide by the global mean so that ``mean(f) == 1``.

    An all-zero vector has no scale to normalize by and is returned as is
    (flagged normalized); downstream thresholds are then all zero.
    """
    f = w.f
    if not np.all(np.isfinite(f)):
        raise DataError("importance weights contain non-finite entries")
    if np.any(f < 0):
        raise DRCLError("importance weights must be non-negative")
    mean = f.mean() if f.size else 0.0
    if mean == 0.0:
        return replace(w, f=f.copy(), normalized=True)
    return replace(w, f=f / mean, normalized=True)


def accumulate(previous: ImportanceWeights | None, new: ImportanceWeights, mode: str = "none") -> ImportanceWeights:
    """Combine importance from earlier tasks with a fresh estimate."""
    if mode not in ACCUMULATE_MODES:
        raise ConfigError(f"accumulate must be one of {ACCUMULATE_MODES}, got {mode!r}")
    if previous is None or mode == "none":
        return new
    if len(previous) != len(new):
        raise DataError(f"cannot accumulate weights of length {len(previous)} and {len(new)}")
    combine = np.add if mode == "sum" else np.maximum
    return ImportanceWeights(combine(previous.f, new.f), normalized=False,
                             sample_count=previous.sample_count + new.sample_count)
