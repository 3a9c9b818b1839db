"""Run continual-learning experiments end to end and persist their results."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .checkpoint import atomic_write_text, save_checkpoint
from .config import ExperimentConfig
from .errors import DataError, NumericalError
from .fisher import accumulate, estimate_fisher, mean_normalize
from .model import NetworkSpec, accuracy, init_params, layout
from .solver import run_task, run_task_coupled
from .tasks import TaskSpec, TaskStream, build_stream, load_idx_dataset, make_blobs

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("avg_accuracy", "avg_forgetting", "avg_incremental_accuracy", "backward_transfer")


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    method: str
    status: str = "ok"
    error: str | None = None
    matrix: M.AccuracyMatrix | None = None
    update_norms: list = field(default_factory=list)
    update_sparsity: list = field(default_factory=list)
    effective_stability: list = field(default_factory=list)
    layer_sparsity: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    final_params: np.ndarray | None = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == "ok"

    def metrics(self) -> dict:
        return M.summarize(self.matrix) if self.ok else {}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "method": self.method,
            "status": self.status,
            "error": self.error,
            "matrix": None if self.matrix is None else [
                [None if np.isnan(v) else v for v in row] for row in self.matrix.r.tolist()],
            "metrics": self.metrics(),
            "update_norms": self.update_norms,
            "update_sparsity": self.update_sparsity,
            "effective_stability": self.effective_stability,
            "residuals": [[r.residual for r in tr] for tr in self.traces],
            "checkpoints": self.checkpoints,
            "wall_clock": self.wall_clock,
        }


def build_dataset(cfg: ExperimentConfig):
    src = cfg.raw["tasks"]["source"]
    if src["type"] == "blobs":
        return make_blobs(int(src["n_classes"]), int(src["n_per_class"]), int(src["dim"]),
                          float(src["separation"]), int(src["seed"]))
    return load_idx_dataset(src["images"], src["labels"], limit=src["limit"])


def build_task_stream(cfg: ExperimentConfig, seed: int, dataset=None) -> TaskStream:
    t = cfg.raw["tasks"]
    spec = TaskSpec(kind=t["kind"], num_tasks=int(t["num_tasks"]),
                    base_dataset=build_dataset(cfg) if dataset is None else dataset,
                    seed=seed if t["seed"] is None else int(t["seed"]),
                    train_fraction=float(t["train_fraction"]), drop_remainder=bool(t["drop_remainder"]),
                    shared_head=t["shared_head"])
    return build_stream(spec)


def network_for(cfg: ExperimentConfig, stream: TaskStream) -> NetworkSpec:
    n = cfg.raw["network"]
    return NetworkSpec(input_dim=stream.input_dim, hidden_dims=tuple(n["hidden_dims"]),
                       num_heads=stream.num_heads, classes_per_head=stream.classes_per_task,
                       activation=n["activation"])


def task_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None, dataset=None) -> RunRecord:
    """Train every task of the stream in order for one seed.

    Task 1 runs with the stability weight forced to zero. After each task the
    accuracy row is filled for all tasks seen so far, and (except after the
    last task) the Fisher weights for the next task are re-estimated at the
    new parameters on the finished task's training data.
    """
    method = cfg.method
    record = RunRecord(seed=seed, config_hash=cfg.hash, method=method)
    stream = build_task_stream(cfg, seed, dataset)
    net = network_for(cfg, stream)
    solver = cfg.solver
    fisher_cfg, ewc_cfg = cfg.raw["fisher"], cfg.raw["ewc"]
    T = len(stream)
    record.matrix = M.AccuracyMatrix(T)

    x = init_params(net, seed)
    drcl_raw = drcl_weights = None
    ewc_raw = ewc_weights = None
    try:
        for t, task in enumerate(stream):
            started = time.perf_counter()
            s = task_seed(seed, t)
            x_prev = x
            if method in ("drcl_l1", "drcl_l2"):
                task_cfg = solver if t > 0 else replace(solver, lam=0.0)
                x, trace = run_task(x_prev, drcl_weights, task.train, task_cfg, net, seed=s)
            else:
                lam = float(ewc_cfg["lambda"]) if method == "ewc" and t > 0 else 0.0
                x, trace = run_task_coupled(x_prev, task.train, solver, net, seed=s,
                                            ewc_weights=ewc_weights, ewc_lambda=lam)
            record.traces.append(trace.records)

            for j in range(t + 1):
                record.matrix.set(t, j, accuracy(x, stream.tasks[j].test, net))

            dx = x - x_prev
            record.update_norms.append(float(np.linalg.norm(dx)))
            record.update_sparsity.append(M.update_sparsity(dx, 0.0))
            record.effective_stability.append(M.effective_stability(x, x_prev, 0.05))
            record.layer_sparsity.append(M.layer_sparsity(dx, net))

            if t < T - 1 and method != "sgd":
                fresh = estimate_fisher(x, task.train, net, fisher_cfg["n_samples"], seed=s,
                                        mode=fisher_cfg["mode"])
                if method == "ewc":
                    ewc_raw = accumulate(ewc_raw, fresh, ewc_cfg["accumulate"])
                    ewc_weights = mean_normalize(ewc_raw) if ewc_cfg["normalize"] else ewc_raw
                else:
                    drcl_raw = accumulate(drcl_raw, fresh, fisher_cfg["accumulate"])
                    drcl_weights = mean_normalize(drcl_raw)

            if out_dir is not None:
                rel = f"ckpt/seed_{seed}/task_{t:03d}.ckpt"
                save_checkpoint(out_dir / rel, x, meta={"seed": seed, "task": t, "method": method},
                                layout=layout(net), config_hash=record.config_hash)
                record.checkpoints.append(rel)
            record.wall_clock.append(time.perf_counter() - started)
            log.info("seed %d task %d/%d done: acc row %s", seed, t + 1, T,
                     np.round(record.matrix.r[t, :t + 1], 3).tolist())
    except (NumericalError, DataError) as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        log.warning("seed %d failed: %s", seed, record.error)
        log.debug("%s", traceback.format_exc())
    record.final_params = x
    return record


def aggregate(records) -> dict:
    """Per-metric mean and sample standard deviation over successful seeds."""
    records = list(records)
    if not records:
        raise DataError("aggregate needs at least one record")
    hashes = {r.config_hash for r in records}
    if len(hashes) != 1:
        raise DataError(f"cannot aggregate records from different configs: {sorted(hashes)}")
    good = [r for r in records if r.ok]
    out = {"n_effective": len(good), "n_total": len(records), "metrics": {}}
    for name in SUMMARY_METRICS:
        vals = [r.metrics()[name] for r in good if r.metrics().get(name) is not None]
        if not vals:
            out["metrics"][name] = None
            continue
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out["metrics"][name] = {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}
    return out


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def metrics_rows(record: RunRecord):
    """One row per task with every metric evaluated on the matrix so far."""
    rows = []
    for t in range(len(record.update_norms)):
        sub = M.AccuracyMatrix.from_array(record.matrix.r[:t + 1, :t + 1])
        m = M.summarize(sub)
        rows.append([record.seed, t, _fmt(m["avg_accuracy"]), _fmt(m["avg_incremental_accuracy"]),
                     _fmt(m["avg_forgetting"]), _fmt(m["backward_transfer"]), _fmt(record.update_norms[t]),
                     _fmt(record.update_sparsity[t]), _fmt(record.effective_stability[t])])
    return rows


METRICS_HEADER = ["seed", "task", "avg_accuracy", "avg_incremental_accuracy", "avg_forgetting",
                  "backward_transfer", "update_norm", "update_sparsity", "effective_stability"]


def summary_digest(summary: dict) -> str:
    """Hash of the deterministic part of a summary (wall-clock and output location excluded)."""
    body = {k: v for k, v in summary.items() if k not in ("timing", "digest")}
    if isinstance(body.get("config"), dict):
        body["config"] = {k: v for k, v in body["config"].items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_outputs(cfg: ExperimentConfig, records, out_dir: Path) -> dict:
    matrix_rows, metric_rows, trace_rows, grid_rows = [], [], [], []
    for rec in records:
        if rec.matrix is not None:
            for i in range(rec.matrix.T):
                for j in range(i + 1):
                    if not np.isnan(rec.matrix.r[i, j]):
                        matrix_rows.append([rec.seed, i, j, repr(float(rec.matrix.r[i, j]))])
        if rec.ok:
            metric_rows += metrics_rows(rec)
        for t, tr in enumerate(rec.traces):
            trace_rows += [[rec.seed, t, r.epoch, r.iter, repr(r.residual), repr(r.loss), repr(r.sparsity_fraction)]
                           for r in tr]
        for t, grid in enumerate(rec.layer_sparsity):
            grid_rows += [[rec.seed, t, name, repr(v)] for name, v in grid.items()]

    atomic_write_text(out_dir / "matrix.csv", _csv(matrix_rows, ["seed", "row", "col", "accuracy"]))
    atomic_write_text(out_dir / "metrics.csv", _csv(metric_rows, METRICS_HEADER))
    atomic_write_text(out_dir / "trace.csv", _csv(
        trace_rows, ["seed", "task", "epoch", "iter", "residual", "loss", "sparsity_fraction"]))
    atomic_write_text(out_dir / "sparsity_grid.csv", _csv(grid_rows, ["seed", "task", "layer", "sparsity"]))

    summary = {
        "schema_version": cfg.raw["schema_version"],
        "config": cfg.raw,
        "config_hash": cfg.hash,
        "method": cfg.method,
        "tasks": cfg.raw["tasks"],
        "seeds": [r.seed for r in records],
        "failed_seeds": [r.seed for r in records if not r.ok],
        "per_seed": {str(r.seed): r.metrics() for r in records},
        "aggregate": aggregate(records),
        "timing": {str(r.seed): r.wall_clock for r in records},
    }
    summary["digest"] = summary_digest(summary)
    atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> list[RunRecord]:
    """Run every configured seed; failed seeds are recorded and skipped."""
    out_dir = cfg.output_dir if write else None
    dataset = build_dataset(cfg)
    records = []
    for seed in cfg.seeds:
        rec = run_seed(cfg, seed, out_dir, dataset)
        if out_dir is not None:
            atomic_write_text(out_dir / "runs" / f"seed_{seed}.json", json.dumps(rec.to_json(), indent=1))
        records.append(rec)
    if out_dir is not None:
        write_outputs(cfg, records, out_dir)
    return records
