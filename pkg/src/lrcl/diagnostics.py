"""Fisher drift tracking across the task sequence.

After each new task, the Fisher of an old task is recomputed on that
task's retained data and compared against the snapshot taken when the
task was learned: the norm ratio measures inflation or degradation of the
overall scale, Spearman rank correlation measures whether the ordering of
parameter importance survives, and cosine similarity measures directional
alignment. The rehearsal-free regime compares the decayed accumulator
against the snapshot; the rehearsal-based regime recomputes a pooled
Fisher over all data seen so far. Retaining old task data here is
deliberate: this module is analysis-only and exempt from the training
loop's discard rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fisher as fisher_mod
from .errors import MetricError, ParameterError
from .fisher import FisherDiag, fisher_norm, flatten
from .metrics import AccuracyMatrix
from .model import accuracy
from .tasks import TaskStream, concat_datasets
from .tensor import RngState
from .trainer import ContinualLearner, TrainConfig, _build_fixed_fisher, prepare_base_network

REGIMES = ("rehearsal_free", "rehearsal_based")


def norm_ratio(f_now: FisherDiag, f_orig: FisherDiag) -> float:
    """||f_now|| / ||f_orig||, Frobenius over all layers concatenated."""
    denom = fisher_norm(f_orig)
    if denom == 0.0:
        raise MetricError("norm ratio undefined for a zero baseline Fisher")
    return fisher_norm(f_now) / denom


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; runs of equal values share their mean rank."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        mean_rank = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(v1, v2) -> float:
    """Rank correlation with average ranks for ties.

    Computed as the Pearson correlation of the rank vectors, which reduces
    to the classic 1 - 6*sum(d^2)/(n(n^2-1)) form when no ties occur.
    """
    x = np.asarray(v1, dtype=np.float64)
    y = np.asarray(v2, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise MetricError("spearman needs two equal-length vectors")
    n = len(x)
    if n < 2:
        raise MetricError("spearman needs at least two entries")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("spearman undefined for a constant vector")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float(np.dot(dx, dy) / np.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))


def cosine_sim(v1, v2) -> float:
    """Cosine of the angle between two vectors.

    Identical inputs short-circuit to exactly 1.0; the sqrt/divide route
    would otherwise lose the last ulp on a mathematically exact case.
    """
    x = np.asarray(v1, dtype=np.float64)
    y = np.asarray(v2, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise MetricError("cosine needs two equal-length vectors")
    nx = float(np.sqrt(np.dot(x, x)))
    ny = float(np.sqrt(np.dot(y, y)))
    if nx == 0.0 or ny == 0.0:
        raise MetricError("cosine undefined for a zero vector")
    if np.array_equal(x, y):
        return 1.0
    return float(np.dot(x, y) / (nx * ny))


@dataclass
class DriftRow:
    task_trained: int
    task_data: int
    regime: str
    norm_ratio: float
    spearman: float
    cosine: float


@dataclass
class FisherSnapshotLog:
    """Recomputed per-(task_trained, task_data) Fishers, in training order."""

    regime: str
    entries: list[tuple[int, int, FisherDiag]]


def track_fisher_drift(
    config: TrainConfig,
    stream: TaskStream,
    tracked_tasks: list[int],
    regime: str,
) -> tuple[FisherSnapshotLog, list[DriftRow], AccuracyMatrix]:
    """Drive a continual run and report Fisher drift for the tracked tasks.

    The row at task_trained == task_data compares a snapshot with itself
    and is exactly (1, 1, 1); later rows compare the regime's Fisher
    against that snapshot. All recomputations happen on the post-merge
    model, with the estimator the config names.
    """
    if regime not in REGIMES:
        raise ParameterError(f"unknown regime {regime!r}; pick one of {REGIMES}")
    for i in tracked_tasks:
        if not 0 <= i < stream.num_tasks:
            raise ParameterError(f"tracked task {i} outside the stream")

    stream.validate()
    net = prepare_base_network(config, stream)
    f_fixed = _build_fixed_fisher(net, config, stream)
    learner = ContinualLearner(net, config, f_fixed=f_fixed)
    rng_diag = RngState(config.seed).derive("drift-estimates")

    snapshots: dict[int, FisherDiag] = {}
    log_entries: list[tuple[int, int, FisherDiag]] = []
    rows: list[DriftRow] = []
    acc = AccuracyMatrix(stream.num_tasks)

    for t, task in enumerate(stream.tasks):
        learner.step(task)
        acc.add_row([accuracy(net, stream.tasks[i].test.X, stream.tasks[i].test.y) for i in range(t + 1)])

        pooled = None
        for i in sorted(tracked_tasks):
            if i > t:
                continue
            f_now = fisher_mod.estimate(net, stream.tasks[i].train, config.estimator, rng_diag)
            log_entries.append((t, i, f_now))
            if i == t:
                snapshots[i] = f_now
                rows.append(DriftRow(t, i, regime, 1.0, 1.0, 1.0))
                continue
            base = snapshots[i]
            if regime == "rehearsal_free":
                comparator = learner.f_cum
            else:
                if pooled is None:
                    joined = concat_datasets([stream.tasks[j].train for j in range(t + 1)])
                    pooled = fisher_mod.estimate(net, joined, config.estimator, rng_diag)
                comparator = pooled
            rows.append(
                DriftRow(
                    task_trained=t,
                    task_data=i,
                    regime=regime,
                    norm_ratio=norm_ratio(f_now, base),
                    spearman=spearman(flatten(comparator), flatten(base)),
                    cosine=cosine_sim(flatten(comparator), flatten(base)),
                )
            )

    return FisherSnapshotLog(regime=regime, entries=log_entries), rows, acc
