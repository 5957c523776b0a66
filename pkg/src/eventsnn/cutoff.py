"""Confidence-calibrated early cutoff for event-driven inference.

A prediction is trusted once the gap between the top two output spike counts
exceeds a calibrated integer threshold. Thresholds are chosen per checkpoint
time as the smallest gap for which the conditioned confidence rate on the
calibration split reaches 1 - epsilon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conversion import SnnNetwork
from .errors import ValidationError
from .events import DatasetStats, EventStream
from .snn import RunTrace, init_state, step, ticks_elapsed, total_ticks, \
    _event_tick_index, _resolve_tick

__all__ = [
    "NEVER", "CutoffTable", "CutoffResult", "spike_gap",
    "earliest_stable_time", "confidence_rate", "calibrate",
    "infer_with_cutoff", "replay_cutoff", "default_grid",
    "save_table", "load_table",
]

NEVER = float("inf")


def default_grid(duration_us: int, points: int = 32) -> np.ndarray:
    """Evenly spaced checkpoint times in (0, duration], microseconds."""
    if points < 1 or duration_us < 1:
        raise ValidationError("need a positive duration and point count")
    grid = np.unique((np.arange(1, points + 1, dtype=np.int64) * duration_us) // points)
    return grid[grid > 0]


@dataclass
class CutoffTable:
    """Checkpoint times paired with the spike-gap thresholds that arm cutoff."""

    t_hat_us: np.ndarray
    beta: np.ndarray
    epsilon: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_hat_us = np.asarray(self.t_hat_us, dtype=np.int64)
        self.beta = np.asarray(self.beta, dtype=np.int64)
        if self.t_hat_us.shape != self.beta.shape or self.t_hat_us.ndim != 1:
            raise ValidationError("checkpoint and threshold arrays must match 1-d")
        if self.t_hat_us.size and np.any(np.diff(self.t_hat_us) <= 0):
            raise ValidationError("checkpoint times must be strictly increasing")
        if np.any(self.beta < 0):
            raise ValidationError("gap thresholds must be >= 0")

    def __len__(self) -> int:
        return self.t_hat_us.size

    @classmethod
    def disabled(cls, grid_us) -> "CutoffTable":
        """A table whose thresholds can never trigger (int64 max sentinel)."""
        grid_us = np.asarray(grid_us, dtype=np.int64)
        sentinel = np.iinfo(np.int64).max - 1
        return cls(grid_us, np.full(grid_us.shape, sentinel, dtype=np.int64))


@dataclass
class CutoffResult:
    prediction: int
    cutoff_time_us: int
    used_cutoff: bool
    ticks_run: int
    counts: np.ndarray


def spike_gap(counts) -> int:
    """Gap between the largest and second-largest output spike counts."""
    counts = np.asarray(counts).reshape(-1)
    if counts.size < 2:
        raise ValidationError("need at least two classes for a spike gap")
    top = np.partition(counts, -2)
    return int(top[-1] - top[-2])


def _grid_predictions(trace: RunTrace, grid_us) -> np.ndarray:
    m = [ticks_elapsed(t, trace.tick_us, trace.n_ticks) for t in grid_us]
    return np.asarray([trace.prediction_at(k) for k in m], dtype=np.int64)


def _grid_gaps(trace: RunTrace, grid_us) -> np.ndarray:
    m = [ticks_elapsed(t, trace.tick_us, trace.n_ticks) for t in grid_us]
    return np.asarray([spike_gap(trace.counts_at(k)) for k in m], dtype=np.int64)


def earliest_stable_time(trace: RunTrace, grid_us, label: int | None = None) -> float:
    """Earliest grid time after which every later checkpoint predicts the label.

    Returns 0 when every checkpoint is already correct and :data:`NEVER` when
    the final checkpoint is wrong (no time satisfies the condition). Found by
    a backward scan: the answer is the time of the last incorrect checkpoint.
    """
    grid_us = np.asarray(grid_us, dtype=np.int64)
    if grid_us.size == 0:
        raise ValidationError("empty checkpoint grid")
    if label is None:
        label = trace.label
    if label is None:
        raise ValidationError("trace carries no label")
    correct = _grid_predictions(trace, grid_us) == label
    if not correct[-1]:
        return NEVER
    wrong = np.nonzero(~correct)[0]
    if wrong.size == 0:
        return 0.0
    return float(grid_us[wrong[-1]])


def confidence_rate(traces: Sequence[RunTrace], t_hat_us: float, beta: int,
                    grid_us) -> float:
    """Fraction of gap-conditioned traces already stable by ``t_hat_us``.

    Conditions on the spike gap at the checkpoint exceeding ``beta``
    (pass -1 for no restriction); an empty conditioned set counts as 1.
    """
    if not traces:
        raise ValidationError("no traces")
    stable = 0
    selected = 0
    for trace in traces:
        m = ticks_elapsed(t_hat_us, trace.tick_us, trace.n_ticks)
        if spike_gap(trace.counts_at(m)) > beta:
            selected += 1
            if earliest_stable_time(trace, grid_us) <= t_hat_us:
                stable += 1
    if selected == 0:
        return 1.0
    return stable / selected


def calibrate(traces: Sequence[RunTrace], epsilon: float, grid_us) -> CutoffTable:
    """Smallest gap threshold per checkpoint reaching confidence 1 - epsilon.

    Searches integers upward from 0; when no threshold up to the largest
    observed gap suffices, the checkpoint gets that maximum plus one, which
    disables cutoff there on the calibration data.
    """
    if not traces:
        raise ValidationError("no calibration traces")
    if not 0 <= epsilon < 1:
        raise ValidationError("epsilon must lie in [0, 1)")
    grid_us = np.asarray(grid_us, dtype=np.int64)
    if grid_us.size == 0:
        raise ValidationError("empty checkpoint grid")
    g = np.asarray([earliest_stable_time(t, grid_us) for t in traces])
    gaps = np.stack([_grid_gaps(t, grid_us) for t in traces])  # (N, K)
    betas = np.empty(grid_us.size, dtype=np.int64)
    target = 1.0 - epsilon
    for k, t_hat in enumerate(grid_us):
        stable = g <= t_hat
        col = gaps[:, k]
        order = np.argsort(col, kind="stable")
        col_sorted = col[order]
        stable_sorted = stable[order].astype(np.int64)
        cum_stable = np.concatenate([[0], np.cumsum(stable_sorted)])
        n = col.size
        total_stable = cum_stable[-1]
        max_gap = int(col_sorted[-1])
        chosen = max_gap + 1
        candidates = np.arange(0, max_gap + 1, dtype=np.int64)
        pos = np.searchsorted(col_sorted, candidates, side="right")
        count_gt = n - pos
        stable_gt = total_stable - cum_stable[pos]
        with np.errstate(invalid="ignore", divide="ignore"):
            rate = np.where(count_gt > 0, stable_gt / np.maximum(count_gt, 1), 1.0)
        ok = np.nonzero(rate >= target - 1e-12)[0]
        if ok.size:
            chosen = int(candidates[ok[0]])
        betas[k] = chosen
    return CutoffTable(grid_us, betas, epsilon=float(epsilon),
                       meta={"grid_points": int(grid_us.size)})


def replay_cutoff(trace: RunTrace, table: CutoffTable) -> tuple[int, int, bool]:
    """Cutoff decision recomputed from a recorded trace.

    Equivalent to the live monitor because stopping early never changes the
    counts already accumulated at a checkpoint.
    """
    for t_hat, beta in zip(table.t_hat_us, table.beta):
        m = ticks_elapsed(t_hat, trace.tick_us, trace.n_ticks)
        counts = trace.counts_at(m)
        if spike_gap(counts) > beta:
            return int(counts.argmax()), int(t_hat), True
    return trace.prediction_at(trace.n_ticks), int(trace.duration_us), False


def infer_with_cutoff(snn: SnnNetwork, stream: EventStream,
                      stats: DatasetStats | None, table: CutoffTable, *,
                      tick_us: float | None = None) -> CutoffResult:
    """Simulate tick by tick, stopping as soon as a checkpoint's gap test arms.

    Between checkpoints the monitor is idle. When no checkpoint triggers the
    full stream is consumed and the final counts decide.
    """
    width = _resolve_tick(stats, tick_us)
    if table.t_hat_us.size and int(table.t_hat_us[-1]) > stream.duration_us:
        raise ValidationError("cutoff checkpoints extend beyond the stream duration")
    expected = (2, stream.height, stream.width)
    if snn.input_shape != expected:
        raise ValidationError(
            f"network expects input {snn.input_shape}, stream gives {expected}")
    n_ticks = total_ticks(stream.duration_us, width)
    check_at: dict[int, list[int]] = {}
    for i, t_hat in enumerate(table.t_hat_us):
        m = ticks_elapsed(int(t_hat), width, n_ticks)
        check_at.setdefault(m, []).append(i)

    state = init_state(snn)
    ticks = _event_tick_index(stream, width, n_ticks) if len(stream) else \
        np.empty(0, dtype=np.int64)
    starts = np.searchsorted(ticks, np.arange(n_ticks + 1))
    buf = np.zeros((1, 2, stream.height, stream.width), dtype=np.float64)
    out = len(snn.layers) - 1

    def checkpoint_hit(done: int) -> CutoffResult | None:
        for i in check_at.get(done, ()):
            counts = state.counts[out][0]
            if spike_gap(counts) > int(table.beta[i]):
                return CutoffResult(
                    prediction=int(counts.argmax()),
                    cutoff_time_us=int(table.t_hat_us[i]),
                    used_cutoff=True, ticks_run=done, counts=counts.copy())
        return None

    hit = checkpoint_hit(0)
    if hit is not None:
        return hit
    for k in range(n_ticks):
        buf[...] = 0.0
        lo, hi = starts[k], starts[k + 1]
        if hi > lo:
            buf[0, stream.polarity[lo:hi], stream.y[lo:hi], stream.x[lo:hi]] = 1.0
        step(state, snn, buf)
        hit = checkpoint_hit(k + 1)
        if hit is not None:
            return hit
    counts = state.counts[out][0]
    return CutoffResult(prediction=int(counts.argmax()),
                        cutoff_time_us=int(stream.duration_us),
                        used_cutoff=False, ticks_run=n_ticks,
                        counts=counts.copy())


# ---------------------------------------------------------------------------
# Table files


def save_table(table: CutoffTable, path) -> None:
    """CSV of (t_hat_us, beta) rows plus a JSON sidecar with the metadata."""
    path = Path(path)
    rows = ["t_hat_us,beta"]
    rows.extend(f"{int(t)},{int(b)}" for t, b in zip(table.t_hat_us, table.beta))
    path.write_text("\n".join(rows) + "\n")
    sidecar = {"epsilon": table.epsilon,
               "grid_us": [int(t) for t in table.t_hat_us],
               "meta": table.meta}
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")


def load_table(path) -> CutoffTable:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "t_hat_us,beta":
        raise ValidationError(f"{path}: expected header 't_hat_us,beta'")
    t_hat, beta = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValidationError(f"{path}, line {lineno}: expected 2 fields")
        t_hat.append(int(parts[0]))
        beta.append(int(parts[1]))
    epsilon = None
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        doc = json.loads(sidecar.read_text())
        epsilon = doc.get("epsilon")
        meta = doc.get("meta", {})
    return CutoffTable(np.asarray(t_hat), np.asarray(beta),
                       epsilon=epsilon, meta=meta)
