"""Conversion quality measurements and empirical bound checks.

Everything here is a pure function over traces and networks; curves are
emitted as plain CSV with fixed column contracts so any plotting tool can
pick them up. No plotting dependencies in the core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ann import Network, _forward_full
from .conversion import SnnNetwork
from .cutoff import CutoffTable, replay_cutoff, spike_gap, \
    confidence_rate as _confidence_rate, earliest_stable_time
from .errors import ValidationError
from .events import DatasetStats, EventStream, frame_aggregate
from .snn import RunTrace, run_batch, ticks_elapsed

__all__ = [
    "LayerSimilarity", "cosine_similarity", "similarity_lower_bound",
    "membrane_norm_bound", "desired_rates", "stream_similarity",
    "dataset_similarity", "outlier_ratios", "accuracy_vs_time",
    "AccuracyPoint", "confidence_curves",
    "write_similarity_csv", "write_accuracy_csv", "write_confidence_csv",
    "write_beta_confidence_csv",
]


@dataclass
class LayerSimilarity:
    """Measured alignment between a layer's spiking rates and its target."""

    layer: int
    name: str
    t_ticks: int
    cos_phi: float | None
    bound: float | None
    rate_error: float | None = None


def cosine_similarity(r, r_d) -> float | None:
    """Cosine between measured and desired rate vectors; None when the
    desired vector vanishes, 0.0 when only the measured one does."""
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    r_d = np.asarray(r_d, dtype=np.float64).reshape(-1)
    if r.shape != r_d.shape:
        raise ValidationError("rate vectors must share a shape")
    nd = np.linalg.norm(r_d)
    if nd == 0.0:
        return None
    nr = np.linalg.norm(r)
    if nr == 0.0:
        return 0.0
    return float(r @ r_d / (nr * nd))


def similarity_lower_bound(a, v_thr: float, t_ticks: int) -> float:
    """Analytic floor for the rate/target cosine after ``t_ticks`` ticks.

    sqrt(3)t / (sqrt(3)t + sqrt(n) v_thr / ||a||); rises toward 1 with time
    and falls as the threshold grows against the activation energy.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        raise ValidationError("activation norm must be positive")
    if t_ticks <= 0:
        raise ValidationError("tick count must be positive")
    s3t = math.sqrt(3.0) * t_ticks
    return s3t / (s3t + math.sqrt(a.size) * v_thr / norm)


def membrane_norm_bound(n: int, v_thr: float, trials: int,
                        seed=0) -> tuple[float, float]:
    """Monte Carlo mean of ||V||_2 for uniform membranes vs its analytic cap.

    With every component uniform on [0, v_thr], Jensen's inequality caps the
    expected norm at sqrt(n) v_thr / sqrt(3). Returns (estimate, cap).
    """
    if trials < 1 or n < 1:
        raise ValidationError("need positive trials and dimension")
    bound = math.sqrt(n) * v_thr / math.sqrt(3.0)
    if v_thr == 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.0, v_thr, size=(trials, n))
    mean = float(np.linalg.norm(v, axis=1).mean())
    return mean, bound


def desired_rates(net: Network, snn: SnnNetwork, frame) -> list[np.ndarray]:
    """Target spiking rates per spiking layer for one input rate tensor.

    The rate recursion's fixpoint: each layer's activation divided by the
    running product of thresholds up to it (its activation ceiling). Hidden
    layers use the ReLU output; the logits layer uses the positive part of
    the logits, which is where an integrate-and-fire neuron's rate converges
    under constant current.
    """
    frame = np.asarray(frame, dtype=np.float64)
    single = frame.shape == net.input_shape
    if single:
        frame = frame[None]
    logits, _, acts = _forward_full(net, frame, train=False)
    out = []
    ceiling = snn.lambda_input
    for layer in snn.layers:
        ceiling *= layer.v_thr
        if layer.index in acts:
            a = acts[layer.index]
        else:
            a = np.maximum(logits, 0.0).reshape(logits.shape[0], -1)
        r = a / ceiling
        out.append(r[0] if single else r)
    return out


def stream_similarity(net: Network, snn: SnnNetwork, stream: EventStream,
                      stats: DatasetStats, ticks: int,
                      frames: int = 1) -> list[LayerSimilarity]:
    """Per-layer cosine and bound after simulating one stream for ``ticks``."""
    return dataset_similarity(net, snn, [stream], stats, [ticks],
                              frames=frames)[ticks]


def dataset_similarity(net: Network, snn: SnnNetwork,
                       streams: Sequence[EventStream], stats: DatasetStats,
                       at_ticks: Sequence[int], frames: int = 1,
                       tick_us: float | None = None,
                       ) -> dict[int, list[LayerSimilarity]]:
    """Mean per-layer similarity over a set of streams at several horizons.

    Targets come from the plain forward pass on each stream's own aggregated
    rates. Returns {tick_count: [LayerSimilarity per spiking layer]}.
    """
    at_ticks = sorted({int(t) for t in at_ticks})
    if not at_ticks or at_ticks[0] < 1:
        raise ValidationError("snapshot tick counts must be positive")
    rates = np.stack([frame_aggregate(s, 1, stats).frames[0] for s in streams])
    targets = desired_rates(net, snn, rates)  # per layer: (N, n)
    traces = run_batch(snn, streams, stats, tick_us=tick_us,
                       max_ticks=at_ticks[-1], snapshot_ticks=at_ticks)
    report: dict[int, list[LayerSimilarity]] = {}
    for t in at_ticks:
        rows = []
        for li, layer in enumerate(snn.layers):
            cos_vals, bounds, errs = [], [], []
            for si, trace in enumerate(traces):
                counts = trace.layer_counts[t][li]
                r = counts.reshape(-1) / t
                r_d = targets[li][si].reshape(-1)
                cos = cosine_similarity(r, r_d)
                if cos is None:
                    continue
                cos_vals.append(cos)
                errs.append(float(np.linalg.norm(r - r_d)))
                a_ref = r_d * layer.v_thr
                bounds.append(similarity_lower_bound(a_ref, layer.v_thr, t))
            rows.append(LayerSimilarity(
                layer=layer.index, name=layer.name, t_ticks=t,
                cos_phi=float(np.mean(cos_vals)) if cos_vals else None,
                bound=float(np.mean(bounds)) if bounds else None,
                rate_error=float(np.mean(errs)) if errs else None))
        report[t] = rows
    return report


def outlier_ratios(net: Network, frames) -> dict[int, float]:
    """Per ReLU layer: sqrt(n) times the activation ceiling over the mean
    per-sample activation norm. The quantity the regulariser pushes down."""
    frames = np.asarray(frames, dtype=np.float64)
    flat = frames.reshape(-1, *net.input_shape)
    _, _, acts = _forward_full(net, flat, train=False)
    out = {}
    for idx in net.relu_indices:
        a = acts[idx]
        lam = float(a.max())
        mean_norm = float(np.sqrt((a * a).sum(axis=1)).mean())
        if mean_norm == 0.0:
            out[idx] = float("inf") if lam > 0 else 0.0
        else:
            out[idx] = math.sqrt(a.shape[1]) * lam / mean_norm
    return out


# ---------------------------------------------------------------------------
# Latency / accuracy curves


@dataclass
class AccuracyPoint:
    t_hat_us: int
    accuracy: float
    cutoff_accuracy: float | None = None
    avg_time_us: float | None = None


def accuracy_vs_time(snn: SnnNetwork, streams: Sequence[EventStream],
                     stats: DatasetStats, grid_us, table: CutoffTable | None = None,
                     traces: Sequence[RunTrace] | None = None,
                     ) -> list[AccuracyPoint]:
    """Accuracy of the running prediction at each checkpoint time.

    With a cutoff table, each point also reports the accuracy and mean stop
    time when every sample halts at its first armed checkpoint at or before
    that time (or is forced to stop there), so the final row carries the
    deployed operating point.
    """
    grid_us = np.asarray(grid_us, dtype=np.int64)
    if traces is None:
        traces = run_batch(snn, streams, stats)
    labels = []
    for i, t in enumerate(traces):
        if t.label is None:
            raise ValidationError(f"trace {i} carries no label")
        labels.append(t.label)
    labels = np.asarray(labels)

    stops = None
    if table is not None:
        stops = [replay_cutoff(t, table) for t in traces]

    points = []
    for t_hat in grid_us:
        preds = np.asarray([
            t.prediction_at(ticks_elapsed(int(t_hat), t.tick_us, t.n_ticks))
            for t in traces])
        acc = float((preds == labels).mean())
        cut_acc = avg_time = None
        if stops is not None:
            cut_preds = np.empty(len(traces), dtype=np.int64)
            cut_times = np.empty(len(traces), dtype=np.float64)
            for i, (trace, (pred, when, used)) in enumerate(zip(traces, stops)):
                if used and when <= t_hat:
                    cut_preds[i] = pred
                    cut_times[i] = when
                else:
                    m = ticks_elapsed(int(t_hat), trace.tick_us, trace.n_ticks)
                    cut_preds[i] = trace.prediction_at(m)
                    cut_times[i] = float(t_hat)
            cut_acc = float((cut_preds == labels).mean())
            avg_time = float(cut_times.mean())
        points.append(AccuracyPoint(int(t_hat), acc, cut_acc, avg_time))
    return points


def confidence_curves(traces: Sequence[RunTrace], grid_us,
                      betas: Sequence[int] | None = None,
                      fixed_t_hat_us: int | None = None):
    """Confidence over time (unconditioned) and over the gap threshold.

    The threshold sweep is evaluated at ``fixed_t_hat_us`` (default: the grid
    point nearest one eighth of the horizon). Returns
    (time_curve, beta_curve, fixed_t_hat_us) with (x, confidence) rows.
    """
    grid_us = np.asarray(grid_us, dtype=np.int64)
    if fixed_t_hat_us is None:
        target = grid_us[-1] / 8
        fixed_t_hat_us = int(grid_us[np.abs(grid_us - target).argmin()])
    if betas is None:
        gaps = [spike_gap(t.counts_at(
            ticks_elapsed(fixed_t_hat_us, t.tick_us, t.n_ticks)))
            for t in traces]
        betas = range(0, max(gaps) + 1)
    time_curve = [(int(t), _confidence_rate(traces, int(t), -1, grid_us))
                  for t in grid_us]
    beta_curve = [(int(b), _confidence_rate(traces, fixed_t_hat_us, int(b), grid_us))
                  for b in betas]
    return time_curve, beta_curve, fixed_t_hat_us


# ---------------------------------------------------------------------------
# CSV emission (fixed column contracts)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_similarity_csv(report: dict[int, list[LayerSimilarity]], path) -> None:
    rows = ["layer,t_ticks,cos_phi,bound"]
    for t in sorted(report):
        for sim in report[t]:
            rows.append(f"{sim.layer},{sim.t_ticks},{_fmt(sim.cos_phi)},{_fmt(sim.bound)}")
    Path(path).write_text("\n".join(rows) + "\n")


def write_accuracy_csv(points: Sequence[AccuracyPoint], path) -> None:
    rows = ["t_hat,accuracy,cutoff_accuracy,avg_time"]
    for p in points:
        rows.append(f"{p.t_hat_us},{_fmt(p.accuracy)},"
                    f"{_fmt(p.cutoff_accuracy)},{_fmt(p.avg_time_us)}")
    Path(path).write_text("\n".join(rows) + "\n")


def write_confidence_csv(curve, path) -> None:
    rows = ["t_hat,confidence"]
    rows.extend(f"{t},{_fmt(c)}" for t, c in curve)
    Path(path).write_text("\n".join(rows) + "\n")


def write_beta_confidence_csv(curve, path) -> None:
    rows = ["beta,confidence"]
    rows.extend(f"{b},{_fmt(c)}" for b, c in curve)
    Path(path).write_text("\n".join(rows) + "\n")
