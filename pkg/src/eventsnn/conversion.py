"""Turn a trained ReLU network into an integrate-and-fire spiking network.

Each dense/conv layer becomes a spiking layer whose threshold is the ratio of
its activation ceiling to the previous layer's, with the bias rescaled by the
previous ceiling. Binary event input has a ceiling of 1 by convention, so the
first layer's parameters pass through unscaled when ticks run at the natural
dataset resolution.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ann
from .ann import ActivationStats, AvgPool2d, Conv2d, Dense, Flatten, Network
from .errors import ValidationError

__all__ = ["SnnLayer", "SnnNetwork", "convert", "verify_equivalence",
           "save_snn", "load_snn"]

EXTRA_CHARGE_MODES = ("initial", "per-tick", "none")


@dataclass
class SnnLayer:
    """One integrate-and-fire layer: a linear kernel, scaled bias, threshold.

    ``pre_ops`` are the stateless transforms (pooling, flatten) sitting
    between the previous spiking layer's output and this layer's input.
    """

    kernel: object
    bias: np.ndarray
    v_thr: float
    pre_ops: tuple
    index: int
    out_shape: tuple
    name: str

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.bias.setflags(write=False)
        if not self.v_thr > 0:
            raise ValidationError(f"{self.name}: threshold must be positive")

    def input_current(self, spikes):
        """Weighted current for one tick given the previous layer's spikes."""
        x = spikes
        for op in self.pre_ops:
            x = op.apply(x)
        z = self.kernel.linear(x)
        return self.kernel.add_bias(z, self.bias)

    def transform(self, x):
        """Apply only the stateless pre-ops (linear, so they commute with sums)."""
        for op in self.pre_ops:
            x = op.apply(x)
        return x


@dataclass
class SnnNetwork:
    layers: list[SnnLayer]
    input_shape: tuple
    n_classes: int
    lambda_input: float = 1.0
    extra_charge: str = "initial"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.extra_charge not in EXTRA_CHARGE_MODES:
            raise ValidationError(
                f"extra_charge must be one of {EXTRA_CHARGE_MODES}")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @property
    def initial_charge(self) -> bool:
        return self.extra_charge == "initial"

    @property
    def thresholds(self) -> list[float]:
        return [l.v_thr for l in self.layers]


def convert(net: Network, stats: ActivationStats, *, initial_charge: bool = True,
            per_tick_charge: bool = False, lambda_input: float = 1.0) -> SnnNetwork:
    """Build the spiking network via threshold and bias scaling.

    Requires a batchnorm-free network (fold first) and a ceiling for every
    dense/conv layer. ``lambda_input`` is the assumed scale of the input spike
    rate; binary events at the natural tick width give 1. The half-threshold
    head start defaults to an initial membrane charge; ``per_tick_charge``
    switches it to an extra current injected every tick.
    """
    if isinstance(net, SnnNetwork):
        raise TypeError("network is already converted")
    if not isinstance(net, Network):
        raise TypeError(f"expected a Network, got {type(net).__name__}")
    if initial_charge and per_tick_charge:
        raise ValidationError("choose one of initial_charge / per_tick_charge")
    if not lambda_input > 0:
        raise ValidationError("lambda_input must be positive")
    for layer in net.layers:
        if layer.kind == "batchnorm":
            raise ValidationError("fold batchnorm layers before converting")

    mode = "initial" if initial_charge else ("per-tick" if per_tick_charge else "none")
    layers = []
    lam_prev = float(lambda_input)
    pending_ops = []
    for step in net._plan:
        layer = step.layer
        if layer.kind in ("avgpool", "flatten"):
            pending_ops.append(copy.deepcopy(layer))
            continue
        if step.index not in stats.lambdas:
            raise ValidationError(
                f"no activation ceiling for layer {step.index} ({layer.kind})")
        lam = float(stats.lambdas[step.index])
        if not lam > 0:
            raise ValidationError(f"layer {step.index}: ceiling must be positive")
        kernel = copy.deepcopy(layer)
        layers.append(SnnLayer(
            kernel=kernel,
            bias=layer.bias / lam_prev,
            v_thr=lam / lam_prev,
            pre_ops=tuple(pending_ops),
            index=step.index,
            out_shape=tuple(net.out_shape_of(step.index)),
            name=f"{layer.kind}{step.index}",
        ))
        pending_ops = []
        lam_prev = lam
    meta = dict(net.metadata)
    return SnnNetwork(layers=layers, input_shape=net.input_shape,
                      n_classes=net.n_classes, lambda_input=float(lambda_input),
                      extra_charge=mode, metadata=meta)


def verify_equivalence(net: Network, snn: SnnNetwork, rates, ticks: int):
    """Drive both networks with the same rate pattern and compare per layer.

    The spiking side sees an evenly spaced binary realisation of ``rates``
    (clipped to [0, 1] for generation); the reference side is the plain
    forward pass. Returns one :class:`analysis.LayerSimilarity` per spiking
    layer with the measured rate error, cosine similarity, and its analytic
    lower bound at this tick count.
    """
    from . import analysis, snn as sim

    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != net.input_shape:
        raise ValidationError(
            f"rates shape {rates.shape} does not match input {net.input_shape}")
    gen = np.clip(rates, 0.0, 1.0)
    desired = analysis.desired_rates(net, snn, rates)
    state = sim.init_state(snn)
    prev = np.floor(0 * gen)
    for k in range(ticks):
        cur = np.floor((k + 1) * gen)
        spikes = (cur - prev)[None]
        sim.step(state, snn, spikes)
        prev = cur
    report = []
    for li, layer in enumerate(snn.layers):
        r = state.counts[li][0].reshape(-1) / ticks
        r_d = desired[li].reshape(-1)
        cos = analysis.cosine_similarity(r, r_d)
        a_ref = r_d * layer.v_thr
        bound = analysis.similarity_lower_bound(a_ref, layer.v_thr, ticks) \
            if np.linalg.norm(a_ref) > 0 else None
        report.append(analysis.LayerSimilarity(
            layer=layer.index, name=layer.name, t_ticks=ticks,
            cos_phi=cos, bound=bound,
            rate_error=float(np.linalg.norm(r - r_d))))
    return report


# ---------------------------------------------------------------------------
# Converted model files


def save_snn(snn: SnnNetwork, path) -> None:
    layers = []
    for layer in snn.layers:
        doc = ann._layer_to_json(layer.kernel)
        doc["bias_scaled"] = layer.bias.tolist()
        doc["v_thr"] = layer.v_thr
        doc["index"] = layer.index
        doc["pre_ops"] = [ann._layer_to_json(op) for op in layer.pre_ops]
        layers.append(doc)
    doc = {
        "format": "eventsnn-snn",
        "version": 1,
        "converted": True,
        "input_shape": list(snn.input_shape),
        "n_classes": snn.n_classes,
        "lambda_input": snn.lambda_input,
        "extra_charge": snn.extra_charge,
        "layers": layers,
        "metadata": snn.metadata,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_snn(path) -> SnnNetwork:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "eventsnn-snn" or not doc.get("converted"):
        raise ValidationError(f"{path}: not a converted model file")
    layers = []
    shape = tuple(doc["input_shape"])
    for entry in doc["layers"]:
        kernel = ann._layer_from_json(
            {k: v for k, v in entry.items()
             if k not in ("bias_scaled", "v_thr", "index", "pre_ops")})
        pre_ops = tuple(ann._layer_from_json(d) for d in entry["pre_ops"])
        for op in pre_ops:
            shape = op.out_shape(shape)
        shape = kernel.out_shape(shape)
        layers.append(SnnLayer(
            kernel=kernel, bias=np.asarray(entry["bias_scaled"]),
            v_thr=float(entry["v_thr"]), pre_ops=pre_ops,
            index=int(entry["index"]), out_shape=shape,
            name=f"{kernel.kind}{entry['index']}"))
    return SnnNetwork(layers=layers, input_shape=tuple(doc["input_shape"]),
                      n_classes=int(doc["n_classes"]),
                      lambda_input=float(doc.get("lambda_input", 1.0)),
                      extra_charge=doc.get("extra_charge", "initial"),
                      metadata=doc.get("metadata", {}))
