"""Small ReLU networks with hand-rolled backprop.

Layers: dense, conv2d, avgpool, batchnorm, flatten. A batchnorm layer must
sit directly after a dense/conv layer; when that affine layer carries
``relu=True`` the activation applies after the normalisation, so the pair
folds into a single affine layer for conversion.

Activations are batch-major: a layer's activation batch has shape (B, n)
after flattening, one row per sample.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TrainingDivergedError, ValidationError

__all__ = [
    "Dense", "Conv2d", "AvgPool2d", "BatchNorm", "Flatten",
    "Network", "TrainConfig", "ActivationStats",
    "forward", "predict", "temporal_loss", "outlier_penalty",
    "objective", "backward", "train", "collect_lambda", "fold_batchnorm",
    "save_model", "load_model", "save_stats", "load_stats",
]

NEG_INF = float("-inf")


class Dense:
    kind = "dense"

    def __init__(self, weight, bias, relu: bool = False):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError("dense weight must be (units, in), bias (units,)")
        self.relu = bool(relu)

    @classmethod
    def create(cls, in_dim: int, units: int, relu: bool, rng) -> "Dense":
        limit = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-limit, limit, size=(units, in_dim))
        return cls(weight, np.zeros(units), relu)

    @property
    def units(self) -> int:
        return self.weight.shape[0]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[1]:
            raise ValidationError(
                f"dense expects ({self.weight.shape[1]},) input, got {in_shape}")
        return (self.units,)

    def linear(self, x):
        return x @ self.weight.T

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def add_bias(self, z, bias=None):
        return z + (self.bias if bias is None else bias)


class Conv2d:
    kind = "conv2d"

    def __init__(self, weight, bias, stride: int = 1, padding: int = 0,
                 relu: bool = False):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValidationError("conv weight must be (filters, in_c, k, k)")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValidationError("conv bias must be (filters,)")
        if stride < 1 or padding < 0:
            raise ValidationError("conv needs stride >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)
        self.relu = bool(relu)

    @classmethod
    def create(cls, in_channels: int, filters: int, kernel: int, relu: bool,
               rng, stride: int = 1, padding: int = 0) -> "Conv2d":
        fan_in = in_channels * kernel * kernel
        limit = 1.0 / math.sqrt(fan_in)
        weight = rng.uniform(-limit, limit, size=(filters, in_channels, kernel, kernel))
        return cls(weight, np.zeros(filters), stride, padding, relu)

    @property
    def filters(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ValidationError(
                f"conv expects ({self.weight.shape[1]}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"conv output collapses for input {in_shape}")
        return (self.filters, oh, ow)

    def _cols(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        b, c, h, w = x.shape
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
        return cols.reshape(b, c * k * k, oh * ow), oh, ow

    def linear(self, x):
        cols, oh, ow = self._cols(np.asarray(x, dtype=np.float64))
        z = np.einsum("fk,bkl->bfl", self.weight.reshape(self.filters, -1), cols)
        return z.reshape(x.shape[0], self.filters, oh, ow)

    def _forward_cache(self, x):
        cols, oh, ow = self._cols(x)
        z = np.einsum("fk,bkl->bfl", self.weight.reshape(self.filters, -1), cols)
        z = z.reshape(x.shape[0], self.filters, oh, ow) + self.bias[:, None, None]
        return z, (cols, x.shape, oh, ow)

    def _backward(self, dz, cache):
        cols, xshape, oh, ow = cache
        b = dz.shape[0]
        dflat = dz.reshape(b, self.filters, oh * ow)
        dw = np.einsum("bfl,bkl->fk", dflat, cols).reshape(self.weight.shape)
        db = dz.sum(axis=(0, 2, 3))
        dcols = np.einsum("fk,bfl->bkl", self.weight.reshape(self.filters, -1), dflat)
        dx = self._col2im(dcols, xshape, oh, ow)
        return dx, dw, db

    def _col2im(self, dcols, xshape, oh, ow):
        k, s, p = self.kernel, self.stride, self.padding
        b, c, h, w = xshape
        dx = np.zeros((b, c, h + 2 * p, w + 2 * p))
        dcols = dcols.reshape(b, c, k, k, oh, ow)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        return dx[:, :, p:p + h, p:p + w] if p else dx

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def add_bias(self, z, bias=None):
        b = self.bias if bias is None else bias
        return z + b[:, None, None]


class AvgPool2d:
    kind = "avgpool"

    def __init__(self, size: int, stride: int | None = None):
        if size < 1:
            raise ValidationError("pool size must be >= 1")
        self.size = int(size)
        self.stride = int(stride) if stride is not None else int(size)
        if self.stride < 1:
            raise ValidationError("pool stride must be >= 1")
        self.relu = False

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValidationError(f"avgpool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        oh = (h - self.size) // self.stride + 1
        ow = (w - self.size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"avgpool output collapses for input {in_shape}")
        return (c, oh, ow)

    def apply(self, x):
        k, s = self.size, self.stride
        b, c, h, w = x.shape
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        out = np.zeros((b, c, oh, ow), dtype=np.float64)
        for i in range(k):
            for j in range(k):
                out += x[:, :, i:i + s * oh:s, j:j + s * ow:s]
        return out / (k * k)

    def _backward(self, dz, xshape):
        k, s = self.size, self.stride
        b, c, h, w = xshape
        oh, ow = dz.shape[2], dz.shape[3]
        dx = np.zeros(xshape)
        g = dz / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += g
        return dx

    def params(self):
        return {}


class Flatten:
    kind = "flatten"
    relu = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, x):
        return x.reshape(x.shape[0], -1)

    def params(self):
        return {}


class BatchNorm:
    kind = "batchnorm"
    relu = False

    def __init__(self, gamma, beta, mean, var, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        shapes = {self.gamma.shape, self.beta.shape, self.mean.shape, self.var.shape}
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ValidationError("batchnorm parameter vectors must share one 1-d shape")
        self.eps = float(eps)
        self.momentum = float(momentum)

    @classmethod
    def create(cls, features: int) -> "BatchNorm":
        return cls(np.ones(features), np.zeros(features),
                   np.zeros(features), np.ones(features))

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def _reshape(self, v, ndim):
        return v.reshape(1, -1, *([1] * (ndim - 2)))

    def forward(self, x, train: bool, update_stats: bool = False):
        axes = tuple(i for i in range(x.ndim) if i != 1)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = self.momentum
                self.mean = (1 - m) * self.mean + m * mu
                self.var = (1 - m) * self.var + m * var
        else:
            mu, var = self.mean, self.var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._reshape(mu, x.ndim)) * self._reshape(inv, x.ndim)
        y = self._reshape(self.gamma, x.ndim) * xhat + self._reshape(self.beta, x.ndim)
        return y, (xhat, inv, axes)

    def _backward(self, dy, cache):
        xhat, inv, axes = cache
        m = float(np.prod([dy.shape[i] for i in axes]))
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        g = self._reshape(self.gamma, dy.ndim)
        dxhat = dy * g
        term = dxhat - dxhat.mean(axis=axes, keepdims=True) \
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
        dx = term * self._reshape(inv, dy.ndim)
        return dx, dgamma, dbeta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


AFFINE_KINDS = ("dense", "conv2d")


@dataclass
class _Step:
    layer: object
    index: int
    bn: BatchNorm | None = None
    bn_index: int | None = None


class Network:
    """An ordered layer stack ending in a dense logits layer.

    The constructor validates shape compatibility, batchnorm placement, and
    that the final layer is a dense layer without ReLU matching ``n_classes``.
    """

    def __init__(self, layers: Sequence, input_shape, n_classes: int,
                 metadata: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.n_classes = int(n_classes)
        self.metadata = dict(metadata or {})
        self._plan = self._build_plan()

    def _build_plan(self):
        plan = []
        shape = self.input_shape
        i = 0
        shapes = {}
        while i < len(self.layers):
            layer = self.layers[i]
            if layer.kind == "batchnorm":
                raise ValidationError(
                    f"layer {i}: batchnorm must directly follow a dense/conv layer")
            if layer.kind in AFFINE_KINDS:
                step = _Step(layer, i)
                shape = layer.out_shape(shape)
                if i + 1 < len(self.layers) and self.layers[i + 1].kind == "batchnorm":
                    bn = self.layers[i + 1]
                    if bn.features != shape[0]:
                        raise ValidationError(
                            f"layer {i + 1}: batchnorm width {bn.features} does not "
                            f"match {shape[0]} features")
                    step.bn = bn
                    step.bn_index = i + 1
                    i += 1
                plan.append(step)
            else:
                shape = layer.out_shape(shape)
                plan.append(_Step(layer, i))
            shapes[plan[-1].index] = shape
            i += 1
        if not plan or plan[-1].layer.kind != "dense":
            raise ValidationError("network must end in a dense logits layer")
        last = plan[-1].layer
        if last.relu:
            raise ValidationError("logits layer must not carry ReLU")
        if last.units != self.n_classes:
            raise ValidationError(
                f"logits layer has {last.units} units, expected {self.n_classes}")
        self._shapes = shapes
        return plan

    @property
    def spiking_indices(self) -> list[int]:
        """Indices of the dense/conv layers, in order."""
        return [s.index for s in self._plan if s.layer.kind in AFFINE_KINDS]

    @property
    def relu_indices(self) -> list[int]:
        return [s.index for s in self._plan
                if s.layer.kind in AFFINE_KINDS and s.layer.relu]

    def out_shape_of(self, index: int):
        return self._shapes[index]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameter_count(self) -> int:
        return sum(int(p.size) for layer in self.layers
                   for p in layer.params().values())


# ---------------------------------------------------------------------------
# Forward / losses


def _forward_full(net: Network, x, train: bool = False,
                  update_stats: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ValidationError(
            f"input shape {x.shape[1:]} does not match {net.input_shape}")
    caches = []
    acts = {}
    h = x
    for step in net._plan:
        layer = step.layer
        if layer.kind == "dense":
            pre = h @ layer.weight.T + layer.bias
            cache = {"x": h}
        elif layer.kind == "conv2d":
            pre, conv_cache = layer._forward_cache(h)
            cache = {"conv": conv_cache}
        elif layer.kind == "avgpool":
            cache = {"xshape": h.shape}
            h = layer.apply(h)
            caches.append(cache)
            continue
        else:  # flatten
            cache = {"xshape": h.shape}
            h = layer.apply(h)
            caches.append(cache)
            continue
        if step.bn is not None:
            pre, bn_cache = step.bn.forward(pre, train, update_stats)
            cache["bn"] = bn_cache
        if layer.relu:
            h = np.maximum(pre, 0.0)
        else:
            h = pre
        cache["out"] = h
        caches.append(cache)
        if layer.relu:
            acts[step.index] = h.reshape(h.shape[0], -1)
    return h, caches, acts


def forward(net: Network, frame, train: bool = False):
    """Run one rate tensor (or a batch) through the network.

    Returns ``(activations, logits)`` where activations maps each ReLU layer
    index to its flattened batch matrix (B, n).
    """
    frame = np.asarray(frame, dtype=np.float64)
    single = frame.shape == net.input_shape
    if single:
        frame = frame[None]
    logits, _, acts = _forward_full(net, frame, train=train)
    if single:
        logits = logits[0]
    return acts, logits


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def temporal_loss(logits_per_frame, labels) -> float:
    """Mean cross-entropy over frames: each frame scored against the label."""
    logits = np.asarray(logits_per_frame, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    f, b, _ = logits.shape
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
    total = 0.0
    for i in range(f):
        total += float(_cross_entropy(logits[i], labels).mean())
    return total / f


def predict(net: Network, frames) -> np.ndarray:
    """Class predictions from per-frame softmax averaged over frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == len(net.input_shape) + 1:
        frames = frames[:, None]
    n, f = frames.shape[:2]
    flat = frames.reshape(n * f, *net.input_shape)
    _, logits = forward(net, flat)
    probs = _softmax(logits).reshape(n, f, net.n_classes).mean(axis=1)
    return probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# Outlier penalty


def _column_norms(a):
    return np.sqrt((a * a).sum(axis=1))


def outlier_penalty(a_batch, q: float = NEG_INF) -> float:
    """Ratio of the peak activation to the generalised per-sample norm.

    For the default q = -inf the denominator is the weakest sample's L2 norm,
    so the penalty grows when one entry spikes far above what the dimmest
    sample in the batch accumulates. Scale-invariant; an all-zero batch maps
    to 0, a zero-norm denominator with a positive peak to inf.
    """
    a = np.asarray(a_batch, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValidationError("activation batch must be (B, n) with B >= 1")
    out = _penalty_terms(a, q)
    if out is None:
        return 0.0 if a.max(initial=0.0) <= 0 else float("inf")
    return math.exp(out[0])


def _penalty_terms(a, q):
    """ln R and its gradient for one activation batch, or None to skip.

    Skipped when the peak is not positive or the generalised norm vanishes
    (all-zero batch, or a zero-norm sample with q < 0).
    """
    n = a.shape[1]
    flat_argmax = int(a.argmax())
    m = float(a.flat[flat_argmax])
    if m <= 0:
        return None
    norms = _column_norms(a)
    da = np.zeros_like(a)
    if q == NEG_INF:
        j = int(norms.argmin())
        v = float(norms[j])
        if v == 0.0:
            return None
        ln_r = 0.5 * math.log(n) + math.log(m) - math.log(v)
        da[j] -= a[j] / (v * v)
    elif q == 0:
        raise ValidationError("q must be nonzero or -inf")
    else:
        if q < 0 and np.any(norms == 0.0):
            return None
        pos = norms > 0
        s = float((norms[pos] ** q).sum())
        ln_r = 0.5 * math.log(n) + math.log(m) - math.log(s) / q
        da[pos] -= (norms[pos] ** (q - 2))[:, None] * a[pos] / s
    np.add.at(da.reshape(-1), flat_argmax, 1.0 / m)
    return ln_r, da


# ---------------------------------------------------------------------------
# Objective and gradients


@dataclass
class TrainConfig:
    alpha: float = 0.0
    q: float = NEG_INF
    frames: int = 1
    lr: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.q == 0:
            raise ValidationError("q must be nonzero or -inf")
        if self.frames < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("frames, epochs and batch_size must be >= 1")
        if self.alpha > 0 and self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 when alpha > 0")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["q"] = "-inf" if self.q == NEG_INF else self.q
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("q") in ("-inf", "-Infinity"):
            d["q"] = NEG_INF
        return cls(**d)


def _fold_frames(net, frames, labels):
    """Fold the frame axis into the batch: (B, F, ...) -> (B*F, ...)."""
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if frames.shape[1:] == net.input_shape:
        frames = frames[:, None]
    if frames.shape[2:] != net.input_shape:
        raise ValidationError(
            f"frame tensor shape {frames.shape} does not match input {net.input_shape}")
    b, f = frames.shape[:2]
    if labels.shape != (b,):
        raise ValidationError("labels must be one integer per sample")
    flat = frames.reshape(b * f, *net.input_shape)
    rep = np.repeat(labels, f)
    return flat, rep, f


def _objective_and_grads(net, frames, labels, config, want_grads):
    flat, rep, _ = _fold_frames(net, frames, labels)
    logits, caches, acts = _forward_full(net, flat, train=True)
    loss = float(_cross_entropy(logits, rep).mean())
    penalty = 0.0
    act_grads = {}
    if config.alpha > 0:
        for idx in net.relu_indices:
            terms = _penalty_terms(acts[idx], config.q)
            if terms is None:
                continue
            ln_r, da = terms
            penalty += ln_r
            if want_grads:
                act_grads[idx] = config.alpha * da
    total = loss + config.alpha * penalty
    if not want_grads:
        return total, None
    m = logits.shape[0]
    dlogits = _softmax(logits)
    dlogits[np.arange(m), rep] -= 1.0
    dlogits /= m
    grads = _backward_pass(net, caches, dlogits, act_grads)
    return total, grads


def _backward_pass(net, caches, dlogits, act_grads):
    grads = [None] * len(net.layers)
    g = dlogits
    for step, cache in zip(reversed(net._plan), reversed(caches)):
        layer = step.layer
        if layer.kind == "avgpool":
            g = layer._backward(g, cache["xshape"])
            continue
        if layer.kind == "flatten":
            g = g.reshape(cache["xshape"])
            continue
        out = cache["out"]
        if layer.relu:
            extra = act_grads.get(step.index)
            if extra is not None:
                g = g + extra.reshape(out.shape)
            g = g * (out > 0)
        if step.bn is not None:
            g, dgamma, dbeta = step.bn._backward(g, cache["bn"])
            grads[step.bn_index] = {"gamma": dgamma, "beta": dbeta}
        if layer.kind == "dense":
            x = cache["x"]
            grads[step.index] = {"weight": g.T @ x, "bias": g.sum(axis=0)}
            g = g @ layer.weight
        else:
            dx, dw, db = layer._backward(g, cache["conv"])
            grads[step.index] = {"weight": dw, "bias": db}
            g = dx
    return grads


def objective(net: Network, frames, labels, config: TrainConfig) -> float:
    """Temporal loss plus the weighted log outlier penalties.

    Layers whose penalty is undefined for the batch (all-zero activations, or
    a zero-norm weakest sample) contribute nothing rather than -inf/NaN.
    """
    value, _ = _objective_and_grads(net, frames, labels, config, want_grads=False)
    return value


def backward(net: Network, frames, labels, config: TrainConfig):
    """Gradients of :func:`objective` for every parameter tensor.

    Returns a list parallel to ``net.layers``; entry i is a dict of gradient
    arrays (or None for parameterless layers). The peak entry and the weakest
    sample are treated as fixed when differentiating through the penalty,
    with ties broken by lowest flat index.
    """
    _, grads = _objective_and_grads(net, frames, labels, config, want_grads=True)
    return grads


# ---------------------------------------------------------------------------
# Training


def train(net: Network, frames, labels, config: TrainConfig):
    """SGD with momentum and cosine-decayed learning rate.

    Deterministic for a fixed config seed. Returns the trained copy of the
    network and the per-epoch mean objective.
    """
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if frames.shape[0] == 0:
        raise ValidationError("training set is empty")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params().items()}
                for layer in net.layers]
    n = frames.shape[0]
    history = []
    for epoch in range(config.epochs):
        lr = config.lr * 0.5 * (1 + math.cos(math.pi * epoch / config.epochs))
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = _objective_and_grads(
                net, frames[idx], labels[idx], config, want_grads=True)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"objective became {value} at epoch {epoch}")
            for layer, g, vel in zip(net.layers, grads, velocity):
                if not vel:
                    continue
                params = layer.params()
                for name, p in params.items():
                    grad = g[name]
                    if config.weight_decay and name in ("weight",):
                        grad = grad + config.weight_decay * p
                    vel[name] = config.momentum * vel[name] - lr * grad
                    params[name] += vel[name]
            epoch_loss += value
            n_batches += 1
        if any(step.bn is not None for step in net._plan):
            # refresh running stats once per epoch with the updated weights
            flat, _, _ = _fold_frames(net, frames, labels)
            _forward_full(net, flat, train=True, update_stats=True)
        history.append(epoch_loss / n_batches)
    return net, history


# ---------------------------------------------------------------------------
# Activation statistics


@dataclass
class ActivationStats:
    """Per-layer activation ceilings used for threshold scaling.

    Keys are layer indices of the dense/conv layers; the logits layer uses
    its raw maximum. One ceiling per layer is shared across all input frames.
    """

    lambdas: dict[int, float]
    mode: str = "max"
    percentile: float | None = None

    def __post_init__(self):
        for idx, v in self.lambdas.items():
            if not v > 0:
                raise ValidationError(f"layer {idx}: activation ceiling must be > 0")


def _order_statistic(values: np.ndarray, percentile: float) -> float:
    """Smallest value v with at least percentile% of samples <= v."""
    values = np.sort(values, kind="stable")
    # tolerance keeps exact rank boundaries (e.g. 99.9% of 1000) stable
    k = int(math.ceil(percentile * values.size / 100.0 - 1e-9)) - 1
    return float(values[min(max(k, 0), values.size - 1)])


def collect_lambda(net: Network, frames, mode: str = "max",
                   percentile: float = 99.9, batch: int = 512) -> ActivationStats:
    """Scan a dataset for each dense/conv layer's activation ceiling.

    ``frames`` may be (N, F, ...) or (M, ...); all frames pool into one
    statistic per layer. Mode "max" takes the observed maximum, mode
    "percentile" the given order statistic. Raises if a layer never activates.
    """
    frames = np.asarray(frames, dtype=np.float64)
    flat = frames.reshape(-1, *net.input_shape)
    spiking = net.spiking_indices
    final_idx = spiking[-1]
    if mode == "max":
        best = {idx: 0.0 for idx in spiking}
    elif mode == "percentile":
        collected = {idx: [] for idx in spiking}
    else:
        raise ValidationError(f"unknown lambda mode {mode!r}")
    for start in range(0, flat.shape[0], batch):
        chunk = flat[start:start + batch]
        logits, _, acts = _forward_full(net, chunk, train=False)
        per_layer = dict(acts)
        per_layer[final_idx] = logits.reshape(logits.shape[0], -1)
        for idx in spiking:
            values = per_layer[idx]
            if mode == "max":
                best[idx] = max(best[idx], float(values.max()))
            else:
                collected[idx].append(values.reshape(-1))
    lambdas = {}
    for idx in spiking:
        if mode == "max":
            lam = best[idx]
        else:
            lam = _order_statistic(np.concatenate(collected[idx]), percentile)
        if not lam > 0:
            kind = net.layers[idx].kind
            raise ValidationError(
                f"layer {idx} ({kind}) never activates; cannot derive a threshold")
        lambdas[idx] = lam
    return ActivationStats(lambdas=lambdas, mode=mode,
                           percentile=percentile if mode == "percentile" else None)


def fold_batchnorm(net: Network) -> Network:
    """Merge every batchnorm into its preceding affine layer.

    The folded network computes the same inference-mode function; layer
    indices shift, and the old-to-new map lands in
    ``metadata["fold_index_map"]``.
    """
    layers = []
    index_map = {}
    for step in net._plan:
        layer = copy.deepcopy(step.layer)
        if step.bn is not None:
            bn = step.bn
            sigma_sq = bn.var + bn.eps
            if np.any(sigma_sq <= 0):
                raise ValidationError(
                    f"layer {step.bn_index}: batchnorm variance + eps is not positive")
            scale = bn.gamma / np.sqrt(sigma_sq)
            if layer.kind == "dense":
                layer.weight = layer.weight * scale[:, None]
            else:
                layer.weight = layer.weight * scale[:, None, None, None]
            layer.bias = (layer.bias - bn.mean) * scale + bn.beta
        index_map[step.index] = len(layers)
        layers.append(layer)
    meta = dict(net.metadata)
    meta["fold_index_map"] = {str(k): v for k, v in index_map.items()}
    return Network(layers, net.input_shape, net.n_classes, meta)


# ---------------------------------------------------------------------------
# Model files


def _layer_to_json(layer) -> dict:
    if layer.kind == "dense":
        return {"kind": "dense", "relu": layer.relu,
                "weights": layer.weight.tolist(), "bias": layer.bias.tolist()}
    if layer.kind == "conv2d":
        return {"kind": "conv2d", "relu": layer.relu, "stride": layer.stride,
                "padding": layer.padding, "weights": layer.weight.tolist(),
                "bias": layer.bias.tolist()}
    if layer.kind == "avgpool":
        return {"kind": "avgpool", "size": layer.size, "stride": layer.stride}
    if layer.kind == "flatten":
        return {"kind": "flatten"}
    if layer.kind == "batchnorm":
        return {"kind": "batchnorm", "gamma": layer.gamma.tolist(),
                "beta": layer.beta.tolist(), "mean": layer.mean.tolist(),
                "var": layer.var.tolist(), "eps": layer.eps,
                "momentum": layer.momentum}
    raise ValidationError(f"unknown layer kind {layer.kind!r}")


def _layer_from_json(d: dict):
    kind = d.get("kind")
    if kind == "dense":
        return Dense(d["weights"], d["bias"], d.get("relu", False))
    if kind == "conv2d":
        return Conv2d(d["weights"], d["bias"], d.get("stride", 1),
                      d.get("padding", 0), d.get("relu", False))
    if kind == "avgpool":
        return AvgPool2d(d["size"], d.get("stride"))
    if kind == "flatten":
        return Flatten()
    if kind == "batchnorm":
        return BatchNorm(d["gamma"], d["beta"], d["mean"], d["var"],
                         d.get("eps", 1e-5), d.get("momentum", 0.1))
    raise ValidationError(f"unknown layer kind {kind!r}")


def save_model(net: Network, path, stats: ActivationStats | None = None) -> None:
    doc = {
        "format": "eventsnn-model",
        "version": 1,
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "layers": [_layer_to_json(l) for l in net.layers],
        "metadata": net.metadata,
    }
    if stats is not None:
        doc["activation_stats"] = _stats_to_json(stats)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_model(path) -> tuple[Network, ActivationStats | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") not in ("eventsnn-model", "eventsnn-snn"):
        raise ValidationError(f"{path}: not a model file")
    if doc.get("converted"):
        raise ValidationError(
            f"{path}: already converted; load it with convert.load_snn")
    layers = [_layer_from_json(d) for d in doc["layers"]]
    net = Network(layers, doc["input_shape"], doc["n_classes"],
                  doc.get("metadata"))
    stats = None
    if "activation_stats" in doc:
        stats = _stats_from_json(doc["activation_stats"])
    return net, stats


def _stats_to_json(stats: ActivationStats) -> dict:
    return {"mode": stats.mode, "percentile": stats.percentile,
            "lambdas": {str(k): v for k, v in stats.lambdas.items()}}


def _stats_from_json(d: dict) -> ActivationStats:
    return ActivationStats(
        lambdas={int(k): float(v) for k, v in d["lambdas"].items()},
        mode=d.get("mode", "max"), percentile=d.get("percentile"))


def save_stats(stats: ActivationStats, path) -> None:
    Path(path).write_text(json.dumps(_stats_to_json(stats), sort_keys=True) + "\n")


def load_stats(path) -> ActivationStats:
    return _stats_from_json(json.loads(Path(path).read_text()))
