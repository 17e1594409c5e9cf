"""Dense layer-chain network with exact reverse-mode gradients.

Tensors are plain ``numpy.float64`` arrays. A :class:`Network` is an ordered
chain of layer specs plus one weight/bias pair per parametrised layer; the
same instance is shared by every stack of a Siamese arrangement, so weight
tying holds by construction.

Images use NCHW layout. ``FullyConnected`` flattens all non-batch axes of
its input (their product must equal ``in_dim``).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, DivergenceError, InputError, SpecificationError, TapeError


# --------------------------------------------------------------------------
# Layer specifications
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FullyConnected:
    in_dim: int
    out_dim: int

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.in_dim:
            raise SpecificationError(
                f"{self} expects {self.in_dim} input values, previous layer gives {in_shape}"
            )
        return (self.out_dim,)

    def param_shapes(self, in_shape):
        return {"weight": (self.out_dim, self.in_dim), "bias": (self.out_dim,)}

    def fans(self):
        return self.in_dim, self.out_dim


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise SpecificationError(f"{self} expects (C={self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        if h < self.kernel_size or w < self.kernel_size:
            raise SpecificationError(f"{self} kernel larger than input {in_shape}")
        k, s = self.kernel_size, self.stride
        return (self.out_channels, (h - k) // s + 1, (w - k) // s + 1)

    def param_shapes(self, in_shape):
        k = self.kernel_size
        return {
            "weight": (self.out_channels, self.in_channels, k, k),
            "bias": (self.out_channels,),
        }

    def fans(self):
        area = self.kernel_size * self.kernel_size
        return self.in_channels * area, self.out_channels * area


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int = 2

    def output_shape(self, in_shape):
        return _pool_shape(self, in_shape)

    def param_shapes(self, in_shape):
        return {}


@dataclass(frozen=True)
class AvgPool:
    window: int
    stride: int = 2

    def output_shape(self, in_shape):
        return _pool_shape(self, in_shape)

    def param_shapes(self, in_shape):
        return {}


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape):
        return {}


LayerSpec = FullyConnected | Conv | MaxPool | AvgPool | ReLU
LAYER_KINDS = {cls.__name__: cls for cls in (FullyConnected, Conv, MaxPool, AvgPool, ReLU)}


def _pool_shape(spec, in_shape):
    if len(in_shape) != 3:
        raise SpecificationError(f"{spec} expects (C, H, W), got {in_shape}")
    c, h, w = in_shape
    if h < spec.window or w < spec.window:
        raise SpecificationError(f"{spec} window larger than input {in_shape}")
    return (c, (h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1)


def layer_to_dict(spec):
    d = {"kind": type(spec).__name__}
    d.update(spec.__dict__)
    return d


def layer_from_dict(d):
    d = dict(d)
    try:
        cls = LAYER_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise SpecificationError(f"unknown layer kind {exc}") from None
    return cls(**d)


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------

_net_ids = itertools.count()


class Network:
    """Layer chain with parameters.

    Parameters
    ----------
    input_shape : tuple of int
        Shape of one input sample, ``(n,)`` for vectors or ``(C, H, W)``.
    layers : sequence of LayerSpec
        Applied in order. The final output must be one-dimensional.
    """

    def __init__(self, input_shape, layers: Sequence[LayerSpec]):
        self.input_shape = tuple(int(s) for s in input_shape)
        if not self.input_shape or any(s <= 0 for s in self.input_shape):
            raise SpecificationError(f"invalid input shape {input_shape}")
        self.layers = list(layers)
        if not self.layers:
            raise SpecificationError("network needs at least one layer")
        self.shapes = [self.input_shape]
        self.params: list[dict[str, np.ndarray]] = []
        for k, spec in enumerate(self.layers):
            try:
                out = spec.output_shape(self.shapes[-1])
            except SpecificationError as exc:
                raise SpecificationError(f"layer {k}: {exc}") from None
            self.params.append({name: np.zeros(shape) for name, shape in spec.param_shapes(self.shapes[-1]).items()})
            self.shapes.append(out)
        if len(self.shapes[-1]) != 1:
            raise SpecificationError(f"final layer output {self.shapes[-1]} is not a feature vector")
        self.feature_dim = self.shapes[-1][0]
        self.version = 0
        self._id = next(_net_ids)

    def __repr__(self):
        chain = " -> ".join(repr(s) for s in self.layers)
        return f"Network(input_shape={self.input_shape}, {chain}, D={self.feature_dim})"

    def parameters(self):
        return [arr for layer in self.params for arr in layer.values()]

    def parameter_names(self):
        return [f"layer{k}.{name}" for k, layer in enumerate(self.params) for name in layer]

    def bump(self):
        """Mark parameters as modified so stale tapes are rejected."""
        self.version += 1

    def copy(self):
        other = Network(self.input_shape, self.layers)
        for dst, src in zip(other.params, self.params):
            for name in src:
                dst[name][...] = src[name]
        return other

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_shape"], [layer_from_dict(s) for s in d["layers"]])


def init_xavier(net: Network, seed: int) -> Network:
    """Glorot-uniform weights, zero biases; in place, deterministic for ``seed``."""
    rng = np.random.default_rng(seed)
    for spec, p in zip(net.layers, net.params):
        if "weight" not in p:
            continue
        fan_in, fan_out = spec.fans()
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        p["weight"][...] = rng.uniform(-bound, bound, size=p["weight"].shape)
        p["bias"][...] = 0.0
    net.bump()
    return net


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class Tape:
    """Activation record of one forward call."""

    net_id: int
    version: int
    batch_shape: tuple
    caches: list = field(default_factory=list)


def _fc_forward(p, x):
    flat = x.reshape(x.shape[0], -1)
    return flat @ p["weight"].T + p["bias"], (x.shape, flat)


def _fc_backward(p, cache, gy):
    shape, flat = cache
    grads = {"weight": gy.T @ flat, "bias": gy.sum(axis=0)}
    return (gy @ p["weight"]).reshape(shape), grads


def _layer_forward(spec, p, x):
    if isinstance(spec, FullyConnected):
        return _fc_forward(p, x)
    if isinstance(spec, ReLU):
        mask = x > 0.0
        return np.where(mask, x, 0.0), mask
    if isinstance(spec, Conv):
        x = np.ascontiguousarray(x)
        return kernels.conv2d_forward(x, p["weight"], p["bias"], spec.stride), x
    if isinstance(spec, MaxPool):
        y, argmax = kernels.maxpool_forward(np.ascontiguousarray(x), spec.window, spec.stride)
        return y, (x.shape, argmax)
    if isinstance(spec, AvgPool):
        return kernels.avgpool_forward(np.ascontiguousarray(x), spec.window, spec.stride), x.shape
    raise SpecificationError(f"unsupported layer {spec!r}")


def _layer_backward(spec, p, cache, gy):
    if isinstance(spec, FullyConnected):
        return _fc_backward(p, cache, gy)
    if isinstance(spec, ReLU):
        return np.where(cache, gy, 0.0), {}
    if isinstance(spec, Conv):
        gx, gw, gb = kernels.conv2d_backward(cache, p["weight"], np.ascontiguousarray(gy), spec.stride)
        return gx, {"weight": gw, "bias": gb}
    if isinstance(spec, MaxPool):
        shape, argmax = cache
        return kernels.maxpool_backward(np.ascontiguousarray(gy), argmax, shape[2], shape[3]), {}
    if isinstance(spec, AvgPool):
        shape = cache
        return kernels.avgpool_backward(np.ascontiguousarray(gy), shape[2], shape[3], spec.window, spec.stride), {}
    raise SpecificationError(f"unsupported layer {spec!r}")


def forward(net: Network, batch: np.ndarray):
    """Run ``batch`` (N, *input_shape) through the chain.

    Returns ``(features, tape)`` with features of shape (N, D).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(net.input_shape) + 1 or batch.shape[1:] != net.input_shape:
        raise DimensionError(
            f"layer 0 ({net.layers[0]!r}) expects batches of shape (N, {', '.join(map(str, net.input_shape))}),"
            f" got {batch.shape}"
        )
    if batch.shape[0] < 1:
        raise DimensionError("empty batch")
    tape = Tape(net._id, net.version, batch.shape)
    x = batch
    for spec, p in zip(net.layers, net.params):
        x, cache = _layer_forward(spec, p, x)
        tape.caches.append(cache)
    return x, tape


def backward(net: Network, tape: Tape, grad_out: np.ndarray):
    """Backpropagate ``grad_out`` (dL/dfeatures) through a recorded forward pass.

    Returns ``(param_grads, input_grad)``; ``param_grads`` aligns with
    ``net.parameters()``.
    """
    if tape.net_id != net._id or tape.version != net.version:
        raise TapeError(
            f"tape recorded for network {tape.net_id} v{tape.version}, "
            f"backward called on network {net._id} v{net.version}"
        )
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = (tape.batch_shape[0], net.feature_dim)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match features {expected}")
    g = grad_out
    per_layer = []
    for spec, p, cache in zip(reversed(net.layers), reversed(net.params), reversed(tape.caches)):
        g, grads = _layer_backward(spec, p, cache, g)
        per_layer.append(grads)
    per_layer.reverse()
    param_grads = [grads[name] for grads, p in zip(per_layer, net.params) for name in p]
    return param_grads, g


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps central-difference round-off on exactly-zero gradients
    (about 1e-11 for unit-scale losses) from counting as relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5):
    """Central differences of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f()
            flat[idx] = orig - h
            fm = f()
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def finite_diff_check(net: Network, loss_fn, batch, h: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``loss_fn(features)`` returns ``(loss, dloss/dfeatures)``.
    """
    if h <= 0:
        raise InputError("h must be positive")
    features, tape = forward(net, batch)
    _, gfeat = loss_fn(features)
    analytic, _ = backward(net, tape, gfeat)

    def value():
        feats, _ = forward(net, batch)
        return loss_fn(feats)[0]

    numeric = numerical_gradient(value, net.parameters(), h)
    # gradients that are exactly zero only carry round-off; floor by the largest one
    scale = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(1e-8, 1e-6 * scale)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst


# --------------------------------------------------------------------------
# Nesterov SGD
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Nesterov momentum state.

    Parameters are stored at the look-ahead point ``theta + mu * v`` (the
    reparametrisation Caffe uses), so gradients computed at the stored values
    are the look-ahead gradients.  :meth:`base_params` recovers ``theta``.
    """

    learning_rate: float
    momentum_coeff: float = 0.9
    velocity: list | None = None
    iteration: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum_coeff < 1.0:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum_coeff}")

    def base_params(self, params):
        if self.velocity is None:
            return [p.copy() for p in params]
        return [p - self.momentum_coeff * v for p, v in zip(params, self.velocity)]


def collect_parameters(modules):
    if hasattr(modules, "parameters"):
        modules = [modules]
    return [p for m in modules for p in m.parameters()]


def nesterov_step(modules, grads, state: OptimizerState):
    """One in-place Nesterov update.

    ``v <- mu v - lr g(theta + mu v)``, ``theta <- theta + v``, carried out on
    the look-ahead variable ``phi = theta + mu v`` as
    ``phi <- phi + (1 + mu) v_new - mu v_old``.

    ``modules`` is a Network (or anything with ``parameters()``) or a
    sequence of them; ``grads`` aligns with their concatenated parameters.
    """
    params = collect_parameters(modules)
    if len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise DivergenceError(
                f"non-finite gradient at iteration {state.iteration}: parameter {k} "
                f"shape {p.shape} has {bad} non-finite entries"
            )
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    mu, lr = state.momentum_coeff, state.learning_rate
    for p, g, v in zip(params, grads, state.velocity):
        v_old = v.copy()
        v *= mu
        v -= lr * g
        p += (1.0 + mu) * v - mu * v_old
    state.iteration += 1
    for m in ([modules] if hasattr(modules, "parameters") else modules):
        if hasattr(m, "bump"):
            m.bump()
    return modules, state


# --------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float64 blob
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "egoeq-checkpoint"


def save_checkpoint(path, blobs: dict, manifest: dict):
    """Write ``path`` (JSON manifest) and ``path`` with suffix ``.bin``.

    ``blobs`` maps names to float arrays, written in insertion order.
    """
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 8
    doc = {"format": CHECKPOINT_FORMAT, "version": 1, "blob_file": bin_path.name, "blobs": entries}
    doc.update(manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(manifest, blobs)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"checkpoint manifest {path} is not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not an egoeq checkpoint")
    raw = (path.parent / doc["blob_file"]).read_bytes()
    blobs = {}
    for e in doc["blobs"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(raw):
            raise InputError(f"blob {e['name']} extends past end of {doc['blob_file']} (offset {e['offset']})")
        arr = np.frombuffer(raw, dtype="<f8", count=e["count"], offset=e["offset"])
        blobs[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return doc, blobs


def network_blobs(net: Network, prefix="net"):
    return {f"{prefix}.{name}": arr for name, arr in zip(net.parameter_names(), net.parameters())}


def load_network(spec: dict, blobs: dict, prefix="net") -> Network:
    net = Network.from_dict(spec)
    for name, arr in zip(net.parameter_names(), net.parameters()):
        key = f"{prefix}.{name}"
        if key not in blobs or blobs[key].shape != arr.shape:
            raise InputError(f"checkpoint missing or misshaped blob {key}")
        arr[...] = blobs[key]
    net.bump()
    return net
