"""Coordinate MLP mapping 3D points to 3D flow vectors.

Layers are stored as ``(fan_in, fan_out)`` weight matrices so a batch of
points ``X`` (N, 3) is propagated as ``X @ W + b``. The same weights are
applied to every point; the network never sees more than one point at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from nsfp.errors import DimensionError, FormatError, ValidationError
from nsfp.pointcloud import PointCloud

ACTIVATIONS = ("relu", "sigmoid")
MAGIC = b"NSFP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ArchConfig:
    hidden_layers: int = 8
    hidden_units: int = 128
    activation: str = "relu"

    def __post_init__(self):
        if int(self.hidden_layers) < 1 or int(self.hidden_units) < 1:
            raise ValidationError("hidden_layers and hidden_units must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def layer_shapes(self):
        h = self.hidden_units
        return [(3, h)] + [(h, h)] * (self.hidden_layers - 1) + [(h, 3)]

    @property
    def param_count(self):
        return sum(i * o + o for i, o in self.layer_shapes())


@dataclass
class NetworkParams:
    """Weights and biases of one MLP. Also used to hold gradients and Adam moments."""

    arch: ArchConfig
    weights: list
    biases: list

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for k, (w, b, (i, o)) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != (i, o) or b.shape != (o,):
                raise DimensionError(f"layer {k}: got W{w.shape} b{b.shape}, expected W{(i, o)} b{(o,)}")

    def arrays(self):
        """Parameter arrays in serialization order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def param_count(self):
        return sum(a.size for a in self.arrays())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, arch, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != arch.param_count:
            raise DimensionError(f"expected {arch.param_count} values, got {vec.size}")
        weights, biases, pos = [], [], 0
        for i, o in arch.layer_shapes():
            weights.append(vec[pos:pos + i * o].reshape(i, o).copy())
            pos += i * o
            biases.append(vec[pos:pos + o].copy())
            pos += o
        return cls(arch, weights, biases)

    def zeros_like(self):
        return NetworkParams(self.arch, [np.zeros_like(w) for w in self.weights],
                             [np.zeros_like(b) for b in self.biases])

    def copy(self):
        return NetworkParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays())

    def to_bytes(self):
        head = _HEADER.pack(MAGIC, FORMAT_VERSION, self.arch.hidden_layers, self.arch.hidden_units)
        return head + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob, activation="relu"):
        if len(blob) < _HEADER.size:
            raise FormatError(f"parameter blob is {len(blob)} bytes, shorter than the 16-byte header")
        magic, version, layers, units = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported parameter format version {version} at byte 4")
        arch = ArchConfig(layers, units, activation)
        body = blob[_HEADER.size:]
        if len(body) != 8 * arch.param_count:
            raise FormatError(f"expected {8 * arch.param_count} payload bytes after byte 16, got {len(body)}")
        return cls.from_flat(arch, np.frombuffer(body, dtype="<f8"))


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(params.to_bytes())


def load_params(path, activation="relu"):
    with open(path, "rb") as fh:
        return NetworkParams.from_bytes(fh.read(), activation)


INIT_GAINS = {"default": 1.0, "kaiming": 6.0}


def init_params(arch, seed, scheme="default"):
    """Uniform fan-in scaled weights and zero biases.

    ``default`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual
    framework default for linear layers; it keeps the initial flow small.
    ``kaiming`` uses bound sqrt(6 / fan_in), whose initial flows scale with
    the input coordinates and can start every point beyond the truncation
    distance on real-world scenes.
    """
    try:
        gain = INIT_GAINS[scheme]
    except KeyError:
        raise ValidationError(f"unknown init scheme {scheme!r}; expected one of {sorted(INIT_GAINS)}") from None
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_shapes():
        bound = np.sqrt(gain / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(arch, weights, biases)


@dataclass
class ForwardTrace:
    """Layer inputs cached by :func:`forward`.

    ``activations[0]`` is the input batch and ``activations[k]`` the output of
    hidden layer k. For both supported activations the derivative can be
    recovered from the activation itself, so pre-activations are not kept.
    """

    activations: list
    activation: str

    @property
    def batch_size(self):
        return len(self.activations[0])


def _as_batch(points):
    if isinstance(points, PointCloud):
        return points.points
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"points must have shape (N, 3), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError("network input contains non-finite values")
    return x


def forward(params, points):
    """Evaluate the flow at each point; returns ``(flows, trace)``."""
    x = _as_batch(points)
    acts = [x]
    relu = params.arch.activation == "relu"
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = x @ w
        z += b
        if k < last:
            if relu:
                np.maximum(z, 0.0, out=z)
            else:
                expit(z, out=z)
            acts.append(z)
        x = z
    return x, ForwardTrace(acts, params.arch.activation)


def backward(trace, params, grad_flows, input_grad=True):
    """Reverse pass for a scalar loss whose gradient w.r.t. the flows is ``grad_flows``.

    Returns ``(grad_params, grad_points)``; ``grad_points`` is None when
    ``input_grad`` is False. ReLU's derivative at 0 is taken as 0.
    """
    g = np.asarray(grad_flows, dtype=np.float64)
    if g.shape != (trace.batch_size, 3):
        raise DimensionError(f"grad_flows must have shape ({trace.batch_size}, 3), got {g.shape}")
    if len(trace.activations) != len(params.weights):
        raise DimensionError("trace does not match the network depth")
    relu = trace.activation == "relu"
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        a_in = trace.activations[k]
        gw[k] = a_in.T @ g
        gb[k] = g.sum(axis=0)
        if k == 0 and not input_grad:
            g = None
            break
        g = g @ params.weights[k].T
        if k > 0:
            if relu:
                g *= a_in > 0.0
            else:
                g *= a_in * (1.0 - a_in)
    return NetworkParams(params.arch, gw, gb), g


def finite_diff_grad(params, points, probe, step=1e-6):
    """Central-difference gradient of ``probe(forward(params, points)[0])`` w.r.t. every parameter."""
    if not step > 0:
        raise ValidationError("finite-difference step must be positive")
    x = _as_batch(points)
    theta = params.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = probe(forward(NetworkParams.from_flat(params.arch, theta), x)[0])
        theta[i] = orig - step
        down = probe(forward(NetworkParams.from_flat(params.arch, theta), x)[0])
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return NetworkParams.from_flat(params.arch, grad)


def finite_diff_input_grad(params, points, probe, step=1e-6):
    """Central-difference gradient of the probe w.r.t. the input coordinates."""
    if not step > 0:
        raise ValidationError("finite-difference step must be positive")
    x = _as_batch(points).copy()
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = probe(forward(params, x)[0])
        x[idx] = orig - step
        down = probe(forward(params, x)[0])
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Largest componentwise deviation, scaled by the largest numeric gradient magnitude."""
    a = analytic.flat() if isinstance(analytic, NetworkParams) else np.ravel(analytic)
    n = numeric.flat() if isinstance(numeric, NetworkParams) else np.ravel(numeric)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))
