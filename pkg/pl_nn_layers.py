"""
PerfectLES — Neural Network Layers
==================================
Dense-tensor network engine in numpy, 64-bit throughout.

Tensors are batched as (n, channels, p, p, p). Every layer caches what its
backward pass needs during ``forward`` and returns the input gradient from
``backward``; parameter gradients are stored in ``layer.grads`` under the same
names as ``layer.params``.

Architectures:
    RNN<d>  stem conv k3 (c_in -> nf1), d preactivation residual blocks,
            BN -> ReLU, then three k1 convs nf1 -> 16 -> 8 -> c_out
    MLP100  pointwise c_in -> 100 -> c_out with one hidden ReLU layer

Usage:
    net = build_network("RNN4", nf1=16, nf2=32, p=6, seed=0)
    y = net.forward(x, train=False)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pl_config import NETWORK_TAGS
from pl_errors import ConfigurationError, ShapeError

RESIDUAL_DEPTH = {"RNN0": 0, "RNN1": 1, "RNN2": 2, "RNN4": 4, "RNN8": 8}
COMPRESSION_WIDTHS = (16, 8)
MLP_HIDDEN = 100

BN_MOMENTUM = 0.99
BN_EPSILON = 1.0e-5


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for a (out, in, k, k, k) kernel."""
    receptive = int(np.prod(shape[2:]))
    limit = np.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: ``params`` and ``grads`` are ordered name -> array maps."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self.grads: Dict[str, np.ndarray] = OrderedDict()
        self.buffers: Dict[str, np.ndarray] = OrderedDict()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []


# =============================================================================
# CONVOLUTION
# =============================================================================


class ConvLayer(Layer):
    """Zero-padded 'same' 3D convolution with odd isotropic kernel size."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size % 2 != 1 or kernel_size < 1:
            raise ConfigurationError("kernel size must be odd", kernel_size=kernel_size)
        shape = (out_channels, in_channels, kernel_size, kernel_size, kernel_size)
        self.params["W"] = glorot_uniform(rng, shape) if rng is not None else np.zeros(shape)
        self.params["b"] = np.zeros(out_channels)
        self._windows: Optional[np.ndarray] = None

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    @property
    def kernel_size(self) -> int:
        return self.W.shape[-1]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.W.shape[1]:
            raise ShapeError("conv input channel mismatch", input=x.shape, in_channels=self.W.shape[1])
        windows = _windows(x, self.kernel_size)
        self._windows = windows
        y = np.tensordot(windows, self.W, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.moveaxis(y, -1, 1) + self.b[None, :, None, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._windows is None:
            raise ShapeError("backward called before forward")
        if grad.shape[1] != self.W.shape[0] or grad.shape[0] != self._windows.shape[0]:
            raise ShapeError("upstream gradient shape mismatch", grad=grad.shape)
        self.grads["W"] = np.tensordot(grad, self._windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        self.grads["b"] = grad.sum(axis=(0, 2, 3, 4))
        flipped = self.W[:, :, ::-1, ::-1, ::-1]
        dx = np.tensordot(_windows(grad, self.kernel_size), flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4]))
        return np.moveaxis(dx, -1, 1)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, X, Y, Z, k, k, k) view of the zero-padded input."""
    r = k // 2
    if r == 0:
        return x[..., None, None, None]
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r), (r, r)))
    return sliding_window_view(padded, (k, k, k), axis=(2, 3, 4))


def conv3d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Single-tensor convenience: (c, p, p, p) or batched input."""
    if x.ndim == 4:
        return layer.forward(x[None])[0]
    return layer.forward(x)


def conv3d_backward(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray):
    """(grad_input, grad_W, grad_b) of the convolution at ``x``."""
    single = x.ndim == 4
    xb = x[None] if single else x
    gb = upstream[None] if single else upstream
    layer.forward(xb)
    dx = layer.backward(gb)
    return (dx[0] if single else dx), layer.grads["W"], layer.grads["b"]


# =============================================================================
# NORMALIZATION AND ACTIVATION
# =============================================================================


class BatchNorm(Layer):
    """Per-channel batch normalization with running statistics for inference."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        super().__init__()
        if not epsilon > 0.0:
            raise ConfigurationError("batch norm epsilon must be positive")
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self._cache = None

    @property
    def channels(self) -> int:
        return self.params["gamma"].size

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError("batch norm channel mismatch", input=x.shape, channels=self.channels)
        gamma = self.params["gamma"][None, :, None, None, None]
        beta = self.params["beta"][None, :, None, None, None]
        if train:
            if x.shape[0] < 2:
                raise ShapeError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=(0, 2, 3, 4))
            var = x.var(axis=(0, 2, 3, 4))
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1.0 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1.0 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        self._cache = (x_hat, inv_std, train)
        return gamma * x_hat + beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x_hat, inv_std, train = self._cache
        self.grads["gamma"] = np.sum(grad * x_hat, axis=(0, 2, 3, 4))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3, 4))
        scale = (self.params["gamma"] * inv_std)[None, :, None, None, None]
        if not train:
            return grad * scale
        g_mean = grad.mean(axis=(0, 2, 3, 4), keepdims=True)
        gx_mean = np.mean(grad * x_hat, axis=(0, 2, 3, 4), keepdims=True)
        return scale * (grad - g_mean - x_hat * gx_mean)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad, 0.0)


def batchnorm_forward(x: np.ndarray, bn: BatchNorm, mode: str = "train") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"batch norm mode must be 'train' or 'infer', got {mode!r}")
    return bn.forward(x, train=mode == "train")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad, 0.0)


# =============================================================================
# COMPOSITES
# =============================================================================


class Sequential(Layer):
    def __init__(self, layers: List[Tuple[str, Layer]]):
        super().__init__()
        self.layers = list(layers)

    def children(self) -> List[Tuple[str, Layer]]:
        return self.layers

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class ResidualBlock(Layer):
    """x + F(x), F = BN -> ReLU -> conv k3 (nf2) -> BN -> ReLU -> conv k3 (nf1)."""

    def __init__(self, nf1: int, nf2: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.nf1 = nf1
        self.branch = Sequential([
            ("bn1", BatchNorm(nf1)),
            ("relu1", ReLU()),
            ("conv1", ConvLayer(nf1, nf2, 3, rng)),
            ("bn2", BatchNorm(nf2)),
            ("relu2", ReLU()),
            ("conv2", ConvLayer(nf2, nf1, 3, rng)),
        ])

    def children(self) -> List[Tuple[str, Layer]]:
        return self.branch.children()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.nf1:
            raise ShapeError("residual block channel mismatch", input=x.shape, channels=self.nf1)
        return x + self.branch.forward(x, train)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad + self.branch.backward(grad)


def residual_block_forward(x: np.ndarray, block: ResidualBlock, train: bool = False) -> np.ndarray:
    return block.forward(x, train)


# =============================================================================
# NETWORKS
# =============================================================================


@dataclass
class NetworkSpec:
    tag: str
    nf1: int = 16
    nf2: int = 32
    p: int = 6
    in_channels: int = 6
    out_channels: int = 3
    seed: int = 0


class Network(Sequential):
    """A built architecture; named parameters are '<layer path>.<param>'."""

    def __init__(self, spec: NetworkSpec, layers: List[Tuple[str, Layer]]):
        super().__init__(layers)
        self.spec = spec

    @property
    def tag(self) -> str:
        return self.spec.tag

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        s = self.spec
        if x.ndim != 5 or x.shape[1] != s.in_channels or x.shape[2:] != (s.p, s.p, s.p):
            raise ShapeError(
                "network input shape mismatch", input=x.shape, expected=(s.in_channels, s.p, s.p, s.p)
            )
        return super().forward(x, train)

    def named_layers(self) -> List[Tuple[str, Layer]]:
        out = []

        def walk(prefix: str, layer: Layer):
            kids = layer.children()
            if not kids:
                out.append((prefix, layer))
            for name, child in kids:
                walk(f"{prefix}.{name}" if prefix else name, child)

        for name, layer in self.layers:
            walk(name, layer)
        return out

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        params = OrderedDict()
        for path, layer in self.named_layers():
            for key, value in layer.params.items():
                params[f"{path}.{key}"] = value
        return params

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        grads = OrderedDict()
        for path, layer in self.named_layers():
            for key in layer.params:
                grads[f"{path}.{key}"] = layer.grads.get(key, np.zeros_like(layer.params[key]))
        return grads

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters and batch-norm running statistics."""
        state = OrderedDict()
        for path, layer in self.named_layers():
            for key, value in layer.params.items():
                state[f"{path}.{key}"] = value
            for key, value in layer.buffers.items():
                state[f"{path}.{key}"] = value
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in expected]
        if missing or extra:
            raise ShapeError("state does not match network", missing=missing, unexpected=extra)
        for path, layer in self.named_layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    value = np.asarray(state[f"{path}.{key}"], dtype=float)
                    if value.shape != store[key].shape:
                        raise ShapeError(f"shape mismatch for {path}.{key}", got=value.shape, want=store[key].shape)
                    store[key] = value.copy()

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))


def build_network(
    tag: str,
    nf1: int = 16,
    nf2: int = 32,
    p: int = 6,
    seed: int = 0,
    in_channels: int = 6,
    out_channels: int = 3,
) -> Network:
    """Build and Glorot-initialize one of the supported architectures."""
    if tag not in NETWORK_TAGS:
        raise ConfigurationError(f"unknown network tag {tag!r}; expected one of {NETWORK_TAGS}")
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(tag, nf1, nf2, p, in_channels, out_channels, seed)

    if tag == "MLP100":
        layers = [
            ("hidden", ConvLayer(in_channels, MLP_HIDDEN, 1, rng)),
            ("relu", ReLU()),
            ("output", ConvLayer(MLP_HIDDEN, out_channels, 1, rng)),
        ]
        return Network(spec, layers)

    layers: List[Tuple[str, Layer]] = [("stem", ConvLayer(in_channels, nf1, 3, rng))]
    for i in range(RESIDUAL_DEPTH[tag]):
        layers.append((f"block{i}", ResidualBlock(nf1, nf2, rng)))
    widths = (nf1,) + COMPRESSION_WIDTHS
    layers.append(("head_bn", BatchNorm(nf1)))
    layers.append(("head_relu", ReLU()))
    for i in range(len(COMPRESSION_WIDTHS)):
        layers.append((f"compress{i}", ConvLayer(widths[i], widths[i + 1], 1, rng)))
        layers.append((f"compress{i}_relu", ReLU()))
    layers.append(("output", ConvLayer(widths[-1], out_channels, 1, rng)))
    return Network(spec, layers)


# =============================================================================
# COST AND OPTIMIZER
# =============================================================================


def cost_lgl(pred: np.ndarray, label: np.ndarray, weights3d: np.ndarray, normalization: str = "sum") -> float:
    """Sum over samples, channels and nodes of the LGL-weighted squared error."""
    if pred.shape != label.shape:
        raise ShapeError("prediction and label shapes differ", pred=pred.shape, label=label.shape)
    cost = float(np.sum((pred - label) ** 2 * weights3d))
    if normalization == "mean" and pred.ndim == 5:
        cost /= max(pred.shape[0], 1)
    return cost


def cost_lgl_grad(pred: np.ndarray, label: np.ndarray, weights3d: np.ndarray, normalization: str = "sum") -> np.ndarray:
    grad = 2.0 * (pred - label) * weights3d
    if normalization == "mean" and pred.ndim == 5:
        grad /= max(pred.shape[0], 1)
    return grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1.0e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for key, value in params.items():
            state.m[key] = np.zeros_like(value)
            state.v[key] = np.zeros_like(value)
        return state


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    if set(params) != set(state.m):
        raise ShapeError("optimizer state does not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for key, value in params.items():
        g = grads[key]
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = state.m[key] / c1
        v_hat = state.v[key] / c2
        value -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def lr_schedule(step: int, base_lr: float, decay_rate: float, decay_steps: int) -> float:
    if step < 0:
        raise ConfigurationError("step must be non-negative")
    if decay_steps <= 0:
        raise ConfigurationError("decay_steps must be positive")
    return base_lr * decay_rate ** (step / decay_steps)
