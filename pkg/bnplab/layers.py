"""
Layer types for the training engine.
Dense and conv layers cache their mini-batch input on every forward pass;
BNP and the Hessian lab read those caches.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bnplab.errors import BN_BATCH_SIZE_ONE, BatchSizeError, ShapeError, StaleCacheError


class Activation(Enum):
    RELU = "relu"
    NONE = "none"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return (z > 0.0).astype(z.dtype)
        return np.ones_like(z)


class NormMode(Enum):
    TRAIN = "train"
    INFER = "infer"


class Layer:
    """Defaults shared by every layer type."""

    trainable = False

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.params()

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            current = getattr(self, name)
            if current.shape != value.shape:
                raise ShapeError(f"{type(self).__name__}.{name}: expected {current.shape}, got {value.shape}")
            setattr(self, name, np.array(value, dtype=current.dtype))

    def astype(self, dtype) -> None:
        for name, value in self.state_dict().items():
            setattr(self, name, value.astype(dtype))


def _check_features(x: np.ndarray, expected: int, who: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeError(f"{who}: expected {expected} input features, got shape {x.shape}")


@dataclass
class DenseLayer(Layer):
    """h_out = g(W h + b) for each row h of the input; W is n_out x n_in."""
    W: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.RELU
    cached_input: Optional[np.ndarray] = field(default=None, repr=False)
    cached_preact: Optional[np.ndarray] = field(default=None, repr=False)
    grads: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    trainable = True

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"DenseLayer: W {self.W.shape} and b {self.b.shape} disagree")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"DenseLayer expects an N x n matrix, got shape {x.shape}")
        _check_features(x, self.n_in, "DenseLayer")
        return x @ self.W.T + self.b

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.activation.apply(self.pre_activation(x))

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        z = self.pre_activation(x)
        self.cached_input = x
        self.cached_preact = z
        return self.activation.apply(z)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self.cached_input is None:
            raise StaleCacheError("DenseLayer.backward called before forward")
        dz = d_out * self.activation.derivative(self.cached_preact)
        self.grads = {"W": dz.T @ self.cached_input, "b": dz.sum(axis=0)}
        return dz @ self.W


def pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv_windows(x: np.ndarray, k: int) -> np.ndarray:
    """
    View of shape (N, r, s, c, k, k) with windows[n, i, j, c, a, b] equal to
    the zero-padded input at (n, i + a, j + b, c).
    """
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    return sliding_window_view(pad_same(x, k), (k, k), axis=(1, 2))


def conv2d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded same convolution; x is N x r x s x c_in, w is k x k x c_in x c_out."""
    if x.ndim != 4:
        raise ShapeError(f"convolution input must be N x r x s x c, got shape {x.shape}")
    k = w.shape[0]
    if w.ndim != 4 or w.shape[1] != k:
        raise ShapeError(f"kernel must be k x k x c_in x c_out, got shape {w.shape}")
    _check_features(x, w.shape[2], "conv2d_same")
    return np.einsum("nrscab,abcd->nrsd", conv_windows(x, k), w, optimize=True)


@dataclass
class Conv2dLayer(Layer):
    """Same convolution with zero padding, stride 1, odd kernel size, channel-last tensors."""
    w: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.RELU
    cached_input: Optional[np.ndarray] = field(default=None, repr=False)
    cached_preact: Optional[np.ndarray] = field(default=None, repr=False)
    grads: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    trainable = True

    def __post_init__(self):
        if self.w.ndim != 4 or self.w.shape[0] != self.w.shape[1]:
            raise ShapeError(f"Conv2dLayer: kernel must be k x k x c_in x c_out, got {self.w.shape}")
        if self.w.shape[0] % 2 == 0:
            raise ShapeError(f"Conv2dLayer: kernel size must be odd, got {self.w.shape[0]}")
        if self.b.shape != (self.w.shape[3],):
            raise ShapeError(f"Conv2dLayer: bias {self.b.shape} does not match {self.w.shape[3]} output channels")

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.shape[2]

    @property
    def c_out(self) -> int:
        return self.w.shape[3]

    def params(self) -> Dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        return conv2d_same(x, self.w) + self.b

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.activation.apply(self.pre_activation(x))

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        z = self.pre_activation(x)
        self.cached_input = x
        self.cached_preact = z
        return self.activation.apply(z)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self.cached_input is None:
            raise StaleCacheError("Conv2dLayer.backward called before forward")
        x = self.cached_input
        k = self.k
        _, r, s, _ = x.shape
        dz = d_out * self.activation.derivative(self.cached_preact)
        windows = conv_windows(x, k)
        self.grads = {
            "w": np.einsum("nrscab,nrsd->abcd", windows, dz, optimize=True),
            "b": dz.sum(axis=(0, 1, 2)),
        }
        d_padded = np.zeros(pad_same(x, k).shape, dtype=dz.dtype)
        for a in range(k):
            for b in range(k):
                d_padded[:, a:a + r, b:b + s, :] += dz @ self.w[a, b].T
        p = (k - 1) // 2
        return d_padded[:, p:p + r, p:p + s, :]


@dataclass
class BatchNormLayer(Layer):
    """
    Post-activation batch normalization of the next layer's input.
    Dense inputs (N x n) are normalized per feature; conv inputs (N x r x s x c)
    per channel over the batch and both spatial dims.
    """
    num_features: int
    rho: float = 0.99
    eps: float = 1e-3
    stop_grad_stats: bool = False
    affine: bool = True
    mode: NormMode = NormMode.TRAIN
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mu: Optional[np.ndarray] = None
    running_sigma2: Optional[np.ndarray] = None
    grads: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _cache: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.num_features
        self.gamma = np.ones(n) if self.gamma is None else self.gamma
        self.beta = np.zeros(n) if self.beta is None else self.beta
        self.running_mu = np.zeros(n) if self.running_mu is None else self.running_mu
        self.running_sigma2 = np.ones(n) if self.running_sigma2 is None else self.running_sigma2

    @property
    def trainable(self) -> bool:
        return self.affine

    def params(self) -> Dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta} if self.affine else {}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mu": self.running_mu,
            "running_sigma2": self.running_sigma2,
        }

    @staticmethod
    def _axes(x: np.ndarray):
        if x.ndim == 2:
            return (0,)
        if x.ndim == 4:
            return (0, 1, 2)
        raise ShapeError(f"BatchNormLayer expects 2-D or 4-D input, got shape {x.shape}")

    def _normalize(self, x: np.ndarray):
        axes = self._axes(x)
        _check_features(x, self.num_features, "BatchNormLayer")
        if self.mode is NormMode.TRAIN:
            if x.shape[0] < 2:
                raise BatchSizeError(BN_BATCH_SIZE_ONE)
            mu = x.mean(axis=axes)
            var = ((x - mu) ** 2).mean(axis=axes)
        else:
            mu, var = self.running_mu, self.running_sigma2
        inv_std = 1.0 / np.sqrt(var + self.eps)
        return (x - mu) * inv_std, mu, var, inv_std

    def apply(self, x: np.ndarray) -> np.ndarray:
        x_hat, _, _, _ = self._normalize(x)
        return self.gamma * x_hat + self.beta

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        x_hat, mu, var, inv_std = self._normalize(x)
        if self.mode is NormMode.TRAIN and update_running:
            self.running_mu = self.rho * self.running_mu + (1.0 - self.rho) * mu
            self.running_sigma2 = self.rho * self.running_sigma2 + (1.0 - self.rho) * var
        self._cache = {"x_hat": x_hat, "mu": mu, "var": var, "inv_std": inv_std}
        return self.gamma * x_hat + self.beta

    @property
    def batch_stats(self):
        if self._cache is None:
            raise StaleCacheError("BatchNormLayer has no cached batch statistics")
        return self._cache["mu"], self._cache["var"]

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StaleCacheError("BatchNormLayer.backward called before forward")
        axes = self._axes(d_out)
        x_hat = self._cache["x_hat"]
        inv_std = self._cache["inv_std"]
        if self.affine:
            self.grads = {"gamma": (d_out * x_hat).sum(axis=axes), "beta": d_out.sum(axis=axes)}
        d_xhat = d_out * self.gamma
        if self.stop_grad_stats or self.mode is NormMode.INFER:
            return d_xhat * inv_std
        m = d_out.size // d_out.shape[-1]
        sum_d = d_xhat.sum(axis=axes)
        sum_dx = (d_xhat * x_hat).sum(axis=axes)
        return inv_std / m * (m * d_xhat - sum_d - x_hat * sum_dx)


@dataclass
class MaxPool2dLayer(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    size: int = 2
    _cache: Optional[Dict[str, object]] = field(default=None, repr=False)

    def _windows(self, x: np.ndarray):
        n, r, s, c = x.shape
        R, S, p = r // self.size, s // self.size, self.size
        blocks = x[:, :R * p, :S * p, :].reshape(n, R, p, S, p, c)
        return blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, R, S, c, p * p)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._windows(x).max(axis=-1)

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        windows = self._windows(x)
        idx = windows.argmax(axis=-1)
        self._cache = {"shape": x.shape, "idx": idx}
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StaleCacheError("MaxPool2dLayer.backward called before forward")
        n, r, s, c = self._cache["shape"]
        idx = self._cache["idx"]
        p = self.size
        R, S = r // p, s // p
        d_windows = np.zeros((n, R, S, c, p * p), dtype=d_out.dtype)
        np.put_along_axis(d_windows, idx[..., None], d_out[..., None], axis=-1)
        blocks = d_windows.reshape(n, R, S, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, R * p, S * p, c)
        d_in = np.zeros((n, r, s, c), dtype=d_out.dtype)
        d_in[:, :R * p, :S * p, :] = blocks
        return d_in


@dataclass
class FlattenLayer(Layer):
    _shape: Optional[tuple] = field(default=None, repr=False)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        self._shape = x.shape
        return self.apply(x)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StaleCacheError("FlattenLayer.backward called before forward")
        return d_out.reshape(self._shape)


def dense_forward(layer: DenseLayer, h_in: np.ndarray, activation: Optional[Activation] = None) -> np.ndarray:
    """Forward pass; `activation` overrides the layer's own for this call only."""
    if activation is None:
        return layer.forward(h_in)
    layer.forward(h_in)
    return activation.apply(layer.cached_preact)


def conv_forward(layer: Conv2dLayer, x: np.ndarray, activation: Optional[Activation] = None) -> np.ndarray:
    if activation is None:
        return layer.forward(x)
    layer.forward(x)
    return activation.apply(layer.cached_preact)


def bn_forward(layer: BatchNormLayer, h_in: np.ndarray) -> np.ndarray:
    return layer.forward(h_in)
