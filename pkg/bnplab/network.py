"""
Sequential network, softmax cross-entropy loss, SGD, initialization and checkpoints.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bnplab.config import Arch, Method
from bnplab.errors import BnpLabError, NonFiniteError, ShapeError, StaleCacheError
from bnplab.layers import (
    Activation,
    BatchNormLayer,
    Conv2dLayer,
    DenseLayer,
    FlattenLayer,
    Layer,
    MaxPool2dLayer,
    NormMode,
)
from bnplab.precond import BnpState

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def softmax_xent(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """
    Cross-entropy of softmax(logits) against integer labels.
    Returns (loss, probs); loss is the batch mean, or the per-sample vector
    when reduction="none".
    """
    n, classes = logits.shape
    labels = _check_labels(labels, n, classes)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(n), labels]
    probs = np.exp(log_probs)
    if reduction == "none":
        return losses, probs
    return float(losses.mean()), probs


@dataclass
class GradientBundle:
    """Per-layer gradients keyed by parameter name; layers without parameters get an empty dict."""
    grads: List[Dict[str, np.ndarray]]

    def __getitem__(self, index: int) -> Dict[str, np.ndarray]:
        return self.grads[index]

    def __len__(self) -> int:
        return len(self.grads)

    def copy(self) -> "GradientBundle":
        return GradientBundle([{k: v.copy() for k, v in g.items()} for g in self.grads])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for g in self.grads for v in g.values())


class Network:
    """
    Sequential stack of layers ending in logits.
    forward() caches what backward() and BNP need; each cached forward may be
    consumed by exactly one backward.
    """

    def __init__(self, layers: Sequence[Layer], num_classes: int):
        self.layers: List[Layer] = list(layers)
        self.num_classes = num_classes
        self._logits: Optional[np.ndarray] = None
        self._consumed = True

    def set_mode(self, mode: NormMode) -> None:
        for layer in self.layers:
            if isinstance(layer, BatchNormLayer):
                layer.mode = mode

    def parameter_layers(self) -> List[Tuple[int, Layer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.params()]

    def forward(self, x: np.ndarray, update_running: bool = True) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = layer.forward(h, update_running=update_running)
        self._logits = h
        self._consumed = False
        return h

    def backward(self, labels: np.ndarray) -> GradientBundle:
        if self._logits is None:
            raise StaleCacheError("backward called before forward")
        if self._consumed:
            raise StaleCacheError("backward called twice on the same forward pass")
        n = self._logits.shape[0]
        labels = _check_labels(labels, n, self.num_classes)
        probs = softmax(self._logits)
        d = probs
        d[np.arange(n), labels] -= 1.0
        d /= n
        for layer in reversed(self.layers):
            d = layer.backward(d)
        self._consumed = True
        return GradientBundle([dict(layer.grads) if layer.params() else {} for layer in self.layers])

    def forward_from(self, index: int, preact: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """
        Re-run the network from layer `index` given that layer's pre-activation,
        without touching any cache. Returns the logits and the pre-activations of
        every downstream ReLU layer.
        """
        layer = self.layers[index]
        if not isinstance(layer, (DenseLayer, Conv2dLayer)):
            raise BnpLabError(f"layer {index} has no pre-activation")
        h = layer.activation.apply(preact)
        relu_preacts: List[np.ndarray] = []
        for downstream in self.layers[index + 1:]:
            if isinstance(downstream, (DenseLayer, Conv2dLayer)):
                z = downstream.pre_activation(h)
                if downstream.activation is Activation.RELU:
                    relu_preacts.append(z)
                h = downstream.activation.apply(z)
            else:
                h = downstream.apply(h)
        return h, relu_preacts

    def per_sample_losses(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = layer.apply(h)
        losses, _ = softmax_xent(h, labels, reduction="none")
        return losses

    def loss(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Mean batch loss at the current parameters; leaves caches and running stats alone."""
        return float(self.per_sample_losses(x, labels).mean())

    def predict(self, x: np.ndarray, chunk: int = 1000) -> np.ndarray:
        """Class predictions with BN in inference mode."""
        modes = {i: layer.mode for i, layer in enumerate(self.layers) if isinstance(layer, BatchNormLayer)}
        self.set_mode(NormMode.INFER)
        try:
            out = []
            for start in range(0, x.shape[0], chunk):
                h = x[start:start + chunk]
                for layer in self.layers:
                    h = layer.apply(h)
                out.append(h.argmax(axis=1))
        finally:
            for i, mode in modes.items():
                self.layers[i].mode = mode
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        if x.shape[0] == 0:
            return 0.0
        return float(np.mean(self.predict(x) == np.asarray(labels)))

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """theta <- theta - lr * v with v <- momentum * v + grad. Returns (params, velocity)."""
    velocity = dict(velocity or {})
    updated = {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {value.shape}")
        v = momentum * velocity[name] + g if name in velocity else g
        velocity[name] = v
        updated[name] = value - lr * v
    return updated, velocity


@dataclass
class SGD:
    """Plain or momentum SGD applied to every parameter layer of a network in place."""
    lr: float
    momentum: float = 0.0
    velocity: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)

    def step(self, network: Network, bundle: GradientBundle) -> None:
        if not bundle.is_finite():
            raise NonFiniteError("non-finite gradient; training diverged")
        for i, layer in network.parameter_layers():
            params, self.velocity[i] = sgd_step(
                layer.params(), bundle[i], self.lr, self.momentum, self.velocity.get(i)
            )
            for name, value in params.items():
                setattr(layer, name, value.astype(getattr(layer, name).dtype, copy=False))


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dense_layer(rng: np.random.Generator, n_in: int, n_out: int, activation: Activation) -> DenseLayer:
    W = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    return DenseLayer(W=W, b=np.zeros(n_out), activation=activation)


def conv_layer(rng: np.random.Generator, k: int, c_in: int, c_out: int, activation: Activation) -> Conv2dLayer:
    w = glorot_uniform(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out)
    return Conv2dLayer(w=w, b=np.zeros(c_out), activation=activation)


def build_network(
    arch: Arch,
    input_shape: Tuple[int, ...],
    num_classes: int,
    method: Method,
    rng: np.random.Generator,
    bn_eps: float = 1e-3,
    rho: float = 0.99,
) -> Network:
    """
    Build one of the desk-scale architectures. With method=bn a BatchNormLayer
    normalizes the input of every parameter layer except the first.
    `input_shape` excludes the batch dimension.
    """
    def bn(features: int) -> List[Layer]:
        if method is Method.BN:
            return [BatchNormLayer(num_features=features, rho=rho, eps=bn_eps)]
        return []

    layers: List[Layer] = []
    if arch in (Arch.MLP_3X100, Arch.MLP_2LAYER):
        hidden = [100, 100, 100] if arch is Arch.MLP_3X100 else [100, 100]
        if len(input_shape) > 1:
            layers.append(FlattenLayer())
        width = int(np.prod(input_shape))
        for i, units in enumerate(hidden):
            if i > 0:
                layers += bn(width)
            layers.append(dense_layer(rng, width, units, Activation.RELU))
            width = units
        layers += bn(width)
        layers.append(dense_layer(rng, width, num_classes, Activation.NONE))
    elif arch is Arch.CNN_5LAYER:
        if len(input_shape) != 3:
            raise ShapeError(f"cnn-5layer needs r x s x c inputs, got {input_shape}")
        r, s, c = input_shape
        layers.append(conv_layer(rng, 3, c, 32, Activation.RELU))
        layers.append(MaxPool2dLayer(2))
        layers += bn(32)
        layers.append(conv_layer(rng, 3, 32, 64, Activation.RELU))
        layers.append(MaxPool2dLayer(2))
        layers += bn(64)
        layers.append(conv_layer(rng, 3, 64, 32, Activation.RELU))
        layers.append(FlattenLayer())
        flat = (r // 4) * (s // 4) * 32
        layers += bn(flat)
        layers.append(dense_layer(rng, flat, 64, Activation.RELU))
        layers += bn(64)
        layers.append(dense_layer(rng, 64, num_classes, Activation.NONE))
    else:
        raise ShapeError(f"unknown architecture {arch}")

    logger.info(f"Built {arch.value} ({method.value}) with {len(layers)} layers")
    return Network(layers, num_classes)


def save_checkpoint(path: str, network: Network, bnp_states: Optional[Dict[int, BnpState]] = None) -> str:
    """
    Write parameters, BN running statistics and BNP state to an .npz archive.
    Keys: schema_version, layer{i}.{name}, bnp{i}.{field}.
    """
    arrays: Dict[str, np.ndarray] = {"schema_version": np.array(CHECKPOINT_SCHEMA_VERSION)}
    for i, layer in enumerate(network.layers):
        for name, value in layer.state_dict().items():
            arrays[f"layer{i}.{name}"] = value
    for i, state in (bnp_states or {}).items():
        arrays[f"bnp{i}.mu"] = state.mu
        arrays[f"bnp{i}.sigma2"] = state.sigma2
        arrays[f"bnp{i}.layer_shape"] = np.array(state.layer_shape, dtype=np.int64)
        arrays[f"bnp{i}.hyper"] = np.array([state.rho, state.eps1, state.eps2, float(state.use_running_stats)])
    if not path.endswith(".npz"):
        path = path + ".npz"
    np.savez(path, **arrays)
    logger.info(f"Checkpoint written to {path} ({len(arrays)} arrays)")
    return path


def load_checkpoint(path: str, network: Network) -> Dict[int, BnpState]:
    """Restore `network` in place from an archive written by save_checkpoint; returns the BNP states."""
    with np.load(path) as archive:
        version = int(archive["schema_version"])
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise BnpLabError(f"unsupported checkpoint schema {version}")
        for i, layer in enumerate(network.layers):
            names = layer.state_dict().keys()
            missing = [n for n in names if f"layer{i}.{n}" not in archive]
            if missing:
                raise ShapeError(f"checkpoint lacks layer{i}.{missing[0]}")
            layer.load_state_dict({n: archive[f"layer{i}.{n}"] for n in names})
        states: Dict[int, BnpState] = {}
        indices = sorted({int(k.split(".")[0][3:]) for k in archive.files if k.startswith("bnp")})
        for i in indices:
            rho, eps1, eps2, running = archive[f"bnp{i}.hyper"]
            states[i] = BnpState(
                layer_shape=tuple(int(d) for d in archive[f"bnp{i}.layer_shape"]),
                mu=archive[f"bnp{i}.mu"].copy(),
                sigma2=archive[f"bnp{i}.sigma2"].copy(),
                rho=float(rho),
                eps1=float(eps1),
                eps2=float(eps2),
                use_running_stats=bool(running),
            )
    return states
