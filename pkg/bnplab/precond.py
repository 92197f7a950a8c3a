"""
Batch normalization preconditioning (BNP).

Instead of normalizing the input h of a layer, BNP transforms the gradient of
the layer's parameters [b_i, w_i] by (1/q^2) P P^T with P = U D, where U
recenters by the mean of h and D rescales by its (stabilized) standard deviation.
Dense inputs are N x n; conv inputs are channel-last N x r x s x c, with
statistics per input channel over the batch and both spatial dims.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from bnplab.errors import BatchSizeError, ShapeError
from bnplab.layers import Conv2dLayer, DenseLayer

logger = logging.getLogger(__name__)


class LayerKind(Enum):
    DENSE = "dense"
    CONV = "conv"


@dataclass
class StabilizedVariance:
    sigma_tilde2: np.ndarray


def stabilize(sigma2: np.ndarray, eps1: float, eps2: float) -> StabilizedVariance:
    """sigma2 + eps1 * max(sigma2) + eps2; every entry stays >= eps2."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    top = float(sigma2.max()) if sigma2.size else 0.0
    return StabilizedVariance(sigma_tilde2=sigma2 + eps1 * top + eps2)


@dataclass(frozen=True)
class QScale:
    q2: float

    @property
    def q(self) -> float:
        return float(np.sqrt(self.q2))


def q_scale(layer_shape: Tuple[int, ...], N: int) -> QScale:
    """
    Dense (n_in, n_out): q^2 = max(n_in / N, 1).
    Conv (k, c_in, c_out, r, s): q^2 = max(c_in k^2 / N, sqrt(r s)).
    """
    if N < 1 or any(d < 1 for d in layer_shape):
        raise ShapeError(f"q_scale needs positive dimensions, got {layer_shape} and N={N}")
    if len(layer_shape) == 2:
        return QScale(max(layer_shape[0] / N, 1.0))
    if len(layer_shape) == 5:
        k, c_in, _, r, s = layer_shape
        return QScale(max(c_in * k * k / N, float(np.sqrt(r * s))))
    raise ShapeError(f"layer_shape must be (n_in, n_out) or (k, c_in, c_out, r, s), got {layer_shape}")


@dataclass
class BnpState:
    """Running statistics and hyperparameters of one preconditioned layer."""
    layer_shape: Tuple[int, ...]
    mu: np.ndarray
    sigma2: np.ndarray
    rho: float = 0.99
    eps1: float = 1e-2
    eps2: float = 1e-4
    use_running_stats: bool = True
    batch_mu: Optional[np.ndarray] = field(default=None, repr=False)
    batch_sigma2: Optional[np.ndarray] = field(default=None, repr=False)
    steps: int = 0

    def __post_init__(self):
        self.layer_shape = tuple(int(d) for d in self.layer_shape)
        if len(self.layer_shape) not in (2, 5):
            raise ShapeError(f"layer_shape must have 2 or 5 entries, got {self.layer_shape}")
        if self.mu.shape != (self.n_stats,) or self.sigma2.shape != (self.n_stats,):
            raise ShapeError(f"statistics must have length {self.n_stats}")
        if np.any(self.sigma2 < 0):
            raise ShapeError("sigma2 must be non-negative")

    @property
    def kind(self) -> LayerKind:
        return LayerKind.DENSE if len(self.layer_shape) == 2 else LayerKind.CONV

    @property
    def n_stats(self) -> int:
        return self.layer_shape[0] if self.kind is LayerKind.DENSE else self.layer_shape[1]

    @classmethod
    def for_dense(cls, n_in: int, n_out: int, **hyper) -> "BnpState":
        return cls(layer_shape=(n_in, n_out), mu=np.zeros(n_in), sigma2=np.ones(n_in), **hyper)

    @classmethod
    def for_conv(cls, k: int, c_in: int, c_out: int, r: int, s: int, **hyper) -> "BnpState":
        return cls(layer_shape=(k, c_in, c_out, r, s), mu=np.zeros(c_in), sigma2=np.ones(c_in), **hyper)

    def active_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.use_running_stats:
            return self.mu, self.sigma2
        if self.batch_mu is None:
            raise BatchSizeError("batch statistics requested before update_stats")
        return self.batch_mu, self.batch_sigma2

    def stabilized(self) -> StabilizedVariance:
        _, sigma2 = self.active_stats()
        return stabilize(sigma2, self.eps1, self.eps2)


def update_stats(state: BnpState, h_batch: np.ndarray) -> BnpState:
    """
    Fold the batch mean and variance into the running averages with momentum rho.
    With a single dense example the variance is measured against the running
    mean from before this update.
    """
    h = np.asarray(h_batch, dtype=np.float64)
    if state.kind is LayerKind.DENSE:
        if h.ndim != 2 or h.shape[1] != state.layer_shape[0]:
            raise ShapeError(f"dense BNP input must be N x {state.layer_shape[0]}, got {h.shape}")
        axes = (0,)
    else:
        _, c_in, _, r, s = state.layer_shape
        if h.ndim != 4 or h.shape[1:] != (r, s, c_in):
            raise ShapeError(f"conv BNP input must be N x {r} x {s} x {c_in}, got {h.shape}")
        axes = (0, 1, 2)
    if h.shape[0] < 1:
        raise BatchSizeError("empty batch")

    mu_h = h.mean(axis=axes)
    if state.kind is LayerKind.DENSE and h.shape[0] == 1:
        sigma2_h = (h[0] - state.mu) ** 2
    else:
        sigma2_h = ((h - mu_h) ** 2).mean(axis=axes)

    state.batch_mu, state.batch_sigma2 = mu_h, sigma2_h
    state.mu = state.rho * state.mu + (1.0 - state.rho) * mu_h
    state.sigma2 = state.rho * state.sigma2 + (1.0 - state.rho) * sigma2_h
    state.steps += 1
    return state


def precondition_dense(
    state: BnpState, Gw: np.ndarray, Gb: np.ndarray, N: int, q2: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gw'(i,j) = (Gw(i,j) - mu(j) Gb(i)) / (q^2 sigma~2(j))
    Gb'(i)   = Gb(i) / q^2 - sum_j Gw'(i,j) mu(j)
    The bias rule uses the already-updated Gw'. `q2` overrides the q rule.
    """
    n_in, n_out = state.layer_shape
    if Gw.shape != (n_out, n_in) or Gb.size != n_out:
        raise ShapeError(f"gradients {Gw.shape}/{Gb.shape} do not match layer {state.layer_shape}")
    mu, _ = state.active_stats()
    sigma_tilde2 = state.stabilized().sigma_tilde2
    if q2 is None:
        q2 = q_scale(state.layer_shape, N).q2
    gb = Gb.reshape(-1)
    gw_new = (Gw - np.outer(gb, mu)) / sigma_tilde2 / q2
    gb_new = gb / q2 - gw_new @ mu
    return gw_new, gb_new.reshape(Gb.shape)


def precondition_conv(
    state: BnpState, Gw: np.ndarray, Gb: np.ndarray, N: int, r: int, s: int, q2: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Same rule per kernel entry, with the channel statistics shared by all k x k positions."""
    k, c_in, c_out, _, _ = state.layer_shape
    if Gw.shape != (k, k, c_in, c_out) or Gb.size != c_out:
        raise ShapeError(f"gradients {Gw.shape}/{Gb.shape} do not match layer {state.layer_shape}")
    mu, _ = state.active_stats()
    sigma_tilde2 = state.stabilized().sigma_tilde2
    if q2 is None:
        q2 = q_scale((k, c_in, c_out, r, s), N).q2
    gb = Gb.reshape(-1)
    gw_new = (Gw - mu[None, None, :, None] * gb[None, None, None, :]) / sigma_tilde2[None, None, :, None] / q2
    gb_new = gb / q2 - np.einsum("abpd,p->d", gw_new, mu)
    return gw_new, gb_new.reshape(Gb.shape)


def preconditioner_matrix(mu: np.ndarray, sigma_tilde2: np.ndarray) -> np.ndarray:
    """Explicit P = U D with U = [[1, -mu^T], [0, I]] and D = diag(1, 1/sigma~)."""
    mu = np.asarray(mu, dtype=np.float64)
    n = mu.size
    U = np.eye(n + 1)
    U[0, 1:] = -mu
    D = np.diag(np.concatenate([[1.0], 1.0 / np.sqrt(np.asarray(sigma_tilde2, dtype=np.float64))]))
    return U @ D


def precondition_bundle(network, bundle, states: Dict[int, BnpState], **hyper):
    """
    Precondition every dense and conv layer's gradient in `bundle` using the
    inputs cached by the last forward pass. Missing states are created on first
    use from the cached input shape. Returns a new GradientBundle.
    """
    out = bundle.copy()
    for i, layer in enumerate(network.layers):
        if not isinstance(layer, (DenseLayer, Conv2dLayer)) or layer.cached_input is None:
            continue
        h = layer.cached_input
        N = h.shape[0]
        if i not in states:
            if isinstance(layer, DenseLayer):
                states[i] = BnpState.for_dense(layer.n_in, layer.n_out, **hyper)
            else:
                _, r, s, _ = h.shape
                states[i] = BnpState.for_conv(layer.k, layer.c_in, layer.c_out, r, s, **hyper)
            logger.debug(f"BNP state created for layer {i} with shape {states[i].layer_shape}")
        state = update_stats(states[i], h)
        grads = out[i]
        if isinstance(layer, DenseLayer):
            grads["W"], grads["b"] = precondition_dense(state, grads["W"], grads["b"], N)
        else:
            _, r, s, _ = h.shape
            grads["w"], grads["b"] = precondition_conv(state, grads["w"], grads["b"], N, r, s)
    return out
