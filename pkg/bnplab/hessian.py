"""
Single-neuron Hessians and their preconditioned forms.

For one neuron with parameters w^ = [b_i, w_i] fed by the batch activations H,
the Hessian of the mean loss is H^T S H^ with H^ = [e, H] and S diagonal. The
same construction covers a conv output channel through the lowered matrix of
the layer input. Everything here runs in float64.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bnplab.errors import BatchSizeError, BnpLabError, ShapeError, ZeroVarianceError
from bnplab.layers import (
    Activation,
    BatchNormLayer,
    Conv2dLayer,
    DenseLayer,
    FlattenLayer,
    conv_windows,
)
from bnplab.linalg import as_matrix, column_stats, condition_number, spd_condition_number, svd
from bnplab.network import Network, SGD, softmax, softmax_xent
from bnplab.precond import BnpState, precondition_dense, preconditioner_matrix, q_scale

logger = logging.getLogger(__name__)


@dataclass
class ExtendedActivation:
    H: np.ndarray
    H_hat: np.ndarray

    @property
    def N(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]


def build_extended(H) -> ExtendedActivation:
    """Prepend the all-ones column: H^ = [e, H]."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ShapeError(f"expected an N x n activation matrix with N >= 1, got {H.shape}")
    return ExtendedActivation(H=H, H_hat=np.hstack([np.ones((H.shape[0], 1)), H]))


@dataclass
class CurvatureDiag:
    """s(j) = L''(a_j) / N for the tracked pre-activation a_j; skipped samples hold 0."""
    s: np.ndarray
    skipped: np.ndarray
    method: str

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.s)


def _is_output_layer(network: Network, layer_index: int) -> bool:
    layer = network.layers[layer_index]
    return layer_index == len(network.layers) - 1 and layer.activation is Activation.NONE


def curvature_diag(
    network: Network, x: np.ndarray, labels: np.ndarray, layer_index: int, neuron: int, step: float = 1e-4
) -> CurvatureDiag:
    """
    Second derivative of each sample's loss with respect to one dense neuron's
    pre-activation, divided by N. Analytic p_i (1 - p_i) when the neuron is a
    logit; otherwise second-order central differences through the downstream
    layers. Samples whose stencil crosses a ReLU kink are flagged and skipped.
    """
    layer = network.layers[layer_index]
    if not isinstance(layer, DenseLayer):
        raise BnpLabError(f"layer {layer_index} is not a dense layer")
    network.forward(x, update_running=False)
    z = layer.cached_preact.astype(np.float64)
    N = z.shape[0]
    if not 0 <= neuron < z.shape[1]:
        raise ShapeError(f"neuron {neuron} out of range for layer {layer_index}")

    if _is_output_layer(network, layer_index):
        p = softmax(z)[:, neuron]
        return CurvatureDiag(s=p * (1.0 - p) / N, skipped=np.zeros(N, dtype=bool), method="analytic")

    losses = {}
    patterns = {}
    for t in (-step, 0.0, step):
        zz = z.copy()
        zz[:, neuron] += t
        logits, relu_preacts = network.forward_from(layer_index, zz)
        losses[t], _ = softmax_xent(logits, labels, reduction="none")
        own = zz[:, neuron:neuron + 1] > 0 if layer.activation is Activation.RELU else np.zeros((N, 0), bool)
        patterns[t] = np.hstack([own] + [(a > 0).reshape(N, -1) for a in relu_preacts])
    skipped = np.any(patterns[-step] != patterns[0.0], axis=1) | np.any(patterns[step] != patterns[0.0], axis=1)
    second = (losses[step] - 2.0 * losses[0.0] + losses[-step]) / step ** 2
    s = np.where(skipped, 0.0, second) / N
    if skipped.any():
        logger.debug(f"curvature_diag skipped {int(skipped.sum())} samples at ReLU kinks")
    return CurvatureDiag(s=s, skipped=skipped, method="finite-difference")


def assemble_hessian(ext: ExtendedActivation, S: CurvatureDiag) -> np.ndarray:
    """H^T S H^ as a symmetric (n+1) x (n+1) matrix."""
    s = np.asarray(S.s, dtype=np.float64)
    if s.shape != (ext.N,):
        raise ShapeError(f"curvature has {s.shape[0]} entries for {ext.N} samples")
    hess = ext.H_hat.T @ (s[:, None] * ext.H_hat)
    return 0.5 * (hess + hess.T)


def finite_difference_hessian(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    hess = np.zeros((n, n))
    eye = np.eye(n) * step
    f0 = f(theta)
    for i in range(n):
        hess[i, i] = (f(theta + eye[i]) - 2.0 * f0 + f(theta - eye[i])) / step ** 2
        for j in range(i + 1, n):
            value = (
                f(theta + eye[i] + eye[j])
                - f(theta + eye[i] - eye[j])
                - f(theta - eye[i] + eye[j])
                + f(theta - eye[i] - eye[j])
            ) / (4.0 * step ** 2)
            hess[i, j] = hess[j, i] = value
    return hess


def layer_parameter_vector(
    network: Network, layer_index: int, neuron: int
) -> Tuple[np.ndarray, Callable[[np.ndarray], None]]:
    """
    The parameter vector [b_i, w_i] of one dense neuron, or [b_d, vec(w(:,:,:,d))]
    of one conv output channel (column-major over kernel row, kernel col, channel),
    plus a setter writing such a vector back into the layer.
    """
    layer = network.layers[layer_index]
    if isinstance(layer, DenseLayer):
        theta = np.concatenate([[layer.b[neuron]], layer.W[neuron]])

        def set_theta(values: np.ndarray) -> None:
            layer.b[neuron] = values[0]
            layer.W[neuron] = values[1:]
    elif isinstance(layer, Conv2dLayer):
        k, c = layer.k, layer.c_in
        theta = np.concatenate([[layer.b[neuron]], layer.w[:, :, :, neuron].reshape(-1, order="F")])

        def set_theta(values: np.ndarray) -> None:
            layer.b[neuron] = values[0]
            layer.w[:, :, :, neuron] = values[1:].reshape((k, k, c), order="F")
    else:
        raise BnpLabError(f"layer {layer_index} has no neuron parameters")
    return theta.astype(np.float64), set_theta


def neuron_loss_fn(network: Network, x: np.ndarray, labels: np.ndarray, layer_index: int, neuron: int):
    """Mean batch loss as a function of one neuron's [b, w] vector; restores the parameters after each call."""
    theta0, set_theta = layer_parameter_vector(network, layer_index, neuron)

    def f(theta: np.ndarray) -> float:
        set_theta(theta)
        try:
            return network.loss(x, labels)
        finally:
            set_theta(theta0)

    return f, theta0


@dataclass
class Preconditioner:
    U: np.ndarray
    D: np.ndarray
    P: np.ndarray
    mu: np.ndarray
    sigma_tilde2: np.ndarray
    q: float = 1.0


def build_preconditioner(
    H,
    eps1: float = 0.0,
    eps2: float = 0.0,
    running: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    q: float = 1.0,
) -> Preconditioner:
    """
    P = U D from the batch mean and variance of H (or injected running statistics).
    With eps1 = eps2 = 0 the non-constant columns of H^ P have zero mean and unit variance.
    """
    H = as_matrix(H)
    if running is not None:
        mu, sigma2 = (np.asarray(a, dtype=np.float64) for a in running)
    else:
        if H.shape[0] < 2:
            raise BatchSizeError("batch statistics need N >= 2; inject running statistics for N = 1")
        mu, sigma2 = column_stats(H)
    if eps1 == 0.0 and eps2 == 0.0 and np.any(sigma2 == 0.0):
        raise ZeroVarianceError(f"column {int(np.argmax(sigma2 == 0.0))} has zero variance")
    sigma_tilde2 = sigma2 + eps1 * float(sigma2.max()) + eps2
    n = mu.size
    U = np.eye(n + 1)
    U[0, 1:] = -mu
    D = np.diag(np.concatenate([[1.0], 1.0 / np.sqrt(sigma_tilde2)]))
    return Preconditioner(U=U, D=D, P=preconditioner_matrix(mu, sigma_tilde2), mu=mu, sigma_tilde2=sigma_tilde2, q=q)


@dataclass
class ConditionReport:
    kappa_H: float
    kappa_HU: Optional[float] = None
    kappa_G: Optional[float] = None
    kappa_D: Optional[float] = None
    kappa_hessian: Optional[float] = None
    kappa_precond_hessian: Optional[float] = None
    lambda_max: Optional[float] = None
    lambda_star_min: Optional[float] = None
    full_rank: bool = True
    passed: Optional[bool] = None
    details: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        out = {k: v for k, v in self.__dict__.items() if k != "details" and v is not None}
        out.update(self.details)
        return out


def conditioning_check(H, rng: np.random.Generator, n_diag: int = 100, tol: float = 1e-8) -> ConditionReport:
    """
    Recentering never hurts: kappa(H^ U) <= kappa(H^). Rescaling by D is within
    sqrt(n+1) of the best diagonal scaling: kappa(H^ U D) <= sqrt(n+1) kappa(H^ U D0)
    for every positive diagonal D0 tried. Each round draws one wide random D0 and
    one near D, where the bound is close to tight. Rank-deficient H^ is reported,
    not judged.
    """
    ext = build_extended(H)
    n = ext.n
    kappa_H = condition_number(ext.H_hat)
    full_rank = svd(ext.H_hat).rank == n + 1
    mu, sigma2 = column_stats(ext.H)
    U = np.eye(n + 1)
    U[0, 1:] = -mu
    HU = ext.H_hat @ U
    kappa_HU = condition_number(HU)
    report = ConditionReport(kappa_H=kappa_H, kappa_HU=kappa_HU, full_rank=full_rank)
    if not full_rank or np.any(sigma2 == 0.0):
        return report

    pre = build_preconditioner(ext.H)
    G = HU @ pre.D
    report.kappa_G = condition_number(G)
    report.kappa_D = condition_number(pre.D)
    bound = np.sqrt(n + 1)
    d_equil = np.diag(pre.D)
    worst = worst_near = 0.0
    best_sampled = np.inf
    for _ in range(n_diag):
        for spread, base in ((3.0, 1.0), (0.3, d_equil)):
            d0 = base * 10.0 ** rng.uniform(-spread, spread, size=n + 1)
            kappa_d0 = condition_number(HU * d0)
            best_sampled = min(best_sampled, kappa_d0)
            ratio = report.kappa_G / (bound * kappa_d0)
            if spread == 3.0:
                worst = max(worst, ratio)
            else:
                worst_near = max(worst_near, ratio)
    recenter_ratio = kappa_HU / kappa_H
    report.details = {
        "recenter_ratio": recenter_ratio,
        "scaling_ratio": worst,
        "near_scaling_ratio": worst_near,
        "best_sampled_kappa": float(best_sampled),
    }
    report.passed = recenter_ratio <= 1.0 + tol and max(worst, worst_near) <= 1.0 + tol
    return report


def recentering_strictness_probe(rng: np.random.Generator, N: int = 64, n: int = 8) -> Dict[str, float]:
    """
    Build H whose mean points along the principal component of its centered
    part; recentering must then strictly lower the condition number.
    """
    Z = rng.standard_normal((N, n)) * np.linspace(1.0, 3.0, n)
    Z -= Z.mean(axis=0)
    _, vecs = np.linalg.eigh(Z.T @ Z / (N - 1))
    x_max = vecs[:, -1]
    H = Z + 3.0 * x_max
    kappa_H = condition_number(build_extended(H).H_hat)
    U = np.eye(n + 1)
    U[0, 1:] = -H.mean(axis=0)
    kappa_HU = condition_number(build_extended(H).H_hat @ U)
    return {"kappa_H": kappa_H, "kappa_HU": kappa_HU, "ratio": kappa_HU / kappa_H}


def product_bound_check(H_hat, s, tol: float = 1e-8) -> Dict[str, float]:
    """kappa(H^T S H^) <= kappa(H^)^2 kappa(S) for positive diagonal S."""
    H_hat = as_matrix(H_hat)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ShapeError("S must have positive diagonal entries")
    kappa_hess = condition_number(H_hat.T @ (s[:, None] * H_hat))
    kappa_Hhat = condition_number(H_hat)
    bound = kappa_Hhat ** 2 * float(s.max() / s.min())
    ratio = kappa_hess / bound
    return {"kappa_hessian": kappa_hess, "bound": bound, "ratio": ratio, "passed": bool(ratio <= 1.0 + tol)}


def norm_scaling_probe(widths: Sequence[int], N: int, trials: int, rng: np.random.Generator) -> List[Dict[str, float]]:
    """
    Mean of ||(1/q) [e, G]||_2 / sqrt(N) over iid standard normal G (N x n),
    one row per width, with the dense q rule.
    """
    rows = []
    for width in widths:
        q = q_scale((width, 1), N).q
        norms = []
        for _ in range(trials):
            G_hat = np.hstack([np.ones((N, 1)), rng.standard_normal((N, width))])
            norms.append(np.linalg.norm(G_hat, 2) / q / np.sqrt(N))
        rows.append({"width": int(width), "N": int(N), "q": q, "mean_norm_ratio": float(np.mean(norms))})
    return rows


def _strip_bn(network: Network, bn_index: int) -> Network:
    layers = [copy.deepcopy(layer) for i, layer in enumerate(network.layers) if i != bn_index]
    return Network(layers, network.num_classes)


def bn_bnp_equivalence(network: Network, x: np.ndarray, labels: np.ndarray, lr: float) -> float:
    """
    One SGD step on a network with a single stop-gradient BN layer
    (gamma=1, beta=0, eps=0) against one step on the BN-free network whose next
    dense layer carries W diag(1/sigma) and b - W (mu/sigma), where that layer
    alone is preconditioned by BNP from batch statistics with eps=0 and q=1.
    Returns the largest relative parameter discrepancy after mapping the BN
    result into the BN-free parameterization.
    """
    bn_indices = [i for i, layer in enumerate(network.layers) if isinstance(layer, BatchNormLayer)]
    if len(bn_indices) != 1:
        raise BnpLabError("equivalence needs exactly one BatchNormLayer")
    bn_index = bn_indices[0]
    bn_layer = network.layers[bn_index]
    target = network.layers[bn_index + 1] if bn_index + 1 < len(network.layers) else None
    if not isinstance(target, DenseLayer):
        raise BnpLabError("the BatchNormLayer must feed a DenseLayer")
    if bn_layer.affine or bn_layer.eps != 0.0 or not bn_layer.stop_grad_stats:
        raise BnpLabError("equivalence needs an affine-free, eps=0, stop-gradient BatchNormLayer")

    bn_net = copy.deepcopy(network)
    bn_net.forward(x, update_running=False)
    mu, var = bn_net.layers[bn_index].batch_stats
    if np.any(var == 0.0):
        raise ZeroVarianceError("a feature has zero batch variance")
    sigma = np.sqrt(var)
    W0, b0 = target.W.copy(), target.b.copy()

    vanilla = _strip_bn(network, bn_index)
    dense_index = bn_index
    vanilla.layers[dense_index].W = W0 / sigma
    vanilla.layers[dense_index].b = b0 - W0 @ (mu / sigma)

    SGD(lr=lr).step(bn_net, bn_net.backward(labels))

    vanilla.forward(x, update_running=False)
    bundle = vanilla.backward(labels)
    h = vanilla.layers[dense_index].cached_input
    state = BnpState.for_dense(h.shape[1], vanilla.layers[dense_index].n_out, eps1=0.0, eps2=0.0, use_running_stats=False)
    state.batch_mu, state.batch_sigma2 = column_stats(h)
    grads = bundle[dense_index]
    grads["W"], grads["b"] = precondition_dense(state, grads["W"], grads["b"], h.shape[0], q2=1.0)
    SGD(lr=lr).step(vanilla, bundle)

    W1, b1 = bn_net.layers[bn_index + 1].W, bn_net.layers[bn_index + 1].b
    mapped = {dense_index: {"W": W1 / sigma, "b": b1 - W1 @ (mu / sigma)}}
    worst = 0.0
    for i, layer in enumerate(vanilla.layers):
        source = bn_net.layers[i if i < bn_index else i + 1]
        expected = mapped.get(i, source.params())
        for name, value in layer.params().items():
            ref = expected[name]
            scale = max(float(np.abs(ref).max()), np.finfo(float).tiny)
            worst = max(worst, float(np.abs(value - ref).max()) / scale)
    return worst


@dataclass
class ConvLoweredMatrix:
    """
    Hcal stacks, for every example, the r*s x k^2*c matrix whose column
    p*k^2 + b*k + a holds the padded input entries multiplied by kernel entry
    w(a, b, p). Rows run column-major over output positions (i + j*r).
    """
    Hcal: np.ndarray
    Hcal_hat: np.ndarray
    N: int
    r: int
    s: int
    c: int
    k: int


def cnn_lower(x: np.ndarray, k: int) -> ConvLoweredMatrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected an N x r x s x c batch, got {x.shape}")
    N, r, s, c = x.shape
    windows = conv_windows(x, k)  # (N, r, s, c, a, b)
    Hcal = windows.transpose(0, 2, 1, 3, 5, 4).reshape(N * s * r, c * k * k)
    Hcal_hat = np.hstack([np.ones((Hcal.shape[0], 1)), Hcal])
    return ConvLoweredMatrix(Hcal=Hcal, Hcal_hat=Hcal_hat, N=N, r=r, s=s, c=c, k=k)


def lowered_weight(w: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    """[b_d, vec(w(:,:,:,d))] in the column order of cnn_lower."""
    return np.concatenate([[b[d]], w[:, :, :, d].reshape(-1, order="F")])


def vec_channel(a: np.ndarray, d: int) -> np.ndarray:
    """Stack each example's output plane d column-major."""
    return a[:, :, :, d].transpose(0, 2, 1).reshape(-1)


def cnn_stats(x: np.ndarray, k: int, mode: str = "approx") -> Tuple[np.ndarray, np.ndarray]:
    """
    approx: per-channel mean and variance over batch and both spatial dims.
    exact: mean and variance of the padded window seen by each kernel entry,
    returned as k x k x c arrays indexed [kernel row, kernel col, channel].
    """
    x = np.asarray(x, dtype=np.float64)
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if mode == "approx":
        mu = x.mean(axis=(0, 1, 2))
        return mu, ((x - mu) ** 2).mean(axis=(0, 1, 2))
    if mode == "exact":
        lowered = cnn_lower(x, k)
        mu, var = column_stats(lowered.Hcal)
        shape = (lowered.c, k, k)
        return mu.reshape(shape).transpose(2, 1, 0), var.reshape(shape).transpose(2, 1, 0)
    raise ShapeError(f"mode must be exact or approx, got {mode}")


def window_mean_bound(x: np.ndarray, k: int) -> np.ndarray:
    """Per-channel bound on |exact window mean - channel mean|."""
    _, r, s, _ = x.shape
    factor = (k - 1) * (1.0 / (2 * r) + 1.0 / (2 * s) - (k - 1) / (4.0 * r * s))
    return factor * np.abs(x).max(axis=(0, 1, 2))


def conv_curvature_blocks(network: Network, x: np.ndarray, labels: np.ndarray, layer_index: int, d: int) -> np.ndarray:
    """
    Per-example r*s x r*s blocks of the loss Hessian with respect to conv output
    plane d, for a linear conv layer followed by Flatten and the output dense layer.
    """
    conv = network.layers[layer_index]
    tail = network.layers[layer_index + 1:]
    if not (
        isinstance(conv, Conv2dLayer)
        and conv.activation is Activation.NONE
        and len(tail) == 2
        and isinstance(tail[0], FlattenLayer)
        and isinstance(tail[1], DenseLayer)
        and tail[1].activation is Activation.NONE
    ):
        raise BnpLabError("conv curvature blocks need linear conv -> flatten -> output dense")
    logits = network.forward(x, update_running=False)
    N, r, s, _ = conv.cached_preact.shape
    C = conv.c_out
    i_idx, j_idx = np.meshgrid(np.arange(r), np.arange(s), indexing="ij")
    # flattened index of position (i, j, d), listed column-major over (i, j)
    flat = ((i_idx * s + j_idx) * C + d).reshape(-1, order="F")
    M = tail[1].W[:, flat].astype(np.float64)
    probs = softmax(logits.astype(np.float64))
    blocks = np.empty((N, r * s, r * s))
    for j in range(N):
        p = probs[j]
        blocks[j] = M.T @ (np.diag(p) - np.outer(p, p)) @ M / N
    return blocks


def assemble_conv_hessian(lowered: ConvLoweredMatrix, blocks: np.ndarray) -> np.ndarray:
    """sum over examples of Hcal^_j^T S_j Hcal^_j."""
    rs = lowered.r * lowered.s
    if blocks.shape != (lowered.N, rs, rs):
        raise ShapeError(f"expected {lowered.N} blocks of size {rs}, got {blocks.shape}")
    hess = np.zeros((lowered.Hcal_hat.shape[1],) * 2)
    for j in range(lowered.N):
        Hj = lowered.Hcal_hat[j * rs:(j + 1) * rs]
        hess += Hj.T @ blocks[j] @ Hj
    return 0.5 * (hess + hess.T)


def rate_probe(kappa: float, steps: int = 200) -> Dict[str, float]:
    """
    Gradient descent on 1/2 x^T diag(1, kappa) x with step 2 / (1 + kappa).
    Returns the last observed per-step error ratio next to (kappa - 1) / (kappa + 1).
    """
    if kappa < 1.0:
        raise ShapeError(f"kappa must be >= 1, got {kappa}")
    curvature = np.array([1.0, kappa])
    alpha = 2.0 / (1.0 + kappa)
    x = np.ones(2)
    ratio = 0.0
    for _ in range(steps):
        prev = float(np.linalg.norm(x))
        if prev == 0.0:
            break
        x = x - alpha * curvature * x
        ratio = float(np.linalg.norm(x)) / prev
    return {"kappa": float(kappa), "alpha": alpha, "ratio": ratio, "expected": (kappa - 1.0) / (kappa + 1.0)}


def neuron_condition_report(
    H, s: np.ndarray, eps1: float = 0.0, eps2: float = 0.0
) -> ConditionReport:
    """Condition numbers of one neuron's Hessian before and after preconditioning."""
    ext = build_extended(H)
    hess = assemble_hessian(ext, CurvatureDiag(s=s, skipped=np.zeros(ext.N, bool), method="given"))
    kappa, lam_max, lam_min = spd_condition_number(hess)
    pre = build_preconditioner(ext.H, eps1=eps1, eps2=eps2)
    kappa_pre, _, _ = spd_condition_number(pre.P.T @ hess @ pre.P)
    return ConditionReport(
        kappa_H=condition_number(ext.H_hat),
        kappa_D=condition_number(pre.D),
        kappa_hessian=kappa,
        kappa_precond_hessian=kappa_pre,
        lambda_max=lam_max,
        lambda_star_min=lam_min,
    )
