"""
Executable numerical checks run by the verify command.
Each check takes its own seeded generator and a tolerance and returns a CheckResult.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

from bnplab.errors import BnpLabError, ZeroVarianceError
from bnplab.hessian import (
    assemble_conv_hessian,
    assemble_hessian,
    bn_bnp_equivalence,
    build_extended,
    build_preconditioner,
    cnn_lower,
    cnn_stats,
    conditioning_check,
    conv_curvature_blocks,
    curvature_diag,
    finite_difference_hessian,
    lowered_weight,
    neuron_loss_fn,
    norm_scaling_probe,
    product_bound_check,
    rate_probe,
    recentering_strictness_probe,
    vec_channel,
    window_mean_bound,
)
from bnplab.layers import Activation, BatchNormLayer, Conv2dLayer, FlattenLayer
from bnplab.linalg import make_rng, spawn_seeds
from bnplab.network import Network, dense_layer
from bnplab.precond import BnpState, precondition_conv, precondition_dense, preconditioner_matrix, q_scale

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    values: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": bool(self.passed), "values": _plain(self.values)}


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return value


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), np.finfo(float).tiny)
    return float(np.abs(a - b).max()) / scale


def _random_activations(rng: np.random.Generator, N: int, n: int) -> np.ndarray:
    """Nonzero-mean columns with scales spread over two decades."""
    scales = 10.0 ** rng.uniform(-1.0, 1.0, size=n)
    return rng.standard_normal((N, n)) * scales + rng.normal(0.0, 2.0, size=n)


def _neuron_hessian_error(network: Network, x, labels, layer_index: int, neuron: int, step: float) -> float:
    S = curvature_diag(network, x, labels, layer_index, neuron, step=step)
    hess = assemble_hessian(build_extended(network.layers[layer_index].cached_input), S)
    f, theta = neuron_loss_fn(network, x, labels, layer_index, neuron)
    return _rel(hess, finite_difference_hessian(f, theta, step=step))


def check_hessian_formula(rng: np.random.Generator, tol: float) -> CheckResult:
    """H^T S H^ against a finite-difference Hessian, for an output and a hidden neuron."""
    network = Network(
        [dense_layer(rng, 20, 20, Activation.RELU), dense_layer(rng, 20, 10, Activation.NONE)], num_classes=10
    )
    network.layers[0].b = rng.normal(0.0, 0.1, size=20)
    x = rng.standard_normal((16, 20))
    labels = rng.integers(0, 10, size=16)

    output_error = _neuron_hessian_error(network, x, labels, 1, 0, step=1e-3)

    network.forward(x, update_running=False)
    z = network.layers[0].cached_preact
    margins = np.where((z > 0).any(axis=0), np.abs(z).min(axis=0), 0.0)
    hidden_error = None
    hidden_neuron = int(np.argmax(margins))
    if margins[hidden_neuron] > 0.05:
        hidden_error = _neuron_hessian_error(network, x, labels, 0, hidden_neuron, step=1e-3)

    passed = output_error <= tol and (hidden_error is None or hidden_error <= tol)
    values = {"output_rel_error": output_error, "hidden_neuron": hidden_neuron}
    if hidden_error is not None:
        values["hidden_rel_error"] = hidden_error
    return CheckResult("hessian_formula", passed, values)


def check_preconditioned_identity(rng: np.random.Generator, tol: float) -> CheckResult:
    worst_identity = worst_mean = worst_var = 0.0
    for _ in range(20):
        N, n = int(rng.integers(8, 40)), int(rng.integers(1, 10))
        H = rng.standard_normal((N, n)) * rng.uniform(0.5, 2.0, size=n) + rng.uniform(-2.0, 2.0, size=n)
        s = rng.uniform(0.01, 0.25, size=N)
        ext = build_extended(H)
        P = build_preconditioner(H).P
        hess = ext.H_hat.T @ (s[:, None] * ext.H_hat)
        G = ext.H_hat @ P
        worst_identity = max(worst_identity, _rel(P.T @ hess @ P, G.T @ (s[:, None] * G)))
        worst_mean = max(worst_mean, float(np.abs(G[:, 1:].mean(axis=0)).max()))
        worst_var = max(worst_var, float(np.abs(G[:, 1:].var(axis=0) - 1.0).max()))
    passed = worst_identity <= tol and worst_mean <= 1e-12 and worst_var <= 1e-10
    return CheckResult(
        "preconditioned_identity",
        passed,
        {"max_rel_error": worst_identity, "max_abs_mean": worst_mean, "max_var_error": worst_var},
    )


def _oracle(mu, sigma_tilde2, Gb, Gw_matrix, q2) -> np.ndarray:
    """(1/q^2) P P^T applied to the stacked columns [Gb(i); Gw(i, :)]."""
    P = preconditioner_matrix(mu, sigma_tilde2)
    stacked = np.vstack([Gb[None, :], Gw_matrix])
    return P @ (P.T @ stacked) / q2


def check_bnp_dense_oracle(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        n_in, n_out, N = int(rng.integers(1, 41)), int(rng.integers(1, 21)), int(rng.integers(1, 81))
        state = BnpState.for_dense(n_in, n_out, eps1=float(rng.uniform(0.0, 0.1)), eps2=1e-4)
        state.mu = rng.normal(0.0, 2.0, size=n_in)
        state.sigma2 = 10.0 ** rng.uniform(-2.0, 2.0, size=n_in)
        Gw = rng.standard_normal((n_out, n_in))
        Gb = rng.standard_normal(n_out)
        gw_new, gb_new = precondition_dense(state, Gw, Gb, N)
        expected = _oracle(state.mu, state.stabilized().sigma_tilde2, Gb, Gw.T, q_scale(state.layer_shape, N).q2)
        worst = max(worst, _rel(np.vstack([gb_new[None, :], gw_new.T]), expected))
    return CheckResult("bnp_dense_oracle", worst <= tol, {"shapes": 100, "max_rel_error": worst})


def check_bnp_conv_oracle(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        k = int(rng.choice([1, 3, 5]))
        c_in, c_out, N = int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(1, 9))
        r, s = int(rng.integers(k, 13)), int(rng.integers(k, 13))
        state = BnpState.for_conv(k, c_in, c_out, r, s, eps1=float(rng.uniform(0.0, 0.1)), eps2=1e-4)
        state.mu = rng.normal(0.0, 2.0, size=c_in)
        state.sigma2 = 10.0 ** rng.uniform(-2.0, 2.0, size=c_in)
        Gw = rng.standard_normal((k, k, c_in, c_out))
        Gb = rng.standard_normal(c_out)
        gw_new, gb_new = precondition_conv(state, Gw, Gb, N, r, s)
        expected = _oracle(
            np.repeat(state.mu, k * k),
            np.repeat(state.stabilized().sigma_tilde2, k * k),
            Gb,
            Gw.reshape(k * k * c_in, c_out, order="F"),
            q_scale(state.layer_shape, N).q2,
        )
        got = np.vstack([gb_new[None, :], gw_new.reshape(k * k * c_in, c_out, order="F")])
        worst = max(worst, _rel(got, expected))
    return CheckResult("bnp_conv_oracle", worst <= tol, {"shapes": 100, "max_rel_error": worst})


def check_conditioning(rng: np.random.Generator, tol: float) -> CheckResult:
    failures = rank_deficient = 0
    worst_recenter = worst_scaling = worst_near = 0.0
    for _ in range(200):
        report = conditioning_check(_random_activations(rng, 64, 32), rng, n_diag=100, tol=tol)
        if not report.full_rank:
            rank_deficient += 1
            continue
        failures += int(not report.passed)
        worst_recenter = max(worst_recenter, report.details["recenter_ratio"])
        worst_scaling = max(worst_scaling, report.details["scaling_ratio"])
        worst_near = max(worst_near, report.details["near_scaling_ratio"])
    return CheckResult(
        "conditioning",
        failures == 0,
        {
            "trials": 200,
            "failures": failures,
            "rank_deficient": rank_deficient,
            "max_recenter_ratio": worst_recenter,
            "max_scaling_ratio": worst_scaling,
            "max_near_scaling_ratio": worst_near,
        },
    )


def check_recentering_strictness(rng: np.random.Generator, tol: float) -> CheckResult:
    ratios = [recentering_strictness_probe(rng)["ratio"] for _ in range(20)]
    worst = max(ratios)
    return CheckResult("recentering_strictness", worst < 1.0 - tol, {"trials": 20, "max_ratio": worst})


def check_product_bound(rng: np.random.Generator, tol: float) -> CheckResult:
    failures = 0
    worst = 0.0
    for _ in range(200):
        H_hat = build_extended(_random_activations(rng, 64, 32)).H_hat
        s = 10.0 ** rng.uniform(-2.0, 0.0, size=64)
        result = product_bound_check(H_hat, s, tol=tol)
        failures += int(not result["passed"])
        worst = max(worst, result["ratio"])
    return CheckResult("product_bound", failures == 0, {"trials": 200, "failures": failures, "max_ratio": worst})


def _equivalence_network(rng: np.random.Generator, n0: int, n1: int, n2: int, classes: int) -> Network:
    first = dense_layer(rng, n0, n1, Activation.RELU)
    first.b = np.full(n1, 0.5)
    bn = BatchNormLayer(num_features=n1, eps=0.0, stop_grad_stats=True, affine=False)
    return Network(
        [first, bn, dense_layer(rng, n1, n2, Activation.RELU), dense_layer(rng, n2, classes, Activation.NONE)],
        num_classes=classes,
    )


def check_bn_bnp_equivalence(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    skipped = 0
    for _ in range(50):
        n0, n1, n2 = (int(v) for v in rng.integers(3, 11, size=3))
        classes, N = int(rng.integers(2, 6)), int(rng.integers(8, 33))
        network = _equivalence_network(rng, n0, n1, n2, classes)
        x = rng.standard_normal((N, n0))
        labels = rng.integers(0, classes, size=N)
        try:
            worst = max(worst, bn_bnp_equivalence(network, x, labels, lr=0.1))
        except ZeroVarianceError:
            skipped += 1
    return CheckResult(
        "bn_bnp_equivalence", worst <= tol, {"trials": 50, "skipped": skipped, "max_rel_discrepancy": worst}
    )


def check_cnn_lowering(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    for trial in range(50):
        k = int(rng.choice([1, 3, 5]))
        N = 1 if trial == 0 else int(rng.integers(1, 5))
        r, s = int(rng.integers(k, 9)), int(rng.integers(k, 9))
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        layer = Conv2dLayer(
            w=rng.uniform(-1.0, 1.0, size=(k, k, c_in, c_out)),
            b=rng.uniform(-1.0, 1.0, size=c_out),
            activation=Activation.NONE,
        )
        x = rng.uniform(-1.0, 1.0, size=(N, r, s, c_in))
        out = layer.pre_activation(x)
        lowered = cnn_lower(x, k)
        for d in range(c_out):
            residual = lowered.Hcal_hat @ lowered_weight(layer.w, layer.b, d) - vec_channel(out, d)
            worst = max(worst, float(np.linalg.norm(residual)))
    return CheckResult("cnn_lowering", worst <= tol, {"shapes": 50, "max_residual_norm": worst})


# 4 x 3 input, 3 x 3 kernel: "ab" stands for input entry h(a, b), blank for padding.
WORKED_EXAMPLE = [
    "  ,  ,  ,  ,11,21,  ,12,22",
    "  ,  ,  ,11,21,31,12,22,32",
    "  ,  ,  ,21,31,41,22,32,42",
    "  ,  ,  ,31,41,  ,32,42,  ",
    "  ,11,21,  ,12,22,  ,13,23",
    "11,21,31,12,22,32,13,23,33",
    "21,31,41,22,32,42,23,33,43",
    "31,41,  ,32,42,  ,33,43,  ",
    "  ,12,22,  ,13,23,  ,  ,  ",
    "12,22,32,13,23,33,  ,  ,  ",
    "22,32,42,23,33,43,  ,  ,  ",
    "32,42,  ,33,43,  ,  ,  ,  ",
]


def worked_example_matrix() -> np.ndarray:
    return np.array([[float(tok) if tok.strip() else 0.0 for tok in row.split(",")] for row in WORKED_EXAMPLE])


def check_cnn_worked_example(rng: np.random.Generator, tol: float) -> CheckResult:
    a, b = np.meshgrid(np.arange(1, 5), np.arange(1, 4), indexing="ij")
    x = (10.0 * a + b).reshape(1, 4, 3, 1)
    lowered = cnn_lower(x, 3).Hcal
    expected = worked_example_matrix()
    diff = float(np.abs(lowered - expected).max()) if lowered.shape == expected.shape else float("inf")
    return CheckResult("cnn_worked_example", diff <= tol, {"shape": list(lowered.shape), "max_abs_diff": diff})


WINDOW_SHAPES = [(9, 9, 3), (12, 7, 3), (8, 8, 5), (10, 6, 5)]


def check_window_mean_bound(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    violations = 0
    for r, s, k in WINDOW_SHAPES:
        for _ in range(100):
            N, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = rng.uniform(0.0, 2.0, size=(N, r, s, c))
            exact_mu, _ = cnn_stats(x, k, mode="exact")
            approx_mu, _ = cnn_stats(x, k, mode="approx")
            ratio = float((np.abs(exact_mu - approx_mu) / window_mean_bound(x, k)).max())
            worst = max(worst, ratio)
            violations += int(ratio > 1.0 + tol)
    return CheckResult(
        "window_mean_bound",
        violations == 0,
        {"batches": 100 * len(WINDOW_SHAPES), "violations": violations, "max_error_over_bound": worst},
    )


def check_rate_formula(rng: np.random.Generator, tol: float) -> CheckResult:
    values: Dict[str, Any] = {"kappa_1_ratio": rate_probe(1.0)["ratio"]}
    passed = values["kappa_1_ratio"] == 0.0
    for kappa in (10.0, 100.0):
        probe = rate_probe(kappa)
        error = abs(probe["ratio"] - probe["expected"]) / probe["expected"]
        values[f"kappa_{int(kappa)}_ratio"] = probe["ratio"]
        values[f"kappa_{int(kappa)}_rel_error"] = error
        passed = passed and error <= tol
    return CheckResult("rate_formula", passed, values)


def check_norm_scaling(rng: np.random.Generator, tol: float) -> CheckResult:
    rows = norm_scaling_probe([16, 64, 256, 1024], N=64, trials=50, rng=rng)
    means = [row["mean_norm_ratio"] for row in rows]
    spread = max(means) / min(means)
    return CheckResult("norm_scaling", spread <= tol, {"max_min_ratio": spread, "rows": rows})


def check_conv_hessian(rng: np.random.Generator, tol: float) -> CheckResult:
    """Hcal^T S Hcal^ for one output channel against finite differences."""
    r, s, c_in, c_out, classes, d = 5, 4, 2, 2, 5, 1
    conv = Conv2dLayer(
        w=rng.uniform(-0.5, 0.5, size=(3, 3, c_in, c_out)), b=rng.normal(0.0, 0.1, size=c_out),
        activation=Activation.NONE,
    )
    network = Network([conv, FlattenLayer(), dense_layer(rng, r * s * c_out, classes, Activation.NONE)], classes)
    x = rng.standard_normal((3, r, s, c_in))
    labels = rng.integers(0, classes, size=3)
    blocks = conv_curvature_blocks(network, x, labels, 0, d)
    hess = assemble_conv_hessian(cnn_lower(x, 3), blocks)
    f, theta = neuron_loss_fn(network, x, labels, 0, d)
    error = _rel(hess, finite_difference_hessian(f, theta, step=1e-3))
    return CheckResult("conv_hessian", error <= tol, {"rel_error": error, "dim": int(theta.size)})


def check_stationary_invariance(rng: np.random.Generator, tol: float) -> CheckResult:
    min_rayleigh = np.inf
    min_singular = np.inf
    for _ in range(20):
        n = int(rng.integers(1, 30))
        P = preconditioner_matrix(rng.normal(0.0, 3.0, size=n), 10.0 ** rng.uniform(-3.0, 3.0, size=n))
        M = P @ P.T
        g = rng.standard_normal(n + 1)
        min_rayleigh = min(min_rayleigh, float(g @ M @ g) / float(g @ g))
        min_singular = min(min_singular, float(np.linalg.svd(M, compute_uv=False).min()))
    # PP^T nonsingular, so PP^T g = 0 only at g = 0
    passed = min_rayleigh > 0.0 and min_singular > tol
    return CheckResult(
        "stationary_invariance", passed, {"min_rayleigh": min_rayleigh, "min_singular_value": min_singular}
    )


def check_q_scale_formula(rng: np.random.Generator, tol: float) -> CheckResult:
    cases = [
        ((100, 10), 60, 100 / 60),
        ((10, 10), 60, 1.0),
        ((3, 32, 32, 32, 32), 2, 144.0),
        ((256, 10), 64, 4.0),
    ]
    error = max(abs(q_scale(shape, N).q2 - expected) for shape, N, expected in cases)
    return CheckResult("q_scale_formula", error <= tol, {"cases": len(cases), "max_abs_error": error})


AVAILABLE_CHECKS: Dict[str, Callable[[np.random.Generator, float], CheckResult]] = {
    "hessian_formula": check_hessian_formula,
    "preconditioned_identity": check_preconditioned_identity,
    "bnp_dense_oracle": check_bnp_dense_oracle,
    "bnp_conv_oracle": check_bnp_conv_oracle,
    "conditioning": check_conditioning,
    "recentering_strictness": check_recentering_strictness,
    "product_bound": check_product_bound,
    "bn_bnp_equivalence": check_bn_bnp_equivalence,
    "cnn_lowering": check_cnn_lowering,
    "cnn_worked_example": check_cnn_worked_example,
    "window_mean_bound": check_window_mean_bound,
    "rate_formula": check_rate_formula,
    "norm_scaling": check_norm_scaling,
    "conv_hessian": check_conv_hessian,
    "stationary_invariance": check_stationary_invariance,
    "q_scale_formula": check_q_scale_formula,
}

DEFAULT_TOLERANCES: Dict[str, float] = {
    "hessian_formula": 1e-5,
    "preconditioned_identity": 1e-12,
    "bnp_dense_oracle": 1e-12,
    "bnp_conv_oracle": 1e-12,
    "conditioning": 1e-8,
    "recentering_strictness": 1e-12,
    "product_bound": 1e-8,
    "bn_bnp_equivalence": 1e-10,
    "cnn_lowering": 1e-12,
    "cnn_worked_example": 0.0,
    "window_mean_bound": 1e-12,
    "rate_formula": 0.05,
    "norm_scaling": 3.0,
    "conv_hessian": 1e-5,
    "stationary_invariance": 1e-12,
    "q_scale_formula": 0.0,
}


def run_checks(
    seed: int, tolerances: Optional[Dict[str, float]] = None, names: Optional[Iterable[str]] = None
) -> List[CheckResult]:
    """
    Run the selected checks in registry order. Each check's generator is seeded
    from its registry position, so selecting a subset does not change any seed.
    """
    tolerances = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    unknown = sorted(set(tolerances) - set(AVAILABLE_CHECKS))
    if unknown:
        raise BnpLabError(f"unknown checks in tolerances: {', '.join(unknown)}")
    selected = set(names) if names is not None else set(AVAILABLE_CHECKS)
    seeds = dict(zip(AVAILABLE_CHECKS, spawn_seeds(seed, len(AVAILABLE_CHECKS))))

    results = []
    for name, check in AVAILABLE_CHECKS.items():
        if name not in selected:
            continue
        try:
            result = check(make_rng(seeds[name]), tolerances[name])
        except BnpLabError as e:
            result = CheckResult(name, False, {"error": str(e)})
        logger.info(f"check {name}: {'passed' if result.passed else 'FAILED'}")
        results.append(result)
    return results
