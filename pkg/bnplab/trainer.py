"""
Training sessions for the vanilla, BN and BNP methods, plus the Hessian
condition-number trace.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from bnplab.config import Arch, DatasetName, Method, RunConfig
from bnplab.data import BatchIterator, Dataset, load_datasets
from bnplab.errors import BN_BATCH_SIZE_ONE, BatchSizeError, ConfigError, NonFiniteError
from bnplab.hessian import build_preconditioner, neuron_condition_report
from bnplab.layers import DenseLayer
from bnplab.linalg import condition_number, make_rng
from bnplab.network import SGD, Network, build_network, softmax, softmax_xent
from bnplab.precond import BnpState, precondition_bundle

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "# schema: bnplab-metrics v1"
METRICS_HEADER = [
    "epoch",
    "step",
    "train_loss",
    "test_accuracy",
    "kappa_D",
    "kappa_hessian",
    "kappa_precond_hessian",
]

COND_TRACE_SCHEMA = "# schema: bnplab-cond-trace v1"
COND_TRACE_HEADER = ["step", "train_loss", "kappa_hessian", "kappa_precond_hessian", "kappa_D", "kappa_D_input"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ";".join(_fmt(v) for v in value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass
class MetricsRow:
    epoch: int
    step: int
    train_loss: float
    test_accuracy: Optional[float] = None
    kappa_D: List[float] = field(default_factory=list)
    kappa_hessian: Optional[float] = None
    kappa_precond_hessian: Optional[float] = None

    def as_csv_row(self) -> List[str]:
        return [
            _fmt(self.epoch),
            _fmt(self.step),
            _fmt(self.train_loss),
            _fmt(self.test_accuracy),
            _fmt(self.kappa_D) if self.kappa_D else "",
            _fmt(self.kappa_hessian),
            _fmt(self.kappa_precond_hessian),
        ]


def kappa_of_scaling(state: BnpState) -> float:
    """Condition number of D = diag(1, 1/sigma~) for one BNP layer."""
    d = np.concatenate([[1.0], 1.0 / np.sqrt(state.stabilized().sigma_tilde2)])
    return float(d.max() / d.min())


def prepare_inputs(dataset: Dataset, arch: Arch, dtype) -> np.ndarray:
    x = dataset.inputs
    if arch is Arch.CNN_5LAYER and x.ndim == 3:
        x = x[..., None]
    return x.astype(dtype, copy=False)


@dataclass
class TrainingSession:
    """One network, its optimizer and (for BNP) the per-layer preconditioner state."""
    config: RunConfig
    network: Network
    optimizer: SGD
    bnp_states: Dict[int, BnpState] = field(default_factory=dict)
    step: int = 0
    rows: List[MetricsRow] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig, sample_shape: Tuple[int, ...], num_classes: int) -> "TrainingSession":
        if config.method is Method.BN and config.batch_size == 1:
            raise BatchSizeError(BN_BATCH_SIZE_ONE)
        dtype = np.float32 if config.precision == "float32" else np.float64
        network = build_network(
            config.arch, sample_shape, num_classes, config.method, make_rng(config.seed),
            bn_eps=config.bn_eps, rho=config.rho,
        ).astype(dtype)
        optimizer = SGD(lr=config.learning_rate(), momentum=config.momentum)
        logger.info(
            f"Session: {config.method.value} on {config.arch.value}, N={config.batch_size}, "
            f"lr={optimizer.lr}, momentum={optimizer.momentum}"
        )
        return cls(config=config, network=network, optimizer=optimizer)

    def train_step(self, x: np.ndarray, labels: np.ndarray) -> float:
        logits = self.network.forward(x)
        loss, _ = softmax_xent(logits, labels)
        if not np.isfinite(loss):
            raise NonFiniteError(f"loss became non-finite at step {self.step}")
        bundle = self.network.backward(labels)
        if self.config.method is Method.BNP:
            bundle = precondition_bundle(
                self.network,
                bundle,
                self.bnp_states,
                rho=self.config.rho,
                eps1=self.config.eps1,
                eps2=self.config.eps2,
                use_running_stats=self.config.use_running_stats,
            )
        self.optimizer.step(self.network, bundle)
        self.step += 1
        return loss

    def kappa_d(self) -> List[float]:
        return [kappa_of_scaling(self.bnp_states[i]) for i in sorted(self.bnp_states)]


def _batch_iterator(config: RunConfig, x_train: np.ndarray, train: Dataset) -> BatchIterator:
    # BN has no batch statistics for a lone trailing sample
    drop_last = config.method is Method.BN and len(x_train) % config.batch_size == 1
    return BatchIterator(Dataset(x_train, train.labels, train.num_classes), config.batch_size, config.seed, drop_last)


def run_training(config: RunConfig, train: Dataset, test: Dataset) -> TrainingSession:
    """
    Train for config.epochs epochs (or until max_steps). Appends a loss row every
    log_every steps and an evaluation row at the end of every epoch.
    """
    dtype = np.float32 if config.precision == "float32" else np.float64
    x_train = prepare_inputs(train, config.arch, dtype)
    x_test = prepare_inputs(test, config.arch, dtype)
    session = TrainingSession.create(config, x_train.shape[1:], train.num_classes)
    iterator = _batch_iterator(config, x_train, train)

    for epoch in range(1, config.epochs + 1):
        interval, epoch_losses = [], []
        for xb, yb in iterator.epoch(epoch):
            if config.max_steps is not None and session.step >= config.max_steps:
                break
            loss = session.train_step(xb, yb)
            interval.append(loss)
            epoch_losses.append(loss)
            if session.step % config.log_every == 0:
                session.rows.append(MetricsRow(epoch=epoch, step=session.step, train_loss=float(np.mean(interval))))
                logger.info(f"epoch {epoch} step {session.step}: loss {np.mean(interval):.4f}")
                interval = []
        if not epoch_losses:
            break
        accuracy = session.network.accuracy(x_test, test.labels)
        session.rows.append(
            MetricsRow(
                epoch=epoch,
                step=session.step,
                train_loss=float(np.mean(epoch_losses)),
                test_accuracy=accuracy,
                kappa_D=session.kappa_d(),
            )
        )
        logger.info(f"epoch {epoch} done: mean loss {np.mean(epoch_losses):.4f}, test accuracy {accuracy:.4f}")
    return session


@dataclass
class CondTraceRow:
    step: int
    train_loss: float
    kappa_hessian: float
    kappa_precond_hessian: float
    kappa_D: float
    kappa_D_input: float

    def as_csv_row(self) -> List[str]:
        return [_fmt(getattr(self, name)) for name in COND_TRACE_HEADER]


def run_cond_trace(config: RunConfig, train: Dataset) -> Tuple[List[CondTraceRow], float]:
    """
    Train the two-hidden-layer MLP and, every log_every steps, compare the
    condition number of the first output neuron's Hessian H^T S H^ with that
    of P^T H^T S H^ P. Returns the rows and the fraction of logged steps where
    preconditioning lowered the condition number.
    """
    if config.arch is not Arch.MLP_2LAYER:
        raise ConfigError("cond-trace runs on the mlp-2layer architecture")
    if config.dataset not in (DatasetName.CIFAR10, DatasetName.SYNTH):
        raise ConfigError("cond-trace runs on cifar10 or synth data")
    x_train = prepare_inputs(train, config.arch, np.float64).reshape(len(train), -1)
    session = TrainingSession.create(config, x_train.shape[1:], train.num_classes)
    network = session.network
    out_index = len(network.layers) - 1
    iterator = _batch_iterator(config, x_train, train)

    rows: List[CondTraceRow] = []
    for epoch in range(1, max(config.epochs, 1) + 1):
        for xb, yb in iterator.epoch(epoch):
            if config.max_steps is not None and session.step >= config.max_steps:
                break
            if session.step % config.log_every == 0:
                network.forward(xb, update_running=False)
                tracked: DenseLayer = network.layers[out_index]
                p0 = softmax(tracked.cached_preact)[:, 0]
                report = neuron_condition_report(
                    tracked.cached_input, p0 * (1.0 - p0) / xb.shape[0], eps1=config.eps1, eps2=config.eps2
                )
                input_scaling = build_preconditioner(xb, eps1=config.eps1, eps2=config.eps2)
                rows.append(
                    CondTraceRow(
                        step=session.step,
                        train_loss=network.loss(xb, yb),
                        kappa_hessian=report.kappa_hessian,
                        kappa_precond_hessian=report.kappa_precond_hessian,
                        kappa_D=report.kappa_D,
                        kappa_D_input=condition_number(input_scaling.D),
                    )
                )
                logger.info(
                    f"step {session.step}: kappa {report.kappa_hessian:.3e} -> {report.kappa_precond_hessian:.3e}"
                )
            session.train_step(xb, yb)
        if config.max_steps is not None and session.step >= config.max_steps:
            break
    improved = sum(r.kappa_precond_hessian < r.kappa_hessian for r in rows)
    fraction = improved / len(rows) if rows else 0.0
    return rows, fraction


def load_training_data(config: RunConfig) -> Tuple[Dataset, Dataset]:
    return load_datasets(
        config.dataset.value,
        config.dataset_dir,
        train_subset=config.train_subset,
        test_subset=config.test_subset,
        full=config.full_dataset,
        n_features=config.n_features,
        scale_decades=config.scale_decades,
        synth_samples=config.synth_samples,
        seed=config.seed,
    )
