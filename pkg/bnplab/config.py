"""
Run configuration.
Precedence: command-line flags > key=value config file > BNPLAB_* environment > defaults.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import dotenv_values, load_dotenv

from bnplab.errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)


class Mode(Enum):
    TRAIN = "train"
    VERIFY = "verify"
    COND_TRACE = "cond-trace"
    NORM_PROBE = "norm-probe"


class DatasetName(Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"
    SYNTH = "synth"              # ill-scaled Gaussian features, two classes


class Arch(Enum):
    MLP_3X100 = "mlp-3x100"      # three hidden layers of 100
    MLP_2LAYER = "mlp-2layer"    # two hidden layers of 100, used by cond-trace
    CNN_5LAYER = "cnn-5layer"    # conv32-pool-conv64-pool-conv32-dense64-dense


class Method(Enum):
    VANILLA = "vanilla"
    BN = "bn"
    BNP = "bnp"


# Best learning rates per (dataset, batch size) for the dense networks
DENSE_LEARNING_RATES: Dict[Tuple[DatasetName, int], Dict[Method, Optional[float]]] = {
    (DatasetName.MNIST, 60): {Method.VANILLA: 0.1, Method.BN: 0.5, Method.BNP: 0.5},
    (DatasetName.CIFAR10, 60): {Method.VANILLA: 0.01, Method.BN: 0.5, Method.BNP: 0.1},
    (DatasetName.CIFAR10, 6): {Method.VANILLA: 5e-3, Method.BN: 5e-2, Method.BNP: 5e-2},
    (DatasetName.CIFAR10, 1): {Method.VANILLA: 5e-4, Method.BN: None, Method.BNP: 0.1},
}

# Same for the 5-layer CNN, keyed by batch size only
CNN_LEARNING_RATES: Dict[int, Dict[Method, Optional[float]]] = {
    128: {Method.VANILLA: 0.1, Method.BN: 0.1, Method.BNP: 0.1},
    2: {Method.VANILLA: 1e-3, Method.BN: 1e-3, Method.BNP: 1e-2},
    1: {Method.VANILLA: 1e-3, Method.BN: None, Method.BNP: 0.1},
}

SYNTH_LEARNING_RATE = 0.05


def _nearest(table: Mapping[int, Any], batch_size: int) -> Any:
    key = min(table, key=lambda n: (abs(n - batch_size), n))
    return table[key]


def default_learning_rate(dataset: DatasetName, arch: Arch, method: Method, batch_size: int) -> float:
    """Learning rate from the tuned tables; the row with the nearest batch size wins."""
    if dataset is DatasetName.SYNTH:
        return SYNTH_LEARNING_RATE
    if arch is Arch.CNN_5LAYER:
        row = _nearest(CNN_LEARNING_RATES, batch_size)
    else:
        rows = {n: r for (d, n), r in DENSE_LEARNING_RATES.items() if d is dataset}
        row = _nearest(rows, batch_size)
    # No tuned BN rate at batch size 1; fall back to the vanilla rate
    rate = row[method]
    return rate if rate is not None else row[Method.VANILLA]


@dataclass
class RunConfig:
    """Everything one command invocation needs."""
    mode: Mode = Mode.TRAIN
    dataset: DatasetName = DatasetName.MNIST
    arch: Arch = Arch.MLP_3X100
    method: Method = Method.BNP
    batch_size: int = 60
    lr: Optional[float] = None
    momentum: float = 0.0
    epochs: int = 10
    max_steps: Optional[int] = None
    seed: int = 0
    rho: float = 0.99
    eps1: float = 1e-2
    eps2: float = 1e-4
    bn_eps: float = 1e-3
    use_running_stats: bool = True
    precision: str = "float64"
    dataset_dir: str = field(default_factory=lambda: os.getenv("BNPLAB_DATASET_DIR", "data"))
    out: str = field(default_factory=lambda: os.getenv("BNPLAB_OUT", "runs"))
    train_subset: int = 10000
    test_subset: int = 2000
    full_dataset: bool = False
    log_every: int = 50
    n_features: int = 20
    scale_decades: float = 3.0
    synth_samples: int = 2000
    widths: Tuple[int, ...] = (16, 64, 256, 1024)
    probe_batch: int = 64
    probe_trials: int = 50
    tolerances: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ConfigError("eps1 and eps2 must be non-negative")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")

    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        if self.mode is Mode.COND_TRACE:
            return SYNTH_LEARNING_RATE
        return default_learning_rate(self.dataset, self.arch, self.method, self.batch_size)


def _coerce(name: str, hint: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = get_origin(hint)
    if origin is Union:
        inner = [a for a in get_args(hint) if a is not type(None)][0]
        if text.lower() in ("", "none", "null"):
            return None
        return _coerce(name, inner, text)
    try:
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(text.lower())
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if origin is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        if origin is dict:
            pairs = [part.split(":", 1) for part in text.split(",") if part.strip()]
            return {key.strip(): float(value) for key, value in pairs}
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}")
    return text


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from an optional key=value file and command-line overrides.
    Override values of None are ignored so unset flags fall through to the file.
    """
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    merged: Dict[str, Any] = {}

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        file_values = dotenv_values(path)
        logger.info(f"Loaded {len(file_values)} settings from {path}")
        merged.update({key: value for key, value in file_values.items() if value is not None})

    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    values = {key: _coerce(key, hints[key], value) for key, value in merged.items()}
    return RunConfig(**values)
