"""SGD with momentum and weight decay, seeded epoch loops with per-epoch
0-1 error tracking, the divergence rule, and the repeated-run protocol
that reports mean and standard deviation over independently seeded runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .layers import INFER, TRAIN, DropoutSpec, softmax_xent
from .network import NetworkSpec, backward, forward, parameters
from .numerics import SeededRng

__all__ = [
    "TrainConfig",
    "SgdState",
    "RunReport",
    "MultiRunReport",
    "sgd_step",
    "evaluate",
    "train",
    "multi_run",
]

# Final train error within this margin of the pre-training error counts
# as "stayed at the initial error", i.e. a diverged run.
DIVERGENCE_MARGIN = 0.02

_DECAYED_SUFFIXES = (".W", ".kernels")


@dataclass
class TrainConfig:
    """Optimisation recipe. The default values are the toy-study recipe:
    batches of 100, rate 0.0005 for 20 epochs then 0.0001 for 20 more,
    momentum 0.9, weight decay 0.0001.

    dropout overrides the network's own dropout attachments when set
    (0 disables them, a positive rate replaces them); None leaves the
    network as built.
    """

    batch_size: int = 100
    schedule: tuple[tuple[float, int], ...] = ((0.0005, 20), (0.0001, 20))
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0
    dropout: float | None = None

    def __post_init__(self):
        self.schedule = tuple((float(lr), int(n)) for lr, n in self.schedule)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if any(lr < 0 for lr, _ in self.schedule):
            raise ConfigError("learning rates must be >= 0")
        if any(n < 0 for _, n in self.schedule):
            raise ConfigError("epoch counts must be >= 0")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class SgdState:
    """Velocity buffer per parameter, all zeros at the start."""

    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "SgdState":
        return cls({name: np.zeros_like(p) for name, p in params.items()})


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum*v - lr*(g + wd*p); p <- p + v, in place.

    Weight decay touches only weight matrices and conv kernels; biases,
    batch-norm scale/shift, and learnable slopes are never decayed
    (decaying gamma toward zero would collapse normalised features onto
    beta).
    """
    for name, p in params.items():
        g = grads[name]
        v = state.velocity[name]
        wd = weight_decay if name.endswith(_DECAYED_SUFFIXES) else 0.0
        v *= momentum
        v -= lr * (g + wd * p)
        p += v


@dataclass
class RunReport:
    """Per-epoch 0-1 errors (entry 0 is the evaluation before any
    training) plus the divergence flag."""

    train_errors: list[float]
    test_errors: list[float]
    diverged: bool

    @property
    def final_train_error(self) -> float:
        return self.train_errors[-1]

    @property
    def final_test_error(self) -> float:
        return self.test_errors[-1]


@dataclass
class MultiRunReport:
    """Mean and population standard deviation of final errors over the
    configured number of runs."""

    runs: list[RunReport]
    mean_train: float
    std_train: float
    mean_test: float
    std_test: float
    extras: list = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.runs)


def evaluate(spec: NetworkSpec, x: np.ndarray, y: np.ndarray, chunk: int | None = None) -> float:
    """0-1 classification error of argmax logits, inference mode.

    Evaluation never touches batch-norm running moments or parameters.
    Chunked so convolutional activations stay small.
    """
    if chunk is None:
        chunk = 2000 if np.asarray(x).ndim == 2 else 128
    wrong = 0
    for start in range(0, len(x), chunk):
        logits, _ = forward(spec, x[start : start + chunk], INFER, want_patterns=False)
        pred = logits.argmax(axis=1)
        wrong += int((pred != y[start : start + chunk]).sum())
    return wrong / len(x)


def _with_dropout_override(spec: NetworkSpec, p: float | None) -> NetworkSpec:
    if p is None:
        return spec
    nodes = [
        replace(node, dropout=DropoutSpec(p) if p > 0 else None) for node in spec.nodes
    ]
    return NetworkSpec(spec.input_dims, nodes, spec.head)


def train(spec: NetworkSpec, dataset, config: TrainConfig) -> RunReport:
    """Seeded minibatch SGD over the schedule.

    Shuffles each epoch with the run's own stream, walks full batches
    (a short remainder is dropped), and evaluates train and test error
    after every epoch. A non-finite loss halts the run gracefully. The
    diverged flag is set when the run stayed at its initial error: final
    train error within DIVERGENCE_MARGIN of the pre-training evaluation
    (or worse), or a non-finite loss.
    """
    train_x, train_y = dataset.train_x, dataset.train_y
    test_x, test_y = dataset.test_x, dataset.test_y
    n = len(train_x)
    if config.batch_size > n:
        raise ConfigError(f"batch size {config.batch_size} exceeds train set {n}")
    spec = _with_dropout_override(spec, config.dropout)
    if any(node.bn is not None for node in spec.nodes) and config.batch_size < 2:
        raise ConfigError("batch size must be >= 2 when batch norm is present")
    params = parameters(spec)
    state = SgdState.zeros_like(params)
    rng = SeededRng(config.seed)
    train_errors = [evaluate(spec, train_x, train_y)]
    test_errors = [evaluate(spec, test_x, test_y)]
    hit_nonfinite = False
    for lr, n_epochs in config.schedule:
        for _ in range(n_epochs):
            order = rng.permutation(n)
            for start in range(0, n - config.batch_size + 1, config.batch_size):
                idx = order[start : start + config.batch_size]
                logits, cache = forward(spec, train_x[idx], TRAIN, rng)
                loss, dlogits = softmax_xent(logits, train_y[idx])
                if not np.isfinite(loss):
                    hit_nonfinite = True
                    break
                grads = backward(spec, cache, dlogits)
                sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
            train_errors.append(evaluate(spec, train_x, train_y))
            test_errors.append(evaluate(spec, test_x, test_y))
            if hit_nonfinite:
                break
        if hit_nonfinite:
            break
    diverged = hit_nonfinite
    if len(train_errors) > 1 and train_errors[-1] >= train_errors[0] - DIVERGENCE_MARGIN:
        diverged = True
    return RunReport(train_errors, test_errors, diverged)


def multi_run(
    spec_builder,
    dataset_builder,
    config: TrainConfig,
    n_runs: int,
    post_run=None,
) -> MultiRunReport:
    """Run n_runs independent trainings; run i draws its network init
    and its data sample from seed config.seed + i. post_run, when given,
    is called with (spec, dataset, report) after each run and its
    results are collected in order."""
    if n_runs < 1:
        raise ConfigError(f"n_runs must be >= 1, got {n_runs}")
    reports: list[RunReport] = []
    extras: list = []
    for i in range(n_runs):
        seed = config.seed + i
        dataset = dataset_builder(seed)
        spec = spec_builder(seed)
        report = train(spec, dataset, replace(config, seed=seed))
        reports.append(report)
        if post_run is not None:
            extras.append(post_run(spec, dataset, report))
    finals_train = np.array([r.final_train_error for r in reports])
    finals_test = np.array([r.final_test_error for r in reports])
    return MultiRunReport(
        runs=reports,
        mean_train=float(finals_train.mean()),
        std_train=float(finals_train.std()),
        mean_test=float(finals_test.mean()),
        std_test=float(finals_test.std()),
        extras=extras,
    )
