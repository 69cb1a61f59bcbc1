"""Adam with exponential learning-rate decay, early stopping and grid search."""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import auc
from .model import (
    ModelConfig,
    ModelParams,
    _coerce,
    batch_loss,
    forward_batch,
    init_params,
    predict,
    video_score,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.96
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}")
            kwargs[key] = _coerce(key, value, getattr(cls, key))
        return cls(**kwargs)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, tensors) -> "AdamState":
        return cls([np.zeros_like(t.data) for t in tensors], [np.zeros_like(t.data) for t in tensors])


def adam_step(tensors, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``tensors`` and ``state``."""
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ShapeError("adam_step: parameter, gradient and state counts differ")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for t, g, m, v in zip(tensors, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.data.shape or m.shape != t.data.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {t.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(base: float, decay: float, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** epoch


class EarlyStopping:
    """Tracks the best monitored value; signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; returns True when it is a new best."""
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auc: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.val_auc:.6f},{self.lr:.6f}"


def format_log(entries) -> str:
    return "epoch,train_loss,val_auc,lr\n" + "".join(e.line() + "\n" for e in entries)


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")
    stopped_early: bool = False


def video_scores(params: ModelParams, config: ModelConfig, features) -> np.ndarray:
    preds = predict(params, config, features)
    return np.array([video_score(preds[f.video_id]) for f in features])


def validation_auc(params: ModelParams, config: ModelConfig, split) -> float:
    labels = np.array([int(r.is_fake) for r in split.labels])
    return auc(video_scores(params, config, split.features), labels)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train_step_loss(params, config, features, targets, rng, training: bool = True):
    """Mean per-video objective of one batch (videos grouped by sequence count)."""
    groups = {}
    for f, t in zip(features, targets):
        groups.setdefault(f.n, []).append((f, t))
    total = None
    for members in groups.values():
        out = forward_batch(params, config, [f for f, _ in members], training, rng)
        part = batch_loss(out, [t for _, t in members], config) * (len(members) / len(features))
        total = part if total is None else total + part
    return total


def train(model_config: ModelConfig, train_split, val_split, train_config: Optional[TrainConfig] = None,
          evaluate: Optional[Callable] = None, progress: Optional[Callable] = None) -> TrainResult:
    """Minimise the per-video combined objective; keep the parameters of the best validation epoch.

    ``evaluate(params, config, val_split) -> float`` defaults to video-level AUC.
    """
    tc = train_config or TrainConfig()
    if not train_split.features or not val_split.features:
        raise DataError("train and validation splits must be non-empty")
    evaluate = evaluate or validation_auc
    params = init_params(model_config, tc.seed)
    tensors = params.tensors()
    state = AdamState.for_params(tensors)
    shuffle_rng = np.random.default_rng([tc.seed, 1])
    dropout_rng = np.random.default_rng([tc.seed, 2])
    targets = train_split.targets()
    stopper = EarlyStopping(tc.patience)
    best = params.snapshot()
    result = TrainResult(params, model_config)

    for epoch in range(1, tc.max_epochs + 1):
        lr = lr_schedule(tc.lr, tc.lr_decay, epoch - 1)
        losses = []
        for b, idx in enumerate(_batches(len(targets), tc.batch_size, shuffle_rng)):
            feats = [train_split.features[i] for i in idx]
            loss = train_step_loss(params, model_config, feats, [targets[i] for i in idx], dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                ids = ", ".join(f.video_id for f in feats[:5])
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (videos {ids}, ...)")
            params.zero_grad()
            loss.backward()
            adam_step(tensors, [t.grad for t in tensors], state, lr, tc.beta1, tc.beta2, tc.eps)
            losses.append(value * len(idx))
        metric = float(evaluate(params, model_config, val_split))
        entry = EpochLog(epoch, float(np.sum(losses) / len(targets)), metric, lr)
        result.log.append(entry)
        log.info("epoch %d loss %.4f val %.4f lr %.2e", epoch, entry.train_loss, metric, lr)
        if progress is not None:
            progress(entry)
        if stopper.update(epoch, metric):
            best = params.snapshot()
        if stopper.should_stop:
            result.stopped_early = epoch < tc.max_epochs
            break

    params.zero_grad()
    params.restore(best)
    result.best_epoch = stopper.best_epoch
    result.best_metric = stopper.best
    return result


@dataclass
class GridResult:
    best_model: ModelConfig
    best_train: TrainConfig
    best_metric: float
    table: list


# Stand-in search space: activation and dropout, the two axes named for tuning.
DEFAULT_GRID = {"dropout": [0.2, 0.3], "activation": ["relu", "tanh"]}


def expand_grid(space: dict) -> list:
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("grid search space must be non-empty in every dimension")
    keys = list(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def grid_search(space: Optional[dict], model_config: ModelConfig, train_config: TrainConfig, train_split, val_split,
                evaluate: Optional[Callable] = None) -> GridResult:
    """Train every combination in ``space`` and keep the best validation metric.

    Keys may name :class:`ModelConfig` or :class:`TrainConfig` fields; ``None``
    selects :data:`DEFAULT_GRID`. Ties go to
    the smaller dropout, then to the earlier combination.
    """
    space = DEFAULT_GRID if space is None else space
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(space) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    table = []
    for combo in expand_grid(space):
        mc = replace(model_config, **{k: v for k, v in combo.items() if k in model_keys})
        tc = replace(train_config, **{k: v for k, v in combo.items() if k in train_keys})
        res = train(mc, train_split, val_split, tc, evaluate)
        table.append((combo, res.best_metric, mc, tc))
    best = min(range(len(table)), key=lambda i: (-table[i][1], table[i][2].dropout, i))
    _, metric, mc, tc = table[best]
    return GridResult(mc, tc, metric, [(combo, m) for combo, m, _, _ in table])


def format_grid(table) -> str:
    lines = ["config,val_auc"]
    for combo, metric in table:
        desc = ";".join(f"{k}={v}" for k, v in combo.items())
        lines.append(f"{desc},{metric:.6f}")
    return "\n".join(lines) + "\n"
