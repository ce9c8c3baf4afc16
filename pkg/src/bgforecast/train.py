"""Losses, Adam, plateau scheduling, early stopping and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .datamodel import InvalidInputError, NumericError, ShapeError, ValidationError, WindowSet
from .sampling import derive_seed

log = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-8


@dataclass(frozen=True)
class ShrinkageParams:
    a: float = 10.0
    c: float = 0.2

    def __post_init__(self):
        if not self.a > 0 or self.c < 0:
            raise ValidationError("shrinkage needs a > 0 and c >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    init_lr: float = 2e-4
    max_epochs: int = 3200
    early_stop_patience: int = 200
    plateau_patience: int = 15
    plateau_factor: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shrinkage: ShrinkageParams = field(default_factory=ShrinkageParams)

    def __post_init__(self):
        if self.batch_size < 1 or self.init_lr < 0 or self.max_epochs < 0:
            raise ValidationError("batch_size >= 1, init_lr >= 0 and max_epochs >= 0 required")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValidationError("patience values must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValidationError("plateau_factor must lie in (0, 1)")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=64, init_lr=1e-3, max_epochs=200, early_stop_patience=20)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses -----------------------------------------------------------------

def shrinkage_loss(pred: np.ndarray, target: np.ndarray, p: ShrinkageParams = ShrinkageParams(),
                   scale: float = 1.0):
    """Mean shrinkage loss ``e^2 / (1 + exp(a (c - e)))`` with ``e = |pred - target| / scale``.

    Returns ``(loss, grad)`` with ``grad = d loss / d pred``; the gradient at
    ``e = 0`` is zero.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = (pred - target) / scale
    e = np.abs(diff)
    with np.errstate(over="ignore"):  # exp overflow means s = 0, which is exact enough
        s = 1.0 / (1.0 + np.exp(p.a * (p.c - e)))
    elem = e * e * s
    # d/de [e^2 s(e)] = 2 e s + a e^2 s (1 - s)
    d_e = 2.0 * e * s + p.a * e * e * s * (1.0 - s)
    grad = d_e * np.sign(diff) / (scale * pred.size)
    return float(elem.mean()), grad


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / B``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels must have shape ({B},)")
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidInputError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -float(np.mean(log_p[np.arange(B), labels]))
    grad = np.exp(log_p)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: nn.ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(t) for k, t in params},
                   {k: np.zeros_like(t) for k, t in params})


def adam_step(params: nn.ModelParams, grads: nn.ModelParams, state: AdamState | None,
              lr: float, cfg: TrainConfig = TrainConfig()):
    """Bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    if state is None:
        state = AdamState.zeros(params)
    for name, g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", layer=name)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_t, new_m, new_v = {}, {}, {}
    for name, theta in params:
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_t[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return nn.ModelParams(params.config, new_t), AdamState(new_m, new_v, step)


# --- schedule ---------------------------------------------------------------

class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 15, factor: float = 0.5,
                 threshold: float = IMPROVEMENT_THRESHOLD):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 200, threshold: float = IMPROVEMENT_THRESHOLD):
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def step(self, val_loss: float, epoch: int) -> bool:
        """Record an epoch; True when training should stop."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# --- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_loss(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def lr(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
        return path


@dataclass
class LossSpec:
    """What the network is trained against: a loss kind plus its targets."""

    kind: str
    shrinkage: ShrinkageParams = field(default_factory=ShrinkageParams)
    scale: float = 1.0

    def targets(self, windows: WindowSet, class_index: dict | None):
        if self.kind == "cross_entropy":
            if class_index is None:
                raise InvalidInputError("cross_entropy training needs a class index")
            return np.array([class_index[s] for s in windows.subject_ids], dtype=np.int64)
        return windows.target_deltas

    def __call__(self, out, y):
        if self.kind == "cross_entropy":
            return cross_entropy_loss(out, y)
        return shrinkage_loss(out, y, self.shrinkage, self.scale)


def evaluate_loss(params: nn.ModelParams, obs: np.ndarray, y: np.ndarray, loss: LossSpec,
                  batch_size: int) -> float:
    """Eval-mode loss over a whole set, weighted by batch size."""
    total = 0.0
    for i in range(0, len(obs), batch_size):
        out, _ = nn.forward(params, obs[i:i + batch_size], "eval")
        total += loss(out, y[i:i + batch_size])[0] * len(out)
    return total / len(obs)


def fit(model: nn.ModelParams, train: WindowSet, val: WindowSet, cfg: TrainConfig,
        loss: str = "shrinkage", error_scale: float = 1.0,
        class_index: dict | None = None):
    """Mini-batch Adam with plateau LR decay and early stopping.

    Returns ``(best_params, history)`` where ``best_params`` are the weights
    from the epoch with the lowest validation loss. ``error_scale`` divides
    prediction errors before the shrinkage loss so its parameters act on a
    normalized glucose scale.
    """
    if len(train) == 0 or len(val) == 0:
        raise InvalidInputError("fit needs non-empty train and validation sets")
    if loss not in ("shrinkage", "cross_entropy"):
        raise ValidationError(f"unknown loss {loss!r}")
    spec = LossSpec(loss, cfg.shrinkage, error_scale)
    y_train = spec.targets(train, class_index)
    y_val = spec.targets(val, class_index)
    rng = np.random.default_rng(cfg.seed)

    params = model
    best = model
    state = None
    sched = PlateauScheduler(cfg.init_lr, cfg.plateau_patience, cfg.plateau_factor)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = History()
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(n)
        running = 0.0
        try:
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                out, cache = nn.forward(params, train.obs[idx], "train",
                                        derive_seed(cfg.seed, epoch, b))
                value, dout = spec(out, y_train[idx])
                if not np.isfinite(value):
                    raise NumericError("non-finite training loss")
                grads = nn.backward(params, cache, dout)
                params, state = adam_step(params, grads, state, lr, cfg)
                running += value * len(idx)
            val_loss = _validation_loss(params, val.obs, y_val, spec, cfg.batch_size)
        except NumericError as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            history.diverged = True
            break
        if not np.isfinite(val_loss):
            history.diverged = True
            break
        history.records.append(EpochRecord(epoch, running / n, val_loss, lr))
        stop = stopper.step(val_loss, epoch)
        if stopper.best_epoch == epoch:
            best = params
            history.best_epoch = epoch
        sched.step(val_loss)
        if stop:
            history.stopped_early = True
            break
    return best, history


# module-level indirection keeps the validation pass patchable in tests
_validation_loss = evaluate_loss


def fine_tune_config(cfg: TrainConfig) -> TrainConfig:
    """Halved learning rate and a quarter of the early-stopping patience."""
    return replace(cfg, init_lr=cfg.init_lr / 2,
                   early_stop_patience=max(1, cfg.early_stop_patience // 4))
