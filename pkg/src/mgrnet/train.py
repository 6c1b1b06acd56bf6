"""Loss, optimiser, training loop and accuracy metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import PatchSet
from .errors import ConfigurationError, NumericError, StructuralError, UsageError
from .model import AblationVariant, MgrnetModel, ModelConfig, build_variant
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-12

__all__ = [
    "AblationVariant",
    "Adam",
    "EpochRecord",
    "EvalReport",
    "TrainConfig",
    "TrainResult",
    "build_variant",
    "confusion_matrix",
    "cross_entropy_loss",
    "evaluate",
    "train",
    "write_trace",
]


def cross_entropy_loss(probs: Tensor, targets) -> Tensor:
    """Mean of ``-log(probs[target] + 1e-12)`` over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = probs.shape[-1]
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise UsageError(f"target outside [0, {n_classes})")
    picked = T.pick(probs, targets)
    nll = T.neg(T.log(picked, PROB_EPS))
    return T.mean(nll) if nll.ndim else nll


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adaptive-moment optimiser with bias correction.

    State (first/second moments, step count) is held per parameter, keyed by
    position in the parameter list.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
        """Apply one update, reading ``p.grad`` unless ``grads`` is given (``None`` counts as zero)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise StructuralError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise StructuralError(f"gradient {g.shape} does not match parameter {p.shape}")
            dt = p.dtype.type
            self.m[i] = dt(self.beta1) * self.m[i] + dt(1 - self.beta1) * g
            self.v[i] = dt(self.beta2) * self.v[i] + dt(1 - self.beta2) * g * g
            m_hat = self.m[i] / dt(c1)
            v_hat = self.v[i] / dt(c2)
            p.data = p.data - dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    """Rows index the true class, columns the predicted class."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


@dataclass
class EvalReport:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    recalls: np.ndarray

    @classmethod
    def from_confusion(cls, confusion) -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise StructuralError(f"confusion matrix must be square, got {cm.shape}")
        if np.any(cm < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        total = cm.sum()
        if total == 0:
            raise UsageError("empty confusion matrix")
        diag = np.diag(cm).astype(np.float64)
        support = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        p_o = diag.sum() / total
        p_e = float((support.astype(np.float64) * predicted).sum()) / float(total) ** 2
        # p_e == 1 forces p_o == 1 (single class, always right)
        kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
        recalls = np.full(len(cm), np.nan)
        present = support > 0
        recalls[present] = diag[present] / support[present]
        return cls(cm, float(p_o), float(recalls[present].mean()), float(kappa), recalls)

    @classmethod
    def from_predictions(cls, true, pred, num_classes: int) -> "EvalReport":
        return cls.from_confusion(confusion_matrix(true, pred, num_classes))

    def to_text(self) -> str:
        lines = ["confusion (rows=true, cols=predicted)"]
        lines += ["\t".join(str(int(v)) for v in row) for row in self.confusion]
        lines += [f"OA\t{self.oa:.6f}", f"AA\t{self.aa:.6f}", f"Kappa\t{self.kappa:.6f}"]
        return "\n".join(lines) + "\n"


def evaluate(model: MgrnetModel, test_set: PatchSet, batch_size: int = 256) -> EvalReport:
    if len(test_set) == 0:
        raise UsageError("cannot evaluate on an empty test set")
    preds = []
    for start in range(0, len(test_set), batch_size):
        idx = np.arange(start, min(start + batch_size, len(test_set)))
        preds.append(model.predict(test_set.batch(idx, dtype=model.dtype), batch_size=batch_size))
    return EvalReport.from_predictions(test_set.targets, np.concatenate(preds), test_set.num_classes)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("epochs, batch_size and eval_every must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: Optional[EvalReport] = None


@dataclass
class TrainResult:
    model: MgrnetModel
    trace: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.trace]

    @property
    def evaluations(self) -> list[EpochRecord]:
        return [r for r in self.trace if r.report is not None]


def train_step(model: MgrnetModel, optimizer: Adam, x: np.ndarray, y: np.ndarray) -> float:
    # overflow surfaces as a non-finite loss below, so numpy's warnings add nothing
    with Tape(), np.errstate(over="ignore", invalid="ignore"):
        loss = cross_entropy_loss(model(Tensor(x)), y)
        T.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    optimizer.step()
    optimizer.zero_grad()
    return value


def train(
    model: MgrnetModel,
    train_set: PatchSet,
    config: TrainConfig,
    test_set: Optional[PatchSet] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Seeded mini-batch training; returns the model after the final epoch.

    Records the mean training loss every epoch, plus a test report every
    ``eval_every`` epochs (and at the last epoch) when ``test_set`` is given.
    """
    if len(train_set) == 0:
        raise UsageError("training set is empty")
    rng = np.random.default_rng(config.rng_seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    result = TrainResult(model)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = train_set.batch(idx, dtype=model.dtype)
            total += train_step(model, opt, x, train_set.targets[idx]) * len(idx)
        record = EpochRecord(epoch, total / n)
        if test_set is not None and len(test_set) and (epoch % config.eval_every == 0 or epoch == config.epochs):
            record.report = evaluate(model, test_set)
            log.info("epoch %d loss %.6f OA %.4f AA %.4f Kappa %.4f", epoch, record.loss,
                     record.report.oa, record.report.aa, record.report.kappa)
        else:
            log.debug("epoch %d loss %.6f", epoch, record.loss)
        result.trace.append(record)
        if on_epoch is not None:
            on_epoch(record)
    result.steps = opt.step_count
    return result


def trace_lines(records: Iterable[EpochRecord]) -> list[str]:
    """``epoch  loss  OA  AA  Kappa`` (tab-separated, 6 decimals) for each evaluated epoch."""
    return [
        f"{r.epoch}\t{r.loss:.6f}\t{r.report.oa:.6f}\t{r.report.aa:.6f}\t{r.report.kappa:.6f}"
        for r in records
        if r.report is not None
    ]


def write_trace(path, records: Iterable[EpochRecord]) -> None:
    lines = trace_lines(records)
    Path(path).write_text("".join(line + "\n" for line in lines))
