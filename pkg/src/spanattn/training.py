"""Training loop: SGD with Nesterov momentum, linear warmup into cosine
annealing, weight decay (spans and norm affine parameters excluded), span
projection after every step, incremental metrics, and checkpointing."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .checkpoint import save_checkpoint
from .data import DatasetSplit, augment
from .errors import EpochOutOfRange, MissingGradient, NonFiniteLoss
from .models import Model
from .tensor import Tensor, add, backward, cross_entropy, mul, no_grad

__all__ = [
    "TrainConfig",
    "EpochMetrics",
    "RunMetrics",
    "METRICS_HEADER",
    "lr_schedule",
    "SgdNesterov",
    "sgd_nesterov_step",
    "evaluate",
    "train",
]

# per-primitive defaults: (learning rate, weight decay)
HYPERPARAM_DEFAULTS = {
    "conv": (0.2, 1e-4),
    "fixed": (0.05, 5e-4),
    "adaptive": (0.05, 5e-4),
}

METRICS_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds,spans_json"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    warmup_epochs: int = 10
    momentum: float = 0.9
    lr0: float | None = None          # None -> primitive default
    weight_decay: float | None = None
    seed: int = 0
    precision: str = "f32"
    span_l1_coeff: float = 0.0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")

    def resolved(self, primitive: str) -> "TrainConfig":
        lr0, wd = HYPERPARAM_DEFAULTS[primitive]
        out = TrainConfig(**asdict(self))
        if out.lr0 is None:
            out.lr0 = lr0
        if out.weight_decay is None:
            out.weight_decay = wd
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warmup from lr0/warmup to lr0, then cosine annealing to ~0.

    Runs shorter than the warmup simply stay on the linear ramp.
    """
    if not 0 <= epoch < config.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {config.epochs})")
    lr0 = config.lr0
    warm = config.warmup_epochs
    if epoch < warm:
        return lr0 * (epoch + 1) / warm
    span = max(config.epochs - warm, 1)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * (epoch - warm) / span))


class SgdNesterov:
    """SGD with Nesterov momentum.

    g' = g + wd * p (only for decayed groups); v <- mu * v + g';
    p <- p - lr * (g' + mu * v).
    """

    def __init__(self, parameter_groups: list[tuple[str, Tensor, bool]],
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.groups = parameter_groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {path: np.zeros(p.shape, dtype=p.dtype)
                           for path, p, _ in parameter_groups}

    def step(self, lr: float) -> None:
        mu, wd = self.momentum, self.weight_decay
        for path, p, decay in self.groups:
            if p.grad is None:
                raise MissingGradient(f"parameter {path} has no gradient")
            g = p.grad
            if decay and wd:
                g = g + wd * p.data
            v = self.velocities[path]
            v *= mu
            v += g
            p.data -= lr * (g + mu * v)


def sgd_nesterov_step(params: list[tuple[str, Tensor, bool]], velocities: dict,
                      lr: float, momentum: float, weight_decay: float) -> None:
    """Single functional update, same rule as :class:`SgdNesterov`."""
    opt = SgdNesterov.__new__(SgdNesterov)
    opt.groups = params
    opt.momentum = momentum
    opt.weight_decay = weight_decay
    opt.velocities = velocities
    opt.step(lr)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float
    spans: list[list[float]]

    def csv_row(self) -> str:
        spans_json = json.dumps(self.spans, separators=(",", ":"))
        return (f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
                f"{self.val_loss:.6f},{self.val_acc:.6f},{self.lr:.8f},"
                f"{self.seconds:.3f},\"{spans_json}\"")


@dataclass
class RunMetrics:
    rows: list[EpochMetrics] = field(default_factory=list)
    test_acc: float | None = None

    @property
    def best_val_acc(self) -> float:
        return max((r.val_acc for r in self.rows), default=0.0)


def _span_snapshot(model: Model) -> list[list[float]]:
    return [[sp.value for sp in layer.spans] for layer in model.attention_layers()]


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # batch statistics need at least two samples
            yield idx


def evaluate(model: Model, split: DatasetSplit, batch_size: int = 100) -> tuple[float, float]:
    """Mean loss and top-1 accuracy over a split, in eval mode."""
    was_training = model.training
    model.eval()
    total_loss, correct, seen = 0.0, 0, 0
    with no_grad():
        for start in range(0, len(split), batch_size):
            xb = split.images[start:start + batch_size]
            yb = split.labels[start:start + batch_size]
            logits = model(Tensor(xb))
            total_loss += float(cross_entropy(logits, yb).item()) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
    model.train(was_training)
    return total_loss / max(seen, 1), correct / max(seen, 1)


def _training_loss(model: Model, logits: Tensor, labels: np.ndarray,
                   span_l1: float) -> Tensor:
    loss = cross_entropy(logits, labels)
    if span_l1 > 0.0:
        for layer in model.attention_layers():
            for sp in layer.spans:
                loss = add(loss, mul(sp.z, span_l1))
    return loss


def train(model: Model, train_split: DatasetSplit, val_split: DatasetSplit,
          config: TrainConfig, out_dir: str | os.PathLike | None = None) -> RunMetrics:
    """Run the configured number of epochs; returns per-epoch metrics.

    Side effects under ``out_dir`` (when given): ``metrics.csv`` appended one
    row per epoch, ``last.ckpt`` every epoch (plus an initial one), and
    ``best.ckpt`` whenever validation accuracy improves. A non-finite loss
    aborts with a diagnostic checkpoint.
    """
    config = config.resolved(model.config.primitive)
    opt = SgdNesterov(model.parameter_groups(), momentum=config.momentum,
                      weight_decay=config.weight_decay)
    metrics = RunMetrics()

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        with open(csv_path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
        save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), epoch=0)

    best_val = -1.0
    n = len(train_split)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(n)

        loss_sum, correct, seen = 0.0, 0, 0
        for step, idx in enumerate(_batches(n, config.batch_size, order)):
            xb = train_split.images[idx]
            if config.augment:
                xb = augment(xb, rng)
            yb = train_split.labels[idx]

            logits = model(Tensor(xb))
            loss = _training_loss(model, logits, yb, config.span_l1_coeff)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                if out_dir is not None:
                    save_checkpoint(model, os.path.join(out_dir, "diagnostic.ckpt"),
                                    epoch=epoch, metrics={"step": step, "loss": loss_val})
                raise NonFiniteLoss(f"loss became {loss_val} at epoch {epoch}, step {step}")

            model.zero_grad()
            backward(loss)
            opt.step(lr)
            for layer in model.attention_layers():
                for sp in layer.spans:
                    sp.project_(layer.config.input_size)

            loss_sum += loss_val * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)

        val_loss, val_acc = evaluate(model, val_split, batch_size=max(config.batch_size, 100))
        row = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / max(seen, 1),
            train_acc=correct / max(seen, 1),
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
            seconds=time.perf_counter() - t0,
            spans=_span_snapshot(model),
        )
        metrics.rows.append(row)

        if out_dir is not None:
            with open(csv_path, "a") as fh:
                fh.write(row.csv_row() + "\n")
            save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), epoch=epoch + 1,
                            metrics={"val_acc": val_acc, "val_loss": val_loss})
            if val_acc > best_val:
                best_val = val_acc
                save_checkpoint(model, os.path.join(out_dir, "best.ckpt"), epoch=epoch + 1,
                                metrics={"val_acc": val_acc, "val_loss": val_loss})
    return metrics
