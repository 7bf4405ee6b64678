"""Subject-specific training, serial split, evaluation and the majority baseline."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .eeg_io import N_TASKS, Task
from .nn.model import CnnModel, build_model, loss_and_grads
from .nn.optim import AdamState, adam_step
from .ssfi import fit_normalizer

log = logging.getLogger(__name__)

CHANCE = 1.0 / 3.0


@dataclass(frozen=True)
class SplitSpec:
    train_tasks: tuple[int, int] = (1, 100)
    test_tasks: tuple[int, int] = (101, N_TASKS)

    def __post_init__(self):
        (a, b), (c, d) = self.train_tasks, self.test_tasks
        if not (a <= b < c <= d or c <= d < a <= b):
            raise ValueError("train and test task ranges must be disjoint")


@dataclass
class SegmentSet:
    """SSFI images with their labels and provenance; the unit passed between stages."""

    x: np.ndarray  # (N, D, D, 6)
    y: np.ndarray  # (N,) Task values
    task_index: np.ndarray
    subject_id: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.task_index = np.asarray(self.task_index, dtype=np.int64)
        if not len(self.x) == len(self.y) == len(self.task_index):
            raise ValueError("x, y and task_index must have equal length")

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "SegmentSet":
        return SegmentSet(self.x[mask], self.y[mask], self.task_index[mask], self.subject_id)

    @classmethod
    def concat(cls, parts: Sequence["SegmentSet"]) -> "SegmentSet":
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.task_index for p in parts]), parts[0].subject_id)


def serial_split(segments, spec: SplitSpec = SplitSpec()):
    """Partition by experiment number only, so overlapping windows never straddle the split.

    Works on a ``SegmentSet`` or on any sequence of objects with ``task_index``.
    """
    if isinstance(segments, SegmentSet):
        tasks = segments.task_index
    else:
        tasks = np.array([s.task_index for s in segments], dtype=np.int64)
    if tasks.size and (tasks.min() < 1 or tasks.max() > N_TASKS):
        raise ValueError(f"task_index must lie in 1-{N_TASKS}")
    lo, hi = spec.train_tasks
    train_mask = (tasks >= lo) & (tasks <= hi)
    lo, hi = spec.test_tasks
    test_mask = (tasks >= lo) & (tasks <= hi)
    if tasks.size and not test_mask.any():
        log.warning("serial split produced an empty test set")
    if tasks.size and not train_mask.any():
        log.warning("serial split produced an empty training set")
    if isinstance(segments, SegmentSet):
        return segments.subset(train_mask), segments.subset(test_mask)
    return ([s for s, m in zip(segments, train_mask) if m],
            [s for s, m in zip(segments, test_mask) if m])


def majority_class(train_labels) -> int:
    labels = np.asarray(train_labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("majority class of an empty training set is undefined")
    # argmax picks the lowest index on ties: L < W < R
    return int(np.argmax(np.bincount(labels, minlength=len(Task))))


def naive_baseline(train_labels, test_labels) -> float:
    """Accuracy of always predicting the training majority class."""
    maj = majority_class(train_labels)
    test = np.asarray(test_labels, dtype=np.int64)
    return float(np.mean(test == maj)) if test.size else float("nan")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    l2: float = 0.01
    dropout: float = 0.3
    grid: int = 64
    fc_sizes: tuple[int, int] = (64, 32)

    def __post_init__(self):
        self.fc_sizes = tuple(self.fc_sizes)
        if self.lr < 0 or self.l2 < 0 or not 0 <= self.dropout < 1:
            raise ValueError("lr and l2 must be non-negative, dropout in [0, 1)")
        if self.batch_size < 2 or self.max_epochs < 1 or self.grid < 16:
            raise ValueError("batch_size >= 2, max_epochs >= 1 and grid >= 16 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_sizes"] = list(self.fc_sizes)
        return d


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def to_csv(self) -> str:
        rows = ["epoch,loss,train_acc"]
        rows += [f"{i + 1},{l!r},{a!r}" for i, (l, a) in enumerate(zip(self.loss, self.train_acc))]
        return "\n".join(rows) + "\n"


class TrainingDiverged(RuntimeError):
    pass


def train_model(train: SegmentSet, config: TrainConfig = TrainConfig()) -> tuple[CnnModel, History]:
    """Minibatch Adam on cross-entropy + l2 with early stopping on the training loss.

    The input normalizer and the majority class are fitted here, on ``train``
    only, and stored on the returned model.
    """
    if len(train) < 2:
        raise ValueError("need at least two training examples")
    grid = train.x.shape[1]
    if grid != config.grid:
        raise ValueError(f"data grid {grid} does not match config grid {config.grid}")
    model = build_model(grid, config.fc_sizes, config.seed)
    model.dropout = config.dropout
    model.l2 = config.l2
    model.normalizer = fit_normalizer(train.x, source=f"train:subject={train.subject_id}:n={len(train)}")
    model.majority = majority_class(train.y)
    x = model.normalizer.apply(train.x.astype(np.float32))
    y = train.y

    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    hist = History()
    best, stale = math.inf, 0
    n = len(y)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:  # batch norm needs >= 2
                continue
            try:
                loss, grads, logits = loss_and_grads(model, x[idx], y[idx], "train", rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: non-finite loss {loss}")
            adam_step(model.params, grads, state)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        mean_loss = total / n
        hist.loss.append(mean_loss)
        hist.train_acc.append(correct / n)
        log.info("epoch %d loss %.4f train_acc %.3f", epoch, mean_loss, correct / n)
        if mean_loss < best - config.min_delta:
            best, stale = mean_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                hist.stopped_early = True
                break
    return model, hist


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows true class, columns predicted
    naive_accuracy: float
    class_counts: np.ndarray
    chance: float = CHANCE
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "naive_accuracy": self.naive_accuracy,
            "class_counts": self.class_counts.tolist(),
            "chance": self.chance,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report_from_predictions(y_true, y_pred, majority: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate on an empty set")
    k = len(Task)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return EvalReport(
        accuracy=float(np.trace(conf) / y_true.size),
        confusion=conf,
        naive_accuracy=float(np.mean(y_true == majority)),
        class_counts=conf.sum(axis=1),
        n=int(y_true.size),
    )


def evaluate(model: CnnModel, data: SegmentSet) -> EvalReport:
    """Inference-mode accuracy using the model's own (training) normalizer."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    x = data.x.astype(np.float32)
    if model.normalizer is not None:
        x = model.normalizer.apply(x)
    pred = model.predict(x)
    majority = model.majority if model.majority is not None else 0
    return report_from_predictions(data.y, pred, majority)


def save_history(hist: History, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(hist.to_csv())
    return path
