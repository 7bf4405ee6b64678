"""Inter-subject dependency: each subject's model scored on every subject's data."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn.model import CnnModel
from .train import SegmentSet, evaluate


@dataclass
class IsdMatrix:
    subjects: list[int]
    accuracy: np.ndarray  # rows: model's training subject, columns: tested subject

    def to_csv(self) -> str:
        lines = ["model\\subject," + ",".join(str(s) for s in self.subjects)]
        for s, row in zip(self.subjects, self.accuracy):
            lines.append(f"{s}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def save_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "IsdMatrix":
        rows = [line.split(",") for line in text.strip().splitlines()]
        subjects = [int(v) for v in rows[0][1:]]
        acc = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(subjects, acc)


def isd_matrix(models: Mapping[int, CnnModel], datasets: Mapping[int, SegmentSet]) -> IsdMatrix:
    """Entry (i, j) is model i's accuracy on all of subject j's labelled segments.

    Every model applies its own stored normalizer, also on other subjects' data.
    No symmetry is imposed.
    """
    subjects = sorted(set(models) | set(datasets))
    for s in subjects:
        if s not in models:
            raise KeyError(f"no trained model for subject {s}")
        if s not in datasets:
            raise KeyError(f"no dataset for subject {s}")
    acc = np.zeros((len(subjects), len(subjects)))
    for i, si in enumerate(subjects):
        for j, sj in enumerate(subjects):
            acc[i, j] = evaluate(models[si], datasets[sj]).accuracy
    return IsdMatrix(subjects, acc)


def _offdiag_mean(m: np.ndarray, axis: int) -> np.ndarray:
    n = m.shape[0]
    if n < 2:
        return np.full(n, np.nan)
    mask = ~np.eye(n, dtype=bool)
    return np.where(mask, m, 0.0).sum(axis=axis) / (n - 1)


def subject_averages(m: IsdMatrix | np.ndarray) -> np.ndarray:
    """Per tested subject: mean over the other subjects' models (column mean, diagonal excluded)."""
    acc = m.accuracy if isinstance(m, IsdMatrix) else np.asarray(m, dtype=float)
    return _offdiag_mean(acc, axis=0)


def model_averages(m: IsdMatrix | np.ndarray) -> np.ndarray:
    """Per model: mean over the other subjects it was tested on (row mean, diagonal excluded)."""
    acc = m.accuracy if isinstance(m, IsdMatrix) else np.asarray(m, dtype=float)
    return _offdiag_mean(acc, axis=1)


def diagonal_gap(m: IsdMatrix) -> float:
    """Mean diagonal minus mean off-diagonal accuracy."""
    acc = m.accuracy
    off = acc[~np.eye(len(acc), dtype=bool)]
    return float(np.mean(np.diag(acc)) - np.mean(off))
