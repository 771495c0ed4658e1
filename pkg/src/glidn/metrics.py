"""Ranking and classification metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np


class NoPositivesError(ValueError):
    """A class has no positive sample, so its AP is undefined."""


def average_precision(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score with ties broken by ascending index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and positives {positives.shape} must be equal-length 1-d")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise NoPositivesError("average_precision needs at least one positive")
    # stable sort on -score keeps ascending index among ties
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(precision) / n_pos


def mean_average_precision(scores, labels, skip_empty: bool = True) -> Tuple[float, List[Optional[float]]]:
    """Per-class AP over samples and their mean.

    Classes without positives are skipped (their entry is ``None``) unless
    ``skip_empty`` is false, in which case they score 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal n x k arrays")
    if scores.shape[0] < 1:
        raise ValueError("mean_average_precision needs n >= 1")
    per_class: List[Optional[float]] = []
    for c in range(scores.shape[1]):
        try:
            per_class.append(average_precision(scores[:, c], labels[:, c].astype(bool)))
        except NoPositivesError:
            per_class.append(None if skip_empty else 0.0)
    kept = [ap for ap in per_class if ap is not None]
    if not kept:
        raise NoPositivesError("no class has a positive sample")
    return math.fsum(kept) / len(kept), per_class


def predict_labels(pred_logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.asarray(pred_logits, dtype=np.float64).argmax(axis=1)


def _check_labels(pred_logits, labels):
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred_logits.ndim != 2 or labels.shape != (pred_logits.shape[0],):
        raise ValueError(f"logits {pred_logits.shape} vs labels {labels.shape}")
    if pred_logits.shape[0] < 1:
        raise ValueError("need at least one sample")
    k = pred_logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    return pred_logits, labels


def accuracy(pred_logits, labels) -> float:
    pred_logits, labels = _check_labels(pred_logits, labels)
    return float(np.mean(predict_labels(pred_logits) == labels))


def confusion_matrix(pred_logits, labels, k: Optional[int] = None) -> np.ndarray:
    """Counts ``cell[true, pred]``."""
    pred_logits, labels = _check_labels(pred_logits, labels)
    k = pred_logits.shape[1] if k is None else k
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predict_labels(pred_logits)), 1)
    return cm


def row_normalize(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class EvalReport:
    mode: str
    n_samples: int
    map: Optional[float] = None
    per_class_ap: Optional[List[Optional[float]]] = None
    accuracy: Optional[float] = None
    confusion: Optional[List[List[int]]] = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "map": self.map,
            "per_class_ap": self.per_class_ap,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
        }

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def confusion_to_csv(self, path: Union[str, Path], normalize: bool = True) -> None:
        if self.confusion is None:
            raise ValueError("report has no confusion matrix")
        cm = np.asarray(self.confusion)
        values = row_normalize(cm) if normalize else cm
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + [str(j) for j in range(cm.shape[1])])
            for i, row in enumerate(values):
                w.writerow([str(i)] + [repr(float(v)) if normalize else str(int(v)) for v in row])


def evaluate(logits, targets, mode: str) -> EvalReport:
    """Build the report for a dataset's native protocol.

    Single-label: accuracy and confusion matrix. Multi-label: mAP over
    sigmoid-free logits (AP is rank based, so monotone maps are irrelevant).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "single_label":
        cm = confusion_matrix(logits, targets)
        return EvalReport(
            mode=mode,
            n_samples=int(logits.shape[0]),
            accuracy=accuracy(logits, targets),
            confusion=cm.tolist(),
        )
    if mode == "multi_label":
        m, per_class = mean_average_precision(logits, targets)
        return EvalReport(mode=mode, n_samples=int(logits.shape[0]), map=m, per_class_ap=per_class)
    raise ValueError(f"unknown mode {mode!r}")
