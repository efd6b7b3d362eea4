"""Multi-label evaluation: per-class AP and mAP, macro/micro F1 at a tuned
class-independent threshold, and top-k F1."""

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError

logger = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class PredictionRecord:
    image_id: str
    scores: np.ndarray  # (K,) in [0, 1]
    labels: np.ndarray  # (K,) in {0, 1}

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if not np.all(np.isfinite(self.scores)):
            raise InputError(f"{self.image_id}: non-finite scores")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise InputError(f"{self.image_id}: labels must be binary")


@dataclass
class MetricsReport:
    per_class_ap: list            # AP per class; None where the class had no positives
    map: float
    f1_c: float
    f1_o: float
    topk_f1_c: float
    topk_f1_o: float
    tuned_tau: float
    top_k: int = 3

    def to_dict(self) -> dict:
        return {
            "per_class_ap": [None if v is None else float(v) for v in self.per_class_ap],
            "map": float(self.map),
            "f1_c": float(self.f1_c),
            "f1_o": float(self.f1_o),
            "topk_f1_c": float(self.topk_f1_c),
            "topk_f1_o": float(self.topk_f1_o),
            "tuned_tau": float(self.tuned_tau),
            "top_k": self.top_k,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at each positive, ranking by
    descending score with ties broken by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} vs labels {labels.shape}")
    positives = int(labels.sum())
    if positives == 0:
        raise InputError("average_precision needs at least one positive label")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    precision_at = hits[ranked == 1] / (np.nonzero(ranked == 1)[0] + 1)
    return float(precision_at.sum() / positives)


def mean_average_precision(score_matrix, label_matrix):
    """(mAP, per-class AP list).  Classes without positives are excluded from
    the mean (logged) and reported as None."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    per_class = []
    usable = []
    for k in range(scores.shape[1]):
        try:
            ap = average_precision(scores[:, k], labels[:, k])
        except InputError:
            logger.warning("class %d has no positives; excluded from mAP", k)
            per_class.append(None)
            continue
        per_class.append(ap)
        usable.append(ap)
    if not usable:
        raise InputError("no class has a positive label; mAP undefined")
    return float(np.mean(usable)), per_class


def _records_to_matrices(records):
    scores = np.stack([r.scores for r in records])
    labels = np.stack([r.labels for r in records])
    return scores, labels


def _f1_from_counts(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom > 0 else 0.0


def _f1_pair(pred, labels):
    tp = (pred & (labels == 1)).sum(axis=0).astype(np.float64)
    fp = (pred & (labels == 0)).sum(axis=0).astype(np.float64)
    fn = (~pred & (labels == 1)).sum(axis=0).astype(np.float64)
    per_class = [_f1_from_counts(tp[k], fp[k], fn[k]) for k in range(pred.shape[1])]
    macro = float(np.mean(per_class))
    micro = _f1_from_counts(tp.sum(), fp.sum(), fn.sum())
    return macro, micro


def f1_scores(records, tau: float):
    """(macro F1, micro F1) with labels predicted where score > tau (strict)."""
    if not 0 < tau < 1:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    scores, labels = _records_to_matrices(records)
    return _f1_pair(scores > tau, labels)


def tune_threshold(records_val) -> float:
    """Grid-search the class-independent threshold maximizing micro F1 on the
    validation records; ties resolve to the smallest threshold."""
    if not records_val:
        raise InputError("cannot tune a threshold on empty validation records")
    best_tau, best_f1 = None, -1.0
    for tau in THRESHOLD_GRID:
        _, micro = f1_scores(records_val, tau)
        if micro > best_f1:
            best_tau, best_f1 = tau, micro
    return best_tau


def topk_f1(records, k: int):
    """(macro F1, micro F1) when exactly the k highest-scoring classes are
    predicted per image (score ties -> lower class index)."""
    scores, labels = _records_to_matrices(records)
    num_classes = scores.shape[1]
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > num_classes:
        raise ContractError(f"k={k} exceeds {num_classes} classes")
    pred = np.zeros_like(labels, dtype=bool)
    for i in range(scores.shape[0]):
        order = np.lexsort((np.arange(num_classes), -scores[i]))
        pred[i, order[:k]] = True
    return _f1_pair(pred, labels)


def evaluate(records, records_val=None, top_k: int = 3) -> MetricsReport:
    """Full report; the threshold is tuned on `records_val` (never the test
    records themselves) when provided, else on `records`."""
    scores, labels = _records_to_matrices(records)
    map_value, per_class = mean_average_precision(scores, labels)
    tau = tune_threshold(records_val if records_val else records)
    f1_c, f1_o = f1_scores(records, tau)
    tk_c, tk_o = topk_f1(records, top_k)
    return MetricsReport(per_class_ap=per_class, map=map_value, f1_c=f1_c, f1_o=f1_o,
                         topk_f1_c=tk_c, topk_f1_o=tk_o, tuned_tau=tau, top_k=top_k)


def write_per_class_csv(report: MetricsReport, names, path: str):
    """Two-column CSV (class_name, ap) for per-class improvement plots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_name", "ap"])
        for name, ap in zip(names, report.per_class_ap):
            writer.writerow([name, "" if ap is None else f"{ap:.6f}"])
