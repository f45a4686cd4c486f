"""Answer-set metrics: F1 micro/macro/avg and Hits@1, reported in percent."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

THRESHOLD_GRID = np.round(np.arange(1, 20) * 0.05, 2)


@dataclass(frozen=True)
class Metrics:
    f1_micro: float
    f1_macro: float
    f1_avg: float
    hits_at_1: float

    def as_row(self) -> list[float]:
        return [self.f1_micro, self.f1_macro, self.f1_avg, self.hits_at_1]


def bce_loss(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def _f1(tp: int, fp: int, fn: int) -> float:
    # both sets empty counts as a perfect match
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def set_f1(predicted: set, gold: set) -> float:
    tp = len(predicted & gold)
    return _f1(tp, len(predicted - gold), len(gold - predicted))


def top_node(scores: np.ndarray, entity_ids: np.ndarray) -> int:
    """Index of the highest score; ties go to the smallest entity id."""
    order = np.lexsort((entity_ids, -scores))
    return int(order[0])


def compute_metrics(probabilities: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                    entity_ids: Sequence[np.ndarray], threshold: float) -> Metrics:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    tp = fp = fn = tn = 0
    per_question, hits = [], []
    for p, y, ids in zip(probabilities, labels, entity_ids):
        p = np.asarray(p)
        y = np.asarray(y) > 0.5
        pred = p >= threshold
        tp += int(np.sum(pred & y))
        fp += int(np.sum(pred & ~y))
        fn += int(np.sum(~pred & y))
        tn += int(np.sum(~pred & ~y))
        ids = np.asarray(ids)
        per_question.append(set_f1(set(ids[pred].tolist()), set(ids[y].tolist())))
        hits.append(1.0 if len(p) and y[top_node(p, ids)] else 0.0)
    if not per_question:
        raise ValueError("no questions to evaluate")
    micro = _f1(tp, fp, fn)
    macro = 0.5 * (micro + _f1(tn, fn, fp))
    return Metrics(100 * micro, 100 * macro, 100 * float(np.mean(per_question)),
                   100 * float(np.mean(hits)))


def tune_threshold(probabilities, labels, entity_ids) -> float:
    """Grid threshold with the best F1_avg; the lowest one wins ties."""
    best, best_t = -1.0, float(THRESHOLD_GRID[0])
    for t in THRESHOLD_GRID:
        score = compute_metrics(probabilities, labels, entity_ids, float(t)).f1_avg
        if score > best:
            best, best_t = score, float(t)
    return best_t


def format_table(rows: Sequence[tuple[str, Metrics]], label: str = "Model") -> str:
    width = max(len(label), *(len(name) for name, _ in rows))
    header = f"{label:<{width}}  {'F1_micro':>8}  {'F1_macro':>8}  {'F1_avg':>8}  {'Hits@1':>8}"
    lines = [header]
    for name, m in rows:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{v:8.1f}" for v in m.as_row()))
    return "\n".join(lines) + "\n"
