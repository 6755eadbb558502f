"""Soft Dice / IoU, mean voting, and union-IoU annotator preference ranking.

Soft scores binarize both maps at each threshold (``value >= t`` is
foreground), average the hard scores and report percent. Two empty masks
score 1; an empty mask against a non-empty one scores 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateUnionError, DimensionError, DomainError

THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _check_binary(mask: np.ndarray, what: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise DomainError(f"{what} must be binary")
    return mask.astype(bool)


def _check_prob(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size and (a.min() < 0.0 or a.max() > 1.0 or np.isnan(a).any()):
        raise DomainError(f"{what} values must lie in [0, 1]")
    return a


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def _dice_from_counts(inter: int, sa: int, sb: int) -> float:
    if sa + sb == 0:
        return 1.0
    return 2.0 * inter / (sa + sb)


def _iou_from_counts(inter: int, union: int) -> float:
    if union == 0:
        return 1.0
    return inter / union


def hard_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = _check_binary(pred, "prediction"), _check_binary(gt, "ground truth")
    _same_shape(a, b)
    return _dice_from_counts(int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b)))


def hard_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = _check_binary(pred, "prediction"), _check_binary(gt, "ground truth")
    _same_shape(a, b)
    return _iou_from_counts(int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b)))


def _threshold_counts(pred, gt, thresholds):
    p = _check_prob(pred, "prediction")
    g = _check_prob(gt, "ground truth")
    _same_shape(p, g)
    t = np.asarray(thresholds, dtype=np.float64).reshape((-1,) + (1,) * p.ndim)
    a = p[None] >= t
    b = g[None] >= t
    axes = tuple(range(1, a.ndim))
    inter = np.count_nonzero(a & b, axis=axes)
    union = np.count_nonzero(a | b, axis=axes)
    return inter, np.count_nonzero(a, axis=axes), np.count_nonzero(b, axis=axes), union


def soft_dice(pred: np.ndarray, gt: np.ndarray, thresholds: Sequence[float] = THRESHOLDS) -> float:
    inter, sa, sb, _ = _threshold_counts(pred, gt, thresholds)
    scores = [_dice_from_counts(int(i), int(x), int(y)) for i, x, y in zip(inter, sa, sb)]
    return sum(scores) / len(scores) * 100.0


def soft_iou(pred: np.ndarray, gt: np.ndarray, thresholds: Sequence[float] = THRESHOLDS) -> float:
    inter, _, _, union = _threshold_counts(pred, gt, thresholds)
    scores = [_iou_from_counts(int(i), int(u)) for i, u in zip(inter, union)]
    return sum(scores) / len(scores) * 100.0


def mean_voting(annotations: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel average of R binary masks."""
    if len(annotations) == 0:
        raise DimensionError("mean voting needs at least one annotation")
    ref = np.shape(annotations[0])
    for a in annotations[1:]:
        if np.shape(a) != ref:
            raise DimensionError(f"annotation shapes differ: {ref} vs {np.shape(a)}")
    return np.mean(np.stack([np.asarray(a, dtype=np.float64) for a in annotations]), axis=0)


@dataclass
class PreferenceRankTable:
    iou: list[float]
    ranks: list[int]

    def format_row(self) -> str:
        return " ".join(f"{100 * v:.2f} ({r})" for v, r in zip(self.iou, self.ranks))


def rank_descending(values: Sequence[float]) -> list[int]:
    """1-based ranks, highest value first; ties go to the lower index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    ranks = [0] * len(values)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def union_iou(masks: Sequence[np.ndarray]) -> list[float]:
    ms = [_check_binary(m, f"mask {i + 1}") for i, m in enumerate(masks)]
    for m in ms[1:]:
        _same_shape(ms[0], m)
    union = np.logical_or.reduce(ms)
    total = int(np.count_nonzero(union))
    if total == 0:
        raise DegenerateUnionError("union of all masks is empty")
    return [int(np.count_nonzero(m)) / total for m in ms]


def preference_rank(masks: Sequence[np.ndarray]) -> PreferenceRankTable:
    """IoU of each mask against the union of all masks, ranked highest first."""
    if len(masks) < 2:
        raise DimensionError("preference ranking needs at least two masks")
    iou = union_iou(masks)
    return PreferenceRankTable(iou, rank_descending(iou))


def dataset_preference_rank(samples: Sequence[Sequence[np.ndarray]]) -> PreferenceRankTable:
    """Average the per-sample union IoUs over a dataset, then rank the averages."""
    per_sample = np.array([union_iou(masks) for masks in samples])
    avg = per_sample.mean(axis=0).tolist()
    return PreferenceRankTable(avg, rank_descending(avg))


@dataclass
class EvaluationReport:
    per_annotator: list[dict]
    average: float
    mean_voting: float
    thresholds: list[float] = field(default_factory=lambda: list(THRESHOLDS))
    preference_ranks: dict | None = None

    def to_dict(self) -> dict:
        return {
            "per_annotator": self.per_annotator,
            "average": self.average,
            "mean_voting": self.mean_voting,
            "thresholds": list(self.thresholds),
            "preference_ranks": self.preference_ranks,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            per_annotator=[dict(row) for row in d["per_annotator"]],
            average=d["average"],
            mean_voting=d["mean_voting"],
            thresholds=list(d["thresholds"]),
            preference_ranks=d.get("preference_ranks"),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))


def evaluate(
    meta_prob: np.ndarray,
    annotator_probs: Sequence[np.ndarray] | None,
    annotations: Sequence[np.ndarray],
    thresholds: Sequence[float] = THRESHOLDS,
) -> EvaluationReport:
    """Score one sample.

    ``annotator_probs[r]`` is compared with ``annotations[r]``; when it is
    None (a model without preference heads) the meta map stands in for every
    annotator and the rows are marked ``source: "meta"``.
    """
    source = "head"
    if annotator_probs is None:
        annotator_probs = [meta_prob] * len(annotations)
        source = "meta"
    if len(annotator_probs) != len(annotations):
        raise DimensionError(f"{len(annotator_probs)} predictions for {len(annotations)} annotations")
    rows = []
    for r, (pred, gt) in enumerate(zip(annotator_probs, annotations)):
        rows.append(
            {
                "annotator": r + 1,
                "dice": soft_dice(pred, gt, thresholds),
                "iou": soft_iou(pred, gt, thresholds),
                "source": source,
            }
        )
    average = sum(row["dice"] for row in rows) / len(rows)
    mv = soft_dice(meta_prob, mean_voting(annotations), thresholds)
    return EvaluationReport(rows, average, mv, list(thresholds))


def aggregate_reports(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Average per-sample reports into one dataset-level report."""
    if not reports:
        raise DimensionError("no reports to aggregate")
    n_ann = len(reports[0].per_annotator)
    rows = []
    for r in range(n_ann):
        rows.append(
            {
                "annotator": r + 1,
                "dice": float(np.mean([rep.per_annotator[r]["dice"] for rep in reports])),
                "iou": float(np.mean([rep.per_annotator[r]["iou"] for rep in reports])),
                "source": reports[0].per_annotator[r]["source"],
            }
        )
    average = sum(row["dice"] for row in rows) / len(rows)
    mv = float(np.mean([rep.mean_voting for rep in reports]))
    return EvaluationReport(rows, average, mv, list(reports[0].thresholds))
