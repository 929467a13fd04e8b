"""Chamfer-distance average precision for vectorized maps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, ContractError
from .map_model import (
    CLASS_NAMES,
    DEFAULT_NUM_POINTS,
    MapClass,
    MapElement,
    PerceptionRange,
    VectorizedMap,
    resample_polyline,
)

DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5)
EVAL_CLASSES = (MapClass.PED_CROSSING, MapClass.DIVIDER, MapClass.BOUNDARY)


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    classes: tuple[MapClass, ...] = EVAL_CLASSES
    range: PerceptionRange = field(default_factory=PerceptionRange)
    confidence_floor: float = 0.0
    n_points: int = DEFAULT_NUM_POINTS

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t:
            raise ConfigurationError("need at least one threshold")
        if any(x <= 0 for x in t) or any(a >= b for a, b in zip(t, t[1:])):
            raise ConfigurationError(f"thresholds must be positive and strictly increasing: {t}")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ConfigurationError("confidence floor must lie in [0, 1]")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "classes", tuple(MapClass(c) for c in self.classes))

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "classes": [CLASS_NAMES[c] for c in self.classes],
            "range": self.range.to_dict(),
            "confidence_floor": self.confidence_floor,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        names = {v: k for k, v in CLASS_NAMES.items()}
        return cls(
            tuple(d["thresholds"]),
            tuple(names[c] for c in d["classes"]),
            PerceptionRange.from_dict(d["range"]),
            float(d["confidence_floor"]),
            int(d["n_points"]),
        )


@dataclass(frozen=True, eq=False)
class ScoredElement:
    element: MapElement
    score: float


@dataclass
class ApBreakdown:
    per_threshold: dict[str, dict[float, float]]  # class name -> tau -> AP
    per_class: dict[str, float]
    mAP: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                name: {"per_tau": {str(t): ap for t, ap in taus.items()}, "mean": self.per_class[name]}
                for name, taus in self.per_threshold.items()
            },
            "mAP": self.mAP,
        }

    def table_row(self) -> dict:
        """Flat row with the columns AP_ped, AP_divider, AP_boundary, mAP."""
        return {
            "AP_ped": self.per_class.get("ped_crossing", float("nan")),
            "AP_divider": self.per_class.get("divider", float("nan")),
            "AP_boundary": self.per_class.get("boundary", float("nan")),
            "mAP": self.mAP,
        }


def chamfer_distance(a, b) -> float:
    """Symmetric average nearest-neighbour distance between two point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ContractError("chamfer distance needs two non-empty point sets")
    d = cdist(a, b)
    return float(0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean())


def match_at_threshold(
    preds: Sequence[ScoredElement], gts: Sequence[MapElement], tau: float, n_points: int = DEFAULT_NUM_POINTS
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP labelling by descending confidence.

    Each prediction takes the closest still-unmatched GT if its Chamfer
    distance is below ``tau``. Returns (is_tp, scores) in descending score order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)  # stable: ties keep input order
    scores = np.array([preds[i].score for i in order], dtype=float)
    tp = np.zeros(len(order), dtype=bool)
    if not gts or not preds:
        return tp, scores
    dist = chamfer_matrix([preds[i].element for i in order], gts, n_points)
    taken = np.zeros(len(gts), dtype=bool)
    for r in range(len(order)):
        d = np.where(taken, np.inf, dist[r])
        j = int(np.argmin(d))
        if d[j] < tau:
            taken[j] = True
            tp[r] = True
    return tp, scores


def _eval_points(el: MapElement, n_points: int) -> np.ndarray:
    if el.num_points == n_points:
        return el.points
    return resample_polyline(el.points, n_points, el.is_closed)


def chamfer_matrix(preds: Sequence[MapElement], gts: Sequence[MapElement], n_points: int) -> np.ndarray:
    out = np.empty((len(preds), len(gts)))
    pp = [_eval_points(p, n_points) for p in preds]
    gg = [_eval_points(g, n_points) for g in gts]
    for i, p in enumerate(pp):
        for j, g in enumerate(gg):
            out[i, j] = chamfer_distance(p, g)
    return out


def average_precision(is_tp, scores, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    is_tp = np.asarray(is_tp, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    if n_gt < 0:
        raise ValueError("n_gt must be nonnegative")
    if n_gt == 0:
        return 0.0 if (~is_tp).any() else 1.0
    if len(is_tp) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    precision = tp / np.maximum(tp + fp, 1)
    # recall kept in integer TP counts so a perfect curve integrates to exactly 1
    mrec = np.concatenate([[0], tp, [n_gt]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]) / n_gt)


def ap_over_thresholds(aps: Sequence[float]) -> float:
    aps = list(aps)
    if not aps:
        raise ConfigurationError("no thresholds to average over")
    return float(sum(aps) / len(aps))


def mean_ap(class_aps: dict) -> float:
    """Mean of AP_ped, AP_divider and AP_boundary. Keys may be names or MapClass."""
    vals = {}
    for k, v in class_aps.items():
        name = CLASS_NAMES[MapClass(k)] if not isinstance(k, str) else k
        vals[name] = float(v)
    missing = [n for n in CLASS_NAMES.values() if n not in vals]
    if missing:
        raise ConfigurationError(f"missing class AP for {missing}")
    return (vals["ped_crossing"] + vals["divider"] + vals["boundary"]) / 3.0


def predictions_from_output(class_logits, points, rng: PerceptionRange, confidence_floor: float = 0.0):
    """Decode raw model outputs of one scene into scored elements in meters.

    Queries whose most probable slot is no-object are dropped; the others
    take their best real class and its probability as confidence.
    """
    from .map_model import class_is_closed, denormalize_points
    from .matching import softmax_np

    logits = np.asarray(class_logits, dtype=float)
    probs = softmax_np(logits)
    n_real = probs.shape[1] - 1
    out = []
    for j in range(len(probs)):
        if int(np.argmax(probs[j])) == n_real:
            continue
        c = int(np.argmax(probs[j, :n_real]))
        conf = float(probs[j, c])
        if conf < confidence_floor:
            continue
        pts = denormalize_points(np.clip(np.asarray(points[j], dtype=float), 0.0, 1.0), rng)
        out.append(ScoredElement(MapElement(MapClass(c), pts, class_is_closed(c)), conf))
    return out


def evaluate(
    predictions: Sequence[Sequence[ScoredElement]],
    ground_truth: Sequence[VectorizedMap],
    cfg: EvalConfig = EvalConfig(),
) -> ApBreakdown:
    """AP per class and threshold over all scenes, then the class-averaged mAP.

    Matching is done per scene; TP flags and scores of all scenes are pooled
    before integrating the precision-recall curve.
    """
    if len(predictions) != len(ground_truth):
        raise ContractError("one prediction list per scene is required")
    per_tau: dict[str, dict[float, float]] = {}
    per_class: dict[str, float] = {}
    for cls in cfg.classes:
        name = CLASS_NAMES[cls]
        per_tau[name] = {}
        scene_items = []
        n_gt = 0
        for preds, gt in zip(predictions, ground_truth):
            p = [s for s in preds if s.element.class_id == cls and s.score >= cfg.confidence_floor]
            g = gt.of_class(cls)
            n_gt += len(g)
            scene_items.append((p, g))
        for tau in cfg.thresholds:
            flags, scores = [], []
            for p, g in scene_items:
                f, s = match_at_threshold(p, g, tau, cfg.n_points)
                flags.append(f)
                scores.append(s)
            flags = np.concatenate(flags) if flags else np.zeros(0, bool)
            scores = np.concatenate(scores) if scores else np.zeros(0)
            per_tau[name][tau] = average_precision(flags, scores, n_gt)
        per_class[name] = ap_over_thresholds(list(per_tau[name].values()))
    m = float(np.mean(list(per_class.values())))
    return ApBreakdown(per_tau, per_class, m)


def gt_as_predictions(gt: VectorizedMap) -> list[ScoredElement]:
    return [ScoredElement(el, 1.0) for el in gt.elements]


def table_csv(rows: Iterable[tuple[str, dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "AP_ped", "AP_divider", "AP_boundary", "mAP"])
    for name, row in rows:
        w.writerow([name] + [f"{row[k]:.4f}" for k in ("AP_ped", "AP_divider", "AP_boundary", "mAP")])
    return buf.getvalue()
