"""Hierarchical matching and the set-prediction training objective.

Instance level: predictions are assigned to ground-truth elements by a
focal class cost plus a Manhattan point-set cost. Point level: inside each
pair, the ground-truth ordering is chosen from the element's permutation
group (reversal for polylines, all cyclic shifts and both windings for
polygons). The chosen permutation indices are frozen for the loss terms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, ConfigurationError, ContractError
from .map_model import MapElement, PerceptionRange, VectorizedMap, normalize_points, permutation_group

EPS_LOG = 1e-12
EPS_EDGE = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha_c: float = 2.0
    alpha_p: float = 5.0
    alpha_d: float = 0.005
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        vals = (self.alpha_c, self.alpha_p, self.alpha_d, self.focal_alpha, self.focal_gamma)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ConfigurationError(f"loss weights must be finite and nonnegative: {self}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigurationError("focal alpha must lie in (0, 1)")


@dataclass(frozen=True)
class Targets:
    """Ground truth of one scene in normalized coordinates."""

    labels: np.ndarray  # (N,) int
    points: np.ndarray  # (N, N_e, 2) in [0, 1]
    closed: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_map(cls, vmap: VectorizedMap, rng: PerceptionRange | None = None) -> "Targets":
        rng = rng or vmap.range
        if len(vmap) == 0:
            return cls(np.zeros(0, int), np.zeros((0, 0, 2)), np.zeros(0, bool))
        return cls(
            np.array([int(e.class_id) for e in vmap.elements]),
            np.stack([normalize_points(e.points, rng) for e in vmap.elements]),
            np.array([e.is_closed for e in vmap.elements]),
        )

    def reindexed(self, order) -> "Targets":
        order = np.asarray(order)
        return Targets(self.labels[order], self.points[order], self.closed[order])


@dataclass
class MatchResult:
    """``pred_idx[i]`` is the prediction assigned to ground truth ``i``."""

    pred_idx: np.ndarray  # (N,)
    perm_idx: np.ndarray  # (N,) index into that element's permutation group
    cls_cost: np.ndarray  # (N,)
    pos_cost: np.ndarray  # (N,)

    @property
    def gt_idx(self) -> np.ndarray:
        return np.arange(len(self.pred_idx))

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.cls_cost + self.pos_cost))

    def unmatched(self, num_preds: int) -> np.ndarray:
        mask = np.ones(num_preds, bool)
        mask[self.pred_idx] = False
        return np.flatnonzero(mask)


# ------------------------------------------------------------ elementary costs


def focal_loss(class_probs, target_class: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """-alpha * (1 - p_t)^gamma * log(p_t) for a probability vector."""
    probs = np.asarray(class_probs, dtype=float)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ContractError(f"class probabilities must sum to 1, got {probs.sum()}")
    p_t = float(probs[target_class])
    return float(-alpha * (1.0 - p_t) ** gamma * np.log(max(p_t, EPS_LOG)))


def focal_cost_matrix(probs: np.ndarray, labels: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Focal cost of every prediction (rows) against every label (columns)."""
    p_t = np.asarray(probs, dtype=float)[:, np.asarray(labels, dtype=int)]
    return -alpha * (1.0 - p_t) ** gamma * np.log(np.maximum(p_t, EPS_LOG))


def manhattan_set_distance(pred_points, gt_points, perm) -> float:
    """Sum over k of the L1 distance between pred point k and gt point perm[k]."""
    pred = np.asarray(pred_points, dtype=float)
    gt = np.asarray(gt_points, dtype=float)
    perm = np.asarray(perm)
    if pred.shape != gt.shape or len(perm) != len(pred):
        raise ContractError(f"point set shapes differ: {pred.shape} vs {gt.shape} (perm {len(perm)})")
    return float(np.abs(pred - gt[perm]).sum())


def best_permutation(pred_points, gt_element: MapElement | np.ndarray, is_closed: bool | None = None) -> tuple[int, float]:
    """Exhaustive minimum of the Manhattan distance over the permutation group.

    Ties resolve to the lowest permutation index.
    """
    if isinstance(gt_element, MapElement):
        gt, is_closed = gt_element.points, gt_element.is_closed
    else:
        gt = np.asarray(gt_element, dtype=float)
    pred = np.asarray(pred_points, dtype=float)
    if pred.shape != gt.shape:
        raise ContractError(f"point set shapes differ: {pred.shape} vs {gt.shape}")
    perms = permutation_group(len(gt), bool(is_closed)).permutations
    costs = np.abs(pred[None] - gt[perms]).sum(axis=(1, 2))
    k = int(np.argmin(costs))
    return k, float(costs[k])


def _padded_groups(n_points: int, closed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, K_max, n) permutations per element, padded by repeating the identity, and each K."""
    open_g = permutation_group(n_points, False).permutations
    closed_g = permutation_group(n_points, True).permutations
    k_max = len(closed_g) if closed.any() else len(open_g)
    out = np.empty((len(closed), k_max, n_points), dtype=int)
    sizes = np.empty(len(closed), dtype=int)
    for i, c in enumerate(closed):
        g = closed_g if c else open_g
        out[i, : len(g)] = g
        out[i, len(g):] = g[0]
        sizes[i] = len(g)
    return out, sizes


def position_cost_matrix(pred_points: np.ndarray, targets: Targets) -> tuple[np.ndarray, np.ndarray]:
    """Best-permutation Manhattan cost (M, N) and the argmin permutation indices (M, N)."""
    pred = np.asarray(pred_points, dtype=float)
    n_points = pred.shape[1]
    perms, _ = _padded_groups(n_points, targets.closed)
    gt_perm = targets.points[np.arange(len(targets))[:, None, None], perms]  # (N, K, n, 2)
    dist = np.abs(pred[:, None, None] - gt_perm[None]).sum(axis=(-1, -2))  # (M, N, K)
    idx = dist.argmin(-1)
    return np.take_along_axis(dist, idx[..., None], -1)[..., 0], idx


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def instance_match_cost(pred_probs, pred_points, gt: MapElement | tuple, weights: LossWeights = LossWeights()) -> float:
    """Focal class cost plus best-permutation Manhattan position cost for one pair.

    ``gt`` is a MapElement already in normalized coordinates, or a (label, points, closed) tuple.
    """
    if isinstance(gt, MapElement):
        label, points, closed = int(gt.class_id), gt.points, gt.is_closed
    else:
        label, points, closed = gt
    _, pos = best_permutation(pred_points, np.asarray(points), closed)
    return focal_loss(pred_probs, label, weights.focal_alpha, weights.focal_gamma) + pos


def solve_assignment(cost: np.ndarray, one_to_one: bool = True) -> np.ndarray:
    """Prediction index for each GT column of a (M, N) cost matrix.

    ``one_to_one=False`` takes the independent per-GT argmin instead, which
    may reuse a prediction.
    """
    cost = np.asarray(cost, dtype=float)
    m, n = cost.shape
    if n > m and one_to_one:
        raise CapacityError(f"{n} ground-truth elements exceed {m} prediction slots")
    if n == 0:
        return np.zeros(0, dtype=int)
    if not one_to_one:
        return cost.argmin(axis=0)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(n, dtype=int)
    out[cols] = rows
    return out


def assign_instances(
    class_logits,
    pred_points,
    targets: Targets,
    weights: LossWeights = LossWeights(),
    one_to_one: bool = True,
) -> MatchResult:
    """Globally optimal one-to-one assignment of predictions to ground truth."""
    logits = _to_numpy(class_logits)
    pts = _to_numpy(pred_points)
    m = logits.shape[0]
    n = len(targets)
    if n > m and one_to_one:
        raise CapacityError(f"{n} ground-truth elements exceed {m} prediction slots")
    if n == 0:
        z = np.zeros(0)
        return MatchResult(np.zeros(0, int), np.zeros(0, int), z, z)
    cls_cost = focal_cost_matrix(softmax_np(logits), targets.labels, weights.focal_alpha, weights.focal_gamma)
    pos_cost, perm_idx = position_cost_matrix(pts, targets)
    pred_idx = solve_assignment(cls_cost + pos_cost, one_to_one)
    cols = np.arange(n)
    return MatchResult(pred_idx, perm_idx[pred_idx, cols], cls_cost[pred_idx, cols], pos_cost[pred_idx, cols])


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=float)


# ------------------------------------------------------------------- losses


def focal_loss_torch(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Per-row focal loss on softmax probabilities; returns (M,)."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, targets[:, None])[:, 0]
    p_t = logp.exp()
    logp = torch.clamp(logp, min=float(np.log(EPS_LOG)))
    return -alpha * (1.0 - p_t) ** gamma * logp


def loss_cls(class_logits: torch.Tensor, targets: Targets, match: MatchResult, weights: LossWeights) -> torch.Tensor:
    """Focal loss of matched predictions toward their GT class and of unmatched
    predictions toward no-object, summed and divided by the GT count."""
    m, c1 = class_logits.shape
    no_object = c1 - 1
    labels = torch.full((m,), no_object, dtype=torch.long)
    # with the per-GT argmin mode a prediction can serve several GTs; score each pair
    matched = torch.as_tensor(match.pred_idx, dtype=torch.long)
    pair_targets = torch.as_tensor(targets.labels, dtype=torch.long)
    unmatched = torch.as_tensor(match.unmatched(m), dtype=torch.long)
    total = focal_loss_torch(class_logits[matched], pair_targets, weights.focal_alpha, weights.focal_gamma).sum()
    total = total + focal_loss_torch(
        class_logits[unmatched], labels[unmatched], weights.focal_alpha, weights.focal_gamma
    ).sum()
    return total / max(len(targets), 1)


def _aligned_gt(targets: Targets, match: MatchResult, dtype) -> torch.Tensor:
    """GT point sets reordered by each pair's frozen permutation, (N, N_e, 2)."""
    n_points = targets.points.shape[1]
    perms, _ = _padded_groups(n_points, targets.closed)
    order = perms[np.arange(len(targets)), match.perm_idx]
    gt = targets.points[np.arange(len(targets))[:, None], order]
    return torch.as_tensor(gt, dtype=dtype)


def loss_p2p(points: torch.Tensor, targets: Targets, match: MatchResult) -> torch.Tensor:
    """Manhattan distance of matched pairs under their permutations, / (N * N_e)."""
    if len(targets) == 0:
        return points.sum() * 0.0
    gt = _aligned_gt(targets, match, points.dtype)
    pred = points[torch.as_tensor(match.pred_idx, dtype=torch.long)]
    return (pred - gt).abs().sum() / (len(targets) * points.shape[1])


def _edges(pts: torch.Tensor, closed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Edge vectors (N, N_e, 2) with the cyclic closing edge last, and a validity mask."""
    nxt = torch.roll(pts, -1, dims=1)
    edges = nxt - pts
    mask = torch.ones(edges.shape[:2], dtype=torch.bool)
    mask[:, -1] = closed
    return edges, mask


def loss_dir(points: torch.Tensor, targets: Targets, match: MatchResult) -> torch.Tensor:
    """Mean over edges of (1 - cos) between predicted and aligned GT edge vectors."""
    if len(targets) == 0:
        return points.sum() * 0.0
    gt = _aligned_gt(targets, match, points.dtype)
    pred = points[torch.as_tensor(match.pred_idx, dtype=torch.long)]
    closed = torch.as_tensor(targets.closed)
    pe, mask = _edges(pred, closed)
    ge, _ = _edges(gt, closed)
    pn = pe.norm(dim=-1)
    gn = ge.norm(dim=-1)
    ok = mask & (gn > EPS_EDGE)
    cos = (pe * ge).sum(-1) / (pn.clamp_min(EPS_EDGE) * gn.clamp_min(EPS_EDGE))
    term = torch.where(ok & (pn > EPS_EDGE), 1.0 - cos, torch.zeros_like(cos))
    return term.sum() / mask.sum().clamp_min(1)


@dataclass
class LossReport:
    """Weighted objective; ``loss`` is the differentiable total."""

    loss: torch.Tensor
    total: float
    cls: float
    p2p: float
    dir: float
    per_layer: list[dict] = field(default_factory=list)
    matches: list[list[MatchResult]] = field(default_factory=list)  # [layer][sample]

    def record(self, step: int, lr: float) -> dict:
        return {"step": step, "lr": lr, "total": self.total, "cls": self.cls, "p2p": self.p2p, "dir": self.dir}

    def to_json(self, step: int, lr: float) -> str:
        return json.dumps(self.record(step, lr))


def total_loss(
    layers: Sequence,
    targets: Sequence[Targets],
    weights: LossWeights = LossWeights(),
    one_to_one: bool = True,
    matches: Sequence[Sequence[MatchResult]] | None = None,
) -> LossReport:
    """Weighted cls + p2p + dir loss, summed over decoder layers and averaged over the batch.

    ``layers`` holds one (class_logits (B, M, C+1), points (B, M, N_e, 2))
    pair per decoder layer. Matching is redone for every layer unless
    ``matches`` supplies frozen assignments.
    """
    if not isinstance(weights, LossWeights):
        raise ConfigurationError("weights must be a LossWeights")
    if len(layers) == 0:
        raise ContractError("need at least one decoder layer output")
    per_layer, all_matches = [], []
    total = None
    sums = {"cls": 0.0, "p2p": 0.0, "dir": 0.0}
    for li, (logits, points) in enumerate(layers):
        b = logits.shape[0]
        if len(targets) != b:
            raise ContractError(f"{len(targets)} targets for a batch of {b}")
        layer_matches = []
        lc = lp = ld = 0.0
        for s in range(b):
            if matches is not None:
                match = matches[li][s]
            else:
                match = assign_instances(logits[s], points[s], targets[s], weights, one_to_one)
            layer_matches.append(match)
            lc = lc + loss_cls(logits[s], targets[s], match, weights)
            lp = lp + loss_p2p(points[s], targets[s], match)
            ld = ld + loss_dir(points[s], targets[s], match)
        lc, lp, ld = lc / b, lp / b, ld / b
        layer_total = weights.alpha_c * lc + weights.alpha_p * lp + weights.alpha_d * ld
        total = layer_total if total is None else total + layer_total
        rec = {k: float(v.detach()) for k, v in (("total", layer_total), ("cls", lc), ("p2p", lp), ("dir", ld))}
        per_layer.append(rec)
        for k in sums:
            sums[k] += rec[k]
        all_matches.append(layer_matches)
    return LossReport(total, float(total.detach()), sums["cls"], sums["p2p"], sums["dir"], per_layer, all_matches)
