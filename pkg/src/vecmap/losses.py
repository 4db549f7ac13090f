"""Focal loss, distance loss, localization confidence, distance-aware focal loss
and the hybrid per-layer classification scheme."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PolylineInstance
from .matching import MatchResult
from .numerics import Tensor, as_tensor, clamp_prob, concat, log, tabs, take


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    gamma: float = 2.0
    lambda_: float = 1.0
    num_layers: int = 6
    layers_fl: int = 1
    layers_dafl: int | None = None
    w_cls: float = 2.0
    w_pts: float = 5.0

    def __post_init__(self):
        if self.layers_dafl is None:
            self.layers_dafl = self.num_layers - self.layers_fl
        if self.layers_fl < 0 or self.layers_dafl < 0:
            raise LossError("layer counts must be non-negative")
        if self.layers_fl + self.layers_dafl != self.num_layers:
            raise LossError(
                f"layers_fl + layers_dafl = {self.layers_fl + self.layers_dafl} != {self.num_layers}"
            )
        if self.lambda_ <= 0 or self.gamma < 0:
            raise LossError("need lambda_ > 0 and gamma >= 0")


def focal_loss(p, y, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss for binary labels ``y`` in {0, 1}."""
    p = clamp_prob(p)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    pos = (1.0 - p) ** gamma * log(p)
    negative = p ** gamma * log(1.0 - p)
    return -(pos * y + negative * (1.0 - y))


def dafl(p, y, gamma: float = 2.0) -> Tensor:
    """Distance-aware focal loss: soft targets ``y`` in [0, 1].

    The modulating factor is ``|y - p| ** gamma`` so non-integer ``gamma``
    stays defined when ``p > y``.
    """
    p = clamp_prob(p)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    mod = tabs(y - p) ** gamma
    ce = y * log(p) + (1.0 - y) * log(1.0 - p)
    return -(mod * ce)


def loc_confidence(l_dist, lambda_: float = 1.0):
    """``exp(-lambda * l_dist)``; a constant target, never differentiated through."""
    l = np.asarray(getattr(l_dist, "data", l_dist), dtype=np.float64)
    if np.any(l < 0):
        raise LossError("distance loss must be non-negative")
    out = np.exp(-lambda_ * l)
    return float(out) if out.ndim == 0 else out


@dataclass
class DistanceLoss:
    per_pair: np.ndarray  # mean L1 per point, one entry per matched pair
    total: Tensor  # raw sum over pairs and points


def matched_targets(match: MatchResult, gts: list[PolylineInstance]) -> np.ndarray:
    """GT points of every matched pair, reordered by the chosen permutation."""
    if not len(match):
        return np.zeros((0, 0, 2))
    return np.stack([gts[g].points[perm] for (_, g), perm in zip(match.pairs, match.point_perm)])


def distance_loss(match: MatchResult, pred_points, gts) -> DistanceLoss:
    """L1 between matched predicted points and their permuted GT points."""
    gt_list = list(getattr(gts, "instances", gts))
    pred_points = as_tensor(pred_points)
    if not len(match):
        return DistanceLoss(np.zeros(0), Tensor(0.0) * pred_points.sum())
    target = matched_targets(match, gt_list)
    chosen = take(pred_points, match.pred_indices)
    l1 = tabs(chosen - target).sum(axis=(1, 2))
    n_v = target.shape[1]
    return DistanceLoss(l1.data / n_v, l1.sum())


@dataclass
class ClsTargets:
    """Per-query classification targets for one decoder layer of one query group."""

    labels: np.ndarray  # (Q,) class id, -1 for background
    quality: np.ndarray  # (Q,) localization confidence of matched queries
    num_pos: int

    @classmethod
    def from_match(cls, n_queries: int, match: MatchResult, gts, p_dist) -> ClsTargets:
        gt_list = list(getattr(gts, "instances", gts))
        labels = np.full(n_queries, -1, dtype=np.int64)
        quality = np.zeros(n_queries)
        for (p, g), q in zip(match.pairs, np.atleast_1d(p_dist)):
            labels[p] = gt_list[g].class_id
            quality[p] = q
        return cls(labels, quality, len(match))

    def binary(self, n_classes: int) -> np.ndarray:
        y = np.zeros((len(self.labels), n_classes))
        pos = self.labels >= 0
        y[np.flatnonzero(pos), self.labels[pos]] = 1.0
        return y

    def soft(self, n_classes: int) -> np.ndarray:
        y = np.zeros((len(self.labels), n_classes))
        pos = self.labels >= 0
        y[np.flatnonzero(pos), self.labels[pos]] = self.quality[pos]
        return y


def layer_cls_loss(scores, targets: ClsTargets, use_dafl: bool, gamma: float) -> Tensor:
    scores = as_tensor(scores)
    k = scores.shape[-1]
    if use_dafl:
        loss = dafl(scores, targets.soft(k), gamma)
    else:
        loss = focal_loss(scores, targets.binary(k), gamma)
    return loss.sum() * (1.0 / max(1, targets.num_pos))


def hls_classification_loss(layer_scores, targets, cfg: LossConfig) -> tuple[list[Tensor], Tensor]:
    """Focal loss on the first ``layers_fl`` layers, DAFL on the rest.

    ``layer_scores[l]`` holds the ``(Q, K)`` probabilities of layer ``l`` and
    ``targets[l]`` its :class:`ClsTargets`. Each layer is normalized by its
    matched-pair count. Returns per-layer losses and their sum.
    """
    if len(layer_scores) != cfg.num_layers or len(targets) != cfg.num_layers:
        raise LossError(
            f"expected {cfg.num_layers} layers, got {len(layer_scores)} scores / {len(targets)} targets"
        )
    per_layer = [
        layer_cls_loss(s, t, use_dafl=l >= cfg.layers_fl, gamma=cfg.gamma)
        for l, (s, t) in enumerate(zip(layer_scores, targets))
    ]
    total = per_layer[0]
    for t in per_layer[1:]:
        total = total + t
    return per_layer, total


@dataclass
class GroupTargets:
    """Everything the loss needs for one query group at one decoder layer."""

    match: MatchResult
    cls: ClsTargets
    gt_points: np.ndarray  # (M, N_v, 2) permuted GT points of matched pairs
    p_dist: np.ndarray  # (M,)


def build_group_targets(scores, points, gts, match: MatchResult, cfg: LossConfig) -> GroupTargets:
    """Targets from a match, with ``P_dist`` measured on the current predictions."""
    gt_list = list(getattr(gts, "instances", gts))
    pts = np.asarray(getattr(points, "data", points))
    target = matched_targets(match, gt_list)
    if len(match):
        l_dist = np.abs(pts[match.pred_indices] - target).sum(axis=(1, 2)) / target.shape[1]
        p_dist = np.atleast_1d(loc_confidence(l_dist, cfg.lambda_))
    else:
        p_dist = np.zeros(0)
    n_queries = np.asarray(getattr(scores, "data", scores)).shape[0]
    return GroupTargets(match, ClsTargets.from_match(n_queries, match, gt_list, p_dist), target, p_dist)


@dataclass
class LossBreakdown:
    per_layer_cls: list[float]
    per_layer_pts: list[float]
    p_dist: np.ndarray
    total: float
    w_cls: float = 1.0
    w_pts: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def mean_p_dist(self) -> float:
        return float(self.p_dist.mean()) if self.p_dist.size else float("nan")

    def recomputed_total(self) -> float:
        return self.w_cls * sum(self.per_layer_cls) + self.w_pts * sum(self.per_layer_pts)


def _pts_loss(points, t: GroupTargets) -> Tensor:
    """Mean over matched pairs of the per-point L1 distance."""
    points = as_tensor(points)
    if not len(t.match):
        return points.sum() * 0.0
    chosen = take(points, t.match.pred_indices)
    n_v = t.gt_points.shape[1]
    return tabs(chosen - t.gt_points).sum() * (1.0 / (n_v * len(t.match)))


def total_loss(groups, cfg: LossConfig) -> LossBreakdown:
    """Weighted classification plus localization loss over layers and query groups.

    ``groups`` is a list (one entry per query group) of per-layer lists of
    ``(scores, points, GroupTargets)`` triples.
    """
    per_cls: list[Tensor] = []
    per_pts: list[Tensor] = []
    p_dist = []
    for l in range(cfg.num_layers):
        cls_l = None
        pts_l = None
        for layers in groups:
            scores, points, tg = layers[l]
            c = layer_cls_loss(scores, tg.cls, use_dafl=l >= cfg.layers_fl, gamma=cfg.gamma)
            d = _pts_loss(points, tg)
            cls_l = c if cls_l is None else cls_l + c
            pts_l = d if pts_l is None else pts_l + d
            p_dist.append(tg.p_dist)
        per_cls.append(cls_l)
        per_pts.append(pts_l)
    total = concat([t.reshape(1) for t in per_cls]).sum() * cfg.w_cls + concat(
        [t.reshape(1) for t in per_pts]
    ).sum() * cfg.w_pts
    return LossBreakdown(
        per_layer_cls=[float(t.data) for t in per_cls],
        per_layer_pts=[float(t.data) for t in per_pts],
        p_dist=np.concatenate(p_dist) if p_dist else np.zeros(0),
        total=float(total.data),
        w_cls=cfg.w_cls,
        w_pts=cfg.w_pts,
        tensor=total,
    )
