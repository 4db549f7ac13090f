"""Point-level and instance-level set matching plus one-to-many GT replication."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import PolylineInstance, equivalent_permutations


class MatchingError(ValueError):
    pass


@dataclass
class MatchConfig:
    w_cls: float = 2.0
    w_pts: float = 5.0
    k_one2many: int = 6

    def __post_init__(self):
        if self.w_cls < 0 or self.w_pts < 0:
            raise MatchingError("matching weights must be non-negative")
        if self.k_one2many < 0:
            raise MatchingError("k_one2many must be non-negative")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    point_perm: list[np.ndarray] = field(default_factory=list)
    pair_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    unmatched_preds: list[int] = field(default_factory=list)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)


def point_match(pred_points, gt: PolylineInstance) -> tuple[np.ndarray, float]:
    """Equivalent ordering of ``gt`` with the smallest summed L1 distance to ``pred_points``.

    Ties resolve to the first ordering in enumeration order.
    """
    pred = np.asarray(pred_points, dtype=np.float64)
    if pred.shape != gt.points.shape:
        raise MatchingError(f"point count mismatch: {pred.shape} vs {gt.points.shape}")
    perms = equivalent_permutations(gt)
    costs = np.abs(gt.points[perms] - pred[None]).sum(axis=(1, 2))
    best = int(np.argmin(costs))
    return perms[best], float(costs[best])


def _padded_permutations(gts: list[PolylineInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Stack every GT's orderings, padding short sets by repeating the identity.

    Padding sits after the real orderings, so first-minimum selection is unchanged.
    """
    perm_sets = [equivalent_permutations(g) for g in gts]
    n_max = max(len(p) for p in perm_sets)
    padded = np.stack([
        np.concatenate([p, np.repeat(p[:1], n_max - len(p), axis=0)]) for p in perm_sets
    ])
    gt_pts = np.stack([g.points for g in gts])
    return padded, np.take_along_axis(gt_pts[:, None], padded[..., None], axis=2)


def point_cost_matrix(pred_points, gts: list[PolylineInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Point-match every prediction against every GT.

    Returns ``(cost, perms)``, with ``cost[i, k]`` the minimal L1 sum and
    ``perms[i, k]`` the chosen ordering of GT ``k``.
    """
    pred = np.asarray(pred_points, dtype=np.float64)
    n_pred = len(pred)
    if not gts:
        return np.zeros((n_pred, 0)), np.zeros((n_pred, 0, pred.shape[1]), dtype=np.int64)
    if pred.shape[1:] != gts[0].points.shape:
        raise MatchingError(f"point count mismatch: {pred.shape[1:]} vs {gts[0].points.shape}")
    padded, gt_perm_pts = _padded_permutations(gts)  # (G, O), (G, O, N, 2)
    diff = np.abs(pred[:, None, None] - gt_perm_pts[None])  # (P, G, O, N, 2)
    costs = diff.sum(axis=(3, 4))
    best = costs.argmin(axis=2)
    cost = np.take_along_axis(costs, best[..., None], axis=2)[..., 0]
    perms = padded[np.arange(len(gts))[None, :], best]
    return cost, perms


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of every column of an ``m x n`` matrix.

    When ``m < n`` the matrix is padded with dummy rows; columns landing on a
    dummy row are left unassigned. Returns ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    m, n = cost.shape
    if m == 0 or n == 0:
        return []
    padded = cost
    if m < n:
        big = (np.abs(cost).max() + 1.0) * (m + n)
        padded = np.vstack([cost, np.full((n - m, n), big)])
    rows, cols = linear_sum_assignment(padded)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if r < m]


def cost_matrix(scores, points, gts: list[PolylineInstance], cfg: MatchConfig) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    pts_cost, perms = point_cost_matrix(points, gts)
    labels = np.array([g.class_id for g in gts], dtype=np.int64)
    cls_cost = -scores[:, labels] if len(gts) else np.zeros((len(scores), 0))
    return cfg.w_cls * cls_cost + cfg.w_pts * pts_cost, perms


def assign(cost: np.ndarray, perms: np.ndarray) -> MatchResult:
    pairs = hungarian(cost)
    matched = {p for p, _ in pairs}
    return MatchResult(
        pairs=pairs,
        point_perm=[perms[p, g] for p, g in pairs],
        pair_cost=np.array([cost[p, g] for p, g in pairs]),
        unmatched_preds=[i for i in range(cost.shape[0]) if i not in matched],
    )


def instance_match(preds, gts, cfg: MatchConfig | None = None) -> MatchResult:
    """Hungarian matching of predictions to GT instances.

    ``preds`` needs ``scores`` (P, K) probabilities and ``points`` (P, N_v, 2);
    ``gts`` is a :class:`MapScene` or a list of instances.
    """
    cfg = cfg or MatchConfig()
    gt_list = list(getattr(gts, "instances", gts))
    scores = np.asarray(getattr(preds.scores, "data", preds.scores))
    points = np.asarray(getattr(preds.points, "data", preds.points))
    cost, perms = cost_matrix(scores, points, gt_list, cfg)
    return assign(cost, perms)


def replicate_gt(gts, k: int) -> list[PolylineInstance]:
    """The GT list repeated ``k`` times in order, as independent copies."""
    if k < 0:
        raise MatchingError("k must be non-negative")
    gt_list = list(getattr(gts, "instances", gts))
    return [g.copy() for _ in range(k) for g in gt_list]
