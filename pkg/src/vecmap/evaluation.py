"""Chamfer-distance AP / mAP and the score / localization diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CLASS_NAMES, NUM_CLASSES, MapScene, chamfer_distance, to_physical

HARD_THRESHOLDS = (0.2, 0.5, 1.0)
EASY_THRESHOLDS = (0.5, 1.0, 1.5)


class EvalError(ValueError):
    pass


@dataclass
class DetectionRecord:
    scene_id: int
    class_id: int
    score: float
    points: np.ndarray  # physical coordinates, meters
    matched_gt: int | None = None
    chamfer: float | None = None

    def __post_init__(self):
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise EvalError(f"score must lie in [0, 1], got {self.score}")
        self.points = np.asarray(self.points, dtype=np.float64)


def detections_from_scenes(scenes: list[MapScene], scores: list[list[float]]) -> list[DetectionRecord]:
    """One record per predicted instance, with points converted to meters."""
    if len(scenes) != len(scores):
        raise EvalError(f"{len(scenes)} prediction scenes but {len(scores)} score lists")
    out = []
    for sid, (scene, sc) in enumerate(zip(scenes, scores)):
        if len(sc) != len(scene.instances):
            raise EvalError(f"scene {sid}: {len(scene.instances)} instances but {len(sc)} scores")
        for inst, s in zip(scene.instances, sc):
            out.append(DetectionRecord(sid, inst.class_id, s, to_physical(inst.points, scene)))
    return out


@dataclass
class ClassMatch:
    """Greedy score-order assignment of one class's detections."""

    order: list[int]  # indices into the prediction list, processing order
    tp: list[bool]
    matched_gt: list[int | None]  # (scene_id, gt index) flattened to a global GT id
    chamfer: list[float]  # distance to the chosen GT, inf when no GT was left
    n_gt: int


def _gt_table(gts: list[MapScene], class_id: int) -> list[tuple[int, int, np.ndarray]]:
    table = []
    for sid, scene in enumerate(gts):
        for gi, inst in enumerate(scene.instances):
            if inst.class_id == class_id:
                table.append((sid, gi, to_physical(inst.points, scene)))
    return table


def greedy_match(preds: list[DetectionRecord], gts: list[MapScene], class_id: int, tau_m: float) -> ClassMatch:
    """Each detection, highest score first (ties: lower index), takes the
    unmatched same-scene GT with the smallest Chamfer distance; it is a TP if
    that distance is below ``tau_m``. Use ``tau_m=inf`` for matching without
    a threshold."""
    table = _gt_table(gts, class_id)
    by_scene: dict[int, list[int]] = {}
    for gid, (sid, _, _) in enumerate(table):
        by_scene.setdefault(sid, []).append(gid)
    idx = [i for i, p in enumerate(preds) if p.class_id == class_id]
    order = sorted(idx, key=lambda i: (-preds[i].score, i))
    taken = set()
    tp, matched, dists = [], [], []
    for i in order:
        best, best_d = None, math.inf
        for gid in by_scene.get(preds[i].scene_id, []):
            if gid in taken:
                continue
            d = chamfer_distance(preds[i].points, table[gid][2])
            if d < best_d:
                best, best_d = gid, d
        hit = best is not None and best_d < tau_m
        if hit:
            taken.add(best)
        tp.append(hit)
        matched.append(best if hit else None)
        dists.append(best_d)
    return ClassMatch(order, tp, matched, dists, len(table))


def average_precision(tp: list[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list."""
    if n_gt == 0:
        return 0.0
    hits = 0
    precision = []
    for k, t in enumerate(tp, start=1):
        hits += bool(t)
        precision.append(hits / k)
    # right-to-left running max makes precision monotone
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    # each TP raises recall by 1 / n_gt
    return math.fsum(p for p, t in zip(precision, tp) if t) / n_gt


def ap_at_threshold(preds: list[DetectionRecord], gts: list[MapScene], class_id: int, tau_m: float) -> float:
    if not tau_m > 0:
        raise EvalError("tau_m must be positive")
    m = greedy_match(preds, gts, class_id, tau_m)
    return average_precision(m.tp, m.n_gt)


@dataclass
class EvalReport:
    ap: dict[str, dict[str, float]]  # class name -> threshold -> AP
    map_hard: float
    map_easy: float
    curves: dict[str, dict] = field(default_factory=dict)
    histograms: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _tkey(t: float) -> str:
    return f"{t:g}"


def map_report(
    preds: list[DetectionRecord],
    gts: list[MapScene],
    hard=HARD_THRESHOLDS,
    easy=EASY_THRESHOLDS,
) -> EvalReport:
    """AP per class and threshold; mAP of a setting is the mean of its
    ``classes x thresholds`` grid."""
    warnings = []
    ap: dict[str, dict[str, float]] = {}
    for c in range(NUM_CLASSES):
        n_gt = sum(1 for s in gts for i in s.instances if i.class_id == c)
        if n_gt == 0:
            warnings.append(f"class {CLASS_NAMES[c]} has no ground truth; AP set to 0")
        ap[CLASS_NAMES[c]] = {_tkey(t): ap_at_threshold(preds, gts, c, t) for t in sorted(set(hard) | set(easy))}

    def mean_ap(ths):
        return math.fsum(ap[n][_tkey(t)] for n in CLASS_NAMES for t in ths) / (NUM_CLASSES * len(ths))

    meta = {
        "tp_assignment": "greedy in score order, nearest unmatched GT by Chamfer distance, TP if distance < threshold",
        "interpolation": "all-point, precision made monotone right to left",
        "tie_break": "equal scores processed in input order",
        "hard_thresholds_m": list(hard),
        "easy_thresholds_m": list(easy),
        "n_scenes": len(gts),
        "n_predictions": len(preds),
        "warnings": warnings,
    }
    return EvalReport(ap, mean_ap(hard), mean_ap(easy), metadata=meta)


# ------------------------------------------------------------ diagnostics
@dataclass
class RecallCurve:
    thresholds: list[float]
    recall: list[float]
    tau_m: float

    def to_csv(self) -> str:
        return _csv(["threshold", "recall"], zip(self.thresholds, self.recall))


@dataclass
class Histogram:
    edges: list[float]
    freq: list[float]
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_csv(self) -> str:
        return _csv(["bin_lo", "bin_hi", "freq"], zip(self.edges[:-1], self.edges[1:], self.freq))

    def to_dict(self) -> dict:
        return {"edges": self.edges, "freq": self.freq, "count": self.count, "empty": self.empty}


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) for v in r])
    return buf.getvalue()


def _histogram(values, edges: np.ndarray) -> Histogram:
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        return Histogram(edges.tolist(), [0.0] * (len(edges) - 1), 0)
    # values beyond the last edge (including inf) land in the last bin
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return Histogram(edges.tolist(), (counts / n).tolist(), n)


def _all_matches(preds, gts, tau_m) -> list[ClassMatch]:
    return [greedy_match(preds, gts, c, tau_m) for c in range(NUM_CLASSES)]


def recall_vs_score(preds, gts, tau_m: float = 0.5, score_grid=None) -> RecallCurve:
    """Recall of the detections scoring at least ``s``, for each cut ``s``.

    Greedy matching processes detections in score order, so the matches among
    detections above a cut are exactly the full run's matches restricted to them.
    """
    grid = np.linspace(0.0, 1.0, 21) if score_grid is None else np.asarray(score_grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0) or (grid.size and (grid.min() < 0 or grid.max() > 1)):
        raise EvalError("score_grid must be ascending within [0, 1]")
    matches = _all_matches(preds, gts, tau_m)
    n_gt = sum(m.n_gt for m in matches)
    tp_scores = np.array([preds[i].score for m in matches for i, t in zip(m.order, m.tp) if t])
    recall = [float((tp_scores >= s).sum() / n_gt) if n_gt else 0.0 for s in grid]
    return RecallCurve(grid.tolist(), recall, tau_m)


def score_histograms(preds, gts, tau_m: float = 0.5, bins: int = 10) -> tuple[Histogram, Histogram]:
    """Score frequencies of the TP and the FP detections at ``tau_m``."""
    if bins < 1:
        raise EvalError("bins must be >= 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    tp, fp = [], []
    for m in _all_matches(preds, gts, tau_m):
        for i, t in zip(m.order, m.tp):
            (tp if t else fp).append(preds[i].score)
    return _histogram(tp, edges), _histogram(fp, edges)


def loc_quality_histogram(preds, gts, score_cut: float = 0.9, bins: int = 10, max_distance: float = 1.5) -> Histogram:
    """Chamfer distances of detections scoring at least ``score_cut``.

    Distances come from greedy matching without a threshold; a detection left
    without a GT counts as infinitely far. Bins span ``[0, max_distance]`` and
    the last bin also holds everything beyond it.
    """
    if bins < 1:
        raise EvalError("bins must be >= 1")
    edges = np.linspace(0.0, max_distance, bins + 1)
    d = []
    for m in _all_matches(preds, gts, math.inf):
        d.extend(dist for i, dist in zip(m.order, m.chamfer) if preds[i].score >= score_cut)
    return _histogram(d, edges)


def annotate(preds: list[DetectionRecord], gts: list[MapScene], tau_m: float) -> list[DetectionRecord]:
    """Copies of ``preds`` with ``matched_gt`` / ``chamfer`` filled from the greedy run."""
    out = [DetectionRecord(p.scene_id, p.class_id, p.score, p.points) for p in preds]
    for m in _all_matches(preds, gts, tau_m):
        for i, g, dist in zip(m.order, m.matched_gt, m.chamfer):
            out[i].matched_gt = g
            out[i].chamfer = None if math.isinf(dist) else dist
    return out
