"""Synthetic scenes and the rasterized BEV stand-in for a camera backbone."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    DEFAULT_NUM_POINTS,
    LANE_DIVIDER,
    NUM_CLASSES,
    PED_CROSSING,
    ROAD_BOUNDARY,
    MapScene,
    PolylineInstance,
)


class DataError(ValueError):
    pass


@dataclass
class GeneratorParams:
    min_instances: int = 3
    max_instances: int = 5
    class_proportions: tuple[float, float, float] = (0.25, 0.4, 0.35)
    n_points: int = DEFAULT_NUM_POINTS
    noise_sigma: float = 0.05
    min_separation: float = 0.06  # normalized; between instances of one class
    margin: float = 0.04
    stamp_sigma: float = 1.0  # grid cells; width of the rasterized line falloff

    def __post_init__(self):
        self.class_proportions = tuple(float(p) for p in self.class_proportions)
        if len(self.class_proportions) != NUM_CLASSES or min(self.class_proportions) < 0:
            raise DataError("class_proportions needs one non-negative entry per class")
        if abs(sum(self.class_proportions) - 1.0) > 1e-9:
            raise DataError("class_proportions must sum to 1")
        if not 0 <= self.min_instances <= self.max_instances:
            raise DataError("need 0 <= min_instances <= max_instances")
        if self.n_points < 4:
            raise DataError("n_points must be at least 4")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")
        if not self.stamp_sigma > 0:
            raise DataError("stamp_sigma must be positive")


@dataclass
class SceneDataset:
    scenes: list[MapScene]
    seed: int = 0
    params: GeneratorParams = field(default_factory=GeneratorParams)
    features: list[np.ndarray] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.scenes)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "generator": asdict(self.params), "scenes": [s.to_dict() for s in self.scenes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def ensure_features(self, bev_h: int, bev_w: int) -> list[np.ndarray]:
        if len(self.features) != len(self.scenes) or (
            self.features and self.features[0].shape[1:] != (bev_h, bev_w)
        ):
            self.features = [
                encode_bev(
                    s, bev_h, bev_w, self.params.noise_sigma, seed=scene_noise_seed(self.seed, i),
                    sigma=self.params.stamp_sigma,
                )
                for i, s in enumerate(self.scenes)
            ]
        return self.features


def scene_noise_seed(seed: int, index: int) -> list[int]:
    return [int(seed), int(index), 0xBE7]


# ------------------------------------------------------------------ geometry
def resample_polyline(points: np.ndarray, n: int, closed: bool = False) -> np.ndarray:
    """``n`` points equally spaced by arc length; closed rings exclude the repeated start."""
    pts = np.asarray(points, dtype=np.float64)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(pts[:1], n, axis=0)
    targets = np.linspace(0.0, total, n, endpoint=not closed) if not closed else np.arange(n) * total / n
    x = np.interp(targets, cum, pts[:, 0])
    y = np.interp(targets, cum, pts[:, 1])
    return np.stack([x, y], axis=1)


def _bezier(ctrl: np.ndarray, n: int = 64) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t ** 2 * ctrl[2]


def _open_curve(rng: np.random.Generator, class_id: int, margin: float) -> np.ndarray:
    lo, hi = margin, 1.0 - margin
    # dividers run mostly along the driving (y) axis; boundaries may bend more
    bend = 0.12 if class_id == LANE_DIVIDER else 0.25
    while True:
        x0 = rng.uniform(lo, hi)
        y0 = rng.uniform(lo, 0.45)
        length = rng.uniform(0.35, 0.9)
        heading = rng.normal(0.0, 0.35 if class_id == LANE_DIVIDER else 0.6)
        end = np.array([x0 + length * math.sin(heading) * 0.5, y0 + length * math.cos(heading)])
        start = np.array([x0, y0])
        mid = 0.5 * (start + end) + rng.normal(0.0, bend, size=2) * np.array([0.5, 0.2])
        curve = _bezier(np.stack([start, mid, end]))
        if curve.min() >= lo and curve.max() <= hi:
            if rng.uniform() < 0.5:
                curve = curve[::-1]
            return curve


def _quad(rng: np.random.Generator, margin: float) -> np.ndarray:
    lo, hi = margin, 1.0 - margin
    while True:
        c = rng.uniform(lo, hi, size=2)
        half = np.array([rng.uniform(0.08, 0.16), rng.uniform(0.03, 0.06)])
        theta = rng.uniform(-0.4, 0.4)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
        quad = corners @ rot.T * np.array([1.0, 1.0]) + c
        if quad.min() >= lo and quad.max() <= hi:
            return quad


def _separated(candidate: np.ndarray, others: list[np.ndarray], min_sep: float) -> bool:
    dense = resample_polyline(candidate, 40)
    for o in others:
        od = resample_polyline(o, 40)
        if np.sqrt(((dense[:, None] - od[None]) ** 2).sum(-1)).min() < min_sep:
            return False
    return True


def class_counts(n: int, proportions, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder split of ``n`` instances, remainders drawn at random."""
    ideal = np.asarray(proportions) * n
    counts = np.floor(ideal).astype(int)
    rest = n - counts.sum()
    if rest:
        frac = ideal - counts
        weights = frac / frac.sum() if frac.sum() > 0 else np.full(len(frac), 1 / len(frac))
        counts[rng.choice(len(counts), size=rest, replace=False, p=weights)] += 1
    return counts


def generate_scene(rng: np.random.Generator, params: GeneratorParams) -> MapScene:
    n = int(rng.integers(params.min_instances, params.max_instances + 1))
    counts = class_counts(n, params.class_proportions, rng)
    labels = [c for c in range(NUM_CLASSES) for _ in range(counts[c])]
    placed: dict[int, list[np.ndarray]] = {c: [] for c in range(NUM_CLASSES)}
    instances = []
    for c in labels:
        for _ in range(200):
            shape = _quad(rng, params.margin) if c == PED_CROSSING else _open_curve(rng, c, params.margin)
            if _separated(shape, placed[c], params.min_separation):
                break
        placed[c].append(shape)
        pts = resample_polyline(shape, params.n_points, closed=c == PED_CROSSING)
        instances.append(PolylineInstance(c, np.clip(pts, 0.0, 1.0)))
    return MapScene(instances)


def generate_scenes(seed: int, n_scenes: int, params: GeneratorParams | None = None) -> SceneDataset:
    """Deterministic synthetic dataset: smooth open curves and closed quads."""
    params = params or GeneratorParams()
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    scenes = [generate_scene(rng, params) for _ in range(n_scenes)]
    return SceneDataset(scenes, seed=seed, params=params)


# ------------------------------------------------------------------- raster
STAMP_SIGMA = 1.0  # grid cells


def _segments(inst: PolylineInstance) -> np.ndarray:
    pts = inst.points
    if inst.kind == "closed":
        pts = np.vstack([pts, pts[:1]])
    return np.stack([pts[:-1], pts[1:]], axis=1)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between points ``p`` (M, 2) and segments ``a->b`` (S, 2) -> (M, S)."""
    ab = b - a
    denom = (ab * ab).sum(-1)
    ap = p[:, None, :] - a[None]
    t = np.where(denom > 0, (ap * ab[None]).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((p[:, None, :] - closest) ** 2).sum(-1))


def rasterize(scene: MapScene, bev_h: int, bev_w: int, sigma: float = STAMP_SIGMA) -> np.ndarray:
    """Per-class soft line stamps ``exp(-d^2 / 2 sigma^2)`` with ``d`` in grid cells."""
    raster = np.zeros((NUM_CLASSES, bev_h, bev_w))
    scale = np.array([bev_w, bev_h], dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(bev_w), np.arange(bev_h))
    centers = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    for c in range(NUM_CLASSES):
        segs = [_segments(i) for i in scene.instances if i.class_id == c]
        if not segs:
            continue
        s = np.concatenate(segs) * scale
        d = point_segment_distance(centers, s[:, 0], s[:, 1]).min(axis=1)
        raster[c] = np.exp(-0.5 * (d / sigma) ** 2).reshape(bev_h, bev_w)
    return raster


def encode_bev(
    scene: MapScene, bev_h: int = 64, bev_w: int = 32, noise_sigma: float = 0.0, seed=0, sigma: float = STAMP_SIGMA
) -> np.ndarray:
    """Rasterized scene plus i.i.d. Gaussian noise; the learned projection lives in the model."""
    raster = rasterize(scene, bev_h, bev_w, sigma)
    if noise_sigma > 0:
        raster = raster + np.random.default_rng(seed).normal(0.0, noise_sigma, size=raster.shape)
    return raster


# ----------------------------------------------------------------------- IO
def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scene_file(path) -> tuple[list[MapScene], list[list[float]] | None, dict]:
    """Read a scene list (bare list or ``{"scenes": [...]}``).

    Returns scenes, per-instance scores when every instance carries a
    ``"score"`` (prediction files), and the remaining top-level fields.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scene file {path}: {exc}") from exc
    meta: dict = {}
    if isinstance(raw, dict):
        meta = {k: v for k, v in raw.items() if k != "scenes"}
        raw = raw.get("scenes")
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a list of scenes")
    scenes, scores = [], []
    has_scores = True
    try:
        for s in raw:
            scenes.append(MapScene.from_dict(s))
            sc = [i.get("score") for i in s.get("instances", [])]
            if any(v is None for v in sc):
                has_scores = False
            scores.append([float(v) for v in sc if v is not None])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"{path}: malformed scene entry: {exc}") from exc
    return scenes, (scores if has_scores else None), meta


def load_dataset(path) -> SceneDataset:
    scenes, _, meta = load_scene_file(path)
    params = GeneratorParams(**meta["generator"]) if "generator" in meta else GeneratorParams(
        n_points=scenes[0].instances[0].num_points if scenes and scenes[0].instances else DEFAULT_NUM_POINTS
    )
    return SceneDataset(scenes, seed=int(meta.get("seed", 0)), params=params)


def predictions_to_dict(scenes: list[MapScene], scores: list[list[float]]) -> dict:
    out = []
    for scene, sc in zip(scenes, scores):
        d = scene.to_dict()
        for inst, s in zip(d["instances"], sc):
            inst["score"] = float(s)
        out.append(d)
    return {"scenes": out}
