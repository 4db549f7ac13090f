"""Map-element representation, equivalent orderings, coordinates and Chamfer distance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("pedestrian_crossing", "lane_divider", "road_boundary")
PED_CROSSING, LANE_DIVIDER, ROAD_BOUNDARY = range(3)
NUM_CLASSES = len(CLASS_NAMES)
DEFAULT_NUM_POINTS = 20


def default_kind(class_id: int) -> str:
    """Crossings are closed polygons; dividers and boundaries are open polylines."""
    return "closed" if class_id == PED_CROSSING else "open"


class GeometryError(ValueError):
    pass


@dataclass(eq=False)
class PolylineInstance:
    class_id: int
    points: np.ndarray
    kind: str = ""

    def __post_init__(self):
        self.class_id = int(self.class_id)
        if not 0 <= self.class_id < NUM_CLASSES:
            raise GeometryError(f"unknown class id {self.class_id}")
        if not self.kind:
            self.kind = default_kind(self.class_id)
        if self.kind not in ("open", "closed"):
            raise GeometryError(f"kind must be open|closed, got {self.kind!r}")
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError(f"points must be (N_v, 2) with N_v >= 2, got {pts.shape}")
        if not np.all(np.isfinite(pts)) or pts.min() < 0.0 or pts.max() > 1.0:
            raise GeometryError("normalized coordinates must lie in [0, 1]")
        self.points = pts

    @property
    def num_points(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolylineInstance):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.kind == other.kind
            and np.array_equal(self.points, other.points)
        )

    def copy(self) -> PolylineInstance:
        return PolylineInstance(self.class_id, self.points.copy(), self.kind)

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "kind": self.kind, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PolylineInstance:
        return cls(int(d["class_id"]), np.asarray(d["points"], dtype=np.float64), d.get("kind", ""))


@dataclass(eq=False)
class MapScene:
    instances: list[PolylineInstance] = field(default_factory=list)
    range_x: float = 15.0
    range_y: float = 30.0

    def __post_init__(self):
        counts = {inst.num_points for inst in self.instances}
        if len(counts) > 1:
            raise GeometryError(f"all instances need the same point count, got {sorted(counts)}")
        if self.range_x <= 0 or self.range_y <= 0:
            raise GeometryError("ranges must be positive")

    def __len__(self) -> int:
        return len(self.instances)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapScene):
            return NotImplemented
        return (
            self.range_x == other.range_x
            and self.range_y == other.range_y
            and self.instances == other.instances
        )

    def to_dict(self) -> dict:
        return {
            "range_x": self.range_x,
            "range_y": self.range_y,
            "instances": [inst.to_dict() for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MapScene:
        return cls(
            [PolylineInstance.from_dict(i) for i in d.get("instances", [])],
            float(d.get("range_x", 15.0)),
            float(d.get("range_y", 30.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> MapScene:
        return cls.from_dict(json.loads(text))


def equivalent_permutations(inst: PolylineInstance) -> np.ndarray:
    """Index orderings describing the same element, identity first.

    Open elements admit forward and reversed traversal. Closed elements admit
    every cyclic shift in both directions. Returns ``(n_orderings, N_v)``.
    """
    n = inst.num_points
    fwd = np.arange(n)
    if inst.kind == "open":
        return np.stack([fwd, fwd[::-1]])
    shifts = (fwd[None, :] + fwd[:, None]) % n
    return np.concatenate([shifts, shifts[:, ::-1]], axis=0)


def to_physical(points, scene: MapScene | None = None, range_x: float = 15.0, range_y: float = 30.0) -> np.ndarray:
    """Map normalized ``[0, 1]^2`` coordinates to metres in ``[-rx, rx] x [-ry, ry]``."""
    if scene is not None:
        range_x, range_y = scene.range_x, scene.range_y
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] != 2:
        raise GeometryError(f"points need a trailing axis of 2, got {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise GeometryError("normalized coordinates must lie in [0, 1]")
    scale = np.array([2.0 * range_x, 2.0 * range_y])
    return (p - 0.5) * scale


def from_physical(points, scene: MapScene | None = None, range_x: float = 15.0, range_y: float = 30.0) -> np.ndarray:
    if scene is not None:
        range_x, range_y = scene.range_x, scene.range_y
    p = np.asarray(points, dtype=np.float64)
    scale = np.array([2.0 * range_x, 2.0 * range_y])
    return p / scale + 0.5


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point lists."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("chamfer distance needs non-empty point lists")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))
