"""Vectorized map data model.

Coordinates are meters in an intersection-centered, right-handed BEV frame
(x right, y forward). The normalized unit-square form is only used inside
the network and the training losses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import shapely.geometry as sg

from .errors import DegenerateGeometryError, OutOfRangeError

DEFAULT_NUM_POINTS = 20
MIN_RETAINED_LENGTH = 1.0


class MapClass(enum.IntEnum):
    PED_CROSSING = 0
    DIVIDER = 1
    BOUNDARY = 2


CLASS_NAMES = {MapClass.PED_CROSSING: "ped_crossing", MapClass.DIVIDER: "divider", MapClass.BOUNDARY: "boundary"}
NUM_CLASSES = len(MapClass)


def class_is_closed(class_id: int) -> bool:
    """Crossings are polygons; dividers and boundaries are polylines."""
    return MapClass(class_id) == MapClass.PED_CROSSING


@dataclass(frozen=True)
class PerceptionRange:
    x_min: float = -30.0
    x_max: float = 30.0
    y_min: float = -30.0
    y_max: float = 30.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"empty perception range {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min])

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (
            (points[..., 0] >= self.x_min - tol)
            & (points[..., 0] <= self.x_max + tol)
            & (points[..., 1] >= self.y_min - tol)
            & (points[..., 1] <= self.y_max + tol)
        )

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptionRange":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]))


def _frozen_array(points) -> np.ndarray:
    arr = np.array(points, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MapElement:
    """One map instance: a class label and an ordered point set in meters.

    Closed elements are read cyclically and never store a repeated closing vertex.
    """

    class_id: MapClass
    points: np.ndarray
    is_closed: bool

    def __post_init__(self):
        object.__setattr__(self, "class_id", MapClass(int(self.class_id)))
        pts = _frozen_array(self.points)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"points must be (n>=2, 2), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "is_closed", bool(self.is_closed))

    @property
    def num_points(self) -> int:
        return len(self.points)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "is_closed": self.is_closed,
            "points": [[float(x), float(y)] for x, y in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapElement":
        return cls(MapClass(int(d["class_id"])), np.asarray(d["points"], dtype=float), bool(d["is_closed"]))

    def allclose(self, other: "MapElement", atol: float = 1e-6) -> bool:
        return (
            self.class_id == other.class_id
            and self.is_closed == other.is_closed
            and self.points.shape == other.points.shape
            and np.allclose(self.points, other.points, atol=atol, rtol=0)
        )


@dataclass(frozen=True, eq=False)
class VectorizedMap:
    elements: tuple[MapElement, ...]
    range: PerceptionRange = field(default_factory=PerceptionRange)
    scene_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        for el in self.elements:
            if not self.range.contains(el.points).all():
                raise OutOfRangeError(f"element of class {el.class_id.name} leaves the perception range")

    def __len__(self) -> int:
        return len(self.elements)

    def of_class(self, class_id: int) -> list[MapElement]:
        return [el for el in self.elements if el.class_id == class_id]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "range": self.range.to_dict(),
            "elements": [el.to_dict() for el in self.elements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VectorizedMap":
        return cls(
            tuple(MapElement.from_dict(e) for e in d["elements"]),
            PerceptionRange.from_dict(d["range"]),
            str(d.get("scene_id", "")),
        )

    def allclose(self, other: "VectorizedMap", atol: float = 1e-6) -> bool:
        return (
            self.scene_id == other.scene_id
            and self.range == other.range
            and len(self) == len(other)
            and all(a.allclose(b, atol) for a, b in zip(self.elements, other.elements))
        )


@dataclass(frozen=True)
class PermutationGroup:
    """Equivalent point orderings of one element; member 0 is the identity."""

    permutations: np.ndarray  # (K, n) int

    def __len__(self) -> int:
        return len(self.permutations)


def normalize_points(points, rng: PerceptionRange) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if not rng.contains(points).all():
        raise OutOfRangeError("points outside the perception range; clip before normalizing")
    return np.clip((points - rng.lower) / rng.size, 0.0, 1.0)


def denormalize_points(points, rng: PerceptionRange) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise OutOfRangeError("normalized coordinates must lie in [0, 1]")
    return points * rng.size + rng.lower


def permutation_group(n_points: int, is_closed: bool) -> PermutationGroup:
    """Orderings considered equivalent: reversal for polylines, plus all
    cyclic shifts for polygons (2 * n members)."""
    if n_points < 2:
        raise ValueError(f"need at least 2 points, got {n_points}")
    base = np.arange(n_points)
    if not is_closed:
        perms = np.stack([base, base[::-1]])
    else:
        shifts = [np.roll(base, -s) for s in range(n_points)]
        rev = base[::-1]
        shifts += [np.roll(rev, -s) for s in range(n_points)]
        perms = np.stack(shifts)
    perms.setflags(write=False)
    return PermutationGroup(perms)


def _cumulative_length(points: np.ndarray, is_closed: bool) -> tuple[np.ndarray, np.ndarray]:
    verts = np.vstack([points, points[:1]]) if is_closed else points
    seg = np.linalg.norm(np.diff(verts, axis=0), axis=1)
    return verts, np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points, is_closed: bool = False) -> float:
    _, cum = _cumulative_length(np.asarray(points, dtype=float), is_closed)
    return float(cum[-1])


def resample_polyline(points, n_target: int, is_closed: bool) -> np.ndarray:
    """Place ``n_target`` points at equal arclength spacing, starting at the first vertex."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise DegenerateGeometryError("need at least two points")
    verts, cum = _cumulative_length(points, is_closed)
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateGeometryError("polyline has zero length")
    if is_closed:
        s = np.arange(n_target) * (total / n_target)
    else:
        s = np.linspace(0.0, total, n_target)
    x = np.interp(s, cum, verts[:, 0])
    y = np.interp(s, cum, verts[:, 1])
    return np.stack([x, y], axis=1)


def _longest_part(geom):
    if geom.is_empty:
        return None
    parts = getattr(geom, "geoms", [geom])
    parts = [g for g in parts if g.geom_type in ("LineString", "Polygon", "LinearRing")]
    if not parts:
        return None
    return max(parts, key=lambda g: g.length)


def clip_element(
    class_id: int,
    points,
    is_closed: bool,
    rng: PerceptionRange,
    n_points: int = DEFAULT_NUM_POINTS,
    min_length: float = MIN_RETAINED_LENGTH,
) -> MapElement | None:
    """Clip raw geometry to the range and resample it to ``n_points``.

    Returns None when less than ``min_length`` meters of outline remain.
    """
    points = np.asarray(points, dtype=float)
    box = sg.box(rng.x_min, rng.y_min, rng.x_max, rng.y_max)
    if is_closed:
        part = _longest_part(sg.Polygon(points).intersection(box))
        if part is None or part.geom_type != "Polygon" or part.area <= 0.0:
            return None
        coords = np.asarray(part.exterior.coords)[:-1]
        # keep the original winding sense and start near the original first vertex
        if sg.Polygon(points).exterior.is_ccw != part.exterior.is_ccw:
            coords = coords[::-1]
        start = int(np.argmin(np.linalg.norm(coords - points[0], axis=1)))
        coords = np.roll(coords, -start, axis=0)
    else:
        part = _longest_part(sg.LineString(points).intersection(box))
        if part is None or part.geom_type != "LineString":
            return None
        coords = np.asarray(part.coords)
        # shapely may flip direction; keep the input orientation
        if np.linalg.norm(coords[0] - points[0]) > np.linalg.norm(coords[-1] - points[0]):
            coords = coords[::-1]
    if polyline_length(coords, is_closed) < min_length:
        return None
    pts = resample_polyline(coords, n_points, is_closed)
    pts[:, 0] = np.clip(pts[:, 0], rng.x_min, rng.x_max)
    pts[:, 1] = np.clip(pts[:, 1], rng.y_min, rng.y_max)
    return MapElement(MapClass(class_id), pts, is_closed)


def make_map(
    raw: Iterable[tuple[int, Sequence, bool]],
    rng: PerceptionRange | None = None,
    scene_id: str = "",
    n_points: int = DEFAULT_NUM_POINTS,
) -> VectorizedMap:
    """Build a VectorizedMap from raw (class, points, closed) triples, clipping as needed."""
    rng = rng or PerceptionRange()
    elements = []
    for class_id, pts, closed in raw:
        el = clip_element(class_id, pts, closed, rng, n_points)
        if el is not None:
            elements.append(el)
    return VectorizedMap(tuple(elements), rng, scene_id)
