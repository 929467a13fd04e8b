"""Procedural 4-way intersections seen by four corner-mounted roadside cameras.

Scenes are built from a tiny grammar: each of the four approaches gets an
inbound and outbound lane count, two road-edge boundaries, a center divider,
lane dividers between same-direction lanes, and one pedestrian crossing
polygon in front of the junction box. Cameras are rendered by casting each
pixel's ray onto the ground plane and looking up a BEV raster of the scene.
"""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigurationError
from .map_model import (
    DEFAULT_NUM_POINTS,
    MapClass,
    MapElement,
    PerceptionRange,
    VectorizedMap,
    make_map,
)

FORMAT_VERSION = 1
NUM_VIEWS = 4

# approach headings: unit vector pointing away from the junction, and its left normal
_APPROACHES = {
    "east": (np.array([1.0, 0.0]), np.array([0.0, 1.0])),
    "north": (np.array([0.0, 1.0]), np.array([-1.0, 0.0])),
    "west": (np.array([-1.0, 0.0]), np.array([0.0, -1.0])),
    "south": (np.array([0.0, -1.0]), np.array([1.0, 0.0])),
}


@dataclass(frozen=True)
class SceneParams:
    lane_width: float = 3.5
    lanes_per_approach: tuple[int, int] = (1, 2)  # inclusive range, per direction
    crossing_width: float = 4.0
    curvature_jitter: float = 1.0
    texture_noise: float = 0.15
    image_size: tuple[int, int] = (128, 128)
    camera_height: float = 6.0
    camera_pitch_deg: float = 20.0
    camera_offset: float = 14.0
    focal_length: float = 64.0
    palette: dict = field(
        default_factory=lambda: {
            "ped_crossing": (70, 110, 235),
            "divider": (235, 215, 60),
            "boundary": (60, 200, 90),
        }
    )
    range: PerceptionRange = field(default_factory=PerceptionRange)
    n_points: int = DEFAULT_NUM_POINTS

    def __post_init__(self):
        lo, hi = self.lanes_per_approach
        if self.lane_width <= 0 or self.crossing_width <= 0 or self.curvature_jitter < 0:
            raise ConfigurationError("physical dimensions must be positive")
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad lane count range {self.lanes_per_approach}")
        if not 0.0 <= self.texture_noise <= 1.0:
            raise ConfigurationError("texture_noise must lie in [0, 1]")
        if self.focal_length <= 0 or min(self.image_size) <= 0:
            raise ConfigurationError("camera intrinsics must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["range"] = self.range.to_dict()
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        d["lanes_per_approach"] = list(self.lanes_per_approach)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        d = dict(d)
        d["range"] = PerceptionRange.from_dict(d["range"])
        d["palette"] = {k: tuple(v) for k, v in d["palette"].items()}
        d["lanes_per_approach"] = tuple(d["lanes_per_approach"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float]
    yaw: float  # heading of the optical axis in the ground plane, radians from +x
    pitch: float  # downward tilt, radians
    roll: float
    focal_length: float
    principal_point: tuple[float, float]  # (u, v) pixels
    image_size: tuple[int, int]  # (h, w)

    def __post_init__(self):
        if self.focal_length <= 0 or min(self.image_size) <= 0:
            raise ConfigurationError("focal length and image size must be positive")

    def rotation(self) -> np.ndarray:
        """Rows are the camera right, down and forward axes in world coordinates."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cp * cy, cp * sy, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        right, down = cr * right + sr * down, -sr * right + cr * down
        return np.stack([right, down, forward])

    def check(self):
        if self.position[2] <= 0:
            raise ConfigurationError("camera must be above the ground plane")
        if self.rotation()[2, 2] >= 0:
            raise ConfigurationError("camera must look down towards the ground plane")

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
            "focal_length": self.focal_length,
            "principal_point": list(self.principal_point),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(
            tuple(d["position"]),
            float(d["yaw"]),
            float(d["pitch"]),
            float(d["roll"]),
            float(d["focal_length"]),
            tuple(d["principal_point"]),
            tuple(d["image_size"]),
        )


@dataclass(frozen=True, eq=False)
class SceneSample:
    images: tuple[np.ndarray, ...]  # 4 x (h, w, 3) uint8
    cameras: tuple[CameraSpec, ...]
    gt: VectorizedMap
    seed: int

    def __post_init__(self):
        if len(self.images) != NUM_VIEWS or len(self.cameras) != NUM_VIEWS:
            raise ConfigurationError("a scene has exactly four views")
        if len({im.shape for im in self.images}) != 1:
            raise ConfigurationError("all views must share one shape")
        if len(self.gt) == 0:
            raise ConfigurationError("ground truth map is empty")


def project_points(camera: CameraSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points (n, 3) or ground points (n, 2).

    Returns pixel coordinates (n, 2) as (u, v) and a mask of points in front of the camera.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] == 2:
        points = np.hstack([points, np.zeros((len(points), 1))])
    cam = (points - np.asarray(camera.position)) @ camera.rotation().T
    depth = cam[:, 2]
    front = depth > 1e-6
    safe = np.where(front, depth, 1.0)
    u = camera.focal_length * cam[:, 0] / safe + camera.principal_point[0]
    v = camera.focal_length * cam[:, 1] / safe + camera.principal_point[1]
    return np.stack([u, v], axis=1), front


def in_view(camera: CameraSpec, points: np.ndarray) -> np.ndarray:
    uv, front = project_points(camera, points)
    h, w = camera.image_size
    return front & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)


def corner_cameras(params: SceneParams) -> tuple[CameraSpec, ...]:
    h, w = params.image_size
    cams = []
    d = params.camera_offset
    for k, (sx, sy) in enumerate([(-1, -1), (1, -1), (1, 1), (-1, 1)]):
        pos = (sx * d, sy * d, params.camera_height)
        yaw = math.atan2(-sy, -sx)  # look at the junction center
        cams.append(
            CameraSpec(
                position=pos,
                yaw=yaw,
                pitch=math.radians(params.camera_pitch_deg),
                roll=0.0,
                focal_length=params.focal_length,
                principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
                image_size=(h, w),
            )
        )
    return tuple(cams)


def _bent_line(start: np.ndarray, end: np.ndarray, jitter: float, rs: np.random.Generator, n: int = 12):
    """Straight segment with a smooth sideways bow of random amplitude."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    direction = end - start
    normal = np.array([-direction[1], direction[0]]) / (np.linalg.norm(direction) + 1e-12)
    amp = rs.uniform(-jitter, jitter)
    return start + t * direction + (amp * np.sin(np.pi * t)) * normal


def _scene_layout(seed: int, params: SceneParams):
    rs = np.random.default_rng(seed)
    lo, hi = params.lanes_per_approach
    lw = params.lane_width
    far = 1.5 * max(abs(params.range.x_min), abs(params.range.x_max), abs(params.range.y_min), abs(params.range.y_max))
    lanes = {name: (int(rs.integers(lo, hi + 1)), int(rs.integers(lo, hi + 1))) for name in _APPROACHES}
    # half-widths of each road side, measured from the approach center line
    half = max(max(a, b) for a, b in lanes.values()) * lw
    box = half + 2.0
    raw = []
    for name, (out_dir, left) in _APPROACHES.items():
        n_in, n_out = lanes[name]
        # right-hand traffic: inbound lanes on the left of the outward heading
        start_d = box + params.crossing_width + 1.0
        offsets_boundary = (n_in * lw, -n_out * lw)
        for off in offsets_boundary:
            a = out_dir * box + left * off
            b = out_dir * far + left * off
            raw.append((MapClass.BOUNDARY, _bent_line(a, b, params.curvature_jitter, rs), False))
        divider_offsets = [0.0]
        divider_offsets += [k * lw for k in range(1, n_in)]
        divider_offsets += [-k * lw for k in range(1, n_out)]
        for off in divider_offsets:
            a = out_dir * start_d + left * off
            b = out_dir * far + left * off
            raw.append((MapClass.DIVIDER, _bent_line(a, b, 0.5 * params.curvature_jitter, rs), False))
        c0 = box + 0.5
        c1 = c0 + params.crossing_width
        wl, wr = n_in * lw - 0.5, -n_out * lw + 0.5
        poly = np.array(
            [
                out_dir * c0 + left * wr,
                out_dir * c1 + left * wr,
                out_dir * c1 + left * wl,
                out_dir * c0 + left * wl,
            ]
        )
        raw.append((MapClass.PED_CROSSING, poly, True))
    return rs, lanes, box, raw


def generate_scene(seed: int, params: SceneParams | None = None) -> tuple[VectorizedMap, tuple[CameraSpec, ...]]:
    """Deterministic scene map and camera rig for ``seed``."""
    params = params or SceneParams()
    _, _, _, raw = _scene_layout(seed, params)
    gt = make_map(raw, params.range, scene_id=f"scene_{seed:06d}", n_points=params.n_points)
    return gt, corner_cameras(params)


_BEV_RES = 0.1  # meters per BEV texture cell


def _bev_texture(gt: VectorizedMap, seed: int, params: SceneParams) -> tuple[np.ndarray, float]:
    """RGB ground texture covering 1.5x the range; returns (raster, half extent)."""
    rs = np.random.default_rng(seed + 7919)
    _, lanes, box, _ = _scene_layout(seed, params)
    half_ext = 1.5 * max(abs(v) for v in params.range.to_dict().values())
    n = int(round(2 * half_ext / _BEV_RES))
    grass = np.array([70, 95, 60]) + rs.integers(-15, 16, 3)
    asphalt = np.array([95, 95, 100]) + rs.integers(-20, 21, 3)
    img = Image.new("RGB", (n, n), tuple(int(c) for c in grass))
    draw = ImageDraw.Draw(img)

    def to_px(p):
        p = np.asarray(p, dtype=float)
        return [((x + half_ext) / _BEV_RES, (half_ext - y) / _BEV_RES) for x, y in p.reshape(-1, 2)]

    lw = params.lane_width
    for name, (out_dir, left) in _APPROACHES.items():
        n_in, n_out = lanes[name]
        quad = [
            out_dir * 0 + left * n_in * lw,
            out_dir * half_ext * 1.1 + left * n_in * lw,
            out_dir * half_ext * 1.1 - left * n_out * lw,
            out_dir * 0 - left * n_out * lw,
        ]
        draw.polygon(to_px(quad), fill=tuple(int(c) for c in asphalt))
    draw.rectangle(
        [*to_px([-box, box])[0], *to_px([box, -box])[0]], fill=tuple(int(c) for c in asphalt)
    )
    stroke = max(1, int(round(0.3 / _BEV_RES)))
    for el in gt.elements:
        color = tuple(int(c) for c in params.palette[_palette_key(el.class_id)])
        if el.is_closed:
            draw.polygon(to_px(el.points), fill=color)
        else:
            draw.line(to_px(el.points), fill=color, width=stroke, joint="curve")
    tex = np.asarray(img, dtype=np.float32)
    if params.texture_noise > 0:
        tex = tex + rs.normal(0.0, 40.0 * params.texture_noise, size=tex.shape[:2] + (1,)).astype(np.float32)
    return np.clip(tex, 0, 255), half_ext


def _palette_key(class_id) -> str:
    return {MapClass.PED_CROSSING: "ped_crossing", MapClass.DIVIDER: "divider", MapClass.BOUNDARY: "boundary"}[
        MapClass(class_id)
    ]


def ground_intersections(camera: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ground-plane hit point (h, w, 2) of every pixel center ray, plus a validity mask."""
    camera.check()
    h, w = camera.image_size
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays_cam = np.stack(
        [
            (u - camera.principal_point[0]) / camera.focal_length,
            (v - camera.principal_point[1]) / camera.focal_length,
            np.ones_like(u),
        ],
        axis=-1,
    )
    rays = rays_cam @ camera.rotation()
    z0 = camera.position[2]
    valid = rays[..., 2] < -1e-9
    t = np.where(valid, -z0 / np.where(valid, rays[..., 2], -1.0), 0.0)
    ground = np.asarray(camera.position[:2]) + t[..., None] * rays[..., :2]
    return ground, valid


def _sample_texture(tex: np.ndarray, half_ext: float, ground: np.ndarray, valid: np.ndarray, sky) -> np.ndarray:
    n = tex.shape[0]
    col = np.floor((ground[..., 0] + half_ext) / _BEV_RES).astype(int)
    row = np.floor((half_ext - ground[..., 1]) / _BEV_RES).astype(int)
    inside = valid & (col >= 0) & (col < n) & (row >= 0) & (row < n)
    out = np.empty(ground.shape[:2] + (3,), dtype=np.float32)
    out[...] = sky
    out[inside] = tex[row[inside], col[inside]]
    return out


_SKY = np.array([150, 180, 215], dtype=np.float32)


def _render_textured(tex, half_ext, camera: CameraSpec, params: SceneParams, seed: int, view_index: int) -> np.ndarray:
    ground, valid = ground_intersections(camera)
    img = _sample_texture(tex, half_ext, ground, valid, sky=_SKY)
    if params.texture_noise > 0:
        rs = np.random.default_rng([seed, view_index])
        img = img + rs.normal(0.0, 8.0 * params.texture_noise, size=img.shape).astype(np.float32)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_view(
    gt: VectorizedMap, camera: CameraSpec, params: SceneParams | None = None, seed: int = 0, view_index: int = 0
) -> np.ndarray:
    """Rasterize the ground-plane map as seen by ``camera``; returns (h, w, 3) uint8.

    Pixels whose rays never reach the ground (behind the camera or above the
    horizon) get a flat sky color, so nothing behind the camera is drawn.
    """
    params = params or SceneParams()
    tex, half_ext = _bev_texture(gt, seed, params)
    return _render_textured(tex, half_ext, camera, params, seed, view_index)


def render_ground_markers(points: np.ndarray, camera: CameraSpec, radius: float) -> np.ndarray:
    """Boolean (h, w) mask of pixels whose ground hit lies within ``radius`` of any point."""
    ground, valid = ground_intersections(camera)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = ((ground[..., None, :] - points[None, None]) ** 2).sum(-1).min(-1)
    return valid & (d2 <= radius**2)


def make_sample(seed: int, params: SceneParams | None = None) -> SceneSample:
    params = params or SceneParams()
    gt, cams = generate_scene(seed, params)
    tex, half_ext = _bev_texture(gt, seed, params)
    images = tuple(_render_textured(tex, half_ext, cam, params, seed, k) for k, cam in enumerate(cams))
    return SceneSample(images, cams, gt, seed)


def visible_view_counts(gt: VectorizedMap, cameras) -> list[int]:
    """For each element, how many cameras see at least one of its vertices."""
    return [sum(bool(in_view(cam, el.points).any()) for cam in cameras) for el in gt.elements]


# ---------------------------------------------------------------- persistence


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def split_ids(scene_ids: list[str], ratio: float = 0.75) -> dict:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"split ratio must lie in [0, 1], got {ratio}")
    n_train = int(math.floor(len(scene_ids) * ratio))
    return {"train": list(scene_ids[:n_train]), "val": list(scene_ids[n_train:])}


def export_dataset(
    samples: list[SceneSample],
    directory,
    params: SceneParams | None = None,
    split_ratio: float = 0.75,
) -> dict:
    """Write scenes and a manifest under ``directory``; returns the manifest.

    Everything is staged in a sibling temporary directory and moved into
    place at the end, so a failure leaves no partial dataset behind.
    """
    params = params or SceneParams()
    directory = Path(directory)
    parent = directory.parent
    if not parent.is_dir():
        raise OSError(f"cannot export to {directory}: parent directory does not exist")
    if directory.exists() and any(directory.iterdir()):
        raise FileExistsError(f"refusing to overwrite non-empty {directory}")
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=parent))
    try:
        ids = []
        for sample in samples:
            sid = sample.gt.scene_id or f"scene_{sample.seed:06d}"
            ids.append(sid)
            sdir = staging / sid
            sdir.mkdir()
            for k, im in enumerate(sample.images):
                Image.fromarray(im).save(sdir / f"cam{k}.png", optimize=False)
            _write_json(sdir / "annotation.json", sample.gt.to_dict())
            _write_json(sdir / "cameras.json", {"seed": sample.seed, "cameras": [c.to_dict() for c in sample.cameras]})
        manifest = {
            "format_version": FORMAT_VERSION,
            "scene_ids": ids,
            "split": split_ids(ids, split_ratio),
            "split_ratio": split_ratio,
            "params": params.to_dict(),
        }
        _write_json(staging / "manifest.json", manifest)
        if directory.exists():
            directory.rmdir()
        os.replace(staging, directory)
    except BaseException as exc:
        shutil.rmtree(staging, ignore_errors=True)
        if isinstance(exc, OSError):
            raise OSError(f"export to {directory} failed: {exc}") from exc
        raise
    return manifest


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_map(path) -> VectorizedMap:
    return VectorizedMap.from_dict(json.loads(Path(path).read_text()))


def load_images(scene_dir, views=range(NUM_VIEWS)) -> list[np.ndarray]:
    scene_dir = Path(scene_dir)
    out = []
    for k in views:
        path = scene_dir / f"cam{k}.png"
        if not path.exists():
            raise FileNotFoundError(f"missing view {path}")
        out.append(np.asarray(Image.open(path).convert("RGB")))
    return out


def load_scene(scene_dir) -> SceneSample:
    scene_dir = Path(scene_dir)
    cams = json.loads((scene_dir / "cameras.json").read_text())
    return SceneSample(
        tuple(load_images(scene_dir)),
        tuple(CameraSpec.from_dict(c) for c in cams["cameras"]),
        load_map(scene_dir / "annotation.json"),
        int(cams["seed"]),
    )
