"""Camera poses, the fixed six-view rig and Plücker ray maps.

Conventions: world +Z is up. Camera rotations are camera-to-world with columns
(right, down, forward), i.e. an OpenCV-style camera frame. Pixels are sampled
at their centers with a square-pixel pinhole whose principal point is the
image center; ``fov_deg`` is the horizontal field of view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import RigError, ShapeError

RIG_AZIMUTHS_DEG = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
RIG_ELEVATIONS_DEG = (20.0, -10.0, 20.0, -10.0, 20.0, -10.0)
RIG_RADIUS = 1.5
RIG_FOV_DEG = 50.0
WORLD_UP = np.array([0.0, 0.0, 1.0])
FALLBACK_UP = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class CameraPose:
    origin: np.ndarray
    rotation: np.ndarray
    fov_deg: float = RIG_FOV_DEG
    image_size: tuple[int, int] = (128, 128)  # (width, height)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if min(self.image_size) < 1:
            raise ValueError(f"bad image size {self.image_size}")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def focal(self) -> float:
        """Focal length in pixels (identical on both axes)."""
        return 0.5 * self.width / np.tan(np.deg2rad(self.fov_deg) / 2.0)

    @property
    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(R_wc, t_wc) such that x_cam = R_wc @ x_world + t_wc."""
        r_wc = self.rotation.T
        return r_wc, -r_wc @ self.origin

    def with_size(self, width: int, height: int | None = None) -> "CameraPose":
        return CameraPose(self.origin, self.rotation, self.fov_deg, (width, height or width))

    def allclose(self, other: "CameraPose", atol: float = 1e-6) -> bool:
        return (
            np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.rotation, other.rotation, atol=atol)
            and abs(self.fov_deg - other.fov_deg) <= atol
            and self.image_size == other.image_size
        )


@dataclass(frozen=True)
class RayMap:
    """Per-pixel Plücker encoding, ``data[..., :3]`` directions, ``data[..., 3:]`` moments."""

    data: np.ndarray
    origin: np.ndarray | None = None

    @property
    def directions(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.data[..., 3:]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class ViewRig:
    poses: list
    azimuths_deg: tuple = ()
    elevations_deg: tuple = ()
    radius: float = RIG_RADIUS

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def with_size(self, width: int, height: int | None = None) -> "ViewRig":
        return ViewRig([p.with_size(width, height) for p in self.poses],
                       self.azimuths_deg, self.elevations_deg, self.radius)


def spherical_to_cartesian(azimuth_deg: float, elevation_deg: float, radius: float) -> np.ndarray:
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    return radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def look_at_rotation(origin, target=(0.0, 0.0, 0.0), up=WORLD_UP) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("camera origin coincides with the look-at target")
    forward = forward / norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, FALLBACK_UP)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def orbit_pose(azimuth_deg, elevation_deg, radius=RIG_RADIUS, fov_deg=RIG_FOV_DEG,
               image_size=(128, 128)) -> CameraPose:
    origin = spherical_to_cartesian(azimuth_deg, elevation_deg, radius)
    return CameraPose(origin, look_at_rotation(origin), fov_deg, tuple(image_size))


def rig_default(v: int = 6, image_size=(128, 128)) -> ViewRig:
    """The fixed orbit rig; ``v < 6`` keeps the first ``v`` views."""
    if not 1 <= v <= len(RIG_AZIMUTHS_DEG):
        raise RigError(f"rig supports 1..6 views, got {v}")
    az = RIG_AZIMUTHS_DEG[:v]
    el = RIG_ELEVATIONS_DEG[:v]
    poses = [orbit_pose(a, e, RIG_RADIUS, RIG_FOV_DEG, image_size) for a, e in zip(az, el)]
    return ViewRig(poses, az, el, RIG_RADIUS)


def canonical_pose(image_size=(128, 128), fov_deg=RIG_FOV_DEG) -> CameraPose:
    return orbit_pose(RIG_AZIMUTHS_DEG[0], RIG_ELEVATIONS_DEG[0], RIG_RADIUS, fov_deg, image_size)


def normalize_relative(poses: Sequence[CameraPose]) -> list[CameraPose]:
    """Apply the rigid transform that moves ``poses[0]`` onto the canonical first rig pose."""
    if len(poses) == 0:
        raise ValueError("normalize_relative needs at least one pose")
    first = poses[0]
    target = canonical_pose(first.image_size, first.fov_deg)
    g_rot = target.rotation @ first.rotation.T
    g_trans = target.origin - g_rot @ first.origin
    out = [target]
    for p in poses[1:]:
        rot = g_rot @ p.rotation
        # re-orthonormalize to keep the pose invariants tight after composition
        u, _, vt = np.linalg.svd(rot)
        out.append(CameraPose(g_rot @ p.origin + g_trans, u @ vt, p.fov_deg, p.image_size))
    return out


def pixel_directions_camera(width: int, height: int, fov_deg: float) -> np.ndarray:
    """Unit ray directions in the camera frame, shape (height, width, 3)."""
    focal = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    u = (np.arange(width) + 0.5 - 0.5 * width) / focal
    v = (np.arange(height) + 0.5 - 0.5 * height) / focal
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_directions(pose: CameraPose, width: int | None = None, height: int | None = None) -> np.ndarray:
    """World-space unit directions through pixel centers; may be sampled at another resolution."""
    width = width or pose.width
    height = height or pose.height
    d = pixel_directions_camera(width, height, pose.fov_deg) @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def plucker_map(pose: CameraPose, width: int | None = None, height: int | None = None) -> RayMap:
    d = ray_directions(pose, width, height)
    m = np.cross(np.broadcast_to(pose.origin, d.shape), d)
    return RayMap(np.concatenate([d, m], axis=-1), pose.origin.copy())


def downsample_raymap(ray_map: RayMap, factor: int) -> RayMap:
    """Area-average directions over ``factor``-sized blocks, renormalize, recompute moments."""
    h, w = ray_map.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"factor {factor} does not divide ray map dims {(h, w)}")
    if factor == 1:
        return ray_map
    d = ray_map.directions.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    if ray_map.origin is not None:
        origin = ray_map.origin
        m = np.cross(np.broadcast_to(origin, d.shape), d)
    else:
        # no shared origin: use the mean closest-to-world-origin point of each block
        p = np.cross(ray_map.directions, ray_map.moments)
        p = p.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))
        m = np.cross(p, d)
        origin = None
    return RayMap(np.concatenate([d, m], axis=-1), origin)


# ---------------------------------------------------------------------------
# pose files: JSON lines, one record per view
# ---------------------------------------------------------------------------

POSE_FIELDS = ("azimuth_deg", "elevation_deg", "radius", "fov_deg", "width", "height")


@dataclass(frozen=True)
class PoseRecord:
    azimuth_deg: float
    elevation_deg: float
    radius: float = RIG_RADIUS
    fov_deg: float = RIG_FOV_DEG
    width: int = 128
    height: int = 128

    def to_pose(self) -> CameraPose:
        return orbit_pose(self.azimuth_deg, self.elevation_deg, self.radius, self.fov_deg,
                          (self.width, self.height))


def rig_records(rig: ViewRig) -> list[PoseRecord]:
    return [PoseRecord(a, e, rig.radius, p.fov_deg, p.width, p.height)
            for a, e, p in zip(rig.azimuths_deg, rig.elevations_deg, rig.poses)]


def write_pose_file(path, records: Sequence[PoseRecord]) -> None:
    lines = [json.dumps({k: getattr(r, k) for k in POSE_FIELDS}) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_file(path) -> list[PoseRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(PoseRecord(float(obj["azimuth_deg"]), float(obj["elevation_deg"]),
                                      float(obj["radius"]), float(obj["fov_deg"]),
                                      int(obj["width"]), int(obj["height"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad pose record ({exc})") from exc
    return records
