"""Procedural Gaussian objects and on-disk multiview datasets rendered from them."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import RIG_FOV_DEG, RIG_RADIUS, PoseRecord, ViewRig, read_pose_file, rig_records, write_pose_file
from .errors import SplatDiffError
from .gaussians import GaussianCloud, load_cloud, matrix_to_quat, merge, save_cloud
from .images import load_png, save_png, to_uint8
from .render import WHITE, render

KINDS = ("sphere", "box", "capsule")
CENTER_RANGE = 0.6
SIZE_RANGE = (0.1, 0.5)
COUNT_RANGE = (50, 400)
BOUND = 1.0
OPACITY = 0.95
MANIFEST = "manifest.json"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple
    size: float  # sphere radius, box half-extent, capsule radius + half-length
    color: tuple
    count: int
    axis: tuple = (0.0, 0.0, 1.0)
    aspect: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [p.__dict__ for p in self.primitives]}


def _frames_from_normals(n: np.ndarray) -> np.ndarray:
    """Rotations whose local z axis is the given unit normal."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def _unit_vectors(rng, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere_surface(rng, p: Primitive):
    n = _unit_vectors(rng, p.count)
    return np.asarray(p.center) + p.size * n, n, 4 * np.pi * p.size ** 2


def _box_surface(rng, p: Primitive):
    e = p.size * np.asarray(p.aspect)
    areas = 4 * np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]])
    face_axis = rng.choice(3, size=p.count, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=p.count)
    pts = rng.uniform(-1.0, 1.0, (p.count, 3)) * e
    idx = np.arange(p.count)
    pts[idx, face_axis] = sign * e[face_axis]
    normals = np.zeros((p.count, 3))
    normals[idx, face_axis] = sign
    return np.asarray(p.center) + pts, normals, 2 * areas.sum()


def _capsule_surface(rng, p: Primitive):
    r, half = 0.5 * p.size, 0.5 * p.size
    axis = np.asarray(p.axis)
    frame = _frames_from_normals(axis[None])[0]
    side, cap = 2 * np.pi * r * 2 * half, 4 * np.pi * r ** 2
    on_side = rng.uniform(size=p.count) < side / (side + cap)
    normals = np.empty((p.count, 3))
    local = np.empty((p.count, 3))
    k = int(on_side.sum())
    phi = rng.uniform(0, 2 * np.pi, k)
    normals[on_side] = np.stack([np.cos(phi), np.sin(phi), np.zeros(k)], axis=1)
    local[on_side] = r * normals[on_side]
    local[on_side, 2] = rng.uniform(-half, half, k)
    m = p.count - k
    d = _unit_vectors(rng, m)
    normals[~on_side] = d
    local[~on_side] = r * d + np.sign(d[:, 2:3] + 1e-12) * np.array([0.0, 0.0, half])
    return np.asarray(p.center) + local @ frame.T, normals @ frame.T, side + cap


_SURFACES = {"sphere": _sphere_surface, "box": _box_surface, "capsule": _capsule_surface}


def _extent(p: Primitive) -> float:
    if p.kind == "box":
        return float(np.linalg.norm(p.size * np.asarray(p.aspect)))
    return p.size


def _draw_primitive(rng) -> Primitive:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    size = float(rng.uniform(*SIZE_RANGE))
    center = rng.uniform(-CENTER_RANGE, CENTER_RANGE, 3)
    color = tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))
    count = int(rng.integers(COUNT_RANGE[0], COUNT_RANGE[1] + 1))
    axis = tuple(float(a) for a in _unit_vectors(rng, 1)[0])
    aspect = tuple(float(a) for a in rng.uniform(0.5, 1.0, 3))
    p = Primitive(kind, (0.0, 0.0, 0.0), size, color, count, axis, aspect)
    # pull the center in so the surface plus a 3-sigma splat margin stays in the unit cube
    lim = max(BOUND - _extent(p) - 0.1, 0.0)
    center = np.clip(center, -min(lim, CENTER_RANGE), min(lim, CENTER_RANGE))
    return Primitive(kind, tuple(float(c) for c in center), size, color, count, axis, aspect)


def primitive_cloud(rng, p: Primitive) -> GaussianCloud:
    pos, normals, area = _SURFACES[p.kind](rng, p)
    tangential = 0.6 * np.sqrt(area / p.count)
    scales = np.column_stack([np.full(p.count, tangential), np.full(p.count, tangential),
                              np.full(p.count, 0.15 * tangential)])
    rot = matrix_to_quat(_frames_from_normals(normals))
    colors = np.clip(np.asarray(p.color) + rng.uniform(-0.04, 0.04, (p.count, 3)), 0.0, 1.0)
    return GaussianCloud(pos, scales, colors, np.full(p.count, OPACITY), rot)


def _float32_roundtrip(cloud: GaussianCloud) -> GaussianCloud:
    out = GaussianCloud.from_packed(cloud.packed().astype("<f4"))
    out.rotations /= np.linalg.norm(out.rotations, axis=1, keepdims=True)
    return GaussianCloud.from_packed(out.packed().astype("<f4"))


def generate_scene(seed: int) -> tuple[SceneSpec, GaussianCloud]:
    """1-4 random primitives, surface-sampled with outward-facing flat Gaussians.

    The cloud is already rounded to the float32 file precision, so a saved and
    reloaded cloud renders identically.
    """
    rng = np.random.default_rng(seed)
    prims = tuple(_draw_primitive(rng) for _ in range(int(rng.integers(1, 5))))
    cloud = merge([primitive_cloud(rng, p) for p in prims])
    cloud.positions = np.clip(cloud.positions, -BOUND, BOUND)
    return SceneSpec(int(seed), prims), _float32_roundtrip(cloud)


def uniform_sphere_records(rng, n: int, radius: float = RIG_RADIUS, fov_deg: float = RIG_FOV_DEG,
                           image_size=(128, 128)) -> list[PoseRecord]:
    d = _unit_vectors(rng, n)
    az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    el = np.degrees(np.arcsin(np.clip(d[:, 2], -1.0, 1.0)))
    return [PoseRecord(float(a), float(e), float(radius), float(fov_deg), int(image_size[0]), int(image_size[1]))
            for a, e in zip(az, el)]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    object_id: str
    seed: int
    root: Path
    rig_records: list
    unseen_records: list
    _cloud: GaussianCloud | None = field(default=None, repr=False)
    _rig_images: list | None = field(default=None, repr=False)
    _unseen_images: list | None = field(default=None, repr=False)

    @property
    def cloud(self) -> GaussianCloud:
        if self._cloud is None:
            self._cloud = load_cloud(self.root / "cloud.dspl")
        return self._cloud

    @property
    def rig_images(self) -> list[np.ndarray]:
        if self._rig_images is None:
            self._rig_images = [load_png(self.root / f"rig_{i}.png") for i in range(len(self.rig_records))]
        return self._rig_images

    @property
    def unseen_images(self) -> list[np.ndarray]:
        if self._unseen_images is None:
            self._unseen_images = [load_png(self.root / f"unseen_{i}.png")
                                   for i in range(len(self.unseen_records))]
        return self._unseen_images

    @property
    def rig_poses(self):
        return [r.to_pose() for r in self.rig_records]

    @property
    def unseen_poses(self):
        return [r.to_pose() for r in self.unseen_records]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_object(root: Path, cloud: GaussianCloud, rig_recs, unseen_recs, background=WHITE) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    save_cloud(root / "cloud.dspl", cloud)
    write_pose_file(root / "rig_poses.jsonl", rig_recs)
    write_pose_file(root / "unseen_poses.jsonl", unseen_recs)
    names = ["cloud.dspl", "rig_poses.jsonl", "unseen_poses.jsonl"]
    for prefix, recs in (("rig", rig_recs), ("unseen", unseen_recs)):
        for i, rec in enumerate(recs):
            save_png(root / f"{prefix}_{i}.png", render(cloud, rec.to_pose(), background).color)
            names.append(f"{prefix}_{i}.png")
    return {name: _sha256(root / name) for name in names}


def build_dataset(n_objects: int, rig: ViewRig, u: int, out_dir, seed: int = 0,
                  background=WHITE) -> dict:
    """Generate ``n_objects`` scenes and write images, poses, clouds and a manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=n_objects)]
        rig_recs = rig_records(rig)
        size = rig.poses[0].image_size
        objects = []
        for i, s in enumerate(seeds):
            oid = f"obj_{i:05d}"
            _, cloud = generate_scene(s)
            unseen = uniform_sphere_records(np.random.default_rng([s, 1]), u, rig.radius,
                                            rig.poses[0].fov_deg, size)
            files = write_object(out / oid, cloud, rig_recs, unseen, background)
            objects.append({"id": oid, "seed": s, "checksums": files})
        manifest = {"version": DATASET_VERSION, "seed": int(seed), "v": len(rig), "u": int(u),
                    "image_size": list(size), "background": list(map(float, background)),
                    "objects": objects}
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise SplatDiffError(f"writing dataset under {out}: {exc}") from exc
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise SplatDiffError(f"cannot read dataset manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise SplatDiffError(f"corrupt dataset manifest {path}: {exc}") from None


def load_dataset(root, verify: bool = False) -> list[DatasetRecord]:
    root = Path(root)
    manifest = load_manifest(root)
    records = []
    for obj in manifest["objects"]:
        d = root / obj["id"]
        if verify:
            for name, digest in obj["checksums"].items():
                if _sha256(d / name) != digest:
                    raise SplatDiffError(f"checksum mismatch for {d / name}")
        try:
            records.append(DatasetRecord(obj["id"], int(obj["seed"]), d, read_pose_file(d / "rig_poses.jsonl"),
                                         read_pose_file(d / "unseen_poses.jsonl")))
        except OSError as exc:
            raise SplatDiffError(f"cannot read poses for {d}: {exc.strerror}") from None
    return records


def quantize(image: np.ndarray) -> np.ndarray:
    """The 8-bit values a float image is stored as."""
    return to_uint8(image)
