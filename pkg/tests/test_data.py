import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatdiff.camera import RIG_RADIUS, rig_default
from splatdiff.data import (
    COUNT_RANGE, KINDS, MANIFEST, Primitive, build_dataset, generate_scene, load_dataset, primitive_cloud, quantize,
    uniform_sphere_records,
)
from splatdiff.errors import SplatDiffError
from splatdiff.gaussians import quat_to_matrix
from splatdiff.images import load_png_uint8
from splatdiff.render import render


def test_same_seed_same_cloud():
    scene_a, a = generate_scene(17)
    scene_b, b = generate_scene(17)
    assert scene_a == scene_b
    assert np.array_equal(a.packed(), b.packed())
    assert not np.array_equal(generate_scene(18)[1].packed()[:10], a.packed()[:10])


@settings(max_examples=30)
@given(st.integers(0, 2 ** 63 - 2))
def test_scene_structure(seed):
    scene, cloud = generate_scene(seed)
    assert 1 <= len(scene.primitives) <= 4
    assert len(cloud) == sum(p.count for p in scene.primitives)
    for p in scene.primitives:
        assert p.kind in KINDS
        assert COUNT_RANGE[0] <= p.count <= COUNT_RANGE[1]
        assert 0.1 <= p.size <= 0.5
        assert all(-0.6 <= c <= 0.6 for c in p.center)
    assert np.all(np.abs(cloud.positions) <= 1.0)
    assert np.allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0, atol=1e-6)


def test_scene_file_precision_roundtrip(tmp_path):
    from splatdiff.gaussians import load_cloud, save_cloud

    _, cloud = generate_scene(3)
    save_cloud(tmp_path / "c.dspl", cloud)
    assert np.array_equal(load_cloud(tmp_path / "c.dspl").packed(), cloud.packed())


@pytest.mark.parametrize("radius", [0.1, 0.25, 0.5])
def test_sphere_mean_radius(radius):
    p = Primitive("sphere", (0.1, -0.2, 0.05), radius, (0.5, 0.5, 0.5), 400)
    cloud = primitive_cloud(np.random.default_rng(0), p)
    d = np.linalg.norm(cloud.positions - np.asarray(p.center), axis=1)
    assert abs(d.mean() - radius) <= 0.02 * radius


def test_sphere_orientation_outward():
    p = Primitive("sphere", (0.0, 0.0, 0.0), 0.3, (0.5, 0.5, 0.5), 200)
    cloud = primitive_cloud(np.random.default_rng(1), p)
    thin_axis = quat_to_matrix(cloud.rotations)[:, :, 2]
    radial = cloud.positions / np.linalg.norm(cloud.positions, axis=1, keepdims=True)
    assert np.allclose(np.sum(thin_axis * radial, axis=1), 1.0, atol=1e-9)
    assert np.all(cloud.scales[:, 2] < cloud.scales[:, 0])


def test_box_points_on_faces():
    p = Primitive("box", (0.0, 0.0, 0.0), 0.3, (0.5, 0.5, 0.5), 300, aspect=(1.0, 0.5, 0.8))
    cloud = primitive_cloud(np.random.default_rng(2), p)
    e = 0.3 * np.array([1.0, 0.5, 0.8])
    on_face = np.isclose(np.abs(cloud.positions), e, atol=1e-12)
    assert np.all(on_face.sum(axis=1) >= 1)
    assert np.all(np.abs(cloud.positions) <= e + 1e-12)


def test_capsule_distance_to_axis_segment():
    axis = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
    p = Primitive("capsule", (0.0, 0.0, 0.0), 0.4, (0.5, 0.5, 0.5), 300, axis=tuple(axis))
    cloud = primitive_cloud(np.random.default_rng(3), p)
    t = np.clip(cloud.positions @ axis, -0.2, 0.2)
    dist = np.linalg.norm(cloud.positions - t[:, None] * axis, axis=1)
    assert np.allclose(dist, 0.2, atol=1e-12)


def test_uniform_sphere_mean_origin():
    recs = uniform_sphere_records(np.random.default_rng(0), 10000)
    origins = np.array([r.to_pose().origin for r in recs])
    assert np.allclose(np.linalg.norm(origins, axis=1), RIG_RADIUS, atol=1e-9)
    # per-axis standard error is 1.5 / sqrt(3 * 1e4) ~ 0.0087
    assert np.all(np.abs(origins.mean(axis=0)) < 0.04)


@pytest.fixture(scope="module")
def one_object(tmp_path_factory):
    root = tmp_path_factory.mktemp("one")
    manifest = build_dataset(1, rig_default(6, (32, 32)), 2, root, seed=11)
    return root, manifest


def test_dataset_layout(one_object):
    root, manifest = one_object
    obj = root / manifest["objects"][0]["id"]
    assert len(list(obj.glob("*.png"))) == 8
    assert {p.name for p in obj.iterdir()} >= {"cloud.dspl", "rig_poses.jsonl", "unseen_poses.jsonl"}
    on_disk = json.loads((root / MANIFEST).read_text())
    assert on_disk == manifest
    assert (manifest["v"], manifest["u"], manifest["image_size"]) == (6, 2, [32, 32])
    assert set(manifest["objects"][0]["checksums"]) == {p.name for p in obj.iterdir()}


def test_unseen_poses_on_sphere(one_object):
    rec = load_dataset(one_object[0])[0]
    for pose in rec.unseen_poses:
        assert np.linalg.norm(pose.origin) == pytest.approx(1.5, abs=1e-9)
        assert pose.fov_deg == 50.0


def test_rebuild_gives_identical_checksums(one_object, tmp_path):
    _, manifest = one_object
    again = build_dataset(1, rig_default(6, (32, 32)), 2, tmp_path, seed=11)
    assert again == manifest


def test_stored_images_are_renders_of_stored_cloud(one_object):
    rec = load_dataset(one_object[0], verify=True)[0]
    for i, pose in enumerate(rec.rig_poses):
        stored = load_png_uint8(rec.root / f"rig_{i}.png")
        assert np.array_equal(quantize(render(rec.cloud, pose).color), stored)
    for i, pose in enumerate(rec.unseen_poses):
        stored = load_png_uint8(rec.root / f"unseen_{i}.png")
        assert np.array_equal(quantize(render(rec.cloud, pose).color), stored)


def test_object_is_visible(one_object):
    rec = load_dataset(one_object[0])[0]
    assert all(np.any(img < 0.99) for img in rec.rig_images)


def test_verify_detects_tampering(one_object, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(one_object[0], root)
    png = next(root.glob("obj_*/rig_2.png"))
    png.write_bytes(png.read_bytes() + b"\0")
    load_dataset(root)  # lazy load does not check
    with pytest.raises(SplatDiffError, match="rig_2.png"):
        load_dataset(root, verify=True)


def test_missing_manifest(tmp_path):
    with pytest.raises(SplatDiffError, match=str(tmp_path)):
        load_dataset(tmp_path)
    (tmp_path / MANIFEST).write_text("{")
    with pytest.raises(SplatDiffError, match="corrupt"):
        load_dataset(tmp_path)


def test_unwritable_output_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SplatDiffError, match="file"):
        build_dataset(1, rig_default(2, (16, 16)), 0, blocker / "sub")
