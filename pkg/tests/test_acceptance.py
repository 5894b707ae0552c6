"""One test per acceptance criterion; results are summarised at the end of the pytest run."""

import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_cloud
from op_cases import cases, op_of, run_case
from oracles import PARAM_NAMES, brute_force_render, fd_pass_fraction, finite_difference_sweep
from splatdiff import autodiff as ad
from splatdiff import cli
from splatdiff.camera import (
    RIG_AZIMUTHS_DEG, RIG_ELEVATIONS_DEG, RIG_FOV_DEG, RIG_RADIUS, CameraPose, orbit_pose, plucker_map, rig_default,
)
from splatdiff.codec import D, K, Latent, LatentGrid, assemble_grid
from splatdiff.data import build_dataset, generate_scene, load_dataset
from splatdiff.denoiser import DenoiserConfig, DenoiserModel, ModelDenoiser, head_rays
from splatdiff.diffusion import DEFAULT_STEPS, OracleDenoiser, add_noise, cosine_schedule, sample, sample_timestep
from splatdiff.gaussians import N_FEATURES, PRUNE_THRESHOLD
from splatdiff.metrics import evaluate, psnr
from splatdiff.render import render, render_backward, render_rig
from splatdiff.training import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]

# overfit check: repo constants calibrated on a pilot run, see README
OVERFIT_SEED = 0
OVERFIT_STEPS = 2000
OVERFIT_SIZE = 128
OVERFIT_RIG_PSNR = 25.0
OVERFIT_UNSEEN_PSNR = 20.0
OVERFIT_BUDGET_S = 3600.0


def _random_pose(rng, size):
    return orbit_pose(*rng.uniform([-180, -60], [180, 60]), image_size=(size, size))


@pytest.mark.criterion(1, "renderer gradients vs central differences")
def test_renderer_gradient_suite(record_property):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    num = {k: [] for k in PARAM_NAMES}
    an = {k: [] for k in PARAM_NAMES}
    for _ in range(20):
        cloud = random_cloud(rng, int(rng.integers(1, 33)))
        pose = _random_pose(rng, 32)
        bg = rng.uniform(0, 1, 3)
        gc, ga = rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32))
        analytic = render_backward(cloud, pose, bg, gc, ga)
        for name, (n_, a_) in finite_difference_sweep(cloud, pose, bg, gc, ga, analytic).items():
            num[name].append(n_.ravel())
            an[name].append(a_.ravel())
    fractions = {k: fd_pass_fraction(np.concatenate(num[k]), np.concatenate(an[k])) for k in PARAM_NAMES}
    elapsed = time.perf_counter() - start
    record_property("worst_fraction", round(min(fractions.values()), 4))
    record_property("seconds", round(elapsed, 1))
    for k, f in fractions.items():
        assert f >= 0.95, f"{k}: {f:.3f} of coordinates within tolerance"
    assert elapsed < 300


@pytest.mark.criterion(2, "tiled renderer equals brute-force compositing")
def test_renderer_oracle_equivalence(record_property):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        cloud = random_cloud(rng, int(rng.integers(1, 41)))
        size = int(rng.integers(8, 33))
        pose = _random_pose(rng, size)
        bg = rng.uniform(0, 1, 3)
        out = render(cloud, pose, bg)
        color, alpha = brute_force_render(cloud, pose, bg)
        worst = max(worst, np.max(np.abs(out.color - color)), np.max(np.abs(out.alpha - alpha)))
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst <= 1e-4


@pytest.mark.criterion(3, "Plücker ray properties on 1e4 rays")
def test_plucker_properties(record_property):
    rng = np.random.default_rng(303)
    worst = {"norm": 0.0, "orth": 0.0, "point": 0.0}
    for _ in range(100):
        az, el, radius, fov = rng.uniform([-180, -85, 0.5, 10], [180, 85, 5.0, 120])
        pose = orbit_pose(az, el, radius, fov, (10, 10))
        data = plucker_map(pose).data.reshape(-1, 6)
        d, m = data[:, :3], data[:, 3:]
        worst["norm"] = max(worst["norm"], np.max(np.abs(np.linalg.norm(d, axis=1) - 1)))
        worst["orth"] = max(worst["orth"], np.max(np.abs(np.sum(d * m, axis=1))))
        # a camera moved along each pixel's own ray sees the same line at that pixel
        s = rng.uniform(-2, 2, len(d))
        for i in range(len(d)):
            moved = CameraPose(pose.origin + s[i] * d[i], pose.rotation, pose.fov_deg, pose.image_size)
            other = plucker_map(moved).data.reshape(-1, 6)[i]
            worst["point"] = max(worst["point"], np.max(np.abs(other - data[i])))
    record_property("worst", {k: f"{v:.1e}" for k, v in worst.items()})
    assert max(worst.values()) <= 1e-6


@pytest.mark.criterion(4, "noise schedule and forward-process variance")
def test_schedule_forward_process(record_property):
    sched = cosine_schedule(1000)
    ab = sched.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    ratios = {}
    for t in (100, 500, 900):
        grid = LatentGrid(np.zeros((2, 50000, 4)), 2)
        z = add_noise(grid, t, t, schedule=sched).data
        ratios[t] = float(z.var() / (1 - ab[t]))
    record_property("var_ratio", {t: round(r, 4) for t, r in ratios.items()})
    assert all(abs(r - 1) < 0.02 for r in ratios.values())


@pytest.mark.criterion(5, "50-step sampler with a ground-truth oracle reaches 40 dB")
def test_ddim_oracle_run(record_property):
    rig = rig_default(6, (128, 128))
    _, gt = generate_scene(505)
    views = render_rig(gt, rig)
    start = time.perf_counter()
    oracle = OracleDenoiser(gt)
    _, renders = sample(views[0].color, rig, oracle, steps=DEFAULT_STEPS, seed=0)
    elapsed = time.perf_counter() - start
    scores = [psnr(r.color, v.color) for r, v in zip(renders, views)]
    record_property("min_psnr", min(scores))
    record_property("seconds", round(elapsed, 1))
    assert oracle.calls == DEFAULT_STEPS
    assert min(scores) >= 40.0
    assert elapsed < 120


@pytest.mark.criterion(6, "every autodiff op passes its finite-difference check")
def test_autodiff_op_suite(record_property):
    table = cases(np.random.default_rng(2024))
    assert set(ad.op_set()) <= {op_of(name) for name in table}
    failures = [name for name, (fn, arrays) in sorted(table.items()) if not run_case(fn, arrays)[0]]
    record_property("ops", len(ad.op_set()))
    record_property("cases", len(table))
    assert failures == []


@pytest.mark.criterion(7, "single-object overfit reaches the calibrated PSNR floors")
def test_overfit_single_object(tmp_path, record_property):
    rig = rig_default(6, (OVERFIT_SIZE, OVERFIT_SIZE))
    build_dataset(1, rig, 2, tmp_path / "data", seed=OVERFIT_SEED)
    records = load_dataset(tmp_path / "data")
    start = time.perf_counter()
    state = train(records, TrainConfig(steps=OVERFIT_STEPS, seed=OVERFIT_SEED), tmp_path / "run")
    summary = evaluate(lambda rec: ModelDenoiser(state.model), records, DEFAULT_STEPS, OVERFIT_SEED).summary()
    elapsed = time.perf_counter() - start
    rig_psnr, unseen_psnr = summary["rig"]["psnr"], summary["unseen"]["psnr"]
    record_property("rig_psnr", round(rig_psnr, 2))
    record_property("unseen_psnr", round(unseen_psnr, 2))
    record_property("minutes", round(elapsed / 60, 1))
    assert state.step == OVERFIT_STEPS
    assert rig_psnr >= OVERFIT_RIG_PSNR
    assert unseen_psnr >= OVERFIT_UNSEEN_PSNR
    assert elapsed <= OVERFIT_BUDGET_S


@pytest.mark.criterion(8, "held-out generation beats the untrained model by 6 dB")
def test_small_generalization(tmp_path, record_property):
    if os.environ.get("SPLATDIFF_EXTENDED") != "1":
        pytest.skip("overnight-scale; set SPLATDIFF_EXTENDED=1 to run")
    sys.path.insert(0, str(ROOT / "scripts"))
    from generalization import run

    result = run(tmp_path, objects=64, heldout=8, steps=20000)
    record_property("gain_db", round(result["unseen_gain_db"], 2))
    assert result["unseen_gain_db"] >= 6.0


def _digest_tree(root: Path, skip=()) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def _metrics_without_timing(path: Path) -> list:
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    for r in rows:
        r.pop("wall_ms")
    return rows


@pytest.mark.criterion(9, "gen-data, train, sample and eval are reproducible")
def test_cli_determinism(tmp_path, record_property):
    runs = []
    for k in range(2):
        base = tmp_path / f"run{k}"
        data, run, smp, report = base / "data", base / "train", base / "sample", base / "report.jsonl"
        assert cli.main(["gen-data", "--out", str(data), "--n-objects", "2", "--size", "64", "--seed", "9"]) == 0
        assert cli.main(["train", "--data", str(data), "--out", str(run), "--steps", "10", "--seed", "9"]) == 0
        assert cli.main(["sample", "--input", str(data / "obj_00000" / "rig_0.png"), "--checkpoint",
                         str(run / "last.dsck"), "--seed", "9", "--out-dir", str(smp)]) == 0
        assert cli.main(["eval", "--checkpoint", str(run / "last.dsck"), "--data", str(data), "--seed", "9",
                         "--out", str(report)]) == 0
        runs.append({"gen-data": _digest_tree(data),
                     "train": (_digest_tree(run, skip={"metrics.jsonl"}), _metrics_without_timing(run / "metrics.jsonl")),
                     "sample": _digest_tree(smp),
                     "eval": hashlib.sha256(report.read_bytes()).hexdigest()})
    differing = [k for k in runs[0] if runs[0][k] != runs[1][k]]
    record_property("differing", differing or "none")
    assert differing == []


@pytest.mark.criterion(10, "geometry and pipeline constants")
def test_constants():
    assert RIG_AZIMUTHS_DEG == (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
    assert RIG_ELEVATIONS_DEG == (20.0, -10.0, 20.0, -10.0, 20.0, -10.0)
    assert RIG_RADIUS == 1.5 and RIG_FOV_DEG == 50.0
    rig = rig_default(6, (64, 64))
    assert all(np.linalg.norm(p.origin) == pytest.approx(1.5) for p in rig)

    rng = np.random.default_rng(0)
    ts = np.array([sample_timestep(rng) for _ in range(20000)])
    assert ts.min() == 1 and ts.max() == 1000
    assert cosine_schedule().T == 1000
    assert DEFAULT_STEPS == 50
    assert PRUNE_THRESHOLD == 0.005
    assert (K, D) == (8, 4)

    assert assemble_grid([Latent(np.zeros((4, 5, D)))] * 6).data.shape == (2 * 4, 3 * 5, D)
    assert N_FEATURES == 14
    model = DenoiserModel(DenoiserConfig(base_channels=8, channel_multipliers=(1,), blocks_per_scale=1,
                                         time_embed_dim=8))
    assert model.head[-1].conv.weight.shape[0] == 14
    assert len(head_rays(rig_default(6, (256, 256)).poses, DenoiserConfig().head_upsample).origins) == 98304
