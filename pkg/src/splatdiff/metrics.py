"""PSNR / SSIM and the conditional-generation evaluation harness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .camera import ViewRig
from .diffusion import DEFAULT_STEPS, sample
from .errors import ShapeError, SplatDiffError
from .render import WHITE, render

INF_SENTINEL = "inf"
SSIM_WINDOW = 8
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean SSIM over channels; Gaussian-weighted 8x8 windows at every valid position."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        wa = sliding_window_view(a[..., c], (SSIM_WINDOW, SSIM_WINDOW))
        wb = sliding_window_view(b[..., c], (SSIM_WINDOW, SSIM_WINDOW))
        mu_a = np.einsum("ijkl,kl->ij", wa, w)
        mu_b = np.einsum("ijkl,kl->ij", wb, w)
        var_a = np.einsum("ijkl,kl->ij", wa * wa, w) - mu_a ** 2
        var_b = np.einsum("ijkl,kl->ij", wb * wb, w) - mu_b ** 2
        cov = np.einsum("ijkl,kl->ij", wa * wb, w) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def _fmt(x: float):
    return INF_SENTINEL if math.isinf(x) else x


@dataclass
class ViewScore:
    object_id: str
    split: str  # "rig" or "unseen"
    view: int
    psnr: float
    ssim: float

    def to_dict(self) -> dict:
        return {"kind": "view", "object": self.object_id, "split": self.split, "view": self.view,
                "psnr": _fmt(self.psnr), "ssim": self.ssim}


def aggregate(scores) -> dict:
    """Means over finite PSNRs (identical pairs counted separately) and over all SSIMs."""
    scores = list(scores)
    finite = [s.psnr for s in scores if not math.isinf(s.psnr)]
    return {"n": len(scores), "n_inf": len(scores) - len(finite),
            "psnr": float(np.mean(finite)) if finite else INF_SENTINEL if scores else None,
            "ssim": float(np.mean([s.ssim for s in scores])) if scores else None}


@dataclass
class EvalReport:
    checkpoint_id: str
    config: dict
    scores: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"all": aggregate(self.scores),
                "rig": aggregate(s for s in self.scores if s.split == "rig"),
                "unseen": aggregate(s for s in self.scores if s.split == "unseen")}

    def per_object(self) -> list[dict]:
        ids = sorted({s.object_id for s in self.scores})
        return [{"kind": "object", "object": oid,
                 **{k: aggregate(s for s in self.scores if s.object_id == oid and (k == "all" or s.split == k))
                    for k in ("all", "rig", "unseen")}} for oid in ids]

    def to_text(self) -> str:
        lines = [{"kind": "header", "checkpoint": self.checkpoint_id, "config": self.config}]
        lines += [s.to_dict() for s in sorted(self.scores, key=lambda s: (s.object_id, s.split, s.view))]
        lines += self.per_object()
        lines.append({"kind": "aggregate", **self.summary()})
        return "".join(json.dumps(l, sort_keys=True) + "\n" for l in lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def score_object(object_id: str, cloud, record, background=WHITE, rig_renders=None) -> list[ViewScore]:
    """Score rig views 1..v-1 and every unseen view of ``record`` against renders of ``cloud``."""
    out = []
    poses = record.rig_poses
    for i in range(1, len(poses)):
        img = rig_renders[i].color if rig_renders is not None else render(cloud, poses[i], background).color
        out.append(ViewScore(object_id, "rig", i, psnr(img, record.rig_images[i]), ssim(img, record.rig_images[i])))
    for i, pose in enumerate(record.unseen_poses):
        img = render(cloud, pose, background).color
        out.append(ViewScore(object_id, "unseen", i, psnr(img, record.unseen_images[i]),
                             ssim(img, record.unseen_images[i])))
    return out


def evaluate(denoiser_factory: Callable, records, steps: int = DEFAULT_STEPS, seed: int = 0,
             checkpoint_id: str = "", config: dict | None = None, out_path=None,
             background=WHITE) -> EvalReport:
    """Condition on rig view 0 of each record, sample, and score the other views.

    ``denoiser_factory(record)`` returns the denoiser for that record, which lets
    a ground-truth oracle stand in for a trained model.
    """
    report = EvalReport(checkpoint_id, dict(config or {}, steps=steps, seed=seed))
    for rec in sorted(records, key=lambda r: r.object_id):
        try:
            rig = ViewRig(rec.rig_poses, tuple(r.azimuth_deg for r in rec.rig_records),
                          tuple(r.elevation_deg for r in rec.rig_records), rec.rig_records[0].radius)
            cloud, renders = sample(rec.rig_images[0], rig, denoiser_factory(rec), steps, seed,
                                    background=background)
            report.scores.extend(score_object(rec.object_id, cloud, rec, background, renders))
        except SplatDiffError as exc:
            raise type(exc)(f"object {rec.object_id}: {exc}") from exc
    if out_path is not None:
        report.write(out_path)
    return report
