"""Differentiable 3D Gaussian splatting (forward + analytic backward).

Pipeline per view: project each Gaussian to a 2D Gaussian with the EWA
Jacobian (plus a 0.3 px^2 isotropic dilation), sort globally by view depth
(ties by index), bucket Gaussians into per-pixel front-to-back lists and
alpha-composite. Per-pair alpha is ``opacity * G`` clamped to ``ALPHA_MAX``,
except that values below ``ALPHA_MIN`` count as zero and values in
``[ALPHA_MIN, 2 ALPHA_MIN)`` follow a C1 cubic ramp so alpha stays smooth. The list
bounding boxes are exactly the boxes of the ellipses where alpha is nonzero.

All internal arithmetic is float64. Gradient reduction uses a fixed number of
row chunks, so results are bit-identical regardless of thread count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from . import autodiff as ad
from .camera import CameraPose, ViewRig
from .errors import PipelineError, ShapeError
from .gaussians import GaussianCloud, quat_to_matrix

NEAR = 0.01
DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-5  # compositing stops once transmittance falls below this
N_CHUNKS = 8
WHITE = (1.0, 1.0, 1.0)


def configure_threads() -> int:
    """Honor DSPLATS_THREADS as a cap on numba worker threads."""
    cap = os.environ.get("DSPLATS_THREADS")
    n = numba.config.NUMBA_NUM_THREADS
    if cap:
        n = max(1, min(n, int(cap)))
    numba.set_num_threads(n)
    return n


configure_threads()


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray | None = None  # (H, W) alpha-weighted expected view depth


@dataclass
class RenderGradients:
    positions: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray

    def as_list(self):
        return [self.positions, self.scales, self.colors, self.opacities, self.rotations]


@dataclass
class Projection:
    visible: np.ndarray  # indices into the cloud, depth-sorted front to back
    cam: np.ndarray  # (N, 3) view-space centers for all Gaussians
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) a, b, c
    conic: np.ndarray  # (N, 3) A, B, C of the inverse
    radius: np.ndarray  # (N, 2) half-extent of the bounding box in pixels


@dataclass
class Geometry:
    """Pose-independent per-Gaussian quantities, shared by all views of one cloud."""

    rot: np.ndarray  # (N, 3, 3)
    cov3d: np.ndarray  # (N, 3, 3)


@dataclass
class RenderState:
    proj: Projection
    offsets: np.ndarray
    ids: np.ndarray  # depth ranks, i.e. rows of gdata
    gdata: np.ndarray
    n_gaussians: int
    pose: CameraPose
    background: np.ndarray
    geometry: Geometry


def cloud_geometry(cloud: GaussianCloud) -> Geometry:
    if len(cloud) == 0:
        return Geometry(np.zeros((0, 3, 3)), np.zeros((0, 3, 3)))
    rot = quat_to_matrix(cloud.rotations)
    m = rot * cloud.scales[:, None, :]
    return Geometry(rot, np.ascontiguousarray(m @ np.swapaxes(m, 1, 2)))


@njit(cache=True)
def _project_kernel(pos, cov3d, op, r, t, f, cx, cy, width, height,
                    cam, mean2d, cov2d, conic, radius, keep):
    t0 = np.empty(3)
    t1 = np.empty(3)
    s0 = np.empty(3)
    s1 = np.empty(3)
    for i in range(pos.shape[0]):
        x = r[0, 0] * pos[i, 0] + r[0, 1] * pos[i, 1] + r[0, 2] * pos[i, 2] + t[0]
        y = r[1, 0] * pos[i, 0] + r[1, 1] * pos[i, 1] + r[1, 2] * pos[i, 2] + t[1]
        z = r[2, 0] * pos[i, 0] + r[2, 1] * pos[i, 1] + r[2, 2] * pos[i, 2] + t[2]
        cam[i, 0], cam[i, 1], cam[i, 2] = x, y, z
        zs = z if z > NEAR else 1.0
        u = f * x / zs + cx
        v = f * y / zs + cy
        mean2d[i, 0], mean2d[i, 1] = u, v
        # T = J W, rows of the 2x3 affine approximation
        j0, j02 = f / zs, -f * x / (zs * zs)
        j1, j12 = f / zs, -f * y / (zs * zs)
        for k in range(3):
            t0[k] = j0 * r[0, k] + j02 * r[2, k]
            t1[k] = j1 * r[1, k] + j12 * r[2, k]
            s0[k] = 0.0
            s1[k] = 0.0
        for k in range(3):
            for l in range(3):
                s0[k] += t0[l] * cov3d[i, l, k]
                s1[k] += t1[l] * cov3d[i, l, k]
        a = s0[0] * t0[0] + s0[1] * t0[1] + s0[2] * t0[2] + DILATION
        b = s0[0] * t1[0] + s0[1] * t1[1] + s0[2] * t1[2]
        c = s1[0] * t1[0] + s1[1] * t1[1] + s1[2] * t1[2] + DILATION
        cov2d[i, 0], cov2d[i, 1], cov2d[i, 2] = a, b, c
        det = a * c - b * b
        keep[i] = False
        if det <= 0.0:
            conic[i, 0] = conic[i, 1] = conic[i, 2] = 0.0
            radius[i, 0] = radius[i, 1] = 0.0
            continue
        conic[i, 0], conic[i, 1], conic[i, 2] = c / det, -b / det, a / det
        kk = np.sqrt(2.0 * np.log(max(op[i], ALPHA_MIN) / ALPHA_MIN))
        rx, ry = kk * np.sqrt(a), kk * np.sqrt(c)
        radius[i, 0], radius[i, 1] = rx, ry
        keep[i] = (z > NEAR and op[i] > ALPHA_MIN and u + rx > 0 and u - rx < width
                   and v + ry > 0 and v - ry < height)


def project(cloud: GaussianCloud, pose: CameraPose, geometry: Geometry | None = None) -> Projection:
    n = len(cloud)
    geometry = geometry if geometry is not None else cloud_geometry(cloud)
    r_wc, t_wc = pose.world_to_camera
    cam, mean2d = np.empty((n, 3)), np.empty((n, 2))
    cov2d, conic, radius = np.empty((n, 3)), np.empty((n, 3)), np.empty((n, 2))
    keep = np.empty(n, dtype=np.bool_)
    _project_kernel(np.ascontiguousarray(cloud.positions), geometry.cov3d, np.ascontiguousarray(cloud.opacities),
                    np.ascontiguousarray(r_wc), np.ascontiguousarray(t_wc), float(pose.focal),
                    0.5 * pose.width, 0.5 * pose.height, float(pose.width), float(pose.height),
                    cam, mean2d, cov2d, conic, radius, keep)
    idx = np.flatnonzero(keep)
    visible = idx[np.lexsort((idx, cam[idx, 2]))]
    return Projection(visible, cam, mean2d, cov2d, conic, radius)


@njit(cache=True, inline="always")
def _row_span(gdata, g, y, x0, x1):
    """Pixel columns of row ``y`` inside the alpha >= ALPHA_MIN ellipse of Gaussian ``g``, clipped to [x0, x1]."""
    a, b, c = gdata[g, 2], gdata[g, 3], gdata[g, 4]
    q = -2.0 * gdata[g, 6]
    dy = y + 0.5 - gdata[g, 1]
    disc = b * b * dy * dy - a * (c * dy * dy - q)
    if disc < 0.0:
        return 1, 0
    root = np.sqrt(disc)
    lo = gdata[g, 0] + (-b * dy - root) / a - 0.5
    hi = gdata[g, 0] + (-b * dy + root) / a - 0.5
    # the padding only ever adds pixels whose alpha evaluates to zero
    return max(int(np.ceil(lo - 1e-6)), x0), min(int(np.floor(hi + 1e-6)), x1)


@njit(cache=True)
def _build_lists(gdata, radius, width, height):
    """Per-pixel lists of depth ranks (rows of ``gdata`` are already depth-sorted)."""
    npix = width * height
    n = gdata.shape[0]
    boxes = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(npix + 1, dtype=np.int64)
    for g in range(n):
        x0 = max(int(np.ceil(gdata[g, 0] - radius[g, 0] - 0.5)), 0)
        x1 = min(int(np.floor(gdata[g, 0] + radius[g, 0] - 0.5)), width - 1)
        y0 = max(int(np.ceil(gdata[g, 1] - radius[g, 1] - 0.5)), 0)
        y1 = min(int(np.floor(gdata[g, 1] + radius[g, 1] - 0.5)), height - 1)
        boxes[g, 0] = x0
        boxes[g, 1] = x1
        boxes[g, 2] = y0
        boxes[g, 3] = y1
        for yy in range(y0, y1 + 1):
            xa, xb = _row_span(gdata, g, yy, x0, x1)
            for xx in range(xa, xb + 1):
                counts[yy * width + xx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int32)
    for g in range(n):
        for yy in range(boxes[g, 2], boxes[g, 3] + 1):
            xa, xb = _row_span(gdata, g, yy, boxes[g, 0], boxes[g, 1])
            for xx in range(xa, xb + 1):
                p = yy * width + xx
                ids[fill[p]] = g
                fill[p] += 1
    return offsets, ids


@njit(cache=True, inline="always")
def _alpha(power, op, log_cut):
    """Per-pair alpha and d(alpha)/d(op * G).

    Zero below ALPHA_MIN; on [ALPHA_MIN, 2 ALPHA_MIN) a C1 cubic ramp
    ALPHA_MIN * (5 x^2 - 3 x^3), x = raw / ALPHA_MIN - 1, joins the identity.
    """
    if power < log_cut:
        return 0.0, 0.0, 0.0
    raw = op * np.exp(power)
    if raw < ALPHA_MIN:
        return 0.0, 0.0, raw
    if raw < 2.0 * ALPHA_MIN:
        x = raw / ALPHA_MIN - 1.0
        return ALPHA_MIN * x * x * (5.0 - 3.0 * x), x * (10.0 - 9.0 * x), raw
    if raw > ALPHA_MAX:
        return ALPHA_MAX, 0.0, raw
    return raw, 1.0, raw


@njit(cache=True, parallel=True)
def _forward(offsets, ids, gdata, bg, width, height):
    # gdata columns: u, v, A, B, C, opacity, log_cut, r, g, b, depth
    color = np.empty((height, width, 3))
    alpha = np.empty((height, width))
    dmap = np.empty((height, width))
    for y in prange(height):
        py = y + 0.5
        for x in range(width):
            p = y * width + x
            px = x + 0.5
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dsum = 0.0
            for k in range(offsets[p], offsets[p + 1]):
                g = ids[k]
                dx = px - gdata[g, 0]
                dy = py - gdata[g, 1]
                power = -0.5 * (gdata[g, 2] * dx * dx + gdata[g, 4] * dy * dy) - gdata[g, 3] * dx * dy
                a, _, _ = _alpha(power, gdata[g, 5], gdata[g, 6])
                if a == 0.0:
                    continue
                w = a * t
                c0 += gdata[g, 7] * w
                c1 += gdata[g, 8] * w
                c2 += gdata[g, 9] * w
                dsum += gdata[g, 10] * w
                t *= 1.0 - a
                if t < T_MIN:
                    break
            color[y, x, 0] = c0 + t * bg[0]
            color[y, x, 1] = c1 + t * bg[1]
            color[y, x, 2] = c2 + t * bg[2]
            alpha[y, x] = 1.0 - t
            dmap[y, x] = dsum / (1.0 - t) if t < 1.0 else 0.0
    return color, alpha, dmap


@njit(cache=True, parallel=True)
def _backward(offsets, ids, gdata, bg, grad_color, grad_alpha, width, height, n_chunks, max_len):
    n = gdata.shape[0]
    # per-chunk accumulators: du, dv, dA, dB, dC, dop, dr, dg, db
    acc = np.zeros((n_chunks, n, 9))
    rows_per = (height + n_chunks - 1) // n_chunks
    for ch in prange(n_chunks):
        al = np.empty(max_len)
        tr = np.empty(max_len)
        gs = np.empty(max_len, dtype=np.int64)
        fac = np.empty(max_len)
        raws = np.empty(max_len)
        for y in range(ch * rows_per, min(height, (ch + 1) * rows_per)):
            py = y + 0.5
            for x in range(width):
                p = y * width + x
                px = x + 0.5
                t = 1.0
                m = 0
                for k in range(offsets[p], offsets[p + 1]):
                    g = ids[k]
                    dx = px - gdata[g, 0]
                    dy = py - gdata[g, 1]
                    power = -0.5 * (gdata[g, 2] * dx * dx + gdata[g, 4] * dy * dy) - gdata[g, 3] * dx * dy
                    a, f, raw = _alpha(power, gdata[g, 5], gdata[g, 6])
                    if a == 0.0:
                        continue
                    al[m] = a
                    tr[m] = t
                    gs[m] = g
                    fac[m] = f
                    raws[m] = raw
                    m += 1
                    t *= 1.0 - a
                    if t < T_MIN:
                        break
                gc0 = grad_color[y, x, 0]
                gc1 = grad_color[y, x, 1]
                gc2 = grad_color[y, x, 2]
                ga = grad_alpha[y, x]
                s0 = bg[0] * t
                s1 = bg[1] * t
                s2 = bg[2] * t
                t_final = t
                for i in range(m - 1, -1, -1):
                    g = gs[i]
                    a = al[i]
                    ti = tr[i]
                    w = a * ti
                    cr = gdata[g, 7]
                    cg = gdata[g, 8]
                    cb = gdata[g, 9]
                    inv = 1.0 / (1.0 - a)
                    dl_da = (gc0 * (cr * ti - s0 * inv) + gc1 * (cg * ti - s1 * inv)
                             + gc2 * (cb * ti - s2 * inv) + ga * t_final * inv)
                    acc[ch, g, 6] += gc0 * w
                    acc[ch, g, 7] += gc1 * w
                    acc[ch, g, 8] += gc2 * w
                    s0 += cr * w
                    s1 += cg * w
                    s2 += cb * w
                    if fac[i] == 0.0:
                        continue
                    dl_draw = dl_da * fac[i]
                    acc[ch, g, 5] += dl_draw * raws[i] / gdata[g, 5]
                    dl_dpow = dl_draw * raws[i]
                    dx = px - gdata[g, 0]
                    dy = py - gdata[g, 1]
                    acc[ch, g, 0] += dl_dpow * (gdata[g, 2] * dx + gdata[g, 3] * dy)
                    acc[ch, g, 1] += dl_dpow * (gdata[g, 3] * dx + gdata[g, 4] * dy)
                    acc[ch, g, 2] += dl_dpow * (-0.5 * dx * dx)
                    acc[ch, g, 3] += dl_dpow * (-dx * dy)
                    acc[ch, g, 4] += dl_dpow * (-0.5 * dy * dy)
    out = np.zeros((n, 9))
    for ch in range(n_chunks):
        out += acc[ch]
    return out


def _pack(cloud: GaussianCloud, proj: Projection) -> np.ndarray:
    """Contiguous per-Gaussian kernel inputs in front-to-back order."""
    v = proj.visible
    op = cloud.opacities[v]
    return np.ascontiguousarray(np.concatenate([
        proj.mean2d[v], proj.conic[v], op[:, None], np.log(ALPHA_MIN / op)[:, None],
        cloud.colors[v], proj.cam[v, 2:3]], axis=1))


def _as_bg(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if np.any(bg < 0) or np.any(bg > 1):
        raise ValueError(f"background must lie in [0, 1], got {bg}")
    return bg


def render_with_state(cloud: GaussianCloud, pose: CameraPose, background=WHITE,
                      geometry: Geometry | None = None):
    bg = _as_bg(background)
    w, h = pose.width, pose.height
    geometry = geometry if geometry is not None else cloud_geometry(cloud)
    proj = project(cloud, pose, geometry)
    gdata = _pack(cloud, proj)
    offsets, ids = _build_lists(gdata, np.ascontiguousarray(proj.radius[proj.visible]), w, h)
    color, alpha, depth = _forward(offsets, ids, gdata, bg, w, h)
    state = RenderState(proj, offsets, ids, gdata, len(cloud), pose, bg, geometry)
    return RenderOutput(color, alpha, depth), state


def render(cloud: GaussianCloud, pose: CameraPose, background=WHITE) -> RenderOutput:
    """Render one view. An empty cloud yields the pure background with zero alpha."""
    return render_with_state(cloud, pose, background)[0]


def render_rig(cloud: GaussianCloud, rig: ViewRig, background=WHITE) -> list[RenderOutput]:
    return [render(cloud, pose, background) for pose in rig.poses]


def render_backward(cloud: GaussianCloud, pose: CameraPose, background, grad_color: np.ndarray,
                    grad_alpha: np.ndarray | None = None, state: RenderState | None = None) -> RenderGradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter, given dL/dcolor (and dL/dalpha).

    The rotation gradient is w.r.t. the (unit) quaternion, projected onto the
    tangent space of the unit sphere.
    """
    n = len(cloud)
    h, w = pose.height, pose.width
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (h, w, 3):
        raise PipelineError(f"upstream color gradient {grad_color.shape} does not match image {(h, w, 3)}")
    grad_alpha = np.zeros((h, w)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    if grad_alpha.shape != (h, w):
        raise PipelineError(f"upstream alpha gradient {grad_alpha.shape} does not match image {(h, w)}")
    if state is None:
        _, state = render_with_state(cloud, pose, background)
    elif state.n_gaussians != n or state.pose is not pose:
        raise PipelineError("render state was produced for a different cloud or pose")
    bg = _as_bg(background)
    if not np.array_equal(bg, state.background):
        raise PipelineError("render state was produced with a different background")
    if n == 0:
        z = np.zeros((0, 3))
        return RenderGradients(z, z, z, np.zeros(0), np.zeros((0, 4)))
    acc = _new_accumulator(n)
    _accumulate(state, bg, grad_color, grad_alpha, acc)
    return _finish(cloud, state.geometry, acc)


def _new_accumulator(n: int) -> dict:
    return {"pos": np.zeros((n, 3)), "cov3": np.zeros((n, 3, 3)), "col": np.zeros((n, 3)), "op": np.zeros(n)}


def _accumulate(state: RenderState, bg, grad_color, grad_alpha, acc: dict) -> None:
    """Add one view's parameter gradients (position, 3D covariance, color, opacity) into ``acc``."""
    pose, proj = state.pose, state.proj
    h, w = pose.height, pose.width
    counts = np.diff(state.offsets)
    max_len = int(counts.max()) if counts.size else 0
    ranked = _backward(state.offsets, state.ids, state.gdata, bg, grad_color, grad_alpha,
                       w, h, N_CHUNKS, max(max_len, 1))
    r_wc, _ = pose.world_to_camera
    _chain_kernel(proj.visible, ranked, proj.cam, proj.cov2d, state.geometry.cov3d,
                  np.ascontiguousarray(r_wc), float(pose.focal), acc["pos"], acc["cov3"])
    acc["col"][proj.visible] += ranked[:, 6:9]
    acc["op"][proj.visible] += ranked[:, 5]


@njit(cache=True)
def _chain_kernel(visible, ranked, cam, cov2d, cov3d, r, f, g_pos, g_cov3):
    """Screen-space gradients (mean, conic) -> position and 3D covariance gradients."""
    t = np.empty((2, 3))
    gt0 = np.empty(3)
    gt1 = np.empty(3)
    gT = np.empty((2, 3))
    for rank in range(visible.shape[0]):
        i = visible[rank]
        g_u, g_v = ranked[rank, 0], ranked[rank, 1]
        g_ca, g_cb, g_cc = ranked[rank, 2], ranked[rank, 3], ranked[rank, 4]
        a, b, c = cov2d[i, 0], cov2d[i, 1], cov2d[i, 2]
        det2 = (a * c - b * b) ** 2
        # d(conic)/d(cov2d); conic B multiplies the doubled cross term, cov b is the symmetric entry
        ga = (g_ca * (-c * c) + g_cb * (b * c) + g_cc * (-b * b)) / det2
        gb = 0.5 * (g_ca * (2 * b * c) + g_cb * (-(a * c + b * b)) + g_cc * (2 * a * b)) / det2
        gc = (g_ca * (-b * b) + g_cb * (a * b) + g_cc * (-a * a)) / det2
        x, y, z = cam[i, 0], cam[i, 1], cam[i, 2]
        if z <= NEAR:
            z = 1.0
        j0, j02 = f / z, -f * x / (z * z)
        j12 = -f * y / (z * z)
        for k in range(3):
            t[0, k] = j0 * r[0, k] + j02 * r[2, k]
            t[1, k] = j0 * r[1, k] + j12 * r[2, k]
        # g_cov3 += T^T G T with G = [[ga, gb], [gb, gc]]
        for k in range(3):
            gt0[k] = ga * t[0, k] + gb * t[1, k]
            gt1[k] = gb * t[0, k] + gc * t[1, k]
        for k in range(3):
            for l in range(3):
                g_cov3[i, k, l] += t[0, k] * gt0[l] + t[1, k] * gt1[l]
        # dL/dT = 2 G T Sigma, then dL/dJ = dL/dT W^T
        gT[:] = 0.0
        for k in range(3):
            for l in range(3):
                gT[0, k] += 2.0 * gt0[l] * cov3d[i, l, k]
                gT[1, k] += 2.0 * gt1[l] * cov3d[i, l, k]
        gj00 = gT[0, 0] * r[0, 0] + gT[0, 1] * r[0, 1] + gT[0, 2] * r[0, 2]
        gj02 = gT[0, 0] * r[2, 0] + gT[0, 1] * r[2, 1] + gT[0, 2] * r[2, 2]
        gj11 = gT[1, 0] * r[1, 0] + gT[1, 1] * r[1, 1] + gT[1, 2] * r[1, 2]
        gj12 = gT[1, 0] * r[2, 0] + gT[1, 1] * r[2, 1] + gT[1, 2] * r[2, 2]
        z2, z3 = z * z, z * z * z
        gx = g_u * f / z + gj02 * (-f / z2)
        gy = g_v * f / z + gj12 * (-f / z2)
        gz = (g_u * (-f * x / z2) + g_v * (-f * y / z2) + (gj00 + gj11) * (-f / z2)
              + gj02 * (2 * f * x / z3) + gj12 * (2 * f * y / z3))
        for k in range(3):
            g_pos[i, k] += gx * r[0, k] + gy * r[1, k] + gz * r[2, k]


def _finish(cloud: GaussianCloud, geometry: Geometry, acc: dict) -> RenderGradients:
    """Convert accumulated 3D covariance gradients to scale and quaternion gradients."""
    rot = geometry.rot
    s = cloud.scales
    m = rot * s[:, None, :]
    g_m = 2.0 * acc["cov3"] @ m
    g_scale = np.einsum("nik,nik->nk", g_m, rot)
    g_rot = g_m * s[:, None, :]
    qn = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    q = cloud.rotations / qn
    g_q = _rotation_grad_to_quat(q, g_rot)
    g_q -= np.sum(g_q * q, axis=1, keepdims=True) * q
    g_q /= qn
    return RenderGradients(acc["pos"], g_scale, acc["col"], acc["op"], g_q)


def _rotation_grad_to_quat(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q.T
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=1)


# ---------------------------------------------------------------------------
# autodiff integration
# ---------------------------------------------------------------------------

PARAM_KEYS = ("positions", "scales", "colors", "opacities", "rotations")


def render_tensor(params: dict, poses, background=WHITE) -> ad.Tensor:
    """Render every pose; returns a (V, H, W, 4) tensor of RGB + alpha.

    ``params`` maps the five parameter names to tensors; the backward pass is
    the analytic splatting gradient, injected through ``autodiff.custom``.
    """
    poses = list(poses)
    if not poses:
        raise ShapeError("render_tensor needs at least one pose")
    size = poses[0].image_size
    if any(p.image_size != size for p in poses):
        raise ShapeError("render_tensor needs equally sized views")

    def fwd(pos, scl, col, opa, rot):
        cloud = GaussianCloud(pos, scl, col, opa, rot)
        geometry = cloud_geometry(cloud)
        outs, states = [], []
        for pose in poses:
            out, st = render_with_state(cloud, pose, background, geometry)
            outs.append(np.concatenate([out.color, out.alpha[..., None]], axis=-1))
            states.append(st)
        return np.stack(outs), (cloud, states)

    def back(ctx, g):
        cloud, states = ctx
        out_dtype = g.dtype
        g = np.asarray(g, dtype=np.float64)
        acc = _new_accumulator(len(cloud))
        for i, st in enumerate(states):
            _accumulate(st, st.background, np.ascontiguousarray(g[i, ..., :3]), np.ascontiguousarray(g[i, ..., 3]), acc)
        grads = _finish(cloud, states[0].geometry, acc).as_list()
        return tuple(t.astype(out_dtype) for t in grads)

    return ad.custom(fwd, back, *(params[k] for k in PARAM_KEYS))
