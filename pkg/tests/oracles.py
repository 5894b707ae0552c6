"""Slow, independent reference implementations used to check the fast code paths."""

import numpy as np

from splatdiff.gaussians import GaussianCloud

ALPHA_FLOOR = 1.0 / 255.0
ALPHA_CEIL = 0.999
NEAR_PLANE = 0.01
DILATION = 0.3
PARAM_NAMES = ("positions", "scales", "colors", "opacities", "rotations")


def splat_alpha(raw):
    """The renderer's per-pair alpha as a function of opacity * Gaussian falloff."""
    raw = np.asarray(raw, dtype=np.float64)
    x = raw / ALPHA_FLOOR - 1.0
    ramp = ALPHA_FLOOR * x * x * (5.0 - 3.0 * x)
    return np.where(raw < ALPHA_FLOOR, 0.0, np.where(raw < 2 * ALPHA_FLOOR, ramp, np.minimum(raw, ALPHA_CEIL)))


def _rotation(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def brute_force_render(cloud: GaussianCloud, pose, background, return_weights=False):
    """Composite every Gaussian at every pixel: no bounding boxes, no tiles, no screen culling."""
    w, h = pose.width, pose.height
    f = 0.5 * w / np.tan(np.radians(pose.fov_deg) / 2)
    world_to_cam = pose.rotation.T
    px, py = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    entries = []
    for i in range(len(cloud)):
        cam = world_to_cam @ (cloud.positions[i] - pose.origin)
        if cam[2] <= NEAR_PLANE:
            continue
        x, y, z = cam
        jac = np.array([[f / z, 0.0, -f * x / z ** 2], [0.0, f / z, -f * y / z ** 2]]) @ world_to_cam
        rot = _rotation(cloud.rotations[i])
        cov3 = rot @ np.diag(cloud.scales[i] ** 2) @ rot.T
        cov2 = jac @ cov3 @ jac.T + DILATION * np.eye(2)
        if np.linalg.det(cov2) <= 0:
            continue
        entries.append((z, i, np.array([f * x / z + w / 2, f * y / z + h / 2]), np.linalg.inv(cov2)))
    entries.sort(key=lambda e: (e[0], e[1]))
    color = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    weights = {}
    for _, i, mean, inv in entries:
        dx, dy = px - mean[0], py - mean[1]
        power = -0.5 * (inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
        a = splat_alpha(cloud.opacities[i] * np.exp(power))
        weights[i] = a * trans
        color += weights[i][..., None] * cloud.colors[i]
        trans = trans * (1.0 - a)
    color += trans[..., None] * np.asarray(background, dtype=np.float64)
    out = (color, 1.0 - trans)
    return out + (weights,) if return_weights else out


def _replace(cloud, name, value):
    fields = {k: getattr(cloud, k) for k in PARAM_NAMES}
    fields[name] = value
    return GaussianCloud(**fields)


def finite_difference_sweep(cloud, pose, background, grad_color, grad_alpha, analytic, eps=1e-4):
    """Central differences of sum(color * grad_color) + sum(alpha * grad_alpha) for every parameter.

    Returns {group: (numeric, analytic)}.
    """
    from splatdiff.render import render

    def loss(c):
        out = render(c, pose, background)
        return float(np.sum(out.color * grad_color) + np.sum(out.alpha * grad_alpha))

    result = {}
    for name, an in zip(PARAM_NAMES, analytic.as_list()):
        base = getattr(cloud, name)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            num[idx] = (loss(_replace(cloud, name, plus)) - loss(_replace(cloud, name, minus))) / (2 * eps)
        result[name] = (num, an)
    return result


def fd_pass_fraction(numeric, analytic, abs_tol=1e-3, rel_tol=0.02):
    ok = np.abs(analytic - numeric) <= np.maximum(abs_tol, rel_tol * np.abs(numeric))
    return float(np.mean(ok)) if ok.size else 1.0
