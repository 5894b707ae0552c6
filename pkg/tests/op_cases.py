"""One finite-difference case per registered autodiff op.

Each case is ``(fn, arrays)``: ``fn`` maps tensors to a scalar that exercises
the op, with inputs kept away from kinks (abs at 0, clamp bounds).
"""

import numpy as np

from splatdiff import autodiff as ad

FD_EPS = 1e-3
FD_ATOL = 1e-4
FD_RTOL = 1e-2


def _away_from(x, points, gap=0.05):
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-12) * gap, x)
    return x


def _cube_forward(x):
    return x ** 3, x


def _cube_backward(x, g):
    return (3 * x * x * g,)


def cases(rng) -> dict:
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    w2 = n(2, 3, 4)
    w3 = n(3, 4)
    img = n(2, 16, 3, 3)
    probe1 = n(2, 5)
    probe2 = n(1, 3, 3, 3)
    probe3 = n(2, 2)
    probe4 = n(2, 3, 5)
    probe5 = n(2, 4)
    probe6 = n(4, 3)
    probe7 = n(3, 2, 4)
    probe8 = n(3, 1)
    probe9 = n(4, 2, 3)
    probe10 = n(1, 2, 4, 6)
    return {
        "abs": (lambda a: ad.sum_(ad.abs_(a) * w3), [_away_from(n(3, 4), [0.0])]),
        "add": (lambda a, b: ad.sum_(ad.add(a, b) * w2), [n(2, 3, 4), n(3, 1)]),
        "clamp": (lambda a: ad.sum_(ad.clamp(a, -0.5, 0.7) * w3), [_away_from(n(3, 4), [-0.5, 0.7])]),
        "concat": (lambda a, b: ad.sum_(ad.concat([a, b], axis=1) * probe1), [n(2, 2), n(2, 3)]),
        "conv2d": (lambda x, w, b: ad.sum_(ad.square(ad.conv2d(x, w, b, stride=1, padding=1))),
                   [n(1, 2, 5, 5), n(3, 2, 3, 3), n(3)]),
        "conv2d_stride2": (lambda x, w, b: ad.sum_(ad.conv2d(x, w, b, stride=2, padding=1) * probe2),
                           [n(1, 2, 6, 6), n(3, 2, 3, 3), n(3)]),
        "custom": (lambda a: ad.sum_(ad.custom(_cube_forward, _cube_backward, a) * w3), [n(3, 4)]),
        "div": (lambda a, b: ad.sum_(ad.div(a, b) * w3), [n(3, 4), 1.5 + rng.uniform(size=(3, 4))]),
        "exp": (lambda a: ad.sum_(ad.exp(a) * w3), [n(3, 4)]),
        "getitem": (lambda a: ad.sum_(a[1:, ::2] * probe3) + ad.sum_(a[np.array([0, 2, 0]), np.array([1, 3, 1])]),
                    [n(3, 4)]),
        "group_norm": (lambda x, w, b: ad.sum_(ad.group_norm(x, 8, w, b) * img),
                       [n(2, 16, 3, 3), n(16), n(16)]),
        "log": (lambda a: ad.sum_(ad.log(a) * w3), [0.5 + rng.uniform(size=(3, 4))]),
        "matmul": (lambda a, b: ad.sum_(ad.matmul(a, b) * probe4), [n(2, 3, 4), n(4, 5)]),
        "mean": (lambda a: ad.sum_(ad.mean(a, axis=1) * probe5) + ad.mean(a), [n(2, 3, 4)]),
        "mul": (lambda a, b: ad.sum_(ad.mul(a, b) * w2), [n(2, 3, 4), n(4)]),
        "reshape": (lambda a: ad.sum_(ad.reshape(a, (4, 3)) * probe6), [n(3, 4)]),
        "scale": (lambda a: ad.sum_(ad.scale(a, -2.5) * w3), [n(3, 4)]),
        "sigmoid": (lambda a: ad.sum_(ad.sigmoid(a) * w3), [n(3, 4)]),
        "silu": (lambda a: ad.sum_(ad.silu(a) * w3), [n(3, 4)]),
        "sqrt": (lambda a: ad.sum_(ad.sqrt(a) * w3), [0.5 + rng.uniform(size=(3, 4))]),
        "square": (lambda a: ad.sum_(ad.square(a) * w3), [n(3, 4)]),
        "stack": (lambda a, b: ad.sum_(ad.stack([a, b], axis=1) * probe7), [n(3, 4), n(3, 4)]),
        "sub": (lambda a, b: ad.sum_(ad.sub(a, b) * w2), [n(2, 3, 4), n(2, 1, 4)]),
        "sum": (lambda a: ad.sum_(ad.square(ad.sum_(a, axis=0))) + ad.sum_(ad.sum_(a, axis=1, keepdims=True) * probe8),
                [n(3, 4)]),
        "tanh": (lambda a: ad.sum_(ad.tanh(a) * w3), [n(3, 4)]),
        "transpose": (lambda a: ad.sum_(ad.transpose(a, (2, 0, 1)) * probe9), [n(2, 3, 4)]),
        "upsample_nearest": (lambda x: ad.sum_(ad.upsample_nearest(x, 2) * probe10), [n(1, 2, 2, 3)]),
    }


def op_of(case_name: str) -> str:
    return case_name.split("_stride")[0]


def run_case(fn, arrays):
    return ad.gradcheck(fn, arrays, eps=FD_EPS, atol=FD_ATOL, rtol=FD_RTOL)
