import numpy as np
import pytest
from hypothesis import given, strategies as st

from op_cases import cases, op_of, run_case
from splatdiff import autodiff as ad
from splatdiff.errors import ShapeError

CASES = cases(np.random.default_rng(2024))


def test_every_op_has_a_case():
    assert set(ad.op_set()) == {op_of(name) for name in CASES}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradcheck(name):
    fn, arrays = CASES[name]
    ok, worst = run_case(fn, arrays)
    assert ok, f"{name}: worst violation ratio {worst:.3g}"


def test_required_ops_present():
    required = {"add", "mul", "sub", "scale", "matmul", "conv2d", "group_norm", "silu", "sigmoid", "exp",
                "clamp", "concat", "reshape", "mean", "sum", "custom", "upsample_nearest"}
    assert required <= set(ad.op_set())


def _grad(fn, *arrays):
    return ad.analytic_grad(fn, [np.asarray(a, dtype=np.float64) for a in arrays])


def test_sigmoid_slope_at_zero():
    (g,) = _grad(lambda x: ad.sum_(ad.sigmoid(x)), [0.0])
    assert g[0] == pytest.approx(0.25)


def test_identity_conv():
    x = np.random.default_rng(0).normal(size=(1, 3, 5, 4)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), padding=1)
    assert np.array_equal(out.data, x)


def test_conv_stride_two_shape():
    out = ad.conv2d(ad.Tensor(np.zeros((2, 3, 8, 6))), ad.Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 4, 3)


def test_sum_gradient_all_ones():
    (g,) = _grad(lambda x: ad.sum_(x), np.zeros((2, 3)))
    assert np.array_equal(g, np.ones((2, 3)))


def test_product_gradient():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=4), rng.normal(size=4)
    gx, gy = _grad(lambda a, b: ad.sum_(a * b), x, y)
    np.testing.assert_allclose(gx, y)
    np.testing.assert_allclose(gy, x)


def test_clamp_straight_through_zero_outside():
    (g,) = _grad(lambda x: ad.sum_(ad.clamp(x, -1.0, 1.0)), [-2.0, 0.0, 2.0])
    assert list(g) == [0.0, 1.0, 0.0]


def test_conv_norm_silu_chain():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(8, 4, 3, 3)) * 0.3
    probe = rng.normal(size=(1, 8, 4, 4))
    ok, worst = ad.gradcheck(
        lambda x, k: ad.sum_(ad.silu(ad.group_norm(ad.conv2d(x, k, padding=1), 8)) * probe),
        [rng.normal(size=(1, 4, 4, 4)), w])
    assert ok, worst


@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    l1 = lambda t: ad.sum_(ad.tanh(ad.matmul(t, w)))  # noqa: E731
    l2 = lambda t: ad.mean(ad.square(ad.sigmoid(t)))  # noqa: E731
    (g1,) = _grad(l1, x)
    (g2,) = _grad(l2, x)
    (g,) = _grad(lambda t: ad.scale(l1(t), a) + ad.scale(l2(t), b), x)
    np.testing.assert_allclose(g, a * g1 + b * g2, atol=1e-6)


def test_deterministic_gradients():
    rng = np.random.default_rng(9)
    arrays = [rng.normal(size=(1, 4, 6, 6)).astype(np.float32), rng.normal(size=(8, 4, 3, 3)).astype(np.float32)]

    def run():
        xs = [ad.Tensor(a, requires_grad=True) for a in arrays]
        with ad.Tape() as tape:
            loss = ad.mean(ad.silu(ad.group_norm(ad.conv2d(xs[0], xs[1], padding=1), 8)))
        g = tape.backward(loss)
        return [g[t] for t in xs]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_fan_out_accumulates():
    (g,) = _grad(lambda x: ad.sum_(x * x + x), [1.0, 2.0])
    np.testing.assert_allclose(g, [3.0, 5.0])


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_foreign_loss_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        loss = ad.sum_(x)
    with pytest.raises(ValueError):
        ad.Tape().backward(loss)


def test_tape_consumed_once():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x * x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_shape_errors_name_both_shapes():
    a, b = ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        ad.group_norm(ad.Tensor(np.zeros((1, 6, 2, 2))), 8)
    with pytest.raises(ShapeError):
        ad.reshape(a, (5,))


def test_debug_mode_traps_non_finite():
    with ad.debug_mode(), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            ad.log(ad.Tensor(np.array([-1.0, 1.0])))
    with np.errstate(invalid="ignore"):
        ad.log(ad.Tensor(np.array([-1.0])))  # silent outside debug mode


def test_default_dtype_float32():
    assert ad.Tensor([1.0, 2.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert ad.Tensor([1.0]).dtype == np.float64


def test_no_tape_no_recording():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad
