import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from splatdiff import autodiff as ad
from splatdiff.codec import (
    BASIS, D, K, Latent, LatentGrid, assemble_grid, decode, decode_array, encode, encode_array, encode_tensor,
    mosaic, split_grid, unmosaic,
)
from splatdiff.errors import ShapeError

images = hnp.arrays(np.float64, (16, 24, 3), elements=st.floats(0.0, 1.0))


def test_constants():
    assert K == 8 and D == 4
    assert BASIS.shape == (4, 192)


def test_basis_orthonormal():
    np.testing.assert_allclose(BASIS @ BASIS.T, np.eye(4), atol=1e-8)


def test_mid_gray_is_zero():
    z = encode(np.full((32, 16, 3), 0.5))
    assert z.shape == (4, 2, 4)
    assert np.all(z.data == 0)


def test_white_image_hand_projection():
    z = encode(np.ones((16, 16, 3))).data
    # luma DC basis entries are 1/(8 sqrt 3); a white patch is 0.5 above gray on all 192 entries
    luma_dc = 192 * 0.5 / (8 * np.sqrt(3.0))
    assert luma_dc == pytest.approx(6.928203230275509, abs=1e-12)
    np.testing.assert_allclose(z[..., 0], luma_dc, atol=1e-12)
    np.testing.assert_allclose(z[..., 1:], 0.0, atol=1e-12)


def test_shape_checked():
    with pytest.raises(ShapeError):
        encode(np.zeros((12, 16, 3)))
    with pytest.raises(ShapeError):
        encode(np.zeros((16, 16, 4)))
    with pytest.raises(ShapeError):
        decode(np.zeros((2, 2, 3)))


@given(images, images, st.floats(-2, 2), st.floats(-2, 2))
def test_encode_affine_linearity(x, y, a, b):
    gray = np.full_like(x, 0.5)
    lhs = encode(a * x + b * y - (a + b - 1) * gray).data
    rhs = a * encode(x).data + b * encode(y).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@pytest.mark.parametrize("value", [0.0, 0.25, 0.5, 1.0])
def test_constant_roundtrip(value):
    img = np.full((16, 16, 3), value)
    np.testing.assert_allclose(decode(encode(img)), img, atol=1e-6)


def test_decode_zero_is_gray():
    np.testing.assert_allclose(decode(Latent(np.zeros((2, 3, 4)))), 0.5)


@given(images)
def test_projection_idempotent(x):
    z = encode(x).data
    np.testing.assert_allclose(encode(decode_array(z, clamp=False)).data, z, atol=1e-6)


def test_decode_clamps():
    z = np.zeros((1, 1, 4))
    z[0, 0, 0] = 100.0
    img = decode(z)
    assert img.max() == 1.0 and img.min() >= 0.0


def test_float32_path_matches(rng):
    x = rng.uniform(0, 1, (2, 16, 16, 3))
    np.testing.assert_allclose(encode_array(x.astype(np.float32)), encode_array(x), atol=1e-5)


def test_batched_encode_matches_single(rng):
    x = rng.uniform(0, 1, (3, 16, 8, 3))
    batch = encode_array(x)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], encode(x[i]).data)


def test_patch_layout_is_local():
    img = np.full((16, 16, 3), 0.5)
    img[8:16, 0:8] = 1.0  # bottom-left patch only
    z = encode(img).data
    assert np.count_nonzero(np.abs(z[..., 0]) > 1e-12) == 1
    assert abs(z[1, 0, 0]) > 0


def test_encode_tensor_gradient(rng):
    x = rng.uniform(0, 1, (8, 16, 3))
    w = rng.normal(size=(1, 2, 4))
    ok, worst = ad.gradcheck(lambda t: ad.sum_(encode_tensor(t) * w), [x], eps=1e-6, atol=1e-7, rtol=1e-5)
    assert ok, worst


# --- grids --------------------------------------------------------------------------

def test_grid_dims_six_views():
    grid = assemble_grid([Latent(np.zeros((32, 32, 4)))] * 6)
    assert grid.data.shape == (64, 96, 4)
    assert grid.tile_shape == (32, 32)


@given(st.sampled_from([2, 4, 6]), st.integers(0, 2 ** 32 - 1))
def test_grid_roundtrip_exact(v, seed):
    rng = np.random.default_rng(seed)
    lats = [Latent(rng.normal(size=(3, 5, 4))) for _ in range(v)]
    back = split_grid(assemble_grid(lats))
    assert len(back) == v
    for a, b in zip(lats, back):
        assert np.array_equal(a.data, b.data)


def test_grid_row_major_placement():
    lats = [np.full((2, 2, 4), float(i)) for i in range(6)]
    data = mosaic(lats)
    assert data[0, 0, 0] == 0 and data[0, 2, 0] == 1 and data[0, 4, 0] == 2
    assert data[2, 0, 0] == 3 and data[2, 4, 0] == 5
    assert all(np.array_equal(a, b) for a, b in zip(unmosaic(data, 6), lats))


def test_grid_identical_tiles():
    lat = Latent(np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4))
    for tile in split_grid(assemble_grid([lat] * 4)):
        assert np.array_equal(tile.data, lat.data)


@pytest.mark.parametrize("v", [0, 1, 3, 5])
def test_grid_rejects_odd(v):
    with pytest.raises(ShapeError):
        assemble_grid([Latent(np.zeros((2, 2, 4)))] * v)


def test_grid_rejects_mixed_sizes():
    with pytest.raises(ShapeError):
        assemble_grid([Latent(np.zeros((2, 2, 4))), Latent(np.zeros((2, 3, 4)))])


def test_latent_grid_type():
    g = LatentGrid(np.zeros((4, 6, 4)), 6)
    assert g.tile_shape == (2, 2)
