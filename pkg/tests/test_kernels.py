"""Kernel backends: numba and numpy paths must agree, and the numpy conv
implementations must match an independent scipy oracle."""

import numpy as np
import pytest
from scipy.signal import correlate

from gestrec import kernels as K
from gestrec.rng import Rng

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba path disabled")


def _conv_ref(x, w, b, stride):
    """Independent direct cross-correlation via scipy."""
    N, C, H, W = x.shape
    O = w.shape[0]
    full = np.stack([
        np.stack([sum(correlate(x[n, c], w[o, c], mode="valid") for c in range(C)) + b[o]
                  for o in range(O)])
        for n in range(N)])
    return full[:, :, ::stride, ::stride]


@pytest.mark.parametrize("shape,out_ch,stride", [
    ((2, 1, 8, 8), 3, 1),
    ((2, 3, 9, 7), 4, 2),
    ((1, 2, 12, 12), 2, 3),
])
def test_conv_forward_matches_scipy(shape, out_ch, stride):
    r = Rng(0)
    x = r.normal(shape, dtype=np.float64)
    w = r.normal((out_ch, shape[1], 3, 3), dtype=np.float64)
    b = r.normal((out_ch,), dtype=np.float64)
    got = K.conv2d_forward_np(x, w, b, stride)
    ref = _conv_ref(x, w, b, stride)
    assert np.allclose(got, ref, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("shape,out_ch,stride", [
    ((2, 1, 8, 8), 3, 1),
    ((3, 4, 10, 10), 4, 2),
    ((2, 16, 18, 18), 16, 2),
])
def test_conv_paths_agree(shape, out_ch, stride):
    r = Rng(1)
    x = r.normal(shape, dtype=np.float64)
    w = r.normal((out_ch, shape[1], 3, 3), dtype=np.float64)
    b = r.normal((out_ch,), dtype=np.float64)
    y_np = K.conv2d_forward_np(x, w, b, stride)
    y_nb = K.conv2d_forward_nb(x, w, b, stride)
    assert np.allclose(y_np, y_nb, atol=1e-10)

    g = r.normal(y_np.shape, dtype=np.float64)
    H, W = shape[2], shape[3]
    dx_np = K.conv2d_backward_input_np(g, w, stride, H, W)
    dx_nb = K.conv2d_backward_input_nb(g, w, stride, H, W)
    assert np.allclose(dx_np, dx_nb, atol=1e-10)

    dw_np, db_np = K.conv2d_backward_weights_np(x, g, 3, 3, stride)
    dw_nb, db_nb = K.conv2d_backward_weights_nb(x, g, 3, 3, stride)
    assert np.allclose(dw_np, dw_nb, atol=1e-10)
    assert np.allclose(db_np, db_nb, atol=1e-10)


@needs_numba
def test_resize_paths_agree():
    r = Rng(2)
    img = r.normal((3, 17, 23), dtype=np.float64)
    a = K.bilinear_resize_np(img, 32, 32)
    b = K.bilinear_resize_nb(img, 32, 32)
    assert np.allclose(a, b, atol=1e-12)


def test_resize_identity_and_range():
    r = Rng(3)
    img = r.normal((2, 6, 5), dtype=np.float64)
    same = K.bilinear_resize_np(img, 6, 5)
    assert np.allclose(same, img, atol=1e-12)
    up = K.bilinear_resize_np(img, 13, 11)
    assert up.min() >= img.min() - 1e-12
    assert up.max() <= img.max() + 1e-12


def test_resize_align_corners_linear_columns():
    # columns of [[0,1],[0,1]] upsampled 2x4 interpolate linearly 0 -> 1
    img = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    out = K.bilinear_resize_np(img, 2, 4)
    expected = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    assert np.allclose(out[0, 0], expected, atol=1e-12)
    assert np.allclose(out[0, 1], expected, atol=1e-12)


def test_resize_constant_input():
    img = np.full((3, 4, 4), 2.5)
    out = K.bilinear_resize_np(img, 7, 9)
    assert np.allclose(out, 2.5, atol=1e-12)


def test_conv_forward_deterministic():
    r = Rng(4)
    x = r.normal((2, 2, 8, 8), dtype=np.float32)
    w = r.normal((3, 2, 3, 3), dtype=np.float32)
    b = r.normal((3,), dtype=np.float32)
    a = K.conv2d_forward(x, w, b, 2)
    bb = K.conv2d_forward(x, w, b, 2)
    assert np.array_equal(a, bb)
