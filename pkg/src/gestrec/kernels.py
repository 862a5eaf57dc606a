"""Hot numeric kernels: 2-D convolution and bilinear resize.

Every kernel ships in two implementations: a numba ``@njit`` version
(``*_nb``) and a pure-numpy version (``*_np``, im2col/gather based).
``GESTREC_NUMBA=0`` (or ``false`` / ``off``) disables numba entirely;
otherwise the public entry points route to numba when the call is large
enough to amortize its dispatch overhead (~0.1 ms on small arrays) and to
numpy below that threshold. Path choice depends only on shapes, so runs
are reproducible. ``benchmarks/bench_kernels.py`` times the two paths
against each other.

Numba parallel loops only ever iterate over axes whose iterations write
disjoint output slots, so results are deterministic run to run.

Convolution kernels expect pre-padded input; padding policy lives in the
autodiff op layer.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_flag = os.environ.get("GESTREC_NUMBA", "1").strip().lower()
_WANT_NUMBA = _flag not in ("0", "false", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled via GESTREC_NUMBA")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # TBB version probe noise
        import numba
        from numba import njit, prange
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "omp"  # skip the noisy TBB probe
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def active_backend() -> str:
    """Name of the kernel path selected at import time."""
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# conv2d: x (N, C, H, W) pre-padded, w (O, C, KH, KW), b (O,), integer stride.
# Output (N, O, OH, OW) with OH = (H - KH)//stride + 1.
# ---------------------------------------------------------------------------

def _conv2d_out_hw(H, W, KH, KW, stride):
    return (H - KH) // stride + 1, (W - KW) // stride + 1


def _im2col(x: np.ndarray, KH: int, KW: int, stride: int) -> np.ndarray:
    """View x as (N, C*KH*KW, OH*OW) patch columns (copy, contiguous)."""
    N, C, H, W = x.shape
    OH, OW = _conv2d_out_hw(H, W, KH, KW, stride)
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, (N, C, KH, KW, OH, OW), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(patches).reshape(N, C * KH * KW, OH * OW)


def conv2d_forward_np(x, w, b, stride):
    N, C, H, W = x.shape
    O, _, KH, KW = w.shape
    OH, OW = _conv2d_out_hw(H, W, KH, KW, stride)
    cols = _im2col(x, KH, KW, stride)
    out = w.reshape(O, -1) @ cols + b[None, :, None]
    return out.reshape(N, O, OH, OW)


def conv2d_backward_input_np(grad, w, stride, H, W):
    """Gradient w.r.t. the (padded) input, shape (N, C, H, W).

    Implemented as a stride-1 correlation of the stride-dilated output
    gradient with the spatially flipped, channel-swapped kernel.
    """
    N, O, OH, OW = grad.shape
    _, C, KH, KW = w.shape
    DH, DW = (OH - 1) * stride + 1, (OW - 1) * stride + 1
    dil = np.zeros((N, O, DH + 2 * (KH - 1), DW + 2 * (KW - 1)), grad.dtype)
    dil[:, :, KH - 1:KH - 1 + DH:stride, KW - 1:KW - 1 + DW:stride] = grad
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, O, KH, KW)
    dx_used = conv2d_forward_np(dil, np.ascontiguousarray(wf),
                                np.zeros(C, grad.dtype), 1)
    usedH, usedW = DH + KH - 1, DW + KW - 1
    if usedH == H and usedW == W:
        return dx_used
    dx = np.zeros((N, C, H, W), grad.dtype)
    dx[:, :, :usedH, :usedW] = dx_used
    return dx


def conv2d_backward_weights_np(x, grad, KH, KW, stride):
    """Gradients w.r.t. kernel and bias: (O, C, KH, KW), (O,)."""
    N, O, OH, OW = grad.shape
    C = x.shape[1]
    cols = _im2col(x, KH, KW, stride)                     # (N, C*KH*KW, OH*OW)
    g = grad.reshape(N, O, OH * OW)
    dw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    db = grad.sum(axis=(0, 2, 3))
    return dw.reshape(O, C, KH, KW), db


if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _conv2d_forward_nb(x, w, b, stride):
        N, C, H, W = x.shape
        O, _, KH, KW = w.shape
        OH = (H - KH) // stride + 1
        OW = (W - KW) // stride + 1
        y = np.empty((N, O, OH, OW), x.dtype)
        for n in prange(N):
            for o in range(O):
                for i in range(OH):
                    for j in range(OW):
                        y[n, o, i, j] = b[o]
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[o, c, ki, kj]
                            for i in range(OH):
                                ib = i * stride + ki
                                for j in range(OW):
                                    y[n, o, i, j] += wv * x[n, c, ib, j * stride + kj]
        return y

    @njit(cache=True, parallel=True)
    def _conv2d_backward_input_nb(grad, w, stride, H, W):
        N, O, OH, OW = grad.shape
        _, C, KH, KW = w.shape
        dx = np.zeros((N, C, H, W), grad.dtype)
        for n in prange(N):
            for o in range(O):
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[o, c, ki, kj]
                            for i in range(OH):
                                ib = i * stride + ki
                                for j in range(OW):
                                    dx[n, c, ib, j * stride + kj] += wv * grad[n, o, i, j]
        return dx

    @njit(cache=True, parallel=True)
    def _conv2d_backward_weights_nb(x, grad, KH, KW, stride):
        N, O, OH, OW = grad.shape
        C = x.shape[1]
        dw = np.zeros((O, C, KH, KW), grad.dtype)
        db = np.zeros(O, grad.dtype)
        for o in prange(O):
            for n in range(N):
                for i in range(OH):
                    for j in range(OW):
                        g = grad[n, o, i, j]
                        db[o] += g
                        for c in range(C):
                            for ki in range(KH):
                                ib = i * stride + ki
                                for kj in range(KW):
                                    dw[o, c, ki, kj] += g * x[n, c, ib, j * stride + kj]
        return dw, db

    def conv2d_forward_nb(x, w, b, stride):
        return _conv2d_forward_nb(x, w, b, stride)

    def conv2d_backward_input_nb(grad, w, stride, H, W):
        return _conv2d_backward_input_nb(grad, w, stride, H, W)

    def conv2d_backward_weights_nb(x, grad, KH, KW, stride):
        return _conv2d_backward_weights_nb(x, grad, KH, KW, stride)


# ---------------------------------------------------------------------------
# Bilinear resize, align-corners convention: output index i maps to source
# coordinate i*(S_in-1)/(S_out-1); a singleton output axis samples the
# source midpoint. Interpolated values are convex combinations of inputs.
# ---------------------------------------------------------------------------

def _source_coords(n_out: int, n_in: int, dtype) -> np.ndarray:
    if n_out == 1:
        return np.full(1, (n_in - 1) / 2.0, dtype=dtype)
    coords = np.arange(n_out, dtype=dtype) * (n_in - 1) / (n_out - 1)
    return coords.astype(dtype, copy=False)


def bilinear_resize_np(img, out_h, out_w):
    C, H, W = img.shape
    dtype = img.dtype
    ys = _source_coords(out_h, H, dtype)
    xs = _source_coords(out_w, W, dtype)
    y0 = np.minimum(np.floor(ys).astype(np.int64), H - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0).astype(dtype)
    fx = (xs - x0).astype(dtype)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _bilinear_resize_nb(img, ys, xs):
        C, H, W = img.shape
        out_h = ys.shape[0]
        out_w = xs.shape[0]
        out = np.empty((C, out_h, out_w), img.dtype)
        for i in prange(out_h):
            y = ys[i]
            y0 = int(np.floor(y))
            if y0 > H - 1:
                y0 = H - 1
            y1 = min(y0 + 1, H - 1)
            fy = y - y0
            for j in range(out_w):
                x = xs[j]
                x0 = int(np.floor(x))
                if x0 > W - 1:
                    x0 = W - 1
                x1 = min(x0 + 1, W - 1)
                fx = x - x0
                for c in range(C):
                    top = img[c, y0, x0] * (1 - fx) + img[c, y0, x1] * fx
                    bot = img[c, y1, x0] * (1 - fx) + img[c, y1, x1] * fx
                    out[c, i, j] = top * (1 - fy) + bot * fy
        return out

    def bilinear_resize_nb(img, out_h, out_w):
        C, H, W = img.shape
        ys = _source_coords(out_h, H, img.dtype)
        xs = _source_coords(out_w, W, img.dtype)
        return _bilinear_resize_nb(img, ys, xs)


# Crossover points measured by benchmarks/bench_kernels.py on this op mix:
# numba direct loops win the scatter-style input gradient and low-channel
# forwards; BLAS-backed im2col wins channel-heavy forwards and the weight
# gradient (a plain GEMM); tiny calls always go to numpy because numba's
# dispatch overhead (~0.1 ms) dominates them.
_CONV_MACS_MIN = 200_000
_FWD_PATCH_MAX = 32          # C*KH*KW above which the forward GEMM wins
_RESIZE_PIXELS_MIN = 65_536


def _conv_macs(N, C, O, OH, OW, KH, KW) -> int:
    return N * C * O * OH * OW * KH * KW


if HAS_NUMBA:

    def conv2d_forward(x, w, b, stride):
        N, C, H, W = x.shape
        O, _, KH, KW = w.shape
        OH, OW = _conv2d_out_hw(H, W, KH, KW, stride)
        if (C * KH * KW <= _FWD_PATCH_MAX
                and _conv_macs(N, C, O, OH, OW, KH, KW) >= _CONV_MACS_MIN):
            return conv2d_forward_nb(x, w, b, stride)
        return conv2d_forward_np(x, w, b, stride)

    def conv2d_backward_input(grad, w, stride, H, W):
        N, O, OH, OW = grad.shape
        _, C, KH, KW = w.shape
        if _conv_macs(N, C, O, OH, OW, KH, KW) >= _CONV_MACS_MIN:
            return conv2d_backward_input_nb(grad, w, stride, H, W)
        return conv2d_backward_input_np(grad, w, stride, H, W)

    conv2d_backward_weights = conv2d_backward_weights_np

    def bilinear_resize(img, out_h, out_w):
        if img.shape[0] * out_h * out_w >= _RESIZE_PIXELS_MIN:
            return bilinear_resize_nb(img, out_h, out_w)
        return bilinear_resize_np(img, out_h, out_w)
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_input = conv2d_backward_input_np
    conv2d_backward_weights = conv2d_backward_weights_np
    bilinear_resize = bilinear_resize_np
