"""Hot numeric kernels: convolution, max-pooling and bilinear sampling.

Each kernel has two interchangeable implementations: a numba ``@njit`` one
(panel-blocked loops, BLAS for the inner products) and a vectorized pure-numpy
one.  The numba path is the default whenever numba imports; setting the
environment variable ``AFTN_NO_NUMBA=1`` forces the numpy path.  Both paths
compute the same quantities in double precision; ``benchmarks/bench_kernels.py``
compares their speed.
"""

import os

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

_DISABLED = os.environ.get("AFTN_NO_NUMBA", "") not in ("", "0")
USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"

_blas_limiter = None
if USE_NUMBA:
    # prange supplies the parallelism; a threaded BLAS inside those workers
    # only oversubscribes the cores and spin-waits. numba lowers np.dot through
    # scipy's BLAS, so load it before limiting or it escapes the limiter.
    try:
        import scipy.linalg.cython_blas  # noqa: F401
    except ImportError:
        pass
    try:
        import threadpoolctl

        _blas_limiter = threadpoolctl.threadpool_limits(1, "blas")
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# convolution (cross-correlation) on pre-padded input
#
# xp:    (B, C, Hp, Wp) float64, already zero-padded
# w_mat: (C_out, C*k*k) float64, kernels flattened row-major
# ---------------------------------------------------------------------------

def _conv_out_side(hp, k, stride):
    return (hp - k) // stride + 1


def _py_conv_forward(xp, w_mat, bias, k, stride):
    # Samples are independent, so the batch loop parallelizes without races.
    B, C, Hp, Wp = xp.shape
    c_out = w_mat.shape[0]
    ho = (Hp - k) // stride + 1
    wo = (Wp - k) // stride + 1
    ckk = C * k * k
    out = np.empty((B, c_out, ho, wo))
    for b in prange(B):
        panel = np.empty((ckk, wo))  # one output row of patches, stays cache-hot
        for i in range(ho):
            r = 0
            for c in range(C):
                for ky in range(k):
                    row = xp[b, c, i * stride + ky]
                    for kx in range(k):
                        for j in range(wo):
                            panel[r, j] = row[j * stride + kx]
                        r += 1
            ob = np.dot(w_mat, panel)
            for o in range(c_out):
                for j in range(wo):
                    out[b, o, i, j] = ob[o, j] + bias[o]
    return out


def _py_conv_grad_weights(xp, gout, k, stride):
    B, C, Hp, Wp = xp.shape
    c_out, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    ckk = C * k * k
    dw = np.zeros((c_out, ckk))
    db = np.zeros(c_out)
    panel = np.empty((ckk, wo))
    for b in range(B):
        for i in range(ho):
            r = 0
            for c in range(C):
                for ky in range(k):
                    row = xp[b, c, i * stride + ky]
                    for kx in range(k):
                        for j in range(wo):
                            panel[r, j] = row[j * stride + kx]
                        r += 1
            g = np.ascontiguousarray(gout[b, :, i, :])
            dw += np.dot(g, panel.T)
            for o in range(c_out):
                s = 0.0
                for j in range(wo):
                    s += g[o, j]
                db[o] += s
    return dw, db


def _py_conv_grad_input(gout, w_mat, c_in, hp, wp, k, stride):
    B, c_out, ho, wo = gout.shape
    dxp = np.zeros((B, c_in, hp, wp))
    for b in prange(B):
        for i in range(ho):
            g = np.ascontiguousarray(gout[b, :, i, :])
            gp = np.dot(w_mat.T, g)  # (C*k*k, wo)
            r = 0
            for c in range(c_in):
                for ky in range(k):
                    row = dxp[b, c, i * stride + ky]
                    for kx in range(k):
                        for j in range(wo):
                            row[j * stride + kx] += gp[r, j]
                        r += 1
    return dxp


def conv_forward_numpy(xp, w_mat, bias, k, stride):
    """im2col + one batched GEMM."""
    B, C, Hp, Wp = xp.shape
    ho = (Hp - k) // stride + 1
    wo = (Wp - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (B, C, k, k, ho, wo), (sb, sc, sh, sw, stride * sh, stride * sw)
    )
    cols = patches.reshape(B, C * k * k, ho * wo)
    out = np.matmul(w_mat, cols) + bias[None, :, None]
    return out.reshape(B, w_mat.shape[0], ho, wo)


def conv_grad_weights_numpy(xp, gout, k, stride):
    B, C, Hp, Wp = xp.shape
    ho, wo = gout.shape[2], gout.shape[3]
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (B, C, k, k, ho, wo), (sb, sc, sh, sw, stride * sh, stride * sw)
    )
    cols = patches.reshape(B, C * k * k, ho * wo)
    go = gout.reshape(B, gout.shape[1], ho * wo)
    dw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
    db = go.sum(axis=(0, 2))
    return dw, db


def conv_grad_input_numpy(gout, w_mat, c_in, hp, wp, k, stride):
    B, c_out, ho, wo = gout.shape
    go = gout.reshape(B, c_out, ho * wo)
    gcols = np.matmul(w_mat.T, go).reshape(B, c_in, k, k, ho, wo)
    dxp = np.zeros((B, c_in, hp, wp))
    for ky in range(k):
        for kx in range(k):
            dxp[
                :, :, ky : ky + stride * (ho - 1) + 1 : stride,
                kx : kx + stride * (wo - 1) + 1 : stride,
            ] += gcols[:, :, ky, kx]
    return dxp


# ---------------------------------------------------------------------------
# max pooling; argmax stored as flat index into the (H, W) plane so the
# backward pass routes each gradient to exactly one position
# ---------------------------------------------------------------------------

def _py_maxpool_forward(x, k, stride):
    B, C, H, W = x.shape
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1
    out = np.empty((B, C, ho, wo))
    idx = np.empty((B, C, ho, wo), dtype=np.int64)
    for b in prange(B):
        for c in range(C):
            plane = x[b, c]
            for i in range(ho):
                for j in range(wo):
                    i0 = i * stride
                    j0 = j * stride
                    best = plane[i0, j0]
                    arg = i0 * W + j0
                    for dy in range(k):
                        for dx in range(k):
                            v = plane[i0 + dy, j0 + dx]
                            if v > best:  # strict: ties keep first in scan order
                                best = v
                                arg = (i0 + dy) * W + (j0 + dx)
                    out[b, c, i, j] = best
                    idx[b, c, i, j] = arg
    return out, idx


def _py_maxpool_backward(idx, gout, h, w):
    B, C, ho, wo = gout.shape
    dx = np.zeros((B, C, h * w))
    for b in range(B):
        for c in range(C):
            for i in range(ho):
                for j in range(wo):
                    dx[b, c, idx[b, c, i, j]] += gout[b, c, i, j]
    return dx.reshape(B, C, h, w)


def maxpool_forward_numpy(x, k, stride):
    B, C, H, W = x.shape
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1
    sb, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (B, C, ho, wo, k, k), (sb, sc, stride * sh, stride * sw, sh, sw)
    ).reshape(B, C, ho, wo, k * k)
    flat = np.argmax(win, axis=4)  # first maximum in row-major window order
    out = np.take_along_axis(win, flat[..., None], axis=4)[..., 0]
    ii = np.arange(ho)[:, None] * stride + (flat // k)
    jj = np.arange(wo)[None, :] * stride + (flat % k)
    return out, ii * W + jj


def maxpool_backward_numpy(idx, gout, h, w):
    B, C = gout.shape[:2]
    dx = np.zeros((B, C, h * w))
    bc = np.arange(B * C)[:, None] * (h * w)
    lin = (bc + idx.reshape(B * C, -1)).ravel()
    np.add.at(dx.reshape(-1), lin, gout.ravel())
    return dx.reshape(B, C, h, w)


# ---------------------------------------------------------------------------
# bilinear patch sampling with constant fill outside the image
#
# Sample points are pixel centers of an S x S grid laid over the window
# [left, left+side] x [top, top+side]; a window congruent to the image
# reproduces it exactly.
# ---------------------------------------------------------------------------

def _py_bilinear_patch(img, left, top, side, size, fill):
    H, W = img.shape[0], img.shape[1]
    step = side / size
    out = np.empty((size, size, 3))
    for i in prange(size):
        sy = top + (i + 0.5) * step - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        for j in range(size):
            sx = left + (j + 0.5) * step - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            for ch in range(3):
                if 0 <= y0 < H and 0 <= x0 < W:
                    p00 = img[y0, x0, ch]
                else:
                    p00 = fill[ch]
                if 0 <= y0 < H and 0 <= x0 + 1 < W:
                    p01 = img[y0, x0 + 1, ch]
                else:
                    p01 = fill[ch]
                if 0 <= y0 + 1 < H and 0 <= x0 < W:
                    p10 = img[y0 + 1, x0, ch]
                else:
                    p10 = fill[ch]
                if 0 <= y0 + 1 < H and 0 <= x0 + 1 < W:
                    p11 = img[y0 + 1, x0 + 1, ch]
                else:
                    p11 = fill[ch]
                v0 = (1.0 - fx) * p00 + fx * p01
                v1 = (1.0 - fx) * p10 + fx * p11
                out[i, j, ch] = (1.0 - fy) * v0 + fy * v1
    return out


def bilinear_patch_numpy(img, left, top, side, size, fill):
    H, W = img.shape[0], img.shape[1]
    step = side / size
    sx = left + (np.arange(size) + 0.5) * step - 0.5
    sy = top + (np.arange(size) + 0.5) * step - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[None, :, None]
    fy = (sy - y0)[:, None, None]

    def tap(yi, xi):
        inside = ((yi >= 0) & (yi < H))[:, None, None] & ((xi >= 0) & (xi < W))[None, :, None]
        vals = img[np.clip(yi, 0, H - 1)[:, None], np.clip(xi, 0, W - 1)[None, :]]
        return np.where(inside, vals, fill[None, None, :])

    p00 = tap(y0, x0)
    p01 = tap(y0, x0 + 1)
    p10 = tap(y0 + 1, x0)
    p11 = tap(y0 + 1, x0 + 1)
    v0 = (1.0 - fx) * p00 + fx * p01
    v1 = (1.0 - fx) * p10 + fx * p11
    return (1.0 - fy) * v0 + fy * v1


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    # parallel=True only where loop iterations write disjoint outputs, so the
    # results stay bit-identical for any thread count. Accumulating kernels
    # (weight gradients) stay serial for the same reason.
    conv_forward_jit = njit(cache=True, parallel=True)(_py_conv_forward)
    conv_grad_weights_jit = njit(cache=True)(_py_conv_grad_weights)
    conv_grad_input_jit = njit(cache=True, parallel=True)(_py_conv_grad_input)
    maxpool_forward_jit = njit(cache=True, parallel=True)(_py_maxpool_forward)
    maxpool_backward_jit = njit(cache=True)(_py_maxpool_backward)
    bilinear_patch_jit = njit(cache=True, parallel=True)(_py_bilinear_patch)

if USE_NUMBA:
    conv_forward = conv_forward_jit
    conv_grad_weights = conv_grad_weights_jit
    conv_grad_input = conv_grad_input_jit
    maxpool_forward = maxpool_forward_jit
    maxpool_backward = maxpool_backward_jit
    bilinear_patch = bilinear_patch_jit
else:
    conv_forward = conv_forward_numpy
    conv_grad_weights = conv_grad_weights_numpy
    conv_grad_input = conv_grad_input_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    bilinear_patch = bilinear_patch_numpy


def set_thread_cap(n):
    """Cap numba's worker threads; BLAS threading is left to the environment."""
    if HAVE_NUMBA and n >= 1:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
