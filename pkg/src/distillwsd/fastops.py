"""Numba kernels for the memory-bound inner loops (im2col, pooling, RoI max).

Everything here is a plain data-movement/compare kernel with exact semantics
identical to the numpy fallbacks in tensor.py / regions.py; the GEMMs stay in
BLAS.  Kernels are single-threaded on purpose: they are memory-bound, and a
second thread pool fighting OpenBLAS over two cores measurably hurts.
`AVAILABLE` gates usage so the package still runs (more slowly) without numba.
"""

import ctypes
import warnings

_allocator_tuned = False


def tune_allocator():
    """Keep large numpy buffers on the glibc heap instead of mmap.

    Training reallocates tens of MB per step; by default glibc returns those
    blocks to the kernel on free, so every step pays page-fault plus zeroing
    costs.  Raising the mmap/trim thresholds roughly halves step time.
    No-op where glibc is unavailable.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


try:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from numba import njit
    AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


@njit(cache=True)
def im2col(xp, cols, k):
    """xp (n, c, hp, wp), stride-1 valid windows -> cols (n, oh*ow, c*k*k)."""
    n, c, hp, wp = xp.shape
    oh = hp - k + 1
    ow = wp - k + 1
    for ni in range(n):
        for y in range(oh):
            for x in range(ow):
                base = 0
                for ci in range(c):
                    for a in range(k):
                        for b in range(k):
                            cols[ni, y * ow + x, base] = xp[ni, ci, y + a, x + b]
                            base += 1


@njit(cache=True)
def col2im_add(dcols, dxp, k):
    """Scatter-add inverse of im2col; dxp must be zeroed by the caller."""
    n, c, hp, wp = dxp.shape
    oh = hp - k + 1
    ow = wp - k + 1
    for ni in range(n):
        for ci in range(c):
            for a in range(k):
                for b in range(k):
                    base = ci * k * k + a * k + b
                    for y in range(oh):
                        for x in range(ow):
                            dxp[ni, ci, y + a, x + b] += dcols[ni, y * ow + x, base]


@njit(cache=True)
def maxpool_forward(x, out, arg, k, stride):
    """Window max with the first (row-major) maximizer recorded in arg."""
    n, c = x.shape[0], x.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                y0 = oy * stride
                for ox in range(ow):
                    x0 = ox * stride
                    best = x[ni, ci, y0, x0]
                    bidx = 0
                    for a in range(k):
                        for b in range(k):
                            v = x[ni, ci, y0 + a, x0 + b]
                            if v > best:
                                best = v
                                bidx = a * k + b
                    out[ni, ci, oy, ox] = best
                    arg[ni, ci, oy, ox] = bidx


@njit(cache=True)
def maxpool_backward(g, arg, dx, k, stride):
    n, c = g.shape[0], g.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = arg[ni, ci, oy, ox]
                    dx[ni, ci, oy * stride + a // k, ox * stride + a % k] += g[ni, ci, oy, ox]


@njit(cache=True)
def roi_forward(fmap, ys, ye, xs, xe, out, arg):
    """Per-box bin max over fmap (c, fh, fw); arg holds flat cell indices.

    Ties keep the lowest flat index (row-major scan with strict >).
    """
    r, c = out.shape[0], out.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    fw = fmap.shape[2]
    for j in range(r):
        for ci in range(c):
            for by in range(oh):
                y0, y1 = ys[j, by], ye[j, by]
                for bx in range(ow):
                    x0, x1 = xs[j, bx], xe[j, bx]
                    best = fmap[ci, y0, x0]
                    bidx = y0 * fw + x0
                    for yy in range(y0, y1):
                        for xx in range(x0, x1):
                            v = fmap[ci, yy, xx]
                            if v > best:
                                best = v
                                bidx = yy * fw + xx
                    out[j, ci, by, bx] = best
                    arg[j, ci, by, bx] = bidx


@njit(cache=True)
def roi_backward(g, arg, dmap_flat):
    """Scatter bin gradients to their argmax cells; dmap_flat is (c, fh*fw)."""
    r, c = g.shape[0], g.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    for j in range(r):
        for ci in range(c):
            for by in range(oh):
                for bx in range(ow):
                    dmap_flat[ci, arg[j, ci, by, bx]] += g[j, ci, by, bx]


@njit(cache=True)
def roi_weighted_batch_forward(fmaps, img_of_box, ys, ye, xs, xe, scores, out, arg):
    """Score-weighted RoI max over a batch of feature maps.

    fmaps (n, c, fh, fw); box j reads fmaps[img_of_box[j]] and scales its bin
    maxima by scores[j].  arg records flat argmax cells (pre-weighting,
    lowest flat index on ties).
    """
    b, c = out.shape[0], out.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    fw = fmaps.shape[3]
    for j in range(b):
        ni = img_of_box[j]
        s = scores[j]
        for ci in range(c):
            for by in range(oh):
                y0, y1 = ys[j, by], ye[j, by]
                for bx in range(ow):
                    x0, x1 = xs[j, bx], xe[j, bx]
                    best = fmaps[ni, ci, y0, x0]
                    bidx = y0 * fw + x0
                    for yy in range(y0, y1):
                        for xx in range(x0, x1):
                            v = fmaps[ni, ci, yy, xx]
                            if v > best:
                                best = v
                                bidx = yy * fw + xx
                    out[j, ci, by, bx] = best * s
                    arg[j, ci, by, bx] = bidx


@njit(cache=True)
def roi_weighted_batch_backward(g, arg, img_of_box, scores, dmaps_flat):
    """Scatter score-scaled bin gradients; dmaps_flat is (n, c, fh*fw)."""
    b, c = g.shape[0], g.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    for j in range(b):
        ni = img_of_box[j]
        s = scores[j]
        for ci in range(c):
            for by in range(oh):
                for bx in range(ow):
                    dmaps_flat[ni, ci, arg[j, ci, by, bx]] += g[j, ci, by, bx] * s
