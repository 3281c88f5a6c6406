"""Per-pixel resampling kernels.

Every kernel has a numba ``@njit`` implementation and a vectorized numpy
twin.  Set ``COSINGAN_DISABLE_JIT=1`` (or run without numba installed) to use
the numpy path.  Both paths produce the same values up to float rounding.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

EDGE = 0
CONSTANT = 1


def jit_enabled() -> bool:
    flag = os.environ.get("COSINGAN_DISABLE_JIT", "").strip().lower()
    return HAVE_NUMBA and flag not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _bilinear_numpy(src, ys, xs, mode, cval):
    h, w = src.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros(ys.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            if mode == EDGE:
                val = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            else:
                inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                val = np.where(inside, src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], cval)
            out += wy * wx * val
    return out


def _nearest_numpy(src, ys, xs, mode, cval):
    h, w = src.shape
    yy = np.floor(ys + 0.5).astype(np.int64)
    xx = np.floor(xs + 0.5).astype(np.int64)
    if mode == EDGE:
        return src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return np.where(inside, vals, np.asarray(cval, dtype=src.dtype)).astype(src.dtype)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _bilinear_jit(src, ys, xs, mode, cval):
        h, w = src.shape
        n, m = ys.shape
        out = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            for j in range(m):
                y = ys[i, j]
                x = xs[i, j]
                y0 = int(np.floor(y))
                x0 = int(np.floor(x))
                fy = y - y0
                fx = x - x0
                acc = 0.0
                for dy in range(2):
                    wy = fy if dy == 1 else 1.0 - fy
                    yy = y0 + dy
                    for dx in range(2):
                        wx = fx if dx == 1 else 1.0 - fx
                        xx = x0 + dx
                        if mode == 0:
                            yc = min(max(yy, 0), h - 1)
                            xc = min(max(xx, 0), w - 1)
                            val = src[yc, xc]
                        elif yy < 0 or yy >= h or xx < 0 or xx >= w:
                            val = cval
                        else:
                            val = src[yy, xx]
                        acc += wy * wx * val
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _nearest_jit(src, ys, xs, mode, cval):
        h, w = src.shape
        n, m = ys.shape
        out = np.empty((n, m), dtype=src.dtype)
        for i in range(n):
            for j in range(m):
                yy = int(np.floor(ys[i, j] + 0.5))
                xx = int(np.floor(xs[i, j] + 0.5))
                if mode == 0:
                    out[i, j] = src[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
                elif yy < 0 or yy >= h or xx < 0 or xx >= w:
                    out[i, j] = cval
                else:
                    out[i, j] = src[yy, xx]
        return out


def remap_bilinear(src, ys, xs, mode=EDGE, cval=0.0, use_jit=None):
    """Sample ``src`` at fractional pixel coordinates ``(ys, xs)``.

    Coordinates are pixel centres (``src[i, j]`` sits at ``(i, j)``).  Out of
    range samples are clamped to the border (``EDGE``) or read as ``cval``
    (``CONSTANT``).
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if ys.shape != xs.shape or ys.ndim != 2:
        raise ValueError(f"coordinate grids must share a 2-D shape, got {ys.shape} and {xs.shape}")
    if use_jit is None:
        use_jit = jit_enabled()
    if use_jit:
        return _bilinear_jit(src, ys, xs, int(mode), float(cval))
    return _bilinear_numpy(src, ys, xs, int(mode), float(cval))


def remap_nearest(src, ys, xs, mode=EDGE, cval=0, use_jit=None):
    """Nearest-neighbour counterpart of :func:`remap_bilinear` (keeps dtype)."""
    src = np.ascontiguousarray(src)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if ys.shape != xs.shape or ys.ndim != 2:
        raise ValueError(f"coordinate grids must share a 2-D shape, got {ys.shape} and {xs.shape}")
    if use_jit is None:
        use_jit = jit_enabled()
    if use_jit:
        return _nearest_jit(src, ys, xs, int(mode), src.dtype.type(cval))
    return _nearest_numpy(src, ys, xs, int(mode), cval)


def resize_grid(src_shape, dst_shape):
    """Half-pixel-centre sampling grid mapping ``dst_shape`` onto ``src_shape``."""
    (sh, sw), (dh, dw) = src_shape, dst_shape
    ys = (np.arange(dh, dtype=np.float64) + 0.5) * (sh / dh) - 0.5
    xs = (np.arange(dw, dtype=np.float64) + 0.5) * (sw / dw) - 0.5
    return np.meshgrid(ys, xs, indexing="ij")
