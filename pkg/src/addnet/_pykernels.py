"""Numpy implementations of the per-pixel kernels.

These are the reference fallback for :mod:`addnet._ckernels`; both expose the
same three functions with identical semantics.
"""
import numpy as np

EPS = 1e-9


def fill_convex(hull, height, width):
    """Rasterize a convex polygon given as counter-clockwise or clockwise vertices.

    Pixel ``(r, c)`` is sampled at its centre ``(x=c, y=r)`` and is set when the
    centre lies inside or on the polygon.
    """
    hull = np.asarray(hull, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.uint8)
    if height == 0 or width == 0:
        return out
    k = len(hull)
    x0, y0 = hull[:, 0], hull[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ys = np.arange(height, dtype=np.float64)
    lo = np.full(height, np.inf)
    hi = np.full(height, -np.inf)
    for i in range(k):
        ya, yb = min(y0[i], y1[i]), max(y0[i], y1[i])
        rows = (ys >= ya - EPS) & (ys <= yb + EPS)
        if not rows.any():
            continue
        if yb - ya <= EPS:
            xs_a = np.full(rows.sum(), min(x0[i], x1[i]))
            xs_b = np.full(rows.sum(), max(x0[i], x1[i]))
        else:
            t = np.clip((ys[rows] - y0[i]) / (y1[i] - y0[i]), 0.0, 1.0)
            xs_a = xs_b = x0[i] + t * (x1[i] - x0[i])
        lo[rows] = np.minimum(lo[rows], xs_a)
        hi[rows] = np.maximum(hi[rows], xs_b)
    valid = np.isfinite(lo)
    c_lo = np.where(valid, np.ceil(lo - EPS), 0).astype(np.int64)
    c_hi = np.where(valid, np.floor(hi + EPS), -1).astype(np.int64)
    c_lo = np.clip(c_lo, 0, width)
    c_hi = np.clip(c_hi, -1, width - 1)
    cols = np.arange(width)
    out[:] = (cols[None, :] >= c_lo[:, None]) & (cols[None, :] <= c_hi[:, None])
    return out


def _reflect_index(idx, n):
    # symmetric reflection (d c b a | a b c d | d c b a), any distance
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def blur_separable(image, kernel):
    """Convolve a 2D array with ``outer(kernel, kernel)`` using symmetric reflection."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w = image.shape
    r = len(kernel) // 2
    offsets = np.arange(-r, r + 1)
    rows = _reflect_index(np.arange(h)[:, None] + offsets[None, :], h)
    tmp = (image[rows] * kernel[None, :, None]).sum(axis=1)
    cols = _reflect_index(np.arange(w)[:, None] + offsets[None, :], w)
    return (tmp[:, cols] * kernel[None, None, :]).sum(axis=2)


def warp_bilinear(image, inverse, out_h, out_w):
    """Sample ``image`` (H, W, C) at ``inverse @ (x, y, 1)`` for each output pixel.

    Neighbours outside the source contribute zero.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    inverse = np.asarray(inverse, dtype=np.float64)
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inverse[0, 0] * xx + inverse[0, 1] * yy + inverse[0, 2]
    sy = inverse[1, 0] * xx + inverse[1, 1] * yy + inverse[1, 2]
    fx = np.floor(sx)
    fy = np.floor(sy)
    ax = (sx - fx)[..., None]
    ay = (sy - fy)[..., None]
    ix = fx.astype(np.int64)
    iy = fy.astype(np.int64)
    padded = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    padded[1:-1, 1:-1] = image

    def tap(yi, xi):
        inside = (yi >= -1) & (yi <= h) & (xi >= -1) & (xi <= w)
        v = padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]
        return np.where(inside[..., None], v, 0.0)

    out = (
        tap(iy, ix) * (1 - ax) * (1 - ay)
        + tap(iy, ix + 1) * ax * (1 - ay)
        + tap(iy + 1, ix) * (1 - ax) * ay
        + tap(iy + 1, ix + 1) * ax * ay
    )
    return out
