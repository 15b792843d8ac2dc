"""Hot raster loops, compiled with numba when available.

Each kernel has a numba implementation and a pure-numpy twin with the
same signature and matching output (equal up to floating-point
contraction).  ``MVDPOSE_DISABLE_NUMBA=1``
(or numba being absent) selects the numpy path for the public names.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MVDPOSE_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# z-buffer splat: scatter (u, v, z) samples into a raster keeping min z
# ---------------------------------------------------------------------------


def _splat_min_depth_loop(us, vs, zs, height, width):
    out = np.zeros((height, width), dtype=np.float64)
    for k in range(us.shape[0]):
        u = us[k]
        v = vs[k]
        z = zs[k]
        if z <= 0.0 or u < 0 or v < 0 or u >= width or v >= height:
            continue
        cur = out[v, u]
        if cur == 0.0 or z < cur:
            out[v, u] = z
    return out


splat_min_depth_numba = _njit(_splat_min_depth_loop)


def splat_min_depth_numpy(us, vs, zs, height, width):
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    zs = np.asarray(zs, dtype=np.float64)
    keep = (zs > 0) & (us >= 0) & (vs >= 0) & (us < width) & (vs < height)
    flat = np.full(height * width, np.inf)
    np.minimum.at(flat, vs[keep] * width + us[keep], zs[keep])
    flat[np.isinf(flat)] = 0.0
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# marker rendering: planar discs seen by a pinhole camera
# ---------------------------------------------------------------------------


def _render_markers_loop(background, fx, fy, cx, cy, centers, normal, radius):
    height, width = background.shape
    out = background.copy()
    best = np.full((height, width), np.inf)
    r2 = radius * radius
    for m in range(centers.shape[0]):
        c0 = centers[m, 0]
        c1 = centers[m, 1]
        c2 = centers[m, 2]
        if c2 <= radius:
            continue
        pu = fx * c0 / c2 + cx
        pv = fy * c1 / c2 + cy
        # disc radius in pixels, padded for obliquity
        rpx = 2.0 * radius * max(fx, fy) / (c2 - radius) + 2.0
        u0 = max(int(np.floor(pu - rpx)), 0)
        u1 = min(int(np.ceil(pu + rpx)), width - 1)
        v0 = max(int(np.floor(pv - rpx)), 0)
        v1 = min(int(np.ceil(pv + rpx)), height - 1)
        nc = normal[0] * c0 + normal[1] * c1 + normal[2] * c2
        for v in range(v0, v1 + 1):
            dy = (v - cy) / fy
            for u in range(u0, u1 + 1):
                dx = (u - cx) / fx
                nd = normal[0] * dx + normal[1] * dy + normal[2]
                if nd == 0.0:
                    continue
                t = nc / nd
                if t <= 0.0:
                    continue
                ex = t * dx - c0
                ey = t * dy - c1
                ez = t - c2
                if ex * ex + ey * ey + ez * ez > r2:
                    continue
                d2 = (u - pu) * (u - pu) + (v - pv) * (v - pv)
                if d2 < best[v, u]:
                    best[v, u] = d2
                    out[v, u] = t
    return out


render_markers_numba = _njit(_render_markers_loop)


def render_markers_numpy(background, fx, fy, cx, cy, centers, normal, radius):
    height, width = background.shape
    out = background.copy()
    best = np.full((height, width), np.inf)
    r2 = radius * radius
    for c in np.asarray(centers, dtype=np.float64):
        if c[2] <= radius:
            continue
        pu = fx * c[0] / c[2] + cx
        pv = fy * c[1] / c[2] + cy
        rpx = 2.0 * radius * max(fx, fy) / (c[2] - radius) + 2.0
        u0 = max(int(np.floor(pu - rpx)), 0)
        u1 = min(int(np.ceil(pu + rpx)), width - 1)
        v0 = max(int(np.floor(pv - rpx)), 0)
        v1 = min(int(np.ceil(pv + rpx)), height - 1)
        if u1 < u0 or v1 < v0:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        dx = (uu - cx) / fx
        dy = (vv - cy) / fy
        nc = normal[0] * c[0] + normal[1] * c[1] + normal[2] * c[2]
        nd = normal[0] * dx + normal[1] * dy + normal[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = nc / nd
        ex = t * dx - c[0]
        ey = t * dy - c[1]
        ez = t - c[2]
        hit = (nd != 0.0) & (t > 0.0) & (ex * ex + ey * ey + ez * ez <= r2)
        d2 = (uu - pu) * (uu - pu) + (vv - pv) * (vv - pv)
        region = best[v0 : v1 + 1, u0 : u1 + 1]
        win = hit & (d2 < region)
        region[win] = d2[win]
        out[v0 : v1 + 1, u0 : u1 + 1][win] = t[win]
    return out


# ---------------------------------------------------------------------------
# room ray casting: floor z=0 and four walls of a box |x|,|y| <= extent
# ---------------------------------------------------------------------------

_PLANES = ((2, 0.0), (0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0))


def _raycast_room_loop(R, origin, fx, fy, cx, cy, height, width, extent, wall_height):
    out = np.zeros((height, width), dtype=np.float64)
    eps = 1e-6
    for v in range(height):
        for u in range(width):
            a = (u - cx) / fx
            b = (v - cy) / fy
            # world direction of the camera ray (a, b, 1)
            d0 = R[0, 0] * a + R[1, 0] * b + R[2, 0]
            d1 = R[0, 1] * a + R[1, 1] * b + R[2, 1]
            d2 = R[0, 2] * a + R[1, 2] * b + R[2, 2]
            best = np.inf
            for k in range(5):
                if k == 0:
                    axis, value, dk = 2, 0.0, d2
                elif k < 3:
                    axis, value, dk = 0, extent * (3 - 2 * k), d0
                else:
                    axis, value, dk = 1, extent * (7 - 2 * k), d1
                if dk == 0.0:
                    continue
                t = (value - origin[axis]) / dk
                if not t > 0.0 or not t < best:
                    continue
                px = origin[0] + t * d0
                py = origin[1] + t * d1
                pz = origin[2] + t * d2
                if abs(px) <= extent + eps and abs(py) <= extent + eps and pz >= -eps and pz <= wall_height:
                    best = t
            if best < np.inf:
                out[v, u] = best
    return out


raycast_room_numba = _njit(_raycast_room_loop)


def raycast_room_numpy(R, origin, fx, fy, cx, cy, height, width, extent, wall_height):
    vv, uu = np.mgrid[0:height, 0:width]
    a = (uu - cx) / fx
    b = (vv - cy) / fy
    d = [R[0, i] * a + R[1, i] * b + R[2, i] for i in range(3)]
    best = np.full((height, width), np.inf)
    eps = 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, sign in _PLANES:
            value = extent * sign if axis < 2 else 0.0
            t = (value - origin[axis]) / d[axis]
            px = origin[0] + t * d[0]
            py = origin[1] + t * d[1]
            pz = origin[2] + t * d[2]
            hit = (d[axis] != 0.0) & (t > 0.0) & (t < best)
            hit &= (np.abs(px) <= extent + eps) & (np.abs(py) <= extent + eps) & (pz >= -eps) & (pz <= wall_height)
            best = np.where(hit, t, best)
    best[np.isinf(best)] = 0.0
    return best


if USE_NUMBA:
    splat_min_depth = splat_min_depth_numba
    render_markers = render_markers_numba
    raycast_room = raycast_room_numba
else:
    splat_min_depth = splat_min_depth_numpy
    render_markers = render_markers_numpy
    raycast_room = raycast_room_numpy


def warmup() -> None:
    """Trigger JIT compilation so later timings exclude it."""
    if not USE_NUMBA:
        return
    splat_min_depth(np.zeros(1, np.int64), np.zeros(1, np.int64), np.ones(1), 2, 2)
    render_markers(np.zeros((4, 4)), 2.0, 2.0, 2.0, 2.0, np.array([[0.0, 0.0, 10.0]]), np.array([0.0, 0.0, 1.0]), 1.0)
    raycast_room(np.eye(3), np.array([0.0, 0.0, 1.0]), 2.0, 2.0, 1.0, 1.0, 2, 2, 10.0, 5.0)
