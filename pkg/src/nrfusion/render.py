"""Vectorised z-buffer rasteriser for triangle meshes in camera space.

Pixel centres sit on integer coordinates. Barycentric coordinates returned
for each pixel are perspective-correct, so ``sum(bary * vertices[tri])`` is
the exact 3D surface point seen through that pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics

_BUCKETS = (2, 4, 8, 16, 32, 64)
_CHUNK_ENTRIES = 2_000_000


@dataclass
class RenderBuffers:
    depth: np.ndarray      # (H, W) metres, 0 where empty
    triangle: np.ndarray   # (H, W) triangle index, -1 where empty
    bary: np.ndarray       # (H, W, 3) perspective-correct barycentrics

    @property
    def mask(self) -> np.ndarray:
        return self.triangle >= 0


def _resolve(zbuf, tri_buf, bary_buf, flat_px, z, tri, bary):
    """Keep the nearest candidate per pixel and merge into the buffers."""
    if len(flat_px) == 0:
        return
    order = np.lexsort((tri, z, flat_px))
    flat_px, z, tri, bary = flat_px[order], z[order], tri[order], bary[order]
    first = np.ones(len(flat_px), dtype=bool)
    first[1:] = flat_px[1:] != flat_px[:-1]
    flat_px, z, tri, bary = flat_px[first], z[first], tri[first], bary[first]
    closer = z < zbuf[flat_px]
    idx = flat_px[closer]
    zbuf[idx] = z[closer]
    tri_buf[idx] = tri[closer]
    bary_buf[idx] = bary[closer]


def _raster_group(uv, zinv, tris, tri_ids, size, w, h):
    """Candidate fragments for triangles whose bounding box fits in size x size."""
    a, b, c = uv[tris[:, 0]], uv[tris[:, 1]], uv[tris[:, 2]]
    lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(np.int64)
    offs = np.arange(size)
    ou, ov = np.meshgrid(offs, offs)
    pu = lo[:, 0:1] + ou.ravel()[None, :]
    pv = lo[:, 1:2] + ov.ravel()[None, :]
    pu = pu.astype(np.float64)
    pv = pv.astype(np.float64)

    def edge(p, q, x, y):
        return (q[:, 0:1] - p[:, 0:1]) * (y - p[:, 1:2]) - (q[:, 1:2] - p[:, 1:2]) * (x - p[:, 0:1])

    area = edge(a, b, c[:, 0:1], c[:, 1:2])
    w0 = edge(b, c, pu, pv) / area
    w1 = edge(c, a, pu, pv) / area
    w2 = 1.0 - w0 - w1
    eps = -1e-9
    inside = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
    inside &= (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
    rows, cols = np.nonzero(inside)
    if len(rows) == 0:
        return None
    zi = zinv[tris[rows]]  # (M, 3)
    lin = np.stack([w0[rows, cols], w1[rows, cols], w2[rows, cols]], axis=1)
    persp = lin * zi
    denom = persp.sum(axis=1)
    bary = persp / denom[:, None]
    z = 1.0 / denom
    flat = pv[rows, cols].astype(np.int64) * w + pu[rows, cols].astype(np.int64)
    return flat, z, tri_ids[rows], bary


def rasterize(vertices: np.ndarray, triangles: np.ndarray, K: CameraIntrinsics, near: float = 1e-3) -> RenderBuffers:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    h, w = K.shape
    zbuf = np.full(h * w, np.inf)
    tri_buf = np.full(h * w, -1, dtype=np.int64)
    bary_buf = np.zeros((h * w, 3))
    if len(triangles) == 0:
        return RenderBuffers(np.zeros((h, w)), tri_buf.reshape(h, w), bary_buf.reshape(h, w, 3))

    z = vertices[:, 2]
    front = z > near
    safe_z = np.where(front, z, 1.0)
    uv = np.stack([K.fx * vertices[:, 0] / safe_z + K.cx, K.fy * vertices[:, 1] / safe_z + K.cy], axis=1)
    zinv = np.where(front, 1.0 / safe_z, 0.0)

    ids = np.arange(len(triangles))
    ok = front[triangles].all(axis=1)
    tri_uv = uv[triangles]
    lo = tri_uv.min(axis=1)
    hi = tri_uv.max(axis=1)
    ok &= (hi[:, 0] >= 0) & (lo[:, 0] <= w - 1) & (hi[:, 1] >= 0) & (lo[:, 1] <= h - 1)
    # degenerate (zero screen area) triangles cover no pixel centres reliably
    e1 = tri_uv[:, 1] - tri_uv[:, 0]
    e2 = tri_uv[:, 2] - tri_uv[:, 0]
    ok &= np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) > 1e-12
    extent = (np.ceil(hi).astype(np.int64) - np.floor(lo).astype(np.int64) + 1).max(axis=1)

    remaining = ok.copy()
    for size in _BUCKETS:
        sel = remaining & (extent <= size)
        remaining &= ~sel
        group = ids[sel]
        step = max(1, _CHUNK_ENTRIES // (size * size))
        for start in range(0, len(group), step):
            gid = group[start:start + step]
            out = _raster_group(uv, zinv, triangles[gid], gid, size, w, h)
            if out is not None:
                _resolve(zbuf, tri_buf, bary_buf, *out)
    for tid in ids[remaining]:
        # large on-screen triangles: clip their box to the image first
        t = triangles[tid:tid + 1]
        lo_t = np.clip(np.floor(lo[tid]).astype(np.int64), 0, [w - 1, h - 1])
        hi_t = np.clip(np.ceil(hi[tid]).astype(np.int64), 0, [w - 1, h - 1])
        for v0 in range(lo_t[1], hi_t[1] + 1, 64):
            for u0 in range(lo_t[0], hi_t[0] + 1, 64):
                out = _raster_tile(uv, zinv, t, tid, u0, v0, 64, w, h)
                if out is not None:
                    _resolve(zbuf, tri_buf, bary_buf, *out)

    depth = np.where(np.isfinite(zbuf), zbuf, 0.0).reshape(h, w)
    return RenderBuffers(depth, tri_buf.reshape(h, w), bary_buf.reshape(h, w, 3))


def _raster_tile(uv, zinv, tri, tid, u0, v0, size, w, h):
    a, b, c = uv[tri[0, 0]], uv[tri[0, 1]], uv[tri[0, 2]]
    pu, pv = np.meshgrid(np.arange(u0, min(u0 + size, w)), np.arange(v0, min(v0 + size, h)))
    pu = pu.ravel().astype(np.float64)
    pv = pv.ravel().astype(np.float64)

    def edge(p, q, x, y):
        return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])

    area = edge(a, b, c[0], c[1])
    w0 = edge(b, c, pu, pv) / area
    w1 = edge(c, a, pu, pv) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
    if not inside.any():
        return None
    lin = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
    persp = lin * zinv[tri[0]][None, :]
    denom = persp.sum(axis=1)
    flat = pv[inside].astype(np.int64) * w + pu[inside].astype(np.int64)
    return flat, 1.0 / denom, np.full(len(flat), tid), persp / denom[:, None]


def render_depth(vertices, triangles, K: CameraIntrinsics) -> np.ndarray:
    return rasterize(vertices, triangles, K).depth
