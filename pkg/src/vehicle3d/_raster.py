"""Vectorized triangle coverage shared by the image rasterizer and the UV atlas.

Pixel centers sit at integer coordinates. Points exactly on an edge are owned
by the triangle whose inward edge normal points right, or straight down when
the edge is horizontal (top-left rule for a y-down raster), so two triangles
sharing an edge never both claim a pixel center on it.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

_MAX_CANDIDATES = 1 << 22


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_edge(ax, ay, bx, by):
    # inward normal of edge a->b for a positive-area triangle
    nx = -(by - ay)
    ny = bx - ax
    return (nx > 0) | ((nx == 0) & (ny > 0))


def covered_pixels(tri_xy: np.ndarray, width: int, height: int,
                   tri_ids: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, ...]]:
    """Yield ``(tri, px, py, bary)`` chunks for every covered pixel center.

    ``tri_xy`` is ``(F, 3, 2)`` in pixel units. ``bary`` holds screen-space
    barycentric weights ``(K, 3)``. Degenerate (zero-area) triangles cover
    nothing.
    """
    tri_xy = np.asarray(tri_xy, dtype=np.float64)
    if tri_ids is None:
        tri_ids = np.arange(len(tri_xy))
    if len(tri_xy) == 0:
        return
    x = tri_xy[..., 0]
    y = tri_xy[..., 1]
    x0 = np.clip(np.ceil(x.min(axis=1)), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(x.max(axis=1)), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(y.min(axis=1)), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(y.max(axis=1)), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    area = _edge(x[:, 0], y[:, 0], x[:, 1], y[:, 1], x[:, 2], y[:, 2])
    keep = (nx > 0) & (ny > 0) & (area != 0) & np.isfinite(area)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return
    cum = np.cumsum(nx[idx] * ny[idx])
    # chunk triangles so the candidate arrays stay bounded
    start = 0
    while start < len(idx):
        base = cum[start - 1] if start else 0
        stop = max(int(np.searchsorted(cum, base + _MAX_CANDIDATES, side="right")), start + 1)
        sel = idx[start:stop]
        start = stop
        yield from _cover_chunk(x[sel], y[sel], area[sel], x0[sel], y0[sel], nx[sel], ny[sel],
                                tri_ids[sel])


def _cover_chunk(x, y, area, x0, y0, nx, ny, ids):
    counts = nx * ny
    rep = np.repeat(np.arange(len(ids)), counts)
    offsets = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - offsets[rep]
    px = x0[rep] + local % nx[rep]
    py = y0[rep] + local // nx[rep]
    # orient every triangle positively; swapping v1/v2 flips the sign
    flip = area < 0
    ax, ay = x[:, 0], y[:, 0]
    bx = np.where(flip, x[:, 2], x[:, 1])
    by = np.where(flip, y[:, 2], y[:, 1])
    cx = np.where(flip, x[:, 1], x[:, 2])
    cy = np.where(flip, y[:, 1], y[:, 2])
    a = np.abs(area)
    fx = px.astype(np.float64)
    fy = py.astype(np.float64)
    e_bc = _edge(bx[rep], by[rep], cx[rep], cy[rep], fx, fy)
    e_ca = _edge(cx[rep], cy[rep], ax[rep], ay[rep], fx, fy)
    e_ab = _edge(ax[rep], ay[rep], bx[rep], by[rep], fx, fy)
    own_bc = _owns_edge(bx, by, cx, cy)[rep]
    own_ca = _owns_edge(cx, cy, ax, ay)[rep]
    own_ab = _owns_edge(ax, ay, bx, by)[rep]
    inside = (((e_bc > 0) | ((e_bc == 0) & own_bc))
              & ((e_ca > 0) | ((e_ca == 0) & own_ca))
              & ((e_ab > 0) | ((e_ab == 0) & own_ab)))
    rep = rep[inside]
    w_a = e_bc[inside] / a[rep]
    w_b = e_ca[inside] / a[rep]
    w_c = e_ab[inside] / a[rep]
    # undo the orientation swap so weights follow the caller's vertex order
    f = flip[rep]
    w1 = np.where(f, w_c, w_b)
    w2 = np.where(f, w_b, w_c)
    bary = np.stack([w_a, w1, w2], axis=1)
    yield ids[rep], px[inside], py[inside], bary
