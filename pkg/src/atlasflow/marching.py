"""Iso-contour / iso-surface extraction from scalar grids.

2D uses a marching-squares implementation with the saddle ambiguity resolved
by the sign of the cell-center mean; 3D delegates to scikit-image's marching
cubes. Both place vertices by linear interpolation along cell edges, so
negating values and level yields the same vertex set.
"""

from __future__ import annotations

import numpy as np

from .geometry import ScalarGrid, ShapeMesh

# Segment endpoints per marching-squares case, as pairs of cell-edge ids.
# Edges: 0 bottom (v0-v1), 1 right (v1-v2), 2 top (v3-v2), 3 left (v0-v3),
# with corners v0=(i,j), v1=(i+1,j), v2=(i+1,j+1), v3=(i,j+1) in axis order.
_MS_CASES = {
    0: [],
    1: [(3, 0)],
    2: [(0, 1)],
    3: [(3, 1)],
    4: [(1, 2)],
    5: None,  # saddle: v0,v2 inside
    6: [(0, 2)],
    7: [(3, 2)],
    8: [(2, 3)],
    9: [(0, 2)],
    10: None,  # saddle: v1,v3 inside
    11: [(2, 1)],
    12: [(1, 3)],
    13: [(1, 0)],
    14: [(0, 3)],
    15: [],
}


def _marching_squares(grid: ScalarGrid, level: float) -> ShapeMesh:
    vals = grid.reshaped()
    nx, ny = grid.resolution
    xs, ys = grid.axes()
    inside = vals > level

    # Corner values per cell.
    v0 = vals[:-1, :-1]
    v1 = vals[1:, :-1]
    v2 = vals[1:, 1:]
    v3 = vals[:-1, 1:]
    code = (
        inside[:-1, :-1].astype(np.int8)
        + 2 * inside[1:, :-1]
        + 4 * inside[1:, 1:]
        + 8 * inside[:-1, 1:]
    )

    vertices: list = []
    segments: list = []
    vertex_ids: dict = {}

    def edge_vertex(i, j, edge):
        key = _edge_key(i, j, edge)
        vid = vertex_ids.get(key)
        if vid is not None:
            return vid
        if edge == 0:
            a, b = (i, j), (i + 1, j)
        elif edge == 1:
            a, b = (i + 1, j), (i + 1, j + 1)
        elif edge == 2:
            a, b = (i, j + 1), (i + 1, j + 1)
        else:
            a, b = (i, j), (i, j + 1)
        va, vb = vals[a], vals[b]
        t = (level - va) / (vb - va)
        pa = np.array([xs[a[0]], ys[a[1]]])
        pb = np.array([xs[b[0]], ys[b[1]]])
        vid = len(vertices)
        vertices.append(pa + t * (pb - pa))
        vertex_ids[key] = vid
        return vid

    def _edge_key(i, j, edge):
        # Canonical key shared between neighboring cells.
        if edge == 0:
            return (i, j, 0)
        if edge == 2:
            return (i, j + 1, 0)
        if edge == 3:
            return (i, j, 1)
        return (i + 1, j, 1)

    cells = np.argwhere((code > 0) & (code < 15))
    for i, j in cells:
        c = int(code[i, j])
        segs = _MS_CASES[c]
        if segs is None:
            center_inside = 0.25 * (v0[i, j] + v1[i, j] + v2[i, j] + v3[i, j]) > level
            if c == 5:
                segs = [(3, 2), (0, 1)] if center_inside else [(3, 0), (1, 2)]
            else:  # c == 10
                segs = [(0, 3), (2, 1)] if center_inside else [(0, 1), (2, 3)]
        for ea, eb in segs:
            segments.append((edge_vertex(i, j, ea), edge_vertex(i, j, eb)))

    if not segments:
        return ShapeMesh(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64))
    return _drop_degenerate(ShapeMesh(np.array(vertices), np.array(segments, dtype=np.int64)))


def _drop_degenerate(mesh: ShapeMesh, tol: float = 1e-12) -> ShapeMesh:
    """Remove zero-measure faces (contours through cell corners produce them)."""
    if mesh.is_empty:
        return mesh
    keep = mesh.face_measures() > tol
    if keep.all():
        return mesh
    return ShapeMesh(mesh.vertices, mesh.faces[keep])


def _marching_cubes(grid: ScalarGrid, level: float) -> ShapeMesh:
    from skimage.measure import marching_cubes as _mc

    vals = grid.reshaped()
    if not (vals.min() < level < vals.max()):
        return ShapeMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _mc(vals, level=level, spacing=tuple(grid.spacing))
    verts = verts - 1.0  # grid index origin maps to domain corner (-1,-1,-1)
    return _drop_degenerate(ShapeMesh(verts, faces.astype(np.int64)))


def marching_extract(grid: ScalarGrid, level: float) -> ShapeMesh:
    """Extract the ``level`` iso-contour (2D) or iso-surface (3D) of a grid.

    Returns an empty mesh when the level is never crossed.
    """
    if any(r < 2 for r in grid.resolution):
        raise ValueError("grid resolution must be >= 2 per axis")
    if len(grid.resolution) == 2:
        return _marching_squares(grid, level)
    return _marching_cubes(grid, level)


def grid_interpolate(grid: ScalarGrid, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of grid values at arbitrary domain points."""
    pts = np.atleast_2d(points)
    res = grid.resolution
    vals = grid.reshaped()
    d = len(res)
    # Fractional grid coordinates.
    coords = [(pts[:, a] + 1.0) / grid.spacing[a] for a in range(d)]
    idx0 = [np.clip(np.floor(c).astype(int), 0, res[a] - 2) for a, c in enumerate(coords)]
    frac = [c - i0 for c, i0 in zip(coords, idx0)]
    out = np.zeros(len(pts))
    for corner in range(2**d):
        w = np.ones(len(pts))
        ix = []
        for a in range(d):
            bit = (corner >> a) & 1
            w = w * (frac[a] if bit else (1.0 - frac[a]))
            ix.append(idx0[a] + bit)
        out += w * vals[tuple(ix)]
    return out
