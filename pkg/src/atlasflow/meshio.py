"""File formats: ASCII OBJ meshes, point clouds with normals, raw scalar grids.

OBJ: 3D meshes use ``v``/``f`` records; 2D polylines use ``v`` with z=0 and
``l`` records. Point clouds are whitespace-separated text, one point per
line: ``x y z nx ny nz`` (3D) or ``x y nx ny`` (2D). Grids are a single
header line ``dims: r1 r2 [r3]`` followed by little-endian float64 values
in row-major order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import ScalarGrid, ShapeMesh, SurfaceSample

_FMT = "%.17g"


def write_obj(mesh: ShapeMesh, path) -> None:
    path = Path(path)
    lines = []
    if mesh.dim == 2:
        for v in mesh.vertices:
            lines.append(f"v {_FMT % v[0]} {_FMT % v[1]} 0")
        for s in mesh.faces:
            lines.append(f"l {s[0] + 1} {s[1] + 1}")
    else:
        for v in mesh.vertices:
            lines.append(f"v {_FMT % v[0]} {_FMT % v[1]} {_FMT % v[2]}")
        for f in mesh.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    path.write_text("\n".join(lines) + "\n")


def read_obj(path) -> ShapeMesh:
    verts, tris, segs = [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        elif parts[0] == "l":
            idx = [int(p) - 1 for p in parts[1:]]
            segs.extend([idx[i], idx[i + 1]] for i in range(len(idx) - 1))
    verts = np.array(verts, dtype=np.float64)
    if segs and not tris:
        return ShapeMesh(verts[:, :2], np.array(segs, dtype=np.int64))
    return ShapeMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_pointcloud(sample: SurfaceSample, path) -> None:
    data = np.hstack([sample.points, sample.normals])
    np.savetxt(path, data, fmt=_FMT)


def read_pointcloud(path, shape_id: int = 0) -> SurfaceSample:
    data = np.atleast_2d(np.loadtxt(path))
    dim = data.shape[1] // 2
    if data.shape[1] != 2 * dim or dim not in (2, 3):
        raise ValueError(f"point cloud must have 4 or 6 columns, got {data.shape[1]}")
    return SurfaceSample(data[:, :dim], data[:, dim:], shape_id=shape_id)


def write_grid(grid: ScalarGrid, path) -> None:
    header = "dims: " + " ".join(str(r) for r in grid.resolution) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.values.astype("<f8").tobytes())


def read_grid(path) -> ScalarGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if not header.startswith("dims:"):
            raise ValueError("missing grid header")
        resolution = tuple(int(t) for t in header[5:].split())
        values = np.frombuffer(fh.read(), dtype="<f8")
    expected = int(np.prod(resolution))
    if values.size != expected:
        raise ValueError(f"grid payload truncated: {values.size} of {expected} values")
    return ScalarGrid(resolution, values.copy())
