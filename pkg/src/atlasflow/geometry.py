"""Shape primitives, synthetic box datasets, and surface sampling.

Sign convention: signed distances are POSITIVE inside the shape and negative
outside. Surface normals attached to samples point along the gradient of that
signed distance, i.e. geometrically inward. ``set_positive_outside(True)``
flips the sign of ``sdf_primitive`` for interop with codebases using the
opposite convention; everything in this package assumes the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_POSITIVE_OUTSIDE = False


def set_positive_outside(enabled: bool) -> None:
    """Globally flip the sign convention of ``sdf_primitive`` (default: inside-positive)."""
    global _POSITIVE_OUTSIDE
    _POSITIVE_OUTSIDE = bool(enabled)


@dataclass(frozen=True)
class Domain:
    """The axis-aligned computational domain, fixed to [-1, 1]^dim."""

    dim: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")

    @property
    def volume(self) -> float:
        return 2.0**self.dim

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.all(np.abs(points) <= 1.0 + tol, axis=-1)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.dim))


@dataclass
class ShapeSpec:
    """A primitive shape: sphere or (rotated) box, contained in the domain."""

    kind: str  # "sphere" | "box"
    center: np.ndarray
    radii: np.ndarray  # sphere uses radii[0]; box: half edge lengths per axis
    rotation: np.ndarray  # orthogonal, det +1; identity for spheres

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        d = self.dim
        err = np.abs(self.rotation.T @ self.rotation - np.eye(d)).max()
        if err > 1e-10 or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthogonal with determinant +1")

    @property
    def dim(self) -> int:
        return len(self.center)

    def corners(self) -> np.ndarray:
        """World-space corners of a box (2^dim points)."""
        if self.kind != "box":
            raise ValueError("corners() only applies to boxes")
        d = self.dim
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * d), indexing="ij"))
        signs = signs.reshape(d, -1).T
        return self.center + (signs * self.radii) @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "radii": self.radii.tolist(),
            "rotation": self.rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["kind"], np.array(d["center"]), np.array(d["radii"]),
                   np.array(d["rotation"]))


@dataclass
class SurfaceSample:
    """Points on a shape surface with unit normals (the training representation)."""

    points: np.ndarray  # (n, dim)
    normals: np.ndarray  # (n, dim), unit length
    shape_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have matching shapes")


@dataclass
class ShapeMesh:
    """Triangle mesh (3D) or polyline segment mesh (2D)."""

    vertices: np.ndarray  # (m, dim)
    faces: np.ndarray  # (k, 3) triangles or (k, 2) segments

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def face_measures(self) -> np.ndarray:
        """Segment lengths (2D) or triangle areas (3D)."""
        v = self.vertices
        f = self.faces
        if f.shape[1] == 2:
            return np.linalg.norm(v[f[:, 1]] - v[f[:, 0]], axis=1)
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


@dataclass
class ScalarGrid:
    """Scalar samples on a uniform tensor grid over the domain, row-major."""

    resolution: tuple
    values: np.ndarray  # flat, len == prod(resolution)
    domain: Domain = field(default=None)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.domain is None:
            self.domain = Domain(len(self.resolution))
        if self.values.size != int(np.prod(self.resolution)):
            raise ValueError("value count must equal the product of resolutions")

    @property
    def spacing(self) -> np.ndarray:
        return np.array([2.0 / (r - 1) for r in self.resolution])

    def axes(self) -> list:
        return [np.linspace(-1.0, 1.0, r) for r in self.resolution]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.resolution)

    @classmethod
    def from_function(cls, fn, resolution, dim=None) -> "ScalarGrid":
        if isinstance(resolution, int):
            resolution = (resolution,) * (dim or 2)
        grid = cls(resolution, np.zeros(int(np.prod(resolution))))
        grid.values = np.asarray(fn(grid.points()), dtype=np.float64).ravel()
        return grid


# ---------------------------------------------------------------------------
# Signed distance / occupancy primitives
# ---------------------------------------------------------------------------

def sdf_primitive(spec: ShapeSpec, x: np.ndarray) -> np.ndarray:
    """Exact signed distance to a sphere or rotated box, positive inside.

    ``x`` may be a single dim-vector or an (n, dim) array.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if spec.kind == "sphere":
        d = spec.radii[0] - np.linalg.norm(pts - spec.center, axis=1)
    else:
        local = (pts - spec.center) @ spec.rotation
        q = np.abs(local) - spec.radii
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        d = -(outside + inside)
    if _POSITIVE_OUTSIDE:
        d = -d
    return d[0] if single else d


def occupancy_primitive(spec: ShapeSpec, x: np.ndarray, surface_band: float = 1e-12):
    """Occupancy value: 1 inside, 0 outside, 0.5 on the surface."""
    d = sdf_primitive(spec, x)
    if _POSITIVE_OUTSIDE:
        d = -d
    occ = np.where(np.abs(d) <= surface_band, 0.5, (d > 0).astype(np.float64))
    return float(occ) if np.isscalar(d) or np.ndim(d) == 0 else occ


def sdf_gradient(spec: ShapeSpec, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of ``sdf_primitive``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.zeros_like(x)
    for a in range(x.shape[1]):
        delta = np.zeros(x.shape[1])
        delta[a] = h
        g[:, a] = (sdf_primitive(spec, x + delta) - sdf_primitive(spec, x - delta)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Random rotations and the synthetic box dataset
# ---------------------------------------------------------------------------

def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation: uniform angle in 2D, uniform unit quaternion in 3D."""
    if dim == 2:
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def box_mesh(spec: ShapeSpec) -> ShapeMesh:
    """Polyline (2D) or triangle (3D) mesh of a box spec."""
    if spec.kind != "box":
        raise ValueError("box_mesh requires a box spec")
    if spec.dim == 2:
        hx, hy = spec.radii
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        verts = spec.center + local @ spec.rotation.T
        faces = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
        return ShapeMesh(verts, faces)
    corners = spec.corners()  # ordering: index bits (x, y, z) from meshgrid
    # Quads per face of the unit cube, split into triangles with outward winding.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return ShapeMesh(corners, np.array(faces))


def _sample_box_surface(spec: ShapeSpec, n: int, rng: np.random.Generator) -> SurfaceSample:
    """Uniform-by-measure samples on a box surface with inward unit normals."""
    d = spec.dim
    h = spec.radii
    if d == 2:
        lengths = np.array([2 * h[1], 2 * h[1], 2 * h[0], 2 * h[0]])  # -x,+x,-y,+y
        axes = np.array([0, 0, 1, 1])
        signs = np.array([-1.0, 1.0, -1.0, 1.0])
    else:
        areas = np.array(
            [4 * h[1] * h[2]] * 2 + [4 * h[0] * h[2]] * 2 + [4 * h[0] * h[1]] * 2
        )
        lengths = areas
        axes = np.array([0, 0, 1, 1, 2, 2])
        signs = np.array([-1.0, 1.0] * 3)
    probs = lengths / lengths.sum()
    face_idx = rng.choice(len(probs), size=n, p=probs)
    local = rng.uniform(-1.0, 1.0, size=(n, d)) * h
    local[np.arange(n), axes[face_idx]] = signs[face_idx] * h[axes[face_idx]]
    normals_local = np.zeros((n, d))
    normals_local[np.arange(n), axes[face_idx]] = signs[face_idx]
    points = spec.center + local @ spec.rotation.T
    # Inward normals: aligned with the gradient of the inside-positive SDF.
    normals = -(normals_local @ spec.rotation.T)
    return SurfaceSample(points, normals)


def generate_box_dataset(
    count: int,
    dim: int,
    seed: int,
    n_points: int = 4000,
    center_jitter: float = 0.0,
    containment_margin: float = 0.02,
) -> list:
    """Random rotated boxes with surface samples; pure function of its arguments.

    Full edge lengths are uniform in [0.15, 0.85]; rotations are uniform
    (angle in 2D, quaternion-uniform in 3D). Boxes whose corners leave the
    domain (possible only with ``center_jitter > 0``) are resampled.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for idx in range(count):
        for _ in range(1000):
            half = rng.uniform(0.15, 0.85, size=dim) / 2.0
            rot = random_rotation(dim, rng)
            center = (
                rng.uniform(-center_jitter, center_jitter, size=dim)
                if center_jitter > 0
                else np.zeros(dim)
            )
            spec = ShapeSpec("box", center, half, rot)
            if np.abs(spec.corners()).max() < 1.0 - containment_margin:
                break
        else:
            raise RuntimeError("could not place a box inside the domain")
        sample = _sample_box_surface(spec, n_points, rng)
        sample.shape_id = idx
        out.append((spec, sample))
    return out


# ---------------------------------------------------------------------------
# Mesh surface sampling and vertex noise
# ---------------------------------------------------------------------------

def sample_surface(mesh: ShapeMesh, n: int, seed: int, shape_id: int = 0) -> SurfaceSample:
    """Measure-weighted uniform samples on a mesh with face-geometry normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    measures = mesh.face_measures()
    total = measures.sum()
    if total <= 0:
        raise ValueError("mesh has no positive-measure faces")
    face_idx = rng.choice(len(measures), size=n, p=measures / total)
    v = mesh.vertices
    f = mesh.faces
    if f.shape[1] == 2:
        t = rng.uniform(size=(n, 1))
        a, b = v[f[face_idx, 0]], v[f[face_idx, 1]]
        points = a + t * (b - a)
        edge = b - a
        edge /= np.linalg.norm(edge, axis=1, keepdims=True)
        normals = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    else:
        r1 = rng.uniform(size=(n, 1))
        r2 = rng.uniform(size=(n, 1))
        flip = (r1 + r2) > 1.0
        r1 = np.where(flip, 1.0 - r1, r1)
        r2 = np.where(flip, 1.0 - r2, r2)
        a, b, c = v[f[face_idx, 0]], v[f[face_idx, 1]], v[f[face_idx, 2]]
        points = a + r1 * (b - a) + r2 * (c - a)
        normals = np.cross(b - a, c - a)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfaceSample(points, normals, shape_id=shape_id)


def balanced_occupancy_points(spec: ShapeSpec, n: int, seed: int):
    """n domain points with occupancy labels, half inside and half outside.

    Rejection-samples the uniform distribution restricted to each side;
    points in the exact surface band are discarded. Returns (points, labels).
    """
    rng = np.random.default_rng(seed)
    dim = spec.dim
    halves = {1.0: n // 2, 0.0: n - n // 2}
    points = []
    labels = []
    while any(halves.values()):
        batch = rng.uniform(-1.0, 1.0, size=(4 * n, dim))
        occ = occupancy_primitive(spec, batch)
        for label in (1.0, 0.0):
            take = batch[occ == label][: halves[label]]
            points.append(take)
            labels.append(np.full(len(take), label))
            halves[label] -= len(take)
    points = np.concatenate(points)
    labels = np.concatenate(labels)
    order = rng.permutation(len(points))
    return points[order], labels[order]


def add_vertex_noise(mesh: ShapeMesh, stddev: float, seed: int) -> ShapeMesh:
    """Add i.i.d. zero-mean Gaussian noise to every vertex coordinate."""
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, stddev, size=mesh.vertices.shape) if stddev > 0 else 0.0
    return ShapeMesh(mesh.vertices + noise, mesh.faces.copy())
