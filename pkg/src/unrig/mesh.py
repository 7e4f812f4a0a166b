"""Triangle mesh core: OBJ I/O, normalization, sampling, occupancy, edges.

Meshes are plain (vertices, faces) arrays. The vertical axis is +y;
``normalize_height`` rescales a character so its y extent is exactly 1.
Inside/outside tests use the generalized winding number with threshold
0.5 (w >= 0.5 means inside), which stays robust on the near-watertight
synthetic meshes this project generates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for


class ObjParseError(ValueError):
    """Raised when an OBJ file cannot be parsed; carries the line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass
class Mesh:
    """Triangle mesh: vertices (n, 3) float64 in meters, faces (m, 3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError(
                f"face index {self.faces.max()} out of range for "
                f"{len(self.vertices)} vertices"
            )

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy())

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class EdgeSet:
    """Unique undirected edges as an (e, 2) int array with i < j per row."""

    edges: np.ndarray

    def __len__(self):
        return len(self.edges)


@dataclass
class SurfacePoint:
    """A point on a mesh face, kept with its barycentric coordinates."""

    position: np.ndarray
    face_index: int
    barycentric: np.ndarray


@dataclass
class QuerySample:
    """3D query point with a binary occupancy label."""

    position: np.ndarray
    occupancy: int


def load_obj(path) -> Mesh:
    """Parse a Wavefront OBJ file (``v`` and ``f`` lines only).

    Polygonal faces are fan-triangulated; ``f i/t/n`` forms are accepted
    with only the vertex index used. Raises ObjParseError with the line
    number on malformed input or out-of-range indices.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, line_no, f"vertex line needs 3 coordinates: {line!r}")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise ObjParseError(path, line_no, f"bad vertex coordinate: {line!r}") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, line_no, f"face line needs at least 3 indices: {line!r}")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ObjParseError(path, line_no, f"bad face index: {token!r}") from None
                    if i < 0:
                        i = len(vertices) + 1 + i  # negative OBJ indices are relative
                    idx.append(i - 1)
                for i in idx:
                    if i < 0 or i >= len(vertices):
                        raise ObjParseError(path, line_no, f"face index {i + 1} out of range")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # other tags (vn, vt, o, g, s, usemtl, mtllib, ...) are ignored
    if not vertices:
        raise ObjParseError(path, 0, "no vertices in file")
    if not faces:
        raise ObjParseError(path, 0, "no faces in file")
    return Mesh(np.array(vertices), np.array(faces))


def save_obj(mesh: Mesh, path) -> None:
    """Write a mesh as OBJ with 6 decimal places; round-trips to 1e-6."""
    if len(mesh.vertices) == 0:
        raise ValueError("refusing to write a mesh with no vertices")
    if len(mesh.faces) == 0:
        raise ValueError("refusing to write a mesh with no faces")
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def normalize_height(mesh: Mesh) -> tuple[Mesh, float]:
    """Uniformly scale about the centroid so the y extent is exactly 1.

    Returns the normalized mesh and the scale factor that was applied.
    """
    ys = mesh.vertices[:, 1]
    extent = float(ys.max() - ys.min())
    if extent <= 0.0:
        raise ValueError("mesh has zero vertical extent; cannot normalize")
    scale = 1.0 / extent
    centroid = mesh.vertices.mean(axis=0)
    verts = centroid + (mesh.vertices - centroid) * scale
    return Mesh(verts, mesh.faces.copy()), scale


def sample_surface(mesh: Mesh, n: int, seed: int) -> list[SurfacePoint]:
    """Draw n area-uniform surface samples, deterministic given seed.

    Faces are chosen proportional to area and barycentric coordinates
    uniformly on the simplex.
    """
    if n == 0:
        return []
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    rng = rng_for(seed, "surface")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    # uniform on the simplex via the square-root trick
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face_idx]]  # (n, 3, 3)
    pos = np.einsum("nk,nkd->nd", bary, tri)
    return [
        SurfacePoint(position=pos[i], face_index=int(face_idx[i]), barycentric=bary[i])
        for i in range(n)
    ]


def surface_positions(samples: list[SurfacePoint]) -> np.ndarray:
    """Stack sample positions into an (n, 3) array."""
    if not samples:
        return np.zeros((0, 3))
    return np.stack([s.position for s in samples])


def winding_numbers(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Generalized winding number of the mesh around each query point.

    Uses the solid-angle formula per triangle, summed and divided by 4*pi.
    Degenerate (zero-area) triangles contribute nothing and trigger a
    one-time warning.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    areas = mesh.face_areas()
    keep = areas > 0.0
    if not keep.all():
        warnings.warn(
            f"skipping {int((~keep).sum())} degenerate triangles in winding number",
            RuntimeWarning,
            stacklevel=2,
        )
    faces = mesh.faces[keep]
    tri = mesh.vertices[faces]  # (m, 3, 3)
    n = len(points)
    w = np.zeros(n)
    if len(faces) == 0 or n == 0:
        return w
    # component-wise arithmetic on (chunk, m) planes; chunk sized to keep
    # the working set in cache
    av, bv, cv = tri[:, 0, :], tri[:, 1, :], tri[:, 2, :]
    chunk = max(1, int(500_000 // max(len(faces), 1)))
    for start in range(0, n, chunk):
        p = points[start : start + chunk]
        ax = av[None, :, 0] - p[:, None, 0]
        ay = av[None, :, 1] - p[:, None, 1]
        az = av[None, :, 2] - p[:, None, 2]
        bx = bv[None, :, 0] - p[:, None, 0]
        by = bv[None, :, 1] - p[:, None, 1]
        bz = bv[None, :, 2] - p[:, None, 2]
        cx = cv[None, :, 0] - p[:, None, 0]
        cy = cv[None, :, 1] - p[:, None, 1]
        cz = cv[None, :, 2] - p[:, None, 2]
        la = np.sqrt(ax * ax + ay * ay + az * az)
        lb = np.sqrt(bx * bx + by * by + bz * bz)
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        det = (
            ax * (by * cz - bz * cy)
            + ay * (bz * cx - bx * cz)
            + az * (bx * cy - by * cx)
        )
        denom = (
            la * lb * lc
            + (ax * bx + ay * by + az * bz) * lc
            + (bx * cx + by * cy + bz * cz) * la
            + (cx * ax + cy * ay + cz * az) * lb
        )
        omega = np.arctan2(det, denom)
        w[start : start + chunk] = omega.sum(axis=1) / (2.0 * np.pi)
    return w


def occupancy(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Binary inside labels: 1 iff generalized winding number >= 0.5."""
    w = winding_numbers(mesh, points)
    return (w >= 0.5).astype(np.int64)


def sample_queries(mesh: Mesh, n: int, sigma: float, seed: int) -> list[QuerySample]:
    """Draw n labeled query points for occupancy supervision.

    Half are surface samples perturbed by isotropic Gaussian noise of
    std sigma, half uniform in the mesh bounding box. Labels come from
    ``occupancy``.
    """
    if n == 0:
        return []
    n_near = n // 2
    n_uniform = n - n_near
    rng = rng_for(seed, "queries")
    near = surface_positions(sample_surface(mesh, n_near, seed))
    near = near + rng.normal(0.0, sigma, size=(n_near, 3))
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    uniform = lo + rng.random((n_uniform, 3)) * (hi - lo)
    pts = np.concatenate([near, uniform], axis=0)
    labels = occupancy(mesh, pts)
    return [QuerySample(position=pts[i], occupancy=int(labels[i])) for i in range(n)]


def edges(mesh: Mesh) -> EdgeSet:
    """Unique undirected edges of all faces."""
    f = mesh.faces
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return EdgeSet(edges=pairs)
