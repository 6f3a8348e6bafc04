"""Triangle meshes and the geometric predicates the collision stack needs.

Meshes are plain vertex/triangle arrays loaded from ASCII OBJ (triangles
only). The predicates here are deliberately simple and deterministic:
triangle/AABB overlap via the separating-axis test, inside/outside via
ray parity along +x with a fixed tie-breaking nudge, and exact
point-to-triangle distance for narrow-phase queries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, ParseError
from .geometry import Pose

logger = logging.getLogger(__name__)

__all__ = ["Mesh", "load_obj", "box_mesh", "point_triangle_distances"]


@dataclass(frozen=True)
class Mesh:
    """Triangle soup: vertices (N, 3) in meters, triangles (M, 3) indices."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def vertex_centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def transformed(self, pose: Pose) -> "Mesh":
        return Mesh(pose.transform_points(self.vertices), self.triangles)

    def scaled(self, factor: float, about: np.ndarray | None = None) -> "Mesh":
        center = np.zeros(3) if about is None else np.asarray(about, dtype=float)
        return Mesh(center + factor * (self.vertices - center), self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """(M, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def has_area(self) -> bool:
        c = self.triangle_corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return bool(np.any(np.linalg.norm(n, axis=1) > 1e-15))


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    """Concatenate meshes into one, preserving vertex order."""
    if not meshes:
        raise GeometryError("cannot merge zero meshes")
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return Mesh(np.vstack(verts), np.vstack(tris))


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Axis-aligned box of the given (sx, sy, sz) extents."""
    sx, sy, sz = np.asarray(size, dtype=float) / 2.0
    cx, cy, cz = center
    v = np.array([
        [cx - sx, cy - sy, cz - sz], [cx + sx, cy - sy, cz - sz],
        [cx + sx, cy + sy, cz - sz], [cx - sx, cy + sy, cz - sz],
        [cx - sx, cy - sy, cz + sz], [cx + sx, cy - sy, cz + sz],
        [cx + sx, cy + sy, cz + sz], [cx - sx, cy + sy, cz + sz],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom (-z)
        [4, 5, 6], [4, 6, 7],  # top (+z)
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [3, 0, 4], [3, 4, 7],  # -x
    ])
    return Mesh(v, f)


def load_obj(path: str | Path) -> Mesh:
    """Parse an ASCII OBJ file restricted to `v` and 3-index `f` records.

    Any other record type is skipped with a single summary warning. Faces
    with more than three indices are rejected (triangles only).
    """
    path = Path(path)
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    skipped: set[str] = set()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad vertex coordinate") from exc
        elif tag == "f":
            idx = parts[1:]
            if len(idx) != 3:
                raise ParseError(
                    f"{path}:{lineno}: only triangular faces are supported "
                    f"(got {len(idx)} indices)")
            face = []
            for token in idx:
                head = token.split("/")[0]  # ignore texture/normal references
                try:
                    i = int(head)
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad face index {token!r}") from exc
                face.append(i - 1 if i > 0 else len(vertices) + i)
            faces.append(face)
        else:
            skipped.add(tag)
    if skipped:
        logger.warning("%s: ignored OBJ record types: %s", path, ", ".join(sorted(skipped)))
    if not vertices:
        raise ParseError(f"{path}: no vertices found")
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# geometric predicates


def triangle_box_overlap(tri: np.ndarray, box_center: np.ndarray, box_half: np.ndarray) -> bool:
    """Separating-axis test between one triangle and an axis-aligned box."""
    v = tri - box_center
    e = np.array([v[1] - v[0], v[2] - v[1], v[0] - v[2]])

    # 9 cross-product axes e_i x axis_j
    for i in range(3):
        ex, ey, ez = e[i]
        axes = (
            (0.0, -ez, ey),
            (ez, 0.0, -ex),
            (-ey, ex, 0.0),
        )
        for a in axes:
            a = np.array(a)
            p = v @ a
            r = box_half @ np.abs(a)
            if p.min() > r or p.max() < -r:
                return False

    # box face normals
    for k in range(3):
        if v[:, k].min() > box_half[k] or v[:, k].max() < -box_half[k]:
            return False

    # triangle plane
    n = np.cross(e[0], e[1])
    r = box_half @ np.abs(n)
    d = np.dot(n, v[0])
    return abs(d) <= r


def ray_parity_inside(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Inside test by counting +x ray crossings for each query point.

    Ties (the projected query sitting exactly on a triangle edge or
    vertex) are broken by re-testing the point nudged by a fixed tiny
    offset in (y, z); this keeps the result deterministic on imperfect
    meshes without crashing.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.triangle_corners()
    out = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        out[i] = _parity_single(corners, p)
    return out


def _parity_single(corners: np.ndarray, p: np.ndarray, depth: int = 0) -> bool:
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    # triangles whose (y, z) projection has zero area are edge-on to the
    # ray; symbolic perturbation counts them as misses
    area = _orient2d(a, b, c)
    valid = area != 0.0
    d1 = _orient2d(a, b, p)
    d2 = _orient2d(b, c, p)
    d3 = _orient2d(c, a, p)
    strictly_in = valid & (((d1 > 0) & (d2 > 0) & (d3 > 0))
                           | ((d1 < 0) & (d2 < 0) & (d3 < 0)))
    mixed = (((d1 > 0) | (d2 > 0) | (d3 > 0))
             & ((d1 < 0) | (d2 < 0) | (d3 < 0)))
    on_boundary = valid & ((d1 == 0) | (d2 == 0) | (d3 == 0)) & ~mixed
    if np.any(on_boundary):
        # projected query sits exactly on an edge or vertex: retest from a
        # deterministically nudged point
        if depth >= 8:
            raise GeometryError("ray parity test failed to escape degeneracy")
        nudged = p + np.array([0.0, 3.1e-10 * (depth + 1), 1.7e-10 * (depth + 1)])
        return _parity_single(corners, nudged, depth + 1)
    if not np.any(strictly_in):
        return False
    # intersection x from barycentric interpolation over (y, z):
    # weights opposite each vertex are the sub-areas already computed
    h = strictly_in
    x_hit = (d2[h] * a[h, 0] + d3[h] * b[h, 0] + d1[h] * c[h, 0]) / area[h]
    crossings = int(np.sum(x_hit > p[0]))
    return crossings % 2 == 1


def _orient2d(a, b, p):
    # signed area of (a, b, p) projected on the (y, z) plane
    if p.ndim == 2:
        return ((b[:, 1] - a[:, 1]) * (p[:, 2] - a[:, 2])
                - (b[:, 2] - a[:, 2]) * (p[:, 1] - a[:, 1]))
    return ((b[:, 1] - a[:, 1]) * (p[2] - a[:, 2])
            - (b[:, 2] - a[:, 2]) * (p[1] - a[:, 1]))


def point_triangle_distances(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Minimum unsigned distance from each point to the mesh surface."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.triangle_corners()
    best = np.full(len(points), np.inf)
    for tri in corners:
        d = _point_one_triangle(points, tri)
        np.minimum(best, d, out=best)
    return best


def _point_one_triangle(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    # Ericson, Real-Time Collision Detection, closest-point-on-triangle
    a, b, c = tri
    ab, ac = b - a, c - a
    ap = points - a
    d1 = ap @ ab
    d2 = ap @ ac
    bp = points - b
    d3 = bp @ ab
    d4 = bp @ ac
    cp = points - c
    d5 = cp @ ab
    d6 = cp @ ac

    closest = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a
    done |= m

    m = (~done) & (d3 >= 0) & (d4 <= d3)
    closest[m] = b
    done |= m

    vc = d1 * d4 - d3 * d2
    m = (~done) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    denom = np.where(d1 - d3 == 0, 1.0, d1 - d3)
    closest[m] = a + (d1 / denom)[m, None] * ab
    done |= m

    m = (~done) & (d6 >= 0) & (d5 <= d6)
    closest[m] = c
    done |= m

    vb = d5 * d2 - d1 * d6
    m = (~done) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    denom = np.where(d2 - d6 == 0, 1.0, d2 - d6)
    closest[m] = a + (d2 / denom)[m, None] * ac
    done |= m

    va = d3 * d6 - d5 * d4
    m = (~done) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom = np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))
    w = (d4 - d3) / denom
    closest[m] = b + w[m, None] * (c - b)
    done |= m

    m = ~done
    denom_abc = va + vb + vc
    denom_abc = np.where(denom_abc == 0, 1.0, denom_abc)
    v = vb / denom_abc
    w = vc / denom_abc
    closest[m] = a + v[m, None] * ab + w[m, None] * ac

    return np.linalg.norm(points - closest, axis=1)
