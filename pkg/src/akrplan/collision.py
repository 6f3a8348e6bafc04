"""Conservative collision world: sphere fits, voxel grids, distance fields.

The collision stack mirrors the sphere-vs-voxel design used by GPU
planners, but runs on the CPU: link geometry becomes a set of spheres,
the static scene becomes a signed Euclidean distance field sampled at
voxel centers, and a collision query is a trilinear field lookup per
sphere plus pairwise sphere checks for self collision.

Distances are exact: the field stores sqrt(d2) * voxel_size where d2 is
the integer squared index distance to the nearest occupied (or free, for
inside cells) voxel center, so a brute-force oracle reproduces the values
bit-for-bit.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .errors import DimensionError, GeometryError, ResourceLimitError
from .geometry import Pose
from .mesh import Mesh, point_triangle_distances, ray_parity_inside, triangle_box_overlap

if TYPE_CHECKING:
    from .akr import AkrModel

logger = logging.getLogger(__name__)

# Queries outside the field (and fields with no obstacles at all) report
# this distance: the workspace box deliberately truncates the world, so
# anything beyond it is treated as far free space.
FREE_SPACE_DISTANCE = 10.0

DEFAULT_VOXEL_SIZE = 0.02
DEFAULT_MARGIN = 0.3
DEFAULT_MESH_PITCH = 0.05
DEFAULT_SPHERE_DOWNSCALE = 0.95
DEFAULT_CELL_BUDGET = 40_000_000


@dataclass(frozen=True)
class SphereSet:
    """Collision spheres in a link frame: centers (N, 3), radii (N,)."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(c) != len(r):
            raise DimensionError("centers and radii length mismatch")
        if np.any(r <= 0):
            raise GeometryError("sphere radii must be strictly positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self) -> int:
        return len(self.radii)

    def transformed(self, pose: Pose) -> "SphereSet":
        return SphereSet(pose.transform_points(self.centers), self.radii)

    def scaled(self, factor: float) -> "SphereSet":
        return SphereSet(self.centers * factor, self.radii * factor)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned boolean occupancy. Cell i spans origin + [i, i+1)*pitch."""

    origin: np.ndarray
    pitch: float
    occupancy: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    def centers(self) -> np.ndarray:
        """(nx*ny*nz, 3) voxel center coordinates, x varying slowest."""
        nx, ny, nz = self.dims
        idx = np.stack(np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
        return self.origin + (idx.reshape(-1, 3) + 0.5) * self.pitch

    def occupied_centers(self) -> np.ndarray:
        idx = np.argwhere(self.occupancy)
        return self.origin + (idx + 0.5) * self.pitch


def _grid_dims(extent: np.ndarray, pitch: float) -> np.ndarray:
    # -1e-9 guards the exact-tiling case (extent a float multiple of pitch)
    return np.maximum(1, np.ceil(extent / pitch - 1e-9).astype(int))


def voxelize_mesh(mesh: Mesh, pitch: float) -> VoxelGrid:
    """Occupancy grid tightly bounding the mesh.

    A voxel is occupied iff it overlaps the mesh surface (separating-axis
    triangle/box test) or its center lies inside the mesh (+x ray parity).
    """
    if pitch <= 0:
        raise GeometryError("pitch must be positive")
    if len(mesh.triangles) == 0 or not mesh.has_area():
        raise GeometryError("mesh has no usable triangles")
    vmin, vmax = mesh.bounds
    dims = _grid_dims(vmax - vmin, pitch)
    occ = np.zeros(dims, dtype=bool)
    _rasterize_surface(mesh, vmin, pitch, occ)
    _fill_inside(mesh, vmin, pitch, occ)
    return VoxelGrid(vmin.copy(), float(pitch), occ)


def _rasterize_surface(mesh: Mesh, origin: np.ndarray, pitch: float, occ: np.ndarray) -> None:
    dims = np.array(occ.shape)
    half = np.full(3, pitch / 2.0)
    for tri in mesh.triangle_corners():
        lo = np.floor((tri.min(axis=0) - origin) / pitch - 1e-12).astype(int)
        hi = np.floor((tri.max(axis=0) - origin) / pitch + 1e-12).astype(int)
        lo = np.clip(lo, 0, dims - 1)
        hi = np.clip(hi, 0, dims - 1)
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                for iz in range(lo[2], hi[2] + 1):
                    if occ[ix, iy, iz]:
                        continue
                    center = origin + (np.array([ix, iy, iz]) + 0.5) * pitch
                    if triangle_box_overlap(tri, center, half):
                        occ[ix, iy, iz] = True


def _fill_inside(mesh: Mesh, origin: np.ndarray, pitch: float, occ: np.ndarray) -> None:
    unmarked = np.argwhere(~occ)
    if len(unmarked) == 0:
        return
    centers = origin + (unmarked + 0.5) * pitch
    inside = ray_parity_inside(mesh, centers)
    occ[tuple(unmarked[inside].T)] = True


def fit_spheres(mesh: Mesh, pitch: float, downscale: float = DEFAULT_SPHERE_DOWNSCALE) -> SphereSet:
    """Sphere approximation: one sphere of radius pitch/2 per occupied voxel.

    The mesh is shrunk by `downscale` about its vertex centroid before
    voxelization (conservative fit), then the sphere cloud is translated
    so its centroid coincides with the original mesh's vertex centroid,
    cancelling discretization drift.
    """
    if not 0.0 < downscale <= 1.0:
        raise GeometryError(f"downscale must be in (0, 1], got {downscale}")
    target_centroid = mesh.vertex_centroid
    grid = voxelize_mesh(mesh.scaled(downscale, about=target_centroid), pitch)
    centers = grid.occupied_centers()
    centers = centers + (target_centroid - centers.mean(axis=0))
    return SphereSet(centers, np.full(len(centers), pitch / 2.0))


def add_collision_spheres(tree, pitch: float, downscale: float = DEFAULT_SPHERE_DOWNSCALE,
                          links=None):
    """Fit spheres for every link that has a collision mesh but no spheres.

    Returns a new tree; `links` optionally restricts which links to fit.
    """
    from dataclasses import replace as _replace

    new_links = {}
    for name, link in tree.links.items():
        if links is not None and name not in links:
            continue
        if link.collision_mesh is None or link.spheres is not None:
            continue
        new_links[name] = _replace(
            link, spheres=fit_spheres(link.collision_mesh, pitch, downscale))
    return tree.with_links(new_links) if new_links else tree


# ---------------------------------------------------------------------------
# signed distance field


@dataclass(frozen=True)
class DistanceField:
    """Signed distances on a voxel grid (positive outside obstacles).

    `narrow_phase` optionally carries an exact mesh (already posed in
    world coordinates) that stands in for voxels cleared during the
    approach phase; collision queries check sphere centers against it in
    addition to the voxel field.
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray
    occupancy: np.ndarray
    narrow_phase: Mesh | None = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @staticmethod
    def from_occupancy(origin: np.ndarray, voxel_size: float, occupancy: np.ndarray,
                       narrow_phase: Mesh | None = None) -> "DistanceField":
        values = signed_distance_values(occupancy, voxel_size)
        return DistanceField(np.asarray(origin, dtype=float), float(voxel_size),
                             values, occupancy.copy(), narrow_phase)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear field value at world points; free-space clamp outside."""
        d, _ = self._interpolate(points, want_gradient=False)
        return d

    def sample_with_gradient(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._interpolate(points, want_gradient=True)

    def _interpolate(self, points, want_gradient):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nx, ny, nz = self.dims
        # continuous grid coordinates with cell centers at integer positions
        g = (pts - self.origin) / self.voxel_size - 0.5
        dist = np.full(len(pts), FREE_SPACE_DISTANCE)
        grad = np.zeros_like(pts)

        hi = np.array(self.dims, dtype=float) - 1.0
        in_field = np.all((g >= 0.0) & (g <= hi), axis=1)
        if np.any(in_field):
            gi = g[in_field]
            i0 = np.maximum(np.minimum(np.floor(gi).astype(int), np.array(self.dims) - 2), 0)
            f = np.clip(gi - i0, 0.0, 1.0)
            top = np.array(self.dims) - 1
            vals = self.values
            c = np.empty((len(gi), 2, 2, 2))
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        c[:, dx, dy, dz] = vals[
                            np.minimum(i0[:, 0] + dx, top[0]),
                            np.minimum(i0[:, 1] + dy, top[1]),
                            np.minimum(i0[:, 2] + dz, top[2]),
                        ]
            wx = np.stack([1 - f[:, 0], f[:, 0]], axis=1)
            wy = np.stack([1 - f[:, 1], f[:, 1]], axis=1)
            wz = np.stack([1 - f[:, 2], f[:, 2]], axis=1)
            d = np.einsum("nijk,ni,nj,nk->n", c, wx, wy, wz)
            dist[in_field] = d
            if want_gradient:
                dwx = np.stack([-np.ones(len(gi)), np.ones(len(gi))], axis=1)
                gx = np.einsum("nijk,ni,nj,nk->n", c, dwx, wy, wz)
                gy = np.einsum("nijk,ni,nj,nk->n", c, wx, dwx, wz)
                gz = np.einsum("nijk,ni,nj,nk->n", c, wx, wy, dwx)
                grad[in_field] = np.stack([gx, gy, gz], axis=1) / self.voxel_size
        return dist, grad

    def dump(self, path: str | Path) -> None:
        """Flat binary dump: dims (3 u64), voxel_size (f64), origin (3 f64),
        then float32 values with x varying fastest."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<3q", *self.dims))
            fh.write(struct.pack("<d", self.voxel_size))
            fh.write(struct.pack("<3d", *self.origin))
            fh.write(np.ravel(self.values.astype(np.float32), order="F").tobytes())

    @staticmethod
    def load(path: str | Path) -> "DistanceField":
        raw = Path(path).read_bytes()
        dims = struct.unpack_from("<3q", raw, 0)
        voxel_size = struct.unpack_from("<d", raw, 24)[0]
        origin = np.array(struct.unpack_from("<3d", raw, 32))
        values = np.frombuffer(raw, dtype=np.float32, offset=56).astype(float)
        values = values.reshape(dims, order="F")
        return DistanceField(origin, voxel_size, values, values < 0)


def signed_distance_values(occupancy: np.ndarray, voxel_size: float) -> np.ndarray:
    """Exact signed Euclidean distances between voxel centers.

    Free cells store sqrt(min integer squared distance to an occupied
    cell center) * voxel_size. Occupied cells store -(distance to the
    nearest free center - voxel_size), which places the zero level on
    the occupied surface cells and keeps the field 1-Lipschitz in the
    grid metric. Degenerate grids (all free / all occupied) clamp to the
    free-space constant.
    """
    occ = np.asarray(occupancy, dtype=bool)
    if not occ.any():
        return np.full(occ.shape, FREE_SPACE_DISTANCE)
    if occ.all():
        return np.full(occ.shape, -FREE_SPACE_DISTANCE)
    outside = _exact_center_distances(occ, voxel_size)
    inside = _exact_center_distances(~occ, voxel_size)
    return np.where(occ, -(inside - voxel_size), outside)


def _exact_center_distances(site_mask, voxel_size) -> np.ndarray:
    # scipy's EDT feature transform gives the nearest site index exactly;
    # recomputing sqrt(d2) from integer deltas keeps values bit-comparable
    # with a brute-force oracle.
    idx = ndimage.distance_transform_edt(
        ~site_mask, return_distances=False, return_indices=True)
    grids = np.indices(site_mask.shape)
    d2 = np.zeros(site_mask.shape, dtype=np.int64)
    for k in range(3):
        delta = idx[k].astype(np.int64) - grids[k]
        d2 += delta * delta
    return np.sqrt(d2.astype(float)) * voxel_size


def build_distance_field(
    scene_meshes: list[tuple[Mesh, Pose]],
    bbox: tuple[np.ndarray, np.ndarray],
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    margin: float = DEFAULT_MARGIN,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> DistanceField:
    """Signed distance field over the task workspace box plus margin."""
    lo = np.asarray(bbox[0], dtype=float) - margin
    hi = np.asarray(bbox[1], dtype=float) + margin
    if voxel_size <= 0:
        raise GeometryError("voxel_size must be positive")
    if np.any(hi <= lo):
        raise GeometryError("bounding box is degenerate")
    dims = _grid_dims(hi - lo, voxel_size)
    if int(np.prod(dims)) > cell_budget:
        raise ResourceLimitError(
            f"field would need {int(np.prod(dims))} cells (> {cell_budget}); "
            f"increase voxel_size or shrink the workspace box")
    occ = np.zeros(dims, dtype=bool)
    for mesh, pose in scene_meshes:
        stamp_mesh_occupancy(occ, lo, voxel_size, mesh.transformed(pose))
    return DistanceField.from_occupancy(lo, voxel_size, occ)


def stamp_mesh_occupancy(occ: np.ndarray, origin: np.ndarray, pitch: float,
                         world_mesh: Mesh) -> np.ndarray:
    """Mark cells of an existing grid covered by a world-space mesh.

    Returns the boolean mask of cells this mesh covers (surface overlap or
    center inside), clipped to the grid.
    """
    dims = np.array(occ.shape)
    mask = np.zeros_like(occ)
    vmin, vmax = world_mesh.bounds
    lo = np.clip(np.floor((vmin - origin) / pitch - 1e-12).astype(int), 0, dims - 1)
    hi = np.clip(np.floor((vmax - origin) / pitch + 1e-12).astype(int), 0, dims - 1)
    if np.any(vmax < origin) or np.any(vmin > origin + dims * pitch):
        return mask
    _rasterize_surface(world_mesh, origin, pitch, mask)
    sub = mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    unmarked = np.argwhere(~sub) + lo
    if len(unmarked):
        centers = origin + (unmarked + 0.5) * pitch
        inside = ray_parity_inside(world_mesh, centers)
        mask[tuple(unmarked[inside].T)] = True
    occ |= mask
    return mask


def stamp_sphere_occupancy(occ: np.ndarray, origin: np.ndarray, pitch: float,
                           spheres: SphereSet) -> np.ndarray:
    """Mark cells whose center lies inside any of the given world spheres."""
    dims = np.array(occ.shape)
    mask = np.zeros_like(occ)
    for center, radius in zip(spheres.centers, spheres.radii):
        lo = np.clip(np.floor((center - radius - origin) / pitch).astype(int), 0, dims - 1)
        hi = np.clip(np.floor((center + radius - origin) / pitch).astype(int), 0, dims - 1)
        ranges = [np.arange(lo[k], hi[k] + 1) for k in range(3)]
        idx = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        centers = origin + (idx + 0.5) * pitch
        close = np.linalg.norm(centers - center, axis=1) <= radius
        mask[tuple(idx[close].T)] = True
    occ |= mask
    return mask


APPROACH = "approach"
MANIPULATION = "manipulation"


def mask_phase(field: DistanceField, object_mesh: Mesh, object_pose: Pose,
               phase: str) -> DistanceField:
    """Clear the manipulated object's cells from the static field.

    Both phases clear the same cells (those covered by the object at
    `object_pose`); they differ in what replaces the object. In the
    approach phase the exact mesh is attached for narrow-phase checks; in
    the manipulation phase the object is represented only by its chain
    sphere set, so nothing replaces it here.
    """
    if phase not in (APPROACH, MANIPULATION):
        raise ValueError(f"unknown phase {phase!r}")
    world_mesh = object_mesh.transformed(object_pose)
    scratch = field.occupancy.copy()
    covered = stamp_mesh_occupancy(scratch, field.origin, field.voxel_size, world_mesh)
    cleared = field.occupancy & covered
    if not cleared.any():
        narrow = world_mesh if phase == APPROACH else None
        return replace(field, narrow_phase=narrow)
    new_occ = field.occupancy & ~covered
    return DistanceField.from_occupancy(
        field.origin, field.voxel_size, new_occ,
        narrow_phase=world_mesh if phase == APPROACH else None)


# ---------------------------------------------------------------------------
# collision queries


@dataclass(frozen=True)
class CollisionReport:
    """world_hits: (link, sphere index, penetration); self_hits: (pair, penetration)."""

    world_hits: tuple[tuple[str, int, float], ...] = ()
    self_hits: tuple[tuple[tuple[str, str], float], ...] = ()

    @property
    def collided(self) -> bool:
        return bool(self.world_hits or self.self_hits)


def check_collision(akr: "AkrModel", q: np.ndarray, field: DistanceField,
                    activation: float = 0.0) -> CollisionReport:
    """Exhaustive, deterministic sphere collision query at configuration q.

    A world hit is a sphere whose interpolated field distance falls below
    radius + activation (the narrow-phase mesh, when present, is checked
    the same way via exact point-triangle distance). A self hit is an
    unmasked link pair whose spheres overlap beyond the activation margin.
    """
    poses = akr.tree.link_poses(q)
    world_spheres: dict[str, SphereSet] = {}
    for name in akr.sphere_links():
        world_spheres[name] = akr.tree.links[name].spheres.transformed(poses[name])

    world_hits = []
    for name in sorted(world_spheres):
        spheres = world_spheres[name]
        d = field.sample(spheres.centers)
        if field.narrow_phase is not None:
            d = np.minimum(d, point_triangle_distances(spheres.centers, field.narrow_phase))
        for i in np.nonzero(d < spheres.radii + activation)[0]:
            world_hits.append((name, int(i), float(spheres.radii[i] + activation - d[i])))

    self_hits = []
    for a, b in sorted(akr.collision_pairs):
        if a not in world_spheres or b not in world_spheres:
            continue
        sa, sb = world_spheres[a], world_spheres[b]
        dist = np.linalg.norm(
            sa.centers[:, None, :] - sb.centers[None, :, :], axis=2)
        reach = sa.radii[:, None] + sb.radii[None, :] + activation
        worst = float(np.max(reach - dist))
        if worst > 0:
            self_hits.append(((a, b), worst))

    return CollisionReport(tuple(world_hits), tuple(self_hits))
