import numpy as np
import pytest
from scipy.spatial import ConvexHull

from akrplan import (
    DistanceField,
    GeometryError,
    Mesh,
    Pose,
    ResourceLimitError,
    SphereSet,
    box_mesh,
    build_distance_field,
    fit_spheres,
    mask_phase,
    voxelize_mesh,
)
from akrplan.collision import (
    FREE_SPACE_DISTANCE,
    check_collision,
    signed_distance_values,
)


# ---------------------------------------------------------------------------
# oracles


def clip_polygon_halfspace(poly, normal, offset):
    """Sutherland-Hodgman clip of a 3D polygon against n·x <= offset."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        da = np.dot(normal, a) - offset
        db = np.dot(normal, b) - offset
        if da <= 0:
            out.append(a)
            if db > 0:
                out.append(a + (b - a) * (da / (da - db)))
        elif db <= 0:
            out.append(a + (b - a) * (da / (da - db)))
    return out


def triangle_box_overlap_oracle(tri, lo, hi) -> bool:
    """Clip the triangle against the box's six half-spaces; non-empty
    remainder means overlap. Independent of the SAT implementation."""
    poly = [tri[0], tri[1], tri[2]]
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        poly = clip_polygon_halfspace(poly, e, hi[k])
        if not poly:
            return False
        poly = clip_polygon_halfspace(poly, -e, -lo[k])
        if not poly:
            return False
    return True


def convex_inside_oracle(hull: ConvexHull, pts) -> np.ndarray:
    eq = hull.equations
    return np.all(pts @ eq[:, :3].T + eq[:, 3] <= 1e-12, axis=1)


def random_convex_mesh(rng, n_half=15, scale=0.3) -> tuple[Mesh, ConvexHull]:
    """Centrally symmetric random hull: vertex centroid equals the volume
    centroid by construction, so realignment shifts stay sub-voxel."""
    center = rng.uniform(-0.2, 0.2, 3)
    q = rng.normal(size=(n_half, 3))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    q = q * rng.uniform(0.6, 1.0, (n_half, 1)) * scale
    pts = np.vstack([center + q, center - q])
    hull = ConvexHull(pts)
    # keep only true hull vertices so the mesh carries no interior points
    keep = hull.vertices
    remap = {old: new for new, old in enumerate(keep)}
    tris = np.array([[remap[i] for i in simplex] for simplex in hull.simplices])
    return Mesh(pts[keep], tris), hull


def brute_force_signed_distances(occ: np.ndarray, voxel: float) -> np.ndarray:
    """Exhaustive min integer squared distance between cell centers.

    Matches the documented convention: free cells get +distance to the
    nearest occupied center, occupied cells get -(distance to the
    nearest free center - voxel), zero level on surface cells."""
    dims = occ.shape
    idx = np.argwhere(np.ones(dims, dtype=bool))
    occ_idx = np.argwhere(occ)
    free_idx = np.argwhere(~occ)
    values = np.empty(dims)
    if len(occ_idx) == 0:
        return np.full(dims, FREE_SPACE_DISTANCE)
    if len(free_idx) == 0:
        return np.full(dims, -FREE_SPACE_DISTANCE)
    for cell in idx:
        inside = occ[tuple(cell)]
        sites = free_idx if inside else occ_idx
        d2 = np.min(np.sum((sites - cell) ** 2, axis=1))
        v = np.sqrt(float(d2)) * voxel
        values[tuple(cell)] = -(v - voxel) if inside else v
    return values


# ---------------------------------------------------------------------------
# voxelization


def test_unit_cube_single_voxel():
    grid = voxelize_mesh(box_mesh((1, 1, 1), center=(0.5, 0.5, 0.5)), pitch=1.0)
    assert grid.occupancy.shape == (1, 1, 1)
    assert grid.occupancy.all()


def test_box_exact_tiling():
    grid = voxelize_mesh(box_mesh((0.1, 0.1, 0.2)), pitch=0.05)
    assert grid.occupancy.shape == (2, 2, 4)
    assert int(grid.occupancy.sum()) == 16


def test_voxelize_rejects_degenerate():
    flat = Mesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(GeometryError):
        voxelize_mesh(flat, 0.1)


def test_voxelize_matches_oracle_convex(rng):
    for trial in range(10):
        mesh, hull = random_convex_mesh(rng)
        pitch = 0.05
        grid = voxelize_mesh(mesh, pitch)
        dims = grid.occupancy.shape
        corners = mesh.triangle_corners()
        for ix in range(dims[0]):
            for iy in range(dims[1]):
                for iz in range(dims[2]):
                    lo = grid.origin + np.array([ix, iy, iz]) * pitch
                    hi = lo + pitch
                    center = lo + pitch / 2
                    surf = any(triangle_box_overlap_oracle(t, lo, hi) for t in corners)
                    inside = bool(convex_inside_oracle(hull, center[None])[0])
                    assert grid.occupancy[ix, iy, iz] == (surf or inside), (
                        trial, ix, iy, iz)


# ---------------------------------------------------------------------------
# sphere fitting


def test_fit_spheres_unit_cube():
    spheres = fit_spheres(box_mesh((1, 1, 1), center=(0.5, 0.5, 0.5)),
                          pitch=1.0, downscale=1.0)
    assert len(spheres) == 1
    np.testing.assert_allclose(spheres.centers[0], [0.5, 0.5, 0.5], atol=1e-12)
    assert spheres.radii[0] == pytest.approx(0.5)


def test_fit_spheres_box_16():
    mesh = box_mesh((0.1, 0.1, 0.2))
    spheres = fit_spheres(mesh, pitch=0.05, downscale=1.0)
    assert len(spheres) == 16
    assert np.all(spheres.radii == 0.025)
    np.testing.assert_allclose(spheres.centers.mean(axis=0), mesh.vertex_centroid,
                               atol=1e-9)


def test_fit_spheres_centroid_realigned(rng):
    for _ in range(10):
        mesh, _ = random_convex_mesh(rng)
        spheres = fit_spheres(mesh, pitch=0.05, downscale=0.95)
        np.testing.assert_allclose(spheres.centers.mean(axis=0),
                                   mesh.vertex_centroid, atol=1e-9)


def test_fit_spheres_conservative_at_full_scale(rng):
    # with downscale=1 every occupied voxel center lies in some sphere
    for _ in range(10):
        mesh, _ = random_convex_mesh(rng)
        pitch = 0.05
        grid = voxelize_mesh(mesh, pitch)
        spheres = fit_spheres(mesh, pitch, downscale=1.0)
        centers = grid.occupied_centers()
        d = np.linalg.norm(centers[:, None, :] - spheres.centers[None], axis=2)
        assert np.all(d.min(axis=1) <= spheres.radii[0] + 1e-12)


def test_fit_spheres_translation_equivariance(rng):
    mesh, _ = random_convex_mesh(rng)
    t = np.array([1.3, -0.7, 0.4])
    moved = Mesh(mesh.vertices + t, mesh.triangles)
    a = fit_spheres(mesh, 0.05, downscale=1.0)
    b = fit_spheres(moved, 0.05, downscale=1.0)
    np.testing.assert_allclose(b.centers, a.centers + t, atol=1e-9)


# ---------------------------------------------------------------------------
# distance field


def test_edt_exact_small_grids(rng):
    for _ in range(30):
        dims = tuple(rng.integers(2, 13, 3))
        occ = rng.random(dims) < 0.25
        voxel = float(rng.uniform(0.01, 0.1))
        got = signed_distance_values(occ, voxel)
        want = brute_force_signed_distances(occ, voxel)
        assert np.array_equal(got, want)


def test_edt_lipschitz(rng):
    occ = rng.random((16, 16, 16)) < 0.15
    occ[0, 0, 0] = True
    v = signed_distance_values(occ, 0.02)
    for axis in range(3):
        d = np.abs(np.diff(v, axis=axis))
        assert np.max(d) <= 0.02 + 1e-12


def test_empty_scene_field_clamps():
    field = build_distance_field([], (np.zeros(3), np.ones(3)), 0.1, margin=0.1)
    assert np.all(field.values == FREE_SPACE_DISTANCE)


def test_field_distance_to_cube():
    cube = box_mesh((1, 1, 1))
    field = build_distance_field([(cube, Pose.identity())],
                                 (-np.ones(3), np.ones(3)), 0.02, margin=0.25)
    d = field.sample(np.array([[0.0, 0.0, 1.0]]))[0]
    assert abs(d - 0.5) <= 0.02 + 1e-9


def test_field_cell_budget():
    with pytest.raises(ResourceLimitError):
        build_distance_field([], (np.zeros(3), np.ones(3) * 10.0), 0.01,
                             margin=0.0, cell_budget=1000)


def test_field_out_of_bounds_is_free():
    field = build_distance_field([(box_mesh((0.2, 0.2, 0.2)), Pose.identity())],
                                 (-np.ones(3) * 0.2, np.ones(3) * 0.2), 0.05, 0.05)
    d = field.sample(np.array([[50.0, 0.0, 0.0]]))[0]
    assert d == FREE_SPACE_DISTANCE


def test_field_dump_roundtrip(tmp_path, rng):
    occ = rng.random((6, 5, 4)) < 0.3
    occ[2, 2, 2] = True
    field = DistanceField.from_occupancy(np.array([0.1, -0.2, 0.3]), 0.05, occ)
    path = tmp_path / "field.bin"
    field.dump(path)
    loaded = DistanceField.load(path)
    assert loaded.dims == field.dims
    assert loaded.voxel_size == field.voxel_size
    np.testing.assert_allclose(loaded.origin, field.origin)
    np.testing.assert_allclose(loaded.values, field.values, atol=1e-6)
    # x-fastest ordering on disk
    raw = path.read_bytes()
    flat = np.frombuffer(raw, dtype=np.float32, offset=56)
    assert flat[1] == np.float32(field.values[1, 0, 0])


# ---------------------------------------------------------------------------
# phase masking


def test_mask_phase_no_overlap_is_noop():
    field = build_distance_field([(box_mesh((0.2, 0.2, 0.2)), Pose.identity())],
                                 (-np.ones(3) * 0.3, np.ones(3) * 0.3), 0.05, 0.0)
    far = Pose.from_translation(10, 10, 10)
    out = mask_phase(field, box_mesh((0.1, 0.1, 0.1)), far, "manipulation")
    np.testing.assert_array_equal(out.values, field.values)


def test_mask_phase_clears_exactly_covered_cells():
    obstacle = box_mesh((0.2, 0.2, 0.2))
    bbox = (-np.ones(3) * 0.3, np.ones(3) * 0.3)
    field = build_distance_field([(obstacle, Pose.identity())], bbox, 0.05, 0.0)
    assert field.occupancy.any()
    out = mask_phase(field, box_mesh((0.25, 0.25, 0.25)), Pose.identity(),
                     "manipulation")
    assert not out.occupancy.any()  # object volume covers the whole obstacle
    assert out.narrow_phase is None
    # cleared set never increases occupancy
    assert np.all(out.occupancy <= field.occupancy)
    # Lipschitz preserved after re-transform
    for axis in range(3):
        d = np.abs(np.diff(out.values, axis=axis))
        assert np.max(d) <= 0.05 + 1e-12


def test_mask_phase_approach_keeps_exact_mesh():
    obstacle = box_mesh((0.2, 0.2, 0.2))
    bbox = (-np.ones(3) * 0.3, np.ones(3) * 0.3)
    field = build_distance_field([(obstacle, Pose.identity())], bbox, 0.05, 0.0)
    out_a = mask_phase(field, obstacle, Pose.identity(), "approach")
    out_m = mask_phase(field, obstacle, Pose.identity(), "manipulation")
    # phases clear the same static cells
    np.testing.assert_array_equal(out_a.occupancy, out_m.occupancy)
    assert out_a.narrow_phase is not None
    assert out_m.narrow_phase is None


# ---------------------------------------------------------------------------
# collision queries


def _single_sphere_model(center, radius, pairs=()):
    # 3-link chain: "root" and "other" are not joint-connected, so their
    # pair is a legal collision pair
    from akrplan import AkrModel, Joint, KinematicTree, Link
    from akrplan.akr import LayoutRange

    links = [
        Link("root", spheres=SphereSet(np.array([center]), np.array([radius]))),
        Link("mid"),
        Link("other", spheres=SphereSet(np.zeros((1, 3)), np.array([radius]))),
    ]
    joints = [
        Joint("jx", "prismatic", parent="root", child="mid",
              axis=np.array([1.0, 0, 0]), limits=(-2, 2)),
        Joint("jf", "fixed", parent="mid", child="other"),
    ]
    tree = KinematicTree(links, joints)
    return AkrModel(tree=tree, base=LayoutRange(0, 0), manipulator=LayoutRange(0, 1),
                    object=LayoutRange(1, 1), joint_weights=np.ones(1),
                    collision_pairs=frozenset(pairs), tcp_link="other",
                    object_anchor_link="other", object_links=frozenset())


def test_check_collision_free_space():
    field = build_distance_field([], (np.zeros(3), np.ones(3)), 0.1, 0.1)
    akr = _single_sphere_model((0.5, 0.5, 0.5), 0.05)
    report = check_collision(akr, np.array([1.5]), field)
    assert not report.collided


def test_check_collision_penetration_near_face():
    # obstacle face at z=0.1 (box top); sphere center 0.03 above it
    obstacle = box_mesh((0.4, 0.4, 0.2))
    field = build_distance_field([(obstacle, Pose.identity())],
                                 (-np.ones(3) * 0.3, np.ones(3) * 0.3), 0.02, 0.2)
    akr = _single_sphere_model((0.0, 0.0, 0.13), 0.05)
    report = check_collision(akr, np.array([1.9]), field)
    hits = [h for h in report.world_hits if h[0] == "root"]
    assert len(hits) == 1
    assert hits[0][2] == pytest.approx(0.02, abs=0.02 + 1e-9)


def test_check_collision_masked_pair_ignored():
    field = build_distance_field([], (np.zeros(3), np.ones(3)), 0.1, 0.1)
    akr = _single_sphere_model((0.0, 0.0, 0.0), 0.05)  # no pairs registered
    report = check_collision(akr, np.array([0.01]), field)  # spheres overlap
    assert report.self_hits == ()


def test_check_collision_self_hit_reported():
    field = build_distance_field([], (np.zeros(3), np.ones(3)), 0.1, 0.1)
    akr = _single_sphere_model((0.0, 0.0, 0.0), 0.05,
                               pairs={("other", "root")})
    report = check_collision(akr, np.array([0.01]), field)
    assert len(report.self_hits) == 1
    pair, pen = report.self_hits[0]
    assert pair == ("other", "root")
    assert pen == pytest.approx(0.05 + 0.05 - 0.01, abs=1e-9)


def test_narrow_phase_mesh_checked():
    field = build_distance_field([], (-np.ones(3), np.ones(3)), 0.1, 0.1)
    masked = mask_phase(field, box_mesh((0.3, 0.3, 0.3)), Pose.identity(),
                        "approach")
    akr = _single_sphere_model((0.0, 0.0, 0.18), 0.05)
    report = check_collision(akr, np.array([1.9]), masked)
    hits = [h for h in report.world_hits if h[0] == "root"]
    assert len(hits) == 1
    # exact mesh distance: 0.18 - 0.15 = 0.03 from the face, pen 0.02
    assert hits[0][2] == pytest.approx(0.02, abs=1e-9)
