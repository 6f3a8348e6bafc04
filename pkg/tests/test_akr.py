import numpy as np
import pytest

from akrplan import (
    AkrModel,
    GraspSpec,
    Joint,
    KinematicTree,
    Link,
    Pose,
    SphereSet,
    UnknownLinkError,
    assemble_akr,
    compute_attachment,
    derive_collision_pairs,
    forward_kinematics,
    insert_virtual_base,
    invert_tree,
    scale_object_model,
)
from akrplan.akr import LayoutRange
from akrplan.errors import StructureError

from conftest import config_by_name, random_pose, random_tree


def relative_poses(tree: KinematicTree, q: np.ndarray) -> dict:
    poses = tree.link_poses(q)
    names = sorted(tree.links)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out[(a, b)] = poses[a].inverse().compose(poses[b])
    return out


def assert_same_relative_poses(t1, t2, values: dict, tol=1e-9):
    r1 = relative_poses(t1, config_by_name(t1, values))
    r2 = relative_poses(t2, config_by_name(t2, values))
    assert r1.keys() == r2.keys()
    for key in r1:
        a, b = r1[key], r2[key]
        assert a.distance_to(b) < tol, f"translation mismatch at {key}"
        q2 = b.rotation if np.dot(a.rotation, b.rotation) >= 0 else -b.rotation
        assert np.max(np.abs(a.rotation - q2)) < tol, f"rotation mismatch at {key}"


def random_joint_values(rng, tree) -> dict:
    lims = tree.joint_limits()
    return {
        j.name: rng.uniform(lims[i, 0], lims[i, 1])
        for i, j in enumerate(tree.actuated_joints)
    }


# ---------------------------------------------------------------------------
# scaling


def test_scale_identity_is_noop(rng):
    tree = random_tree(rng, n_joints=4)
    scaled = scale_object_model(tree, 1.0)
    q = config_by_name(tree, random_joint_values(rng, tree))
    for name in tree.links:
        a = forward_kinematics(tree, q, name)
        b = forward_kinematics(scaled, q, name)
        assert a.distance_to(b) < 1e-12


def test_scale_prismatic_origin_halved():
    tree = KinematicTree(
        [Link("a"), Link("b")],
        [Joint("j", "prismatic", parent="a", child="b",
               origin=Pose.from_translation(0.2, 0, 0),
               axis=np.array([1.0, 0, 0]), limits=(-1, 1))])
    scaled = scale_object_model(tree, 0.5)
    np.testing.assert_allclose(scaled.joints[0].origin.translation, [0.1, 0, 0])
    assert scaled.joints[0].limits == (-0.5, 0.5)
    for v in (-0.4, 0.0, 0.3):
        a = forward_kinematics(tree, [v], "b")
        b = forward_kinematics(scaled, [v * 0.5], "b")
        np.testing.assert_allclose(b.translation, a.translation * 0.5, atol=1e-12)


def test_scale_commutes_with_fk_translation(rng):
    # FK(scale(T, s), q).translation == s * FK(T, q).translation for
    # revolute/fixed articulations (prismatic values live in scaled units)
    for _ in range(20):
        tree = random_tree(rng, n_joints=3, kinds=("revolute", "fixed"))
        factor = rng.uniform(0.3, 2.0)
        scaled = scale_object_model(tree, factor)
        values = random_joint_values(rng, tree)
        for name in tree.links:
            a = forward_kinematics(tree, config_by_name(tree, values), name)
            b = forward_kinematics(scaled, config_by_name(scaled, values), name)
            np.testing.assert_allclose(b.translation, factor * a.translation, atol=1e-9)
            assert abs(np.dot(a.rotation, b.rotation)) > 1 - 1e-12


def test_scale_cabinet_model(rng):
    # articulated model with revolute + prismatic: after matching prismatic
    # displacements in scaled units, translations scale exactly
    links = [Link(n) for n in ("base", "door", "drawer", "knob")]
    joints = [
        Joint("hinge", "revolute", parent="base", child="door",
              origin=Pose.from_rpy((0.2, 0.1, 0.0), (0, 0, 0.3)),
              axis=np.array([0, 0, 1.0]), limits=(-1.5, 1.5)),
        Joint("slide", "prismatic", parent="base", child="drawer",
              origin=Pose.from_translation(0.0, 0.15, 0.1),
              axis=np.array([1.0, 0, 0]), limits=(0.0, 0.4)),
        Joint("knob_j", "fixed", parent="drawer", child="knob",
              origin=Pose.from_translation(0.2, 0, 0)),
    ]
    tree = KinematicTree(links, joints)
    factor = 0.8
    scaled = scale_object_model(tree, factor)
    for _ in range(50):
        q = np.array([rng.uniform(-1.5, 1.5), rng.uniform(0, 0.4)])
        q_scaled = q.copy()
        q_scaled[1] *= factor
        for name in tree.links:
            a = forward_kinematics(tree, q, name)
            b = forward_kinematics(scaled, q_scaled, name)
            np.testing.assert_allclose(b.translation, factor * a.translation,
                                       atol=1e-9)
            assert abs(np.dot(a.rotation, b.rotation)) > 1 - 1e-12


def test_scale_rejects_nonpositive():
    tree = KinematicTree([Link("a")], [])
    with pytest.raises(ValueError):
        scale_object_model(tree, 0.0)


# ---------------------------------------------------------------------------
# inversion


def test_invert_at_root_is_noop(rng):
    tree = random_tree(rng, n_joints=4)
    out = invert_tree(tree, tree.root)
    assert out.root == tree.root
    assert [j.name for j in out.joints] == [j.name for j in tree.joints]


def test_invert_fixed_chain_reflection():
    tree = KinematicTree(
        [Link("base"), Link("tip")],
        [Joint("j", "fixed", parent="base", child="tip",
               origin=Pose.from_translation(1, 0, 0))])
    inv = invert_tree(tree, "tip")
    assert inv.root == "tip"
    pose = forward_kinematics(inv, [], "base")
    np.testing.assert_allclose(pose.translation, [-1, 0, 0], atol=1e-12)


def test_invert_preserves_relative_poses_branched(rng):
    # 4-link chain with a branch (revolute + prismatic), many random q
    links = [Link(n) for n in ("base", "mid", "tip", "branch")]
    joints = [
        Joint("j1", "revolute", parent="base", child="mid",
              origin=random_pose(rng), axis=np.array([0, 0, 1.0]), limits=(-2, 2)),
        Joint("j2", "prismatic", parent="mid", child="tip",
              origin=random_pose(rng), axis=np.array([0, 1.0, 0]), limits=(-1, 1)),
        Joint("j3", "revolute", parent="mid", child="branch",
              origin=random_pose(rng), axis=np.array([1.0, 0, 0]), limits=(-2, 2)),
    ]
    tree = KinematicTree(links, joints)
    inv = invert_tree(tree, "tip")
    assert inv.root == "tip"
    for _ in range(500):
        assert_same_relative_poses(tree, inv, random_joint_values(rng, tree))


def test_invert_random_trees(rng):
    for _ in range(50):
        tree = random_tree(rng, n_joints=6)
        new_root = f"link{rng.integers(0, 7)}"
        inv = invert_tree(tree, new_root)
        assert inv.root == new_root
        for _ in range(10):
            assert_same_relative_poses(tree, inv, random_joint_values(rng, tree))


def test_invert_round_trip(rng):
    for _ in range(20):
        tree = random_tree(rng, n_joints=5)
        new_root = f"link{rng.integers(1, 6)}"
        back = invert_tree(invert_tree(tree, new_root), tree.root)
        for _ in range(5):
            assert_same_relative_poses(tree, back, random_joint_values(rng, tree))


def test_invert_unknown_link(rng):
    tree = random_tree(rng, n_joints=2)
    with pytest.raises(UnknownLinkError):
        invert_tree(tree, "ghost")


def test_invert_limits_unchanged(rng):
    # the same q reproduces the same shape, so the valid q set is identical
    tree = random_tree(rng, n_joints=5)
    inv = invert_tree(tree, "link5")
    orig = {j.name: j.limits for j in tree.joints}
    for j in inv.joints:
        assert j.limits == orig[j.name]


# ---------------------------------------------------------------------------
# attachment


def test_attachment_identities(rng):
    ident = Pose.identity()
    assert compute_attachment(ident, ident).is_close(ident)
    p = random_pose(rng)
    got = compute_attachment(p, p)
    assert got.distance_to(ident) < 1e-12
    assert abs(np.dot(got.rotation, ident.rotation)) > 1 - 1e-12


def test_attachment_pure_translation():
    grasp = Pose.from_translation(0.1, 0, 0)
    fk = Pose.from_translation(0.3, 0, 0)
    np.testing.assert_allclose(
        compute_attachment(grasp, fk).translation, [0.2, 0, 0], atol=1e-12)


# ---------------------------------------------------------------------------
# assembly


def door_object(rng=None) -> KinematicTree:
    links = [Link("obase"), Link("panel"), Link("grip")]
    joints = [
        Joint("hinge", "revolute", parent="obase", child="panel",
              axis=np.array([0, 0, 1.0]), limits=(0.0, 1.9)),
        Joint("mount", "fixed", parent="panel", child="grip",
              origin=Pose.from_translation(0.5, -0.05, 0.2)),
    ]
    return KinematicTree(links, joints)


def small_robot() -> KinematicTree:
    links = [Link("base_link"), Link("arm"), Link("tool")]
    joints = [
        Joint("q4", "revolute", parent="base_link", child="arm",
              origin=Pose.from_translation(0, 0, 0.3),
              axis=np.array([0, 0, 1.0]), limits=(-2.9, 2.9)),
        Joint("toolj", "fixed", parent="arm", child="tool",
              origin=Pose.from_translation(0.4, 0, 0)),
    ]
    return insert_virtual_base(KinematicTree(links, joints))


def test_assemble_rigid_object_layout():
    robot = small_robot()
    obj = KinematicTree([Link("box")], [])
    grasp = GraspSpec(Pose.identity(), "box", np.zeros(0))
    akr = assemble_akr(robot, obj, grasp, 1.0, np.ones(4), "tool")
    assert (akr.base.start, akr.base.stop) == (0, 3)
    assert (akr.manipulator.start, akr.manipulator.stop) == (3, 4)
    assert len(akr.object) == 0
    q = np.array([0.2, -0.1, 0.4, 0.9])
    poses = akr.tree.link_poses(q)
    tcp, anchor = poses["tool"], poses[akr.object_anchor_link]
    assert tcp.distance_to(anchor) < 1e-12
    assert abs(np.dot(tcp.rotation, anchor.rotation)) > 1 - 1e-12


def test_assemble_door_closure(rng):
    robot = small_robot()
    obj = door_object()
    grasp = GraspSpec(
        tcp_pose_in_object_base=Pose.from_translation(0.5, -0.1, 0.2),
        grasp_link="grip",
        object_state_at_grasp=np.array([0.0]),
    )
    akr = assemble_akr(robot, obj, grasp, 1.0, np.ones(5), "tool")
    assert len(akr.object) == 1
    # closure: tcp -> anchor transform at the grasp state equals the
    # inverse grasp pose
    q = np.zeros(akr.width)
    q[akr.object.slice] = grasp.object_state_at_grasp
    q[:3] = [0.7, -0.3, 0.5]
    q[3] = 0.6
    poses = akr.tree.link_poses(q)
    rel = poses["tool"].inverse().compose(poses[akr.object_anchor_link])
    expected = grasp.tcp_pose_in_object_base.inverse()
    assert rel.distance_to(expected) < 1e-9
    assert abs(np.dot(rel.rotation, expected.rotation)) > 1 - 1e-9


def test_assemble_closure_random_triples(rng):
    # FK(world->anchor) == FK(world->tcp) ∘ T_tcp_tip ∘ FK_inv(tip->anchor)
    for _ in range(30):
        robot = small_robot()
        obj = random_tree(rng, n_joints=int(rng.integers(0, 4)))
        grasp_link = f"link{rng.integers(0, len(obj.links))}"
        m = obj.n_actuated
        grasp = GraspSpec(random_pose(rng), grasp_link,
                          np.asarray([rng.uniform(-1, 1) for _ in range(m)]))
        scale = rng.uniform(0.5, 1.5)
        akr = assemble_akr(robot, obj, grasp, scale, np.ones(4 + m), "tool")
        q = np.concatenate([rng.uniform(-1, 1, 4), rng.uniform(-1, 1, m)])
        poses = akr.tree.link_poses(q)
        attach = [j for j in akr.tree.joints if j.name == "obj/attachment"][0]
        inv_obj_fk = poses[f"obj/{grasp_link}"].inverse().compose(
            poses[akr.object_anchor_link])
        composed = poses["tool"].compose(attach.origin).compose(inv_obj_fk)
        direct = poses[akr.object_anchor_link]
        assert composed.distance_to(direct) < 1e-9
        assert abs(np.dot(composed.rotation, direct.rotation)) > 1 - 1e-9


def test_assemble_name_collision():
    robot = small_robot()
    links = [Link("obj/base")]
    with pytest.raises(Exception):
        # prefixing "obj/base" collides only if the robot already has it;
        # force that case
        bad_robot = KinematicTree(
            list(robot.links.values()) + [Link("obj/obj_base")],
            list(robot.joints) + [
                Joint("glue", "fixed", parent="tool", child="obj/obj_base")])
        obj = KinematicTree([Link("obj_base")], [])
        assemble_akr(bad_robot, obj, GraspSpec(Pose.identity(), "obj_base"),
                     1.0, np.ones(4), "tool")


def test_assemble_missing_grasp_link():
    robot = small_robot()
    obj = KinematicTree([Link("box")], [])
    with pytest.raises(UnknownLinkError):
        assemble_akr(robot, obj, GraspSpec(Pose.identity(), "nope"), 1.0,
                     np.ones(4), "tool")


# ---------------------------------------------------------------------------
# collision pairs


def spheres_at(*centers, radius=0.1):
    return SphereSet(np.array(centers, dtype=float),
                     np.full(len(centers), radius))


def pair_test_model() -> AkrModel:
    # planar robot with one far-away link and a 1-dof object
    links = [
        Link("base_link", spheres=spheres_at((0, 0, 0))),
        Link("hand", spheres=spheres_at((0, 0, 0))),
        Link("obj/root", spheres=spheres_at((0, 0, 0))),
        Link("obj/flap", spheres=spheres_at((0.0, 0, 0))),
    ]
    joints = [
        Joint("vx", "prismatic", parent="base_link", child="hand",
              origin=Pose.from_translation(1.0, 0, 0),
              axis=np.array([1.0, 0, 0]), limits=(0.0, 1.0)),
        Joint("glue", "fixed", parent="hand", child="obj/root",
              origin=Pose.from_translation(1.0, 0, 0)),
        Joint("flap_j", "revolute", parent="obj/root", child="obj/flap",
              origin=Pose.from_translation(0.5, 0, 0),
              axis=np.array([0, 0, 1.0]), limits=(-1.0, 1.0)),
    ]
    tree = KinematicTree(links, joints)
    return AkrModel(
        tree=tree, base=LayoutRange(0, 0), manipulator=LayoutRange(0, 2),
        object=LayoutRange(2, 2), joint_weights=np.ones(2),
        collision_pairs=frozenset(), tcp_link="hand",
        object_anchor_link="obj/root",
        object_links=frozenset({"obj/root", "obj/flap"}),
    )


def brute_force_pairs(akr, n_samples, base_pairs, seed=0):
    """Independent oracle: explicit pairwise sphere intersection at each
    prefix-stable sample."""
    tree = akr.tree
    adjacent = {tuple(sorted((j.parent, j.child))) for j in tree.joints}
    names = sorted(n for n, l in tree.links.items() if l.spheres is not None)
    lims = tree.joint_limits()
    rng = np.random.default_rng(seed)
    samples = [rng.uniform(lims[:, 0], lims[:, 1]) for _ in range(n_samples)]
    kept = set(tuple(sorted(p)) for p in base_pairs) - adjacent
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pair = tuple(sorted((a, b)))
            if pair in kept or pair in adjacent:
                continue
            if a not in akr.object_links and b not in akr.object_links:
                continue
            always = True
            for q in samples:
                poses = tree.link_poses(q)
                ca = poses[a].transform_points(tree.links[a].spheres.centers)
                cb = poses[b].transform_points(tree.links[b].spheres.centers)
                d = np.linalg.norm(ca[:, None] - cb[None, :], axis=2)
                if not np.any(d < tree.links[a].spheres.radii[:, None]
                              + tree.links[b].spheres.radii[None, :]):
                    always = False
                    break
            if not always:
                kept.add(pair)
    return frozenset(kept)


def test_derive_pairs_no_permanent_contacts():
    akr = pair_test_model()
    got = derive_collision_pairs(akr, 50, set())
    # obj/flap never touches base_link or hand (distances >= 0.5 - reach)
    assert ("base_link", "obj/flap") in got
    assert ("hand", "obj/flap") in got
    # base-to-object root distance ranges 2.0..3.0, never touching
    assert ("base_link", "obj/root") in got


def test_derive_pairs_adjacent_excluded():
    akr = pair_test_model()
    got = derive_collision_pairs(akr, 20, set())
    assert ("obj/flap", "obj/root") not in got
    assert ("hand", "obj/root") not in got


def test_derive_pairs_permanent_contact_masked():
    # weld two spheres on top of each other through a zero-range joint
    links = [
        Link("a", spheres=spheres_at((0, 0, 0))),
        Link("mid"),
        Link("obj/b", spheres=spheres_at((0, 0, 0))),
    ]
    joints = [
        Joint("j1", "prismatic", parent="a", child="mid",
              axis=np.array([1.0, 0, 0]), limits=(0.0, 0.05)),
        Joint("j2", "fixed", parent="mid", child="obj/b"),
    ]
    tree = KinematicTree(links, joints)
    akr = AkrModel(tree=tree, base=LayoutRange(0, 0), manipulator=LayoutRange(0, 1),
                   object=LayoutRange(1, 1), joint_weights=np.ones(1),
                   collision_pairs=frozenset(), tcp_link="mid",
                   object_anchor_link="obj/b",
                   object_links=frozenset({"obj/b"}))
    got = derive_collision_pairs(akr, 40, set())
    assert ("a", "obj/b") not in got  # overlap at every sample -> masked


def test_derive_pairs_matches_brute_force():
    akr = pair_test_model()
    for n in (1, 10, 100):
        got = derive_collision_pairs(akr, n, set(), seed=7)
        want = brute_force_pairs(akr, n, set(), seed=7)
        assert got == want


def test_derive_pairs_monotonic_in_samples():
    akr = pair_test_model()
    prev = frozenset()
    for n in (1, 5, 25, 100):
        got = derive_collision_pairs(akr, n, set(), seed=3)
        assert prev <= got
        prev = got
