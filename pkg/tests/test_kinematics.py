import numpy as np
import pytest

from akrplan import (
    DimensionError,
    Joint,
    KinematicTree,
    Link,
    ParseError,
    Pose,
    StructureError,
    UnknownLinkError,
    UnsupportedFeatureError,
    forward_kinematics,
    insert_virtual_base,
    jacobian,
    parse_robot_description,
)
from akrplan.errors import NamingError

from conftest import (
    assert_pose_matches_matrix,
    fk_matrix_oracle,
    random_configuration,
    random_tree,
)


def chain(*joints):
    links = [Link("link0")] + [Link(j.child) for j in joints]
    return KinematicTree(links, list(joints))


# ---------------------------------------------------------------------------
# parsing


def test_parse_single_link():
    tree = parse_robot_description('<robot name="r"><link name="base"/></robot>')
    assert tree.root == "base"
    assert tree.n_actuated == 0


def test_parse_minimal_chain():
    doc = """
    <robot name="r">
      <link name="a"/><link name="b"/>
      <joint name="j" type="revolute">
        <parent link="a"/><child link="b"/>
        <origin xyz="1 0 0"/><axis xyz="0 0 1"/>
        <limit lower="-1" upper="1"/>
      </joint>
    </robot>
    """
    tree = parse_robot_description(doc)
    assert tree.root == "a"
    assert tree.n_actuated == 1
    assert tree.joints[0].limits == (-1.0, 1.0)


def test_parse_seven_joint_arm_matches_oracle(rng):
    joints = []
    for i in range(7):
        kind = "revolute" if i % 2 == 0 else "prismatic"
        joints.append(
            f'<joint name="j{i}" type="{kind}">'
            f'<parent link="l{i}"/><child link="l{i+1}"/>'
            f'<origin xyz="0.1 {0.02 * i} -0.05" rpy="0.1 -0.2 {0.3 * i}"/>'
            f'<axis xyz="0 {1 if i % 3 else 0} {0 if i % 3 else 1}"/>'
            f'<limit lower="-2" upper="2"/></joint>')
    doc = ("<robot name='arm'>"
           + "".join(f'<link name="l{i}"/>' for i in range(8))
           + "".join(joints) + "</robot>")
    tree = parse_robot_description(doc)
    assert tree.n_actuated == 7
    q = np.zeros(7)
    assert_pose_matches_matrix(
        forward_kinematics(tree, q, "l7"), fk_matrix_oracle(tree, q, "l7"))
    q = random_configuration(rng, tree)
    assert_pose_matches_matrix(
        forward_kinematics(tree, q, "l7"), fk_matrix_oracle(tree, q, "l7"))


def test_parse_malformed_xml_reports_position():
    with pytest.raises(ParseError, match="line"):
        parse_robot_description("<robot><link name='a'>")


def test_parse_unsupported_joint_kind_named():
    doc = """
    <robot name="r"><link name="a"/><link name="b"/>
      <joint name="j" type="continuous">
        <parent link="a"/><child link="b"/><axis xyz="0 0 1"/>
      </joint>
    </robot>
    """
    with pytest.raises(UnsupportedFeatureError, match="continuous"):
        parse_robot_description(doc)


def test_parse_cycle_rejected():
    doc = """
    <robot name="r"><link name="a"/><link name="b"/>
      <joint name="j1" type="fixed"><parent link="a"/><child link="b"/></joint>
      <joint name="j2" type="fixed"><parent link="b"/><child link="a"/></joint>
    </robot>
    """
    with pytest.raises(StructureError):
        parse_robot_description(doc)


def test_multiple_roots_rejected():
    with pytest.raises(StructureError, match="root"):
        KinematicTree([Link("a"), Link("b")], [])


# ---------------------------------------------------------------------------
# forward kinematics


def test_fk_fixed_identity():
    tree = chain(Joint("j", "fixed", parent="link0", child="link1"))
    pose = forward_kinematics(tree, [], "link1")
    assert np.allclose(pose.translation, 0)
    assert np.allclose(pose.rotation, [1, 0, 0, 0])


def test_fk_prismatic_slide():
    tree = chain(Joint("j", "prismatic", parent="link0", child="link1",
                       axis=np.array([0, 0, 1.0]), limits=(-1, 1)))
    pose = forward_kinematics(tree, [0.5], "link1")
    np.testing.assert_allclose(pose.translation, [0, 0, 0.5], atol=1e-12)
    np.testing.assert_allclose(pose.rotation, [1, 0, 0, 0], atol=1e-12)


def test_fk_matches_oracle_random_chains(rng):
    for _ in range(1000):
        tree = random_tree(rng, n_joints=5, branching=False)
        q = random_configuration(rng, tree)
        target = f"link{rng.integers(1, 6)}"
        assert_pose_matches_matrix(
            forward_kinematics(tree, q, target), fk_matrix_oracle(tree, q, target))


def test_fk_unknown_link():
    tree = chain(Joint("j", "fixed", parent="link0", child="link1"))
    with pytest.raises(UnknownLinkError):
        forward_kinematics(tree, [], "nope")


def test_fk_dimension_error():
    tree = chain(Joint("j", "prismatic", parent="link0", child="link1",
                       axis=np.array([1.0, 0, 0]), limits=(-1, 1)))
    with pytest.raises(DimensionError):
        forward_kinematics(tree, [0.1, 0.2], "link1")


def test_fk_determinism(rng):
    tree = random_tree(rng, n_joints=6)
    q = random_configuration(rng, tree)
    a = forward_kinematics(tree, q, "link6")
    b = forward_kinematics(tree, q, "link6")
    assert np.array_equal(a.translation, b.translation)
    assert np.array_equal(a.rotation, b.rotation)


def test_fk_locality(rng):
    # changing one joint leaves non-descendant link poses bit-identical
    for _ in range(20):
        tree = random_tree(rng, n_joints=6)
        q = random_configuration(rng, tree)
        j = tree.actuated_joints[rng.integers(0, tree.n_actuated)]
        moved = tree.descendants(j.child)
        q2 = q.copy()
        q2[tree.actuated_index[j.name]] += 0.1
        before = tree.link_poses(q)
        after = tree.link_poses(q2)
        for name in tree.links:
            if name not in moved:
                assert np.array_equal(before[name].translation, after[name].translation)
                assert np.array_equal(before[name].rotation, after[name].rotation)


# ---------------------------------------------------------------------------
# jacobian


def finite_difference_jacobian(tree, q, target, step=1e-6):
    """Central differences of FK; angular rows from the rotation-vector of
    the relative rotation."""
    from akrplan.geometry import quat_conjugate, quat_multiply, quat_to_rotvec

    n = tree.n_actuated
    J = np.zeros((6, n))
    for i in range(n):
        qp, qm = q.copy(), q.copy()
        qp[i] += step
        qm[i] -= step
        pp = forward_kinematics(tree, qp, target)
        pm = forward_kinematics(tree, qm, target)
        J[:3, i] = (pp.translation - pm.translation) / (2 * step)
        rel = quat_multiply(pp.rotation, quat_conjugate(pm.rotation))
        J[3:, i] = quat_to_rotvec(rel) / (2 * step)
    return J


def test_jacobian_pure_slide():
    tree = chain(Joint("j", "prismatic", parent="link0", child="link1",
                       axis=np.array([1.0, 0, 0]), limits=(-1, 1)))
    J = jacobian(tree, [0.3], "link1")
    np.testing.assert_allclose(J[:, 0], [1, 0, 0, 0, 0, 0], atol=1e-12)


def test_jacobian_unit_lever_arm():
    tree = chain(
        Joint("j", "revolute", parent="link0", child="link1",
              axis=np.array([0, 0, 1.0]), limits=(-3, 3)),
        Joint("jf", "fixed", parent="link1", child="link2",
              origin=Pose.from_translation(1, 0, 0)),
    )
    J = jacobian(tree, [0.0], "link2")
    np.testing.assert_allclose(J[:, 0], [0, 1, 0, 0, 0, 1], atol=1e-12)


def test_jacobian_matches_finite_differences(rng):
    for _ in range(100):
        tree = random_tree(rng, n_joints=6)
        q = random_configuration(rng, tree)
        target = f"link{rng.integers(1, 7)}"
        J = jacobian(tree, q, target)
        J_fd = finite_difference_jacobian(tree, q, target)
        assert np.max(np.abs(J - J_fd)) < 1e-5


# ---------------------------------------------------------------------------
# virtual base


def test_virtual_base_pure_translation():
    tree = KinematicTree([Link("body")], [])
    vb = insert_virtual_base(tree)
    assert vb.n_actuated == 3
    pose = forward_kinematics(vb, [1.0, 2.0, 0.0], "body")
    np.testing.assert_allclose(pose.translation, [1, 2, 0], atol=1e-12)
    np.testing.assert_allclose(pose.rotation, [1, 0, 0, 0], atol=1e-12)


def test_virtual_base_pure_rotation():
    tree = KinematicTree([Link("body")], [])
    vb = insert_virtual_base(tree)
    pose = forward_kinematics(vb, [0.0, 0.0, np.pi / 2], "body")
    np.testing.assert_allclose(pose.translation, 0, atol=1e-12)
    np.testing.assert_allclose(
        pose.rotation, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], atol=1e-12)


def test_virtual_base_with_arm_matches_oracle():
    arm = chain(Joint("q4", "revolute", parent="link0", child="link1",
                      origin=Pose.from_translation(0.4, 0, 0),
                      axis=np.array([0, 0, 1.0]), limits=(-3, 3)))
    vb = insert_virtual_base(arm)
    assert vb.n_actuated == 4
    q = np.array([0.3, -0.4, np.pi / 4, 0.2])
    assert_pose_matches_matrix(
        forward_kinematics(vb, q, "link1"), fk_matrix_oracle(vb, q, "link1"))


def test_virtual_base_decomposition(rng):
    # FK through the virtual base equals translate(x, y, 0) then yaw
    arm = random_tree(rng, n_joints=3, branching=False)
    vb = insert_virtual_base(arm)
    q = random_configuration(rng, vb)
    got = forward_kinematics(vb, q, arm.root)
    expected = Pose.from_translation(q[0], q[1], 0.0).compose(
        Pose.from_axis_angle((0, 0, 1), q[2]))
    assert got.distance_to(expected) < 1e-9
    assert abs(np.dot(got.rotation, expected.rotation)) > 1.0 - 1e-12


def test_virtual_base_preserves_original_joints(rng):
    arm = random_tree(rng, n_joints=4)
    vb = insert_virtual_base(arm)
    assert vb.n_actuated == arm.n_actuated + 3
    originals = {j.name: j for j in arm.joints}
    for j in vb.joints:
        if j.name in originals:
            o = originals[j.name]
            assert j.parent == o.parent and j.child == o.child
            assert np.array_equal(j.origin.translation, o.origin.translation)


def test_virtual_base_name_collision():
    tree = KinematicTree([Link("world")], [])
    with pytest.raises(NamingError):
        insert_virtual_base(tree)


def test_configuration_order_is_depth_first_document_order():
    # two branches off the root; sibling order follows the joint list
    links = [Link("root"), Link("a"), Link("a2"), Link("b")]
    joints = [
        Joint("ja", "revolute", parent="root", child="a",
              axis=np.array([0, 0, 1.0]), limits=(-1, 1)),
        Joint("jb", "revolute", parent="root", child="b",
              axis=np.array([0, 0, 1.0]), limits=(-1, 1)),
        Joint("ja2", "revolute", parent="a", child="a2",
              axis=np.array([0, 0, 1.0]), limits=(-1, 1)),
    ]
    tree = KinematicTree(links, joints)
    assert [j.name for j in tree.actuated_joints] == ["ja", "ja2", "jb"]
