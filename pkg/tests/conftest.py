"""Shared fixtures: random kinematic trees and independent FK oracles.

The oracle here deliberately avoids the library's quaternion math: joint
transforms are built as 4x4 homogeneous matrices via Rodrigues' rotation
formula and chained by plain matrix products, so FK comparisons check
two genuinely different computation paths.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from akrplan import Joint, KinematicTree, Link, Pose

ASSETS = Path(__file__).resolve().parent.parent / "demos" / "toy_door"


# ---------------------------------------------------------------------------
# matrix oracle


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def pose_to_matrix_oracle(pose: Pose) -> np.ndarray:
    """Quaternion -> matrix via an axis/angle route independent of the
    library's direct conversion."""
    w, x, y, z = pose.rotation
    s = np.linalg.norm([x, y, z])
    m = np.eye(4)
    if s > 1e-14:
        angle = 2.0 * np.arctan2(s, w)
        m[:3, :3] = rodrigues(np.array([x, y, z]) / s, angle)
    m[:3, 3] = pose.translation
    return m


def joint_matrix(joint: Joint, value: float) -> np.ndarray:
    origin = pose_to_matrix_oracle(joint.origin)
    motion = np.eye(4)
    if joint.kind == "revolute":
        motion[:3, :3] = rodrigues(joint.axis, value)
    elif joint.kind == "prismatic":
        motion[:3, 3] = joint.axis * value
    if joint.reversed_motion:
        return motion @ origin
    return origin @ motion


def fk_matrix_oracle(tree: KinematicTree, q: np.ndarray, target: str) -> np.ndarray:
    """Chain 4x4 matrices along the root-to-target path."""
    chain = []
    link = target
    while link != tree.root:
        j = tree.parent_joint[link]
        chain.append(j)
        link = j.parent
    chain.reverse()
    T = np.eye(4)
    q = np.asarray(q, dtype=float)
    for j in chain:
        value = q[tree.actuated_index[j.name]] if j.actuated else 0.0
        T = T @ joint_matrix(j, value)
    return T


def assert_pose_matches_matrix(pose: Pose, matrix: np.ndarray, tol: float = 1e-9):
    np.testing.assert_allclose(pose.translation, matrix[:3, 3], atol=tol)
    np.testing.assert_allclose(pose.to_matrix()[:3, :3], matrix[:3, :3], atol=tol)


def quat_aligned(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """qb sign-aligned with qa for componentwise comparison."""
    return qb if np.dot(qa, qb) >= 0 else -qb


# ---------------------------------------------------------------------------
# random trees


def random_pose(rng: np.random.Generator) -> Pose:
    t = rng.uniform(-0.5, 0.5, 3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.from_axis_angle(axis, rng.uniform(-np.pi, np.pi), t)


def random_tree(rng: np.random.Generator, n_joints: int | None = None,
                branching: bool = True, kinds=("revolute", "prismatic", "fixed")) -> KinematicTree:
    if n_joints is None:
        n_joints = int(rng.integers(1, 9))
    links = [Link("link0")]
    joints = []
    for i in range(n_joints):
        parent = f"link{rng.integers(0, len(links))}" if branching else f"link{i}"
        kind = kinds[rng.integers(0, len(kinds))]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        child = f"link{len(links)}"
        links.append(Link(child))
        joints.append(Joint(
            name=f"j{i}", kind=kind, parent=parent, child=child,
            origin=random_pose(rng),
            axis=None if kind == "fixed" else axis,
            limits=(0.0, 0.0) if kind == "fixed" else (-2.0, 2.0),
        ))
    return KinematicTree(links, joints)


def random_configuration(rng: np.random.Generator, tree: KinematicTree) -> np.ndarray:
    lims = tree.joint_limits()
    if len(lims) == 0:
        return np.zeros(0)
    return rng.uniform(lims[:, 0], lims[:, 1])


def config_by_name(tree: KinematicTree, values: dict[str, float]) -> np.ndarray:
    q = np.zeros(tree.n_actuated)
    for name, v in values.items():
        q[tree.actuated_index[name]] = v
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
