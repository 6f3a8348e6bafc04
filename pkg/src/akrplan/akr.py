"""Building the augmented kinematic chain: robot + grasped object.

The manipulated object is folded into the robot's kinematic tree so the
whole system (planar base, arm, object articulation) becomes one chain
that a single trajectory optimization can reason about. The steps are:
scale the object model, re-root ("invert") it at the grasp link, compute
the tool-to-grasp attachment transform from the grasp pose and the
object's forward kinematics, and hang the inverted object under the tool
frame with a fixed joint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .collision import SphereSet
from .errors import DimensionError, NamingError, StructureError, UnknownLinkError
from .geometry import Pose
from .kinematics import (
    FIXED,
    PRISMATIC,
    Joint,
    KinematicTree,
    Link,
    forward_kinematics,
)

logger = logging.getLogger(__name__)

OBJECT_PREFIX = "obj/"
ATTACH_JOINT = "obj/attachment"


@dataclass(frozen=True)
class GraspSpec:
    """How the tool grabs the object.

    `tcp_pose_in_object_base` is the tool center point expressed in the
    object's base-link frame; `grasp_link` is the object link being held;
    `object_state_at_grasp` is the object configuration the grasp pose
    was annotated at.
    """

    tcp_pose_in_object_base: Pose
    grasp_link: str
    object_state_at_grasp: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(
            self, "object_state_at_grasp",
            np.asarray(self.object_state_at_grasp, dtype=float).reshape(-1))


@dataclass(frozen=True)
class LayoutRange:
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class AkrModel:
    """A kinematic tree tagged with the base/arm/object configuration layout."""

    tree: KinematicTree
    base: LayoutRange
    manipulator: LayoutRange
    object: LayoutRange
    joint_weights: np.ndarray
    collision_pairs: frozenset[tuple[str, str]]
    tcp_link: str
    object_anchor_link: str
    object_links: frozenset[str] = frozenset()

    def __post_init__(self):
        n = self.tree.n_actuated
        ranges = (self.base, self.manipulator, self.object)
        if [self.base.start, self.base.stop, self.manipulator.stop, self.object.stop] != \
                [0, self.manipulator.start, self.object.start, n]:
            raise StructureError(
                f"layout {[(r.start, r.stop) for r in ranges]} does not partition "
                f"{n} actuated joints")
        w = np.asarray(self.joint_weights, dtype=float).reshape(-1)
        if len(w) != n:
            raise DimensionError(f"joint_weights has {len(w)} entries for {n} joints")
        object.__setattr__(self, "joint_weights", w)
        adjacent = {_ordered(j.parent, j.child) for j in self.tree.joints}
        pairs = frozenset(_ordered(a, b) for a, b in self.collision_pairs)
        bad = pairs & adjacent
        if bad:
            raise StructureError(f"collision pairs contain joint-connected links: {sorted(bad)}")
        object.__setattr__(self, "collision_pairs", pairs)

    @property
    def width(self) -> int:
        return self.tree.n_actuated

    def split(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        q = np.asarray(q, dtype=float)
        return q[..., self.base.slice], q[..., self.manipulator.slice], q[..., self.object.slice]

    def sphere_links(self) -> list[str]:
        return [name for name, link in self.tree.links.items() if link.spheres is not None]

    def with_collision_pairs(self, pairs) -> "AkrModel":
        return replace(self, collision_pairs=frozenset(_ordered(a, b) for a, b in pairs))


def _ordered(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


# ---------------------------------------------------------------------------
# object preprocessing


def scale_object_model(obj: KinematicTree, factor: float) -> KinematicTree:
    """Uniformly scale an object model about each link-frame origin.

    Meshes and collision spheres scale by `factor`; joint origin
    translations and prismatic limits scale likewise; rotations and
    revolute limits are untouched. FK translations then scale by exactly
    `factor` at every configuration.
    """
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    links = []
    for link in obj.links.values():
        links.append(Link(
            name=link.name,
            visual_mesh=link.visual_mesh.scaled(factor) if link.visual_mesh else None,
            collision_mesh=link.collision_mesh.scaled(factor) if link.collision_mesh else None,
            spheres=link.spheres.scaled(factor) if link.spheres else None,
        ))
    joints = []
    for j in obj.joints:
        limits = j.limits
        if j.kind == PRISMATIC:
            limits = (j.limits[0] * factor, j.limits[1] * factor)
        joints.append(replace(
            j,
            origin=Pose(j.origin.translation * factor, j.origin.rotation),
            limits=limits,
        ))
    return KinematicTree(links, joints)


def invert_tree(obj: KinematicTree, new_root: str) -> KinematicTree:
    """Re-root the tree at `new_root`, reversing joints along the path.

    Every joint between the old root and `new_root` is flipped (inverse
    origin, negated axis, motion order toggled) so that the same
    configuration produces the same relative pose for every pair of
    links; branches off the path are reattached unchanged.
    """
    if new_root not in obj.links:
        raise UnknownLinkError(new_root)
    if new_root == obj.root:
        return KinematicTree(list(obj.links.values()), list(obj.joints))

    path: list[Joint] = []
    cursor = new_root
    while cursor != obj.root:
        j = obj.parent_joint[cursor]
        path.append(j)
        cursor = j.parent
    flipped = {j.name for j in path}
    new_joints = [j.flipped() for j in path]           # new_root outward, in order
    new_joints += [j for j in obj.joints if j.name not in flipped]
    return KinematicTree(list(obj.links.values()), new_joints)


def compute_attachment(grasp_pose: Pose, fk_tip_pose: Pose) -> Pose:
    """Tool-to-grasp-link transform: inverse(grasp pose) ∘ FK(tip)."""
    return grasp_pose.inverse().compose(fk_tip_pose)


def assemble_akr(
    robot: KinematicTree,
    obj: KinematicTree,
    grasp: GraspSpec,
    scale: float,
    weights: np.ndarray,
    tcp_link: str,
) -> AkrModel:
    """Fold a (scaled, inverted) object model into the robot tree.

    The robot must already carry its virtual base; the resulting chain
    runs world -> base -> arm -> tcp -> grasp link -> ... -> object
    anchor (the object's former base link).
    """
    if tcp_link not in robot.links:
        raise UnknownLinkError(tcp_link)
    if grasp.grasp_link not in obj.links:
        raise UnknownLinkError(grasp.grasp_link)

    scaled = scale_object_model(obj, scale)
    fk_tip = forward_kinematics(scaled, grasp.object_state_at_grasp, grasp.grasp_link)
    attach_origin = compute_attachment(grasp.tcp_pose_in_object_base, fk_tip)
    inverted = invert_tree(scaled, grasp.grasp_link)

    renamed_links = []
    for link in inverted.links.values():
        new_name = OBJECT_PREFIX + link.name
        if new_name in robot.links:
            raise NamingError(f"object link {new_name!r} collides with a robot link")
        renamed_links.append(replace(link, name=new_name))
    renamed_joints = [
        replace(j, name=OBJECT_PREFIX + j.name,
                parent=OBJECT_PREFIX + j.parent, child=OBJECT_PREFIX + j.child)
        for j in inverted.joints
    ]
    attach = Joint(ATTACH_JOINT, FIXED, parent=tcp_link,
                   child=OBJECT_PREFIX + inverted.root, origin=attach_origin)

    tree = KinematicTree(
        list(robot.links.values()) + renamed_links,
        list(robot.joints) + [attach] + renamed_joints,
    )

    object_names = frozenset(l.name for l in renamed_links)
    is_object = [j.name.startswith(OBJECT_PREFIX) for j in tree.actuated_joints]
    m = sum(is_object)
    n_total = tree.n_actuated
    n = n_total - m - 3
    if n < 0:
        raise StructureError("robot must contribute at least the 3 virtual base joints")
    if any(is_object[:n_total - m]) or not all(is_object[n_total - m:]):
        raise StructureError(
            "object joints do not form the trailing configuration block; "
            "reorder the robot description so the arm chain precedes other "
            "actuated branches")

    return AkrModel(
        tree=tree,
        base=LayoutRange(0, 3),
        manipulator=LayoutRange(3, 3 + n),
        object=LayoutRange(3 + n, n_total),
        joint_weights=weights,
        collision_pairs=frozenset(),
        tcp_link=tcp_link,
        object_anchor_link=OBJECT_PREFIX + scaled.root,
        object_links=object_names,
    )


# ---------------------------------------------------------------------------
# self-collision pair selection


def derive_collision_pairs(
    akr: AkrModel,
    n_samples: int,
    base_pairs: set[tuple[str, str]],
    seed: int = 0,
) -> frozenset[tuple[str, str]]:
    """Extend a robot's collision-pair set with object-involving pairs.

    Candidate pairs that intersect in *every* sampled configuration are
    in permanent contact and get masked; adjacent (joint-connected) pairs
    are always masked. Samples are drawn uniformly within joint limits
    from a seeded generator, one configuration at a time, so growing
    `n_samples` keeps earlier samples identical (the kept set can only
    grow).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    tree = akr.tree
    for a, b in base_pairs:
        for name in (a, b):
            if name not in tree.links:
                raise UnknownLinkError(name)

    spherical = set(akr.sphere_links())
    skipped = sorted(set(tree.links) - spherical)
    if skipped:
        logger.warning("links without collision spheres take part in no pairs: %s",
                       ", ".join(skipped))

    adjacent = {_ordered(j.parent, j.child) for j in tree.joints}
    base = {_ordered(a, b) for a, b in base_pairs} - adjacent

    candidates = []
    names = sorted(spherical)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pair = _ordered(a, b)
            if pair in base or pair in adjacent:
                continue
            if a in akr.object_links or b in akr.object_links:
                candidates.append(pair)
    if not candidates:
        return frozenset(base)

    limits = tree.joint_limits()
    lo = np.where(np.isfinite(limits[:, 0]), limits[:, 0], -np.pi)
    hi = np.where(np.isfinite(limits[:, 1]), limits[:, 1], np.pi)
    rng = np.random.default_rng(seed)

    always_touching = {pair: True for pair in candidates}
    for _ in range(n_samples):
        q = rng.uniform(lo, hi)
        poses = tree.link_poses(q)
        world = {name: tree.links[name].spheres.transformed(poses[name])
                 for name in names}
        for pair in candidates:
            if not always_touching[pair]:
                continue
            if not _spheres_intersect(world[pair[0]], world[pair[1]]):
                always_touching[pair] = False

    kept = {pair for pair in candidates if not always_touching[pair]}
    return frozenset(base | kept)


def _spheres_intersect(a: SphereSet, b: SphereSet) -> bool:
    dist = np.linalg.norm(a.centers[:, None, :] - b.centers[None, :, :], axis=2)
    return bool(np.any(dist < a.radii[:, None] + b.radii[None, :]))


def robot_base_pairs(tree: KinematicTree, n_samples: int = 50, seed: int = 0) -> frozenset:
    """Self-collision pairs for a bare robot: all non-adjacent sphere-link
    pairs except those in permanent contact across sampled configurations."""
    spherical = sorted(name for name, link in tree.links.items() if link.spheres is not None)
    adjacent = {_ordered(j.parent, j.child) for j in tree.joints}
    candidates = [
        _ordered(a, b)
        for i, a in enumerate(spherical) for b in spherical[i + 1:]
        if _ordered(a, b) not in adjacent
    ]
    if not candidates:
        return frozenset()
    limits = tree.joint_limits()
    lo = np.where(np.isfinite(limits[:, 0]), limits[:, 0], -np.pi)
    hi = np.where(np.isfinite(limits[:, 1]), limits[:, 1], np.pi)
    rng = np.random.default_rng(seed)
    always = {pair: True for pair in candidates}
    for _ in range(n_samples):
        q = rng.uniform(lo, hi)
        poses = tree.link_poses(q)
        world = {name: tree.links[name].spheres.transformed(poses[name]) for name in spherical}
        for pair in candidates:
            if always[pair] and not _spheres_intersect(world[pair[0]], world[pair[1]]):
                always[pair] = False
    return frozenset(p for p in candidates if not always[p])
