"""Kinematic trees: parsing, forward kinematics, Jacobians, virtual base.

A tree is a set of named links connected by revolute/prismatic/fixed
joints. Joint transforms follow the URDF convention: the child frame sits
at ``origin`` for zero displacement and the motion axis lives in the child
frame, i.e. ``T_parent_child(q) = origin ∘ motion(axis, q)``.

Joints produced by tree inversion carry ``reversed_motion=True``; for
those the motion is applied before the origin (``motion(axis, q) ∘
origin``) and the axis lives in the *parent* frame. This is the minimal
extension that lets an inverted chain reproduce the original relative
poses bit-for-bit at every configuration.

Configuration vectors are ordered depth-first from the root, document
order among siblings.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    NamingError,
    ParseError,
    StructureError,
    UnknownLinkError,
    UnsupportedFeatureError,
)
from .geometry import Pose, cross3, quat_from_axis_angle, quat_rotate, quat_to_matrix
from .mesh import Mesh, load_obj, merge_meshes

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"
_JOINT_KINDS = (REVOLUTE, PRISMATIC, FIXED)

_AXIS_TOL = 1e-9


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    parent: str
    child: str
    origin: Pose = field(default_factory=Pose.identity)
    axis: np.ndarray | None = None
    limits: tuple[float, float] = (0.0, 0.0)
    reversed_motion: bool = False

    def __post_init__(self):
        if self.kind not in _JOINT_KINDS:
            raise UnsupportedFeatureError(self.kind, f"unknown joint kind {self.kind!r}")
        if self.kind == FIXED:
            object.__setattr__(self, "axis", None)
        else:
            if self.axis is None:
                raise StructureError(f"joint {self.name!r}: non-fixed joint needs an axis")
            a = np.asarray(self.axis, dtype=float).reshape(3)
            n = np.linalg.norm(a)
            if abs(n - 1.0) > 1e-6:
                if n < _AXIS_TOL:
                    raise StructureError(f"joint {self.name!r}: zero axis")
                a = a / n
            else:
                a = a / n  # renormalize within tolerance for the 1e-9 invariant
            object.__setattr__(self, "axis", a)
            lo, hi = self.limits
            if lo > hi:
                raise StructureError(f"joint {self.name!r}: lower limit {lo} > upper {hi}")

    @property
    def actuated(self) -> bool:
        return self.kind != FIXED

    def transform(self, value: float = 0.0) -> Pose:
        """Parent-to-child pose at the given joint displacement."""
        if self.kind == FIXED:
            return self.origin
        if self.kind == REVOLUTE:
            motion = Pose(np.zeros(3), quat_from_axis_angle(self.axis, value))
        else:
            motion = Pose(self.axis * value)
        if self.reversed_motion:
            return motion.compose(self.origin)
        return self.origin.compose(motion)

    def flipped(self) -> "Joint":
        """The same physical joint viewed from the other side.

        Origin becomes its inverse, the axis is negated and the motion
        order toggles; the same displacement value then reproduces the
        same relative pose of the two links, so limits stay unchanged.
        """
        return replace(
            self,
            parent=self.child,
            child=self.parent,
            origin=self.origin.inverse(),
            axis=None if self.kind == FIXED else -self.axis,
            reversed_motion=not self.reversed_motion,
        )


@dataclass(frozen=True)
class Link:
    name: str
    visual_mesh: Mesh | None = None
    collision_mesh: Mesh | None = None
    spheres: "SphereSet | None" = None  # set by the collision stack


class KinematicTree:
    """An immutable link/joint tree rooted at a single link."""

    def __init__(self, links: list[Link] | dict[str, Link], joints: list[Joint]):
        if isinstance(links, dict):
            links = list(links.values())
        self.links: dict[str, Link] = {}
        for link in links:
            if link.name in self.links:
                raise NamingError(f"duplicate link name {link.name!r}")
            self.links[link.name] = link
        self.joints: tuple[Joint, ...] = tuple(joints)

        parent_of: dict[str, Joint] = {}
        for j in self.joints:
            for end in (j.parent, j.child):
                if end not in self.links:
                    raise StructureError(f"joint {j.name!r} references unknown link {end!r}")
            if j.child in parent_of:
                raise StructureError(
                    f"link {j.child!r} has two parent joints "
                    f"({parent_of[j.child].name!r}, {j.name!r})")
            parent_of[j.child] = j
        roots = [name for name in self.links if name not in parent_of]
        if len(roots) != 1:
            raise StructureError(f"tree must have exactly one root, found {roots}")
        self.root: str = roots[0]
        self.parent_joint: dict[str, Joint] = parent_of

        children: dict[str, list[Joint]] = {name: [] for name in self.links}
        for j in self.joints:
            children[j.parent].append(j)
        self._children = children

        # depth-first order (document order among siblings)
        order: list[Joint] = []
        stack = [self.root]
        seen = {self.root}
        while stack:
            link = stack.pop()
            kids = children[link]
            for j in kids:
                if j.child in seen:
                    raise StructureError(f"cycle through link {j.child!r}")
                seen.add(j.child)
            order.extend(kids)
            stack.extend(reversed([j.child for j in kids]))
        if len(seen) != len(self.links):
            unreachable = sorted(set(self.links) - seen)
            raise StructureError(f"links not connected to root: {unreachable}")
        # re-walk to get true DFS (stack order above interleaves levels)
        order = []
        def _walk(link: str):
            for j in children[link]:
                order.append(j)
                _walk(j.child)
        _walk(self.root)
        self.dfs_joints: tuple[Joint, ...] = tuple(order)
        self.actuated_joints: tuple[Joint, ...] = tuple(j for j in order if j.actuated)
        self.actuated_index: dict[str, int] = {
            j.name: i for i, j in enumerate(self.actuated_joints)
        }

        desc: dict[str, set[str]] = {}
        def _collect(link: str) -> set[str]:
            s = {link}
            for j in children[link]:
                s |= _collect(j.child)
            desc[link] = s
            return s
        _collect(self.root)
        self._descendants = desc

    # -- introspection ------------------------------------------------

    @property
    def n_actuated(self) -> int:
        return len(self.actuated_joints)

    def children_of(self, link: str) -> list[Joint]:
        return list(self._children[link])

    def descendants(self, link: str) -> set[str]:
        if link not in self.links:
            raise UnknownLinkError(link)
        return set(self._descendants[link])

    def joint_limits(self) -> np.ndarray:
        """(n, 2) array of [lower, upper] per actuated joint, DFS order."""
        return np.array([j.limits for j in self.actuated_joints], dtype=float).reshape(-1, 2)

    def check_configuration(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if len(q) != self.n_actuated:
            raise DimensionError(
                f"configuration has {len(q)} values, tree has "
                f"{self.n_actuated} actuated joints")
        return q

    def with_links(self, new_links: dict[str, Link]) -> "KinematicTree":
        """Copy of the tree with some links replaced (same structure)."""
        links = [new_links.get(name, link) for name, link in self.links.items()]
        return KinematicTree(links, list(self.joints))

    # -- kinematics ---------------------------------------------------

    def link_poses(self, q: np.ndarray) -> dict[str, Pose]:
        """World (root-frame) pose of every link at configuration q."""
        q = self.check_configuration(q)
        poses = {self.root: Pose.identity()}
        for j in self.dfs_joints:
            value = q[self.actuated_index[j.name]] if j.actuated else 0.0
            poses[j.child] = poses[j.parent].compose(j.transform(value))
        return poses


def forward_kinematics(tree: KinematicTree, q: np.ndarray, target: str) -> Pose:
    """Pose of `target` relative to the tree root at configuration q."""
    if target not in tree.links:
        raise UnknownLinkError(target)
    return tree.link_poses(q)[target]


def jacobian(tree: KinematicTree, q: np.ndarray, target: str) -> np.ndarray:
    """Geometric Jacobian of `target`: rows 0..2 linear, 3..5 angular."""
    if target not in tree.links:
        raise UnknownLinkError(target)
    q = tree.check_configuration(q)
    poses = tree.link_poses(q)
    return jacobian_point(tree, poses, target, poses[target].translation)


def jacobian_point(
    tree: KinematicTree,
    poses: dict[str, Pose],
    target: str,
    world_point: np.ndarray,
) -> np.ndarray:
    """Jacobian of a world-space point rigidly attached to `target`.

    Accepts precomputed link poses so trajectory costs can reuse one FK
    pass for several points per waypoint.
    """
    J = np.zeros((6, tree.n_actuated))
    for i, j in enumerate(tree.actuated_joints):
        if target not in tree._descendants[j.child]:
            continue
        if j.reversed_motion:
            anchor = poses[j.parent]
        else:
            anchor = poses[j.child]
        direction = quat_rotate(anchor.rotation, j.axis)
        if j.kind == PRISMATIC:
            J[:3, i] = direction
        else:
            J[:3, i] = cross3(direction, world_point - anchor.translation)
            J[3:, i] = direction
    return J


# ---------------------------------------------------------------------------
# URDF-subset parsing

_SUPPORTED_JOINT_TYPES = {"revolute", "prismatic", "fixed"}


def parse_robot_description(text: str, mesh_dir: str | Path | None = None) -> KinematicTree:
    """Parse a URDF-subset XML document into a KinematicTree.

    Supported elements: link, joint, origin (xyz/rpy), axis, limit, and
    mesh geometry with filename + optional scale. Joint kinds outside
    {revolute, prismatic, fixed} are rejected explicitly.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ParseError(f"XML parse error at line {exc.position[0]}, "
                         f"column {exc.position[1]}: {exc.msg}") from exc
    if root.tag != "robot":
        raise ParseError(f"expected <robot> document root, got <{root.tag}>")

    links: list[Link] = []
    for el in root.findall("link"):
        name = el.get("name")
        if not name:
            raise ParseError("<link> without a name attribute")
        links.append(Link(
            name=name,
            visual_mesh=_parse_link_mesh(el, "visual", mesh_dir, name),
            collision_mesh=_parse_link_mesh(el, "collision", mesh_dir, name),
        ))

    joints: list[Joint] = []
    for el in root.findall("joint"):
        name = el.get("name")
        kind = el.get("type")
        if not name:
            raise ParseError("<joint> without a name attribute")
        if kind not in _SUPPORTED_JOINT_TYPES:
            raise UnsupportedFeatureError(
                str(kind), f"joint {name!r}: unsupported joint type {kind!r}")
        parent_el = el.find("parent")
        child_el = el.find("child")
        if parent_el is None or child_el is None:
            raise ParseError(f"joint {name!r}: missing <parent> or <child>")
        origin = _parse_origin(el.find("origin"), name)
        axis = None
        limits = (0.0, 0.0)
        if kind != "fixed":
            axis_el = el.find("axis")
            axis = _parse_vec3(axis_el.get("xyz"), name) if axis_el is not None \
                else np.array([0.0, 0.0, 1.0])
            limit_el = el.find("limit")
            if limit_el is not None:
                try:
                    limits = (float(limit_el.get("lower", 0.0)),
                              float(limit_el.get("upper", 0.0)))
                except ValueError as exc:
                    raise ParseError(f"joint {name!r}: bad limit value") from exc
            else:
                limits = (-np.pi, np.pi) if kind == "revolute" else (-1.0, 1.0)
        joints.append(Joint(
            name=name, kind=kind,
            parent=parent_el.get("link", ""), child=child_el.get("link", ""),
            origin=origin, axis=axis, limits=limits,
        ))

    return KinematicTree(links, joints)


def load_robot_description(path: str | Path) -> KinematicTree:
    path = Path(path)
    return parse_robot_description(path.read_text(encoding="utf-8"), mesh_dir=path.parent)


def _parse_origin(el, joint_name: str) -> Pose:
    if el is None:
        return Pose.identity()
    xyz = _parse_vec3(el.get("xyz", "0 0 0"), joint_name)
    rpy = _parse_vec3(el.get("rpy", "0 0 0"), joint_name)
    return Pose.from_rpy(xyz, rpy)


def _parse_vec3(text: str | None, context: str) -> np.ndarray:
    parts = (text or "").split()
    if len(parts) != 3:
        raise ParseError(f"{context!r}: expected 3 numbers, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ParseError(f"{context!r}: bad number in {text!r}") from exc


def _parse_link_mesh(link_el, section: str, mesh_dir, link_name: str) -> Mesh | None:
    """Merge all <section><geometry><mesh> entries of one link."""
    meshes = []
    for sec in link_el.findall(section):
        geom = sec.find("geometry")
        if geom is None:
            continue
        for mesh_el in geom.findall("mesh"):
            filename = mesh_el.get("filename")
            if not filename:
                raise ParseError(f"link {link_name!r}: <mesh> without filename")
            path = Path(filename)
            if mesh_dir is not None and not path.is_absolute():
                path = Path(mesh_dir) / path
            mesh = load_obj(path)
            scale_attr = mesh_el.get("scale")
            if scale_attr:
                s = _parse_vec3(scale_attr, link_name)
                mesh = Mesh(mesh.vertices * s, mesh.triangles)
            offset = _parse_origin(sec.find("origin"), link_name)
            meshes.append(mesh.transformed(offset))
    if not meshes:
        return None
    return merge_meshes(meshes)


# ---------------------------------------------------------------------------
# virtual base

VIRTUAL_BASE_JOINTS = ("virtual_base_x", "virtual_base_y", "virtual_base_yaw")
VIRTUAL_BASE_LINKS = ("world", "virtual_base_x_link", "virtual_base_y_link")


def insert_virtual_base(
    robot: KinematicTree,
    xy_limits: tuple[float, float] = (-5.0, 5.0),
    yaw_limits: tuple[float, float] = (-np.pi, np.pi),
) -> KinematicTree:
    """Root the robot under planar x/y prismatic + yaw revolute joints.

    The three joints have identity origins, so driving them with
    (x, y, theta) places the former root at translate(x, y, 0) followed
    by yaw(theta).
    """
    for name in VIRTUAL_BASE_LINKS:
        if name in robot.links:
            raise NamingError(
                f"robot already has a link named {name!r}; rename it before "
                f"inserting the virtual base")
    for j in robot.joints:
        if j.name in VIRTUAL_BASE_JOINTS:
            raise NamingError(f"robot already has a joint named {j.name!r}")

    w, lx, ly = VIRTUAL_BASE_LINKS
    jx, jy, jyaw = VIRTUAL_BASE_JOINTS
    new_links = [Link(w), Link(lx), Link(ly)] + list(robot.links.values())
    new_joints = [
        Joint(jx, PRISMATIC, parent=w, child=lx, axis=np.array([1.0, 0, 0]),
              limits=xy_limits),
        Joint(jy, PRISMATIC, parent=lx, child=ly, axis=np.array([0, 1.0, 0]),
              limits=xy_limits),
        Joint(jyaw, REVOLUTE, parent=ly, child=robot.root,
              axis=np.array([0, 0, 1.0]), limits=yaw_limits),
    ] + list(robot.joints)
    return KinematicTree(new_links, new_joints)


def rotation_matrix_of(pose: Pose) -> np.ndarray:
    return quat_to_matrix(pose.rotation)
