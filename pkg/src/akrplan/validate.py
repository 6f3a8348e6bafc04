"""Post-hoc trajectory validation and effort statistics.

Optimized trajectories are filtered against the constraint model before
entering a dataset: translational/rotational deviation of the object
anchor for stationary attachments, vertical and roll/pitch deviation for
planar objects, elementwise position/velocity/acceleration limit checks,
and a full collision recheck. Effort statistics summarize how much the
base translated and the arm rotated over a trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .akr import AkrModel
from .collision import CollisionReport, DistanceField, check_collision
from .errors import StructureError
from .geometry import quat_angle, roll_pitch_from_quat
from .kinematics import REVOLUTE
from .planner import ConstraintSet, Limits, PLANAR, STATIONARY, Trajectory

__all__ = [
    "WaypointDeviation",
    "LimitViolation",
    "ValidationReport",
    "EffortStats",
    "validate_chain",
    "validate_planar",
    "validate_limits",
    "validate_trajectory",
    "compute_effort_stats",
]


@dataclass(frozen=True)
class WaypointDeviation:
    """Constraint deviations at one waypoint; entries that do not apply
    to the constraint kind stay None."""

    index: int
    d: float | None = None
    theta: float | None = None
    d_z: float | None = None
    theta_planar: float | None = None

    def exceeded(self, c: ConstraintSet) -> bool:
        if self.d is not None and (self.d > c.d_max or self.theta > c.theta_max):
            return True
        if self.d_z is not None and (self.d_z > c.dz_max
                                     or self.theta_planar > c.theta_planar_max):
            return True
        return False


@dataclass(frozen=True)
class LimitViolation:
    waypoint: int
    coordinate: int
    kind: str  # position | velocity | acceleration
    magnitude: float


@dataclass(frozen=True)
class ValidationReport:
    per_waypoint: tuple[WaypointDeviation, ...] = ()
    limit_violations: tuple[LimitViolation, ...] = ()
    collision_hits: tuple = ()
    verdict: str = "pass"
    failure_reason: str | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "failure_reason": self.failure_reason,
            "per_waypoint": [
                {k: v for k, v in {
                    "index": w.index, "d": w.d, "theta": w.theta,
                    "d_z": w.d_z, "theta_planar": w.theta_planar,
                }.items() if v is not None}
                for w in self.per_waypoint
            ],
            "limit_violations": [
                {"waypoint": v.waypoint, "coordinate": v.coordinate,
                 "kind": v.kind, "magnitude": v.magnitude}
                for v in self.limit_violations
            ],
            "collision_hits": [list(h) for h in self.collision_hits],
        }


@dataclass(frozen=True)
class EffortStats:
    """Accumulated planar base travel and L1 revolute arm rotation."""

    base_translation: float
    arm_rotation: float

    def to_json(self) -> dict:
        return {"base_translation": self.base_translation,
                "arm_rotation": self.arm_rotation}


def _anchor_poses(traj: Trajectory, akr: AkrModel):
    anchor = akr.object_anchor_link
    if anchor not in akr.tree.links:
        raise StructureError(f"anchor link {anchor!r} missing from the tree")
    for t, q in enumerate(traj.waypoints):
        yield t, akr.tree.link_poses(q)[anchor]


def validate_chain(traj: Trajectory, akr: AkrModel,
                   constraints: ConstraintSet) -> tuple[WaypointDeviation, ...]:
    """Translational deviation d and rotational deviation theta of the
    object anchor against the fixed world reference, per waypoint."""
    if constraints.kind != STATIONARY:
        raise ValueError("validate_chain applies to stationary attachments")
    ref = constraints.reference
    out = []
    for t, pose in _anchor_poses(traj, akr):
        d = float(np.linalg.norm(pose.translation - ref.translation))
        theta = quat_angle(pose.rotation, ref.rotation)
        out.append(WaypointDeviation(index=t, d=d, theta=theta))
    return tuple(out)


def validate_planar(traj: Trajectory, akr: AkrModel,
                    constraints: ConstraintSet) -> tuple[WaypointDeviation, ...]:
    """Vertical displacement d_z and out-of-plane orientation deviation
    (roll/pitch vector norm) of the object anchor, per waypoint."""
    if constraints.kind != PLANAR:
        raise ValueError("validate_planar applies to planar SE(2) constraints")
    ref = constraints.reference
    ref_rp = roll_pitch_from_quat(ref.rotation)
    out = []
    for t, pose in _anchor_poses(traj, akr):
        d_z = float(abs(pose.translation[2] - ref.translation[2]))
        rp = roll_pitch_from_quat(pose.rotation)
        out.append(WaypointDeviation(
            index=t, d_z=d_z, theta_planar=float(np.linalg.norm(rp - ref_rp))))
    return tuple(out)


def validate_limits(traj: Trajectory, limits: Limits) -> tuple[LimitViolation, ...]:
    """Every elementwise position/velocity/acceleration limit violation."""
    x = traj.waypoints
    out = []
    below = limits.lower - x
    above = x - limits.upper
    for t, c in zip(*np.nonzero((below > 0) | (above > 0))):
        out.append(LimitViolation(int(t), int(c), "position",
                                  float(max(below[t, c], above[t, c]))))
    v = np.abs(traj.steps()) - limits.step_max
    for t, c in zip(*np.nonzero(v > 1e-9)):
        out.append(LimitViolation(int(t), int(c), "velocity", float(v[t, c])))
    a = np.abs(traj.accelerations()) - limits.accel_max
    for t, c in zip(*np.nonzero(a > 1e-9)):
        out.append(LimitViolation(int(t + 1), int(c), "acceleration", float(a[t, c])))
    return tuple(out)


def validate_trajectory(
    traj: Trajectory,
    akr: AkrModel,
    constraints: ConstraintSet,
    limits: Limits,
    distance_field: DistanceField | None = None,
) -> ValidationReport:
    """Full recheck: constraint deviations, limits, collisions, verdict."""
    per_waypoint: tuple[WaypointDeviation, ...] = ()
    if constraints.kind == STATIONARY:
        per_waypoint = validate_chain(traj, akr, constraints)
    elif constraints.kind == PLANAR:
        per_waypoint = validate_planar(traj, akr, constraints)

    limit_violations = validate_limits(traj, limits)

    collision_hits: list = []
    if distance_field is not None:
        for t, q in enumerate(traj.waypoints):
            report: CollisionReport = check_collision(akr, q, distance_field)
            for link, idx, pen in report.world_hits:
                collision_hits.append((t, "world", link, idx, pen))
            for pair, pen in report.self_hits:
                collision_hits.append((t, "self", pair[0], pair[1], pen))

    verdict, reason = "pass", None
    for w in per_waypoint:
        if w.exceeded(constraints):
            verdict = "fail"
            reason = "chain_violation" if constraints.kind == STATIONARY else "planar_violation"
            break
    if verdict == "pass" and limit_violations:
        verdict, reason = "fail", "limit_violation"
    if verdict == "pass" and collision_hits:
        verdict, reason = "fail", "collision"

    return ValidationReport(per_waypoint, limit_violations, tuple(collision_hits),
                            verdict, reason)


def compute_effort_stats(traj: Trajectory, akr: AkrModel) -> EffortStats:
    """Base planar travel (sum of xy step norms) and arm rotation
    (sum of L1 steps over revolute manipulator coordinates)."""
    steps = traj.steps()
    if len(akr.base) >= 2:
        base_xy = steps[:, akr.base.start:akr.base.start + 2]
        base_translation = float(np.sum(np.linalg.norm(base_xy, axis=1)))
    else:
        base_translation = 0.0

    revolute_cols = [
        i for i in range(akr.manipulator.start, akr.manipulator.stop)
        if akr.tree.actuated_joints[i].kind == REVOLUTE
    ]
    arm_rotation = float(np.sum(np.abs(steps[:, revolute_cols]))) if revolute_cols else 0.0
    return EffortStats(base_translation, arm_rotation)


def report_to_json_str(report: ValidationReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True)
