"""Batch trajectory generation: task specs, workers, export, statistics.

A task spec (strict JSON) names a robot, an object with its anchor pose,
a scene manifest, grasp annotations and goal object states. The batch
runner builds the scene distance field once, assembles one augmented
model per grasp, solves IK for diverse start configurations, enumerates
(grasp x start x goal) problems and distributes them over a process
pool. Output is deterministic for a given (spec, seed) regardless of the
worker count: problems are seeded individually and results are written
in problem-index order by the coordinator alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .akr import (
    AkrModel,
    GraspSpec,
    assemble_akr,
    derive_collision_pairs,
    robot_base_pairs,
)
from .collision import (
    DEFAULT_MARGIN,
    DEFAULT_MESH_PITCH,
    DEFAULT_SPHERE_DOWNSCALE,
    DEFAULT_VOXEL_SIZE,
    DistanceField,
    add_collision_spheres,
    build_distance_field,
    mask_phase,
)
from .errors import InfeasibleError, ParseError
from .geometry import Pose
from .kinematics import KinematicTree, insert_virtual_base, load_robot_description
from .mesh import Mesh, load_obj, merge_meshes
from .planner import (
    ClusterParams,
    ConstraintSet,
    GoalSpec,
    Limits,
    TrajectoryProblem,
    Trajectory,
    cluster_ik,
    optimize_trajectory,
    solve_ik,
)
from .validate import EffortStats, ValidationReport, compute_effort_stats, validate_trajectory

logger = logging.getLogger(__name__)

RECORD_VERSION = 1
BINARY_MAGIC = b"AKRT"

FAILURE_REASONS = (
    "ik_failed",
    "optimizer_infeasible",
    "chain_violation",
    "planar_violation",
    "limit_violation",
    "collision",
)


# ---------------------------------------------------------------------------
# task specification


@dataclass(frozen=True)
class GenerationParams:
    horizon: int = 30
    voxel_size: float = DEFAULT_VOXEL_SIZE
    margin: float = DEFAULT_MARGIN
    mesh_pitch: float = DEFAULT_MESH_PITCH
    robot_mesh_pitch: float = 0.1
    sphere_downscale: float = DEFAULT_SPHERE_DOWNSCALE
    max_retries: int = 10
    kmeans_k: int = 500
    ap_upper: int = 80
    ap_lower: int = 10
    ap_fallback: int = 30
    position_tolerance: float = 0.01
    rotation_tolerance: float = 0.01
    goal_tolerance: float = 1e-4
    start_representatives: int = 5
    ik_seeds: int = 30
    collision_samples: int = 100
    step_max: float = 0.5
    accel_max: float = 0.5
    dt: float = 0.1
    seed: int = 0
    base_xy_limit: float = 5.0
    mask_object_from_scene: bool = True
    joint_weights: tuple | None = None

    def __post_init__(self):
        positive = ("horizon", "voxel_size", "margin", "mesh_pitch",
                    "robot_mesh_pitch", "sphere_downscale",
                    "max_retries", "kmeans_k", "ap_upper", "ap_lower", "ap_fallback",
                    "position_tolerance", "rotation_tolerance", "goal_tolerance",
                    "start_representatives", "ik_seeds", "collision_samples",
                    "step_max", "accel_max", "dt", "base_xy_limit")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ParseError(f"generation.{name} must be positive")

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(self.kmeans_k, self.ap_upper, self.ap_lower, self.ap_fallback)


@dataclass(frozen=True)
class TaskSpec:
    robot_path: Path
    tcp_link: str
    object_path: Path
    object_scale: float
    object_state: np.ndarray
    object_pose: Pose
    scene_path: Path | None
    grasps: tuple[GraspSpec, ...]
    goals: tuple[np.ndarray, ...]
    goal_kinds: tuple[str, ...]
    constraints_kind: str
    thresholds: dict
    generation: GenerationParams
    spec_hash: str = ""

    def constraint_set(self) -> ConstraintSet:
        return ConstraintSet(kind=self.constraints_kind, reference=self.object_pose,
                             **self.thresholds)

    def goal_spec(self, k: int) -> GoalSpec:
        tol = self.generation.goal_tolerance
        if self.goal_kinds[k] == "object_se3_pose":
            v = self.goals[k]
            return GoalSpec("object_se3_pose", Pose(v[:3], v[3:]), tol)
        return GoalSpec("object_joint_target", self.goals[k], tol)


def _require_keys(data: dict, allowed: set[str], context: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ParseError(f"{context}: unknown keys {sorted(unknown)}")


def _parse_pose(data: dict, context: str) -> Pose:
    _require_keys(data, {"translation", "quaternion"}, context)
    t = data.get("translation", [0.0, 0.0, 0.0])
    q = data.get("quaternion", [1.0, 0.0, 0.0, 0.0])
    if len(t) != 3 or len(q) != 4:
        raise ParseError(f"{context}: translation needs 3 values, quaternion 4")
    return Pose(np.asarray(t, dtype=float), np.asarray(q, dtype=float))


def load_task_spec(path: str | Path) -> TaskSpec:
    """Parse and validate a task spec; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"task spec not found: {path}")
    raw = path.read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    base = path.parent

    _require_keys(data, {"robot", "object", "scene", "grasps", "goals",
                         "constraints", "generation"}, str(path))

    robot = data.get("robot")
    if not isinstance(robot, dict):
        raise ParseError(f"{path}: 'robot' section is required")
    _require_keys(robot, {"path", "tcp_link"}, "robot")
    robot_path = _resolve(base, robot.get("path"), "robot.path")
    tcp_link = robot.get("tcp_link")
    if not tcp_link:
        raise ParseError("robot.tcp_link is required")

    obj = data.get("object")
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: 'object' section is required")
    _require_keys(obj, {"path", "scale", "state", "pose"}, "object")
    object_path = _resolve(base, obj.get("path"), "object.path")
    scale = float(obj.get("scale", 1.0))
    if scale <= 0:
        raise ParseError(f"object.scale must be positive, got {scale}")
    object_state = np.asarray(obj.get("state", []), dtype=float).reshape(-1)
    object_pose = _parse_pose(obj.get("pose", {}), "object.pose")

    scene_path = None
    if data.get("scene") is not None:
        scene_path = _resolve(base, data["scene"], "scene")

    grasps = []
    for i, g in enumerate(data.get("grasps", [])):
        _require_keys(g, {"translation", "quaternion", "grasp_link", "object_state"},
                      f"grasps[{i}]")
        if "grasp_link" not in g:
            raise ParseError(f"grasps[{i}].grasp_link is required")
        grasps.append(GraspSpec(
            tcp_pose_in_object_base=_parse_pose(
                {"translation": g.get("translation", [0, 0, 0]),
                 "quaternion": g.get("quaternion", [1, 0, 0, 0])}, f"grasps[{i}]"),
            grasp_link=g["grasp_link"],
            object_state_at_grasp=np.asarray(g.get("object_state", object_state),
                                             dtype=float),
        ))
    if not grasps:
        raise ParseError("at least one grasp is required")

    goals: list[np.ndarray] = []
    goal_kinds: list[str] = []
    for i, g in enumerate(data.get("goals", [])):
        if isinstance(g, dict):
            pose = _parse_pose(g, f"goals[{i}]")
            goals.append(np.concatenate([pose.translation, pose.rotation]))
            goal_kinds.append("object_se3_pose")
        else:
            goals.append(np.asarray(g, dtype=float).reshape(-1))
            goal_kinds.append("object_joint_target")
    if not goals:
        raise ParseError("at least one goal object state is required")

    constraints = data.get("constraints", {"kind": "stationary_attachment"})
    _require_keys(constraints, {"kind", "d_max", "theta_max", "dz_max",
                                "theta_planar_max"}, "constraints")
    kind = constraints.get("kind", "stationary_attachment")
    thresholds = {k: float(v) for k, v in constraints.items() if k != "kind"}

    gen_data = data.get("generation", {})
    allowed = set(GenerationParams.__dataclass_fields__)
    _require_keys(gen_data, allowed, "generation")
    if "joint_weights" in gen_data and gen_data["joint_weights"] is not None:
        gen_data = dict(gen_data)
        gen_data["joint_weights"] = tuple(float(v) for v in gen_data["joint_weights"])
    generation = GenerationParams(**gen_data)

    return TaskSpec(
        robot_path=robot_path, tcp_link=tcp_link,
        object_path=object_path, object_scale=scale,
        object_state=object_state, object_pose=object_pose,
        scene_path=scene_path, grasps=tuple(grasps), goals=tuple(goals),
        goal_kinds=tuple(goal_kinds),
        constraints_kind=kind, thresholds=thresholds, generation=generation,
        spec_hash=hashlib.sha256(raw).hexdigest(),
    )


def _resolve(base: Path, value, context: str) -> Path:
    if not value:
        raise ParseError(f"{context} is required")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ParseError(f"{context}: path does not exist: {p}")
    return p


def load_scene_manifest(path: Path) -> list[tuple[Mesh, Pose]]:
    """Scene manifest: JSON list of {mesh, pose} entries."""
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ParseError(f"{path}: scene manifest must be a JSON list")
    out = []
    for i, entry in enumerate(entries):
        _require_keys(entry, {"mesh", "pose"}, f"scene[{i}]")
        mesh_path = _resolve(path.parent, entry.get("mesh"), f"scene[{i}].mesh")
        pose = _parse_pose(entry.get("pose", {}), f"scene[{i}].pose")
        out.append((load_obj(mesh_path), pose))
    return out


def effective_config(spec: TaskSpec) -> dict:
    """All parameters with defaults resolved, for provenance dumps."""
    gen = {k: getattr(spec.generation, k)
           for k in GenerationParams.__dataclass_fields__}
    gen = {k: (list(v) if isinstance(v, tuple) else v) for k, v in gen.items()}
    return {
        "robot": {"path": str(spec.robot_path), "tcp_link": spec.tcp_link},
        "object": {
            "path": str(spec.object_path), "scale": spec.object_scale,
            "state": spec.object_state.tolist(),
            "pose": {"translation": spec.object_pose.translation.tolist(),
                     "quaternion": spec.object_pose.rotation.tolist()},
        },
        "scene": str(spec.scene_path) if spec.scene_path else None,
        "grasps": [
            {"translation": g.tcp_pose_in_object_base.translation.tolist(),
             "quaternion": g.tcp_pose_in_object_base.rotation.tolist(),
             "grasp_link": g.grasp_link,
             "object_state": g.object_state_at_grasp.tolist()}
            for g in spec.grasps
        ],
        "goals": [g.tolist() for g in spec.goals],
        "constraints": {"kind": spec.constraints_kind, **spec.thresholds},
        "generation": gen,
        "spec_hash": spec.spec_hash,
        "version": __version__,
    }


# ---------------------------------------------------------------------------
# batch context


@dataclass
class BatchContext:
    """Everything a worker needs, built once by the coordinator."""

    spec: TaskSpec
    akrs: list[AkrModel]
    starts: list[list[np.ndarray]]  # per grasp, clustered representatives
    distance_field: DistanceField
    limits_per_grasp: list[Limits]
    constraints: ConstraintSet
    joint_names: list[str]
    debug_trace: bool = False


def problem_seed(batch_seed: int, problem_index: int) -> int:
    """Stable per-problem seed independent of worker count and Python hashing."""
    digest = hashlib.blake2b(f"{batch_seed}:{problem_index}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def prepare_batch(spec: TaskSpec, debug_trace: bool = False) -> BatchContext:
    gen = spec.generation

    robot = load_robot_description(spec.robot_path)
    robot = insert_virtual_base(
        robot, xy_limits=(-gen.base_xy_limit, gen.base_xy_limit))
    robot = add_collision_spheres(robot, gen.robot_mesh_pitch, gen.sphere_downscale)
    base_pairs = robot_base_pairs(robot, seed=gen.seed)

    obj = load_robot_description(spec.object_path)

    weights = np.asarray(gen.joint_weights, dtype=float) if gen.joint_weights else None

    akrs: list[AkrModel] = []
    for grasp in spec.grasps:
        n_total = robot.n_actuated + sum(j.actuated for j in obj.joints)
        w = weights if weights is not None else np.ones(n_total)
        akr = assemble_akr(robot, obj, grasp, spec.object_scale, w, spec.tcp_link)
        akr = replace(akr, tree=add_collision_spheres(
            akr.tree, gen.mesh_pitch, gen.sphere_downscale, links=akr.object_links))
        pairs = derive_collision_pairs(akr, gen.collision_samples, set(base_pairs),
                                       seed=gen.seed)
        akrs.append(akr.with_collision_pairs(pairs))

    field = _build_field(spec, akrs[0])
    constraints = spec.constraint_set()

    limits_per_grasp = [
        Limits.from_tree(a.tree, step_max=gen.step_max, accel_max=gen.accel_max)
        for a in akrs
    ]

    starts = [
        _start_representatives(spec, akrs[g], limits_per_grasp[g], field, g)
        for g in range(len(akrs))
    ]

    joint_names = [j.name for j in akrs[0].tree.actuated_joints]
    return BatchContext(spec, akrs, starts, field, limits_per_grasp, constraints,
                        joint_names, debug_trace)


def _object_world_meshes(akr: AkrModel, phi: np.ndarray,
                         anchor_world: Pose) -> list[tuple[Mesh, Pose]]:
    """Object link meshes posed in the world for a given object state.

    Link poses relative to the anchor depend only on the object joints,
    so they can be composed with the anchor's world pose without knowing
    any robot configuration."""
    cfg = np.zeros(akr.width)
    cfg[akr.object.slice] = phi
    poses = akr.tree.link_poses(cfg)
    anchor_inv = poses[akr.object_anchor_link].inverse()
    out = []
    for name in sorted(akr.object_links):
        link = akr.tree.links[name]
        if link.collision_mesh is not None:
            out.append((link.collision_mesh,
                        anchor_world.compose(anchor_inv.compose(poses[name]))))
    return out


def _build_field(spec: TaskSpec, akr: AkrModel) -> DistanceField:
    gen = spec.generation
    scene = load_scene_manifest(spec.scene_path) if spec.scene_path else []

    # workspace box from the object's start and goal states, anchored at
    # its world pose
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    states = [spec.object_state] + [g for g, kind in zip(spec.goals, spec.goal_kinds)
                                    if kind == "object_joint_target"]
    initial_meshes: list[tuple[Mesh, Pose]] = []
    for si, phi in enumerate(states):
        metas = _object_world_meshes(akr, phi, spec.object_pose)
        if si == 0:
            initial_meshes = metas
        for mesh, pose in metas:
            pts = pose.transform_points(mesh.vertices)
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
    for goal, kind in zip(spec.goals, spec.goal_kinds):
        if kind == "object_se3_pose":
            lo = np.minimum(lo, goal[:3] - 0.25)
            hi = np.maximum(hi, goal[:3] + 0.25)
    if not np.all(np.isfinite(lo)):
        anchor = spec.object_pose.translation
        lo, hi = anchor - 0.5, anchor + 0.5

    field = build_distance_field(scene, (lo, hi), gen.voxel_size, gen.margin)

    if gen.mask_object_from_scene and initial_meshes:
        merged = merge_meshes([m.transformed(p) for m, p in initial_meshes])
        field = mask_phase(field, merged, Pose.identity(), "manipulation")
    return field


def _start_representatives(spec: TaskSpec, akr: AkrModel, limits: Limits,
                           field: DistanceField, grasp_index: int) -> list[np.ndarray]:
    gen = spec.generation
    rng = np.random.default_rng(problem_seed(gen.seed, -(grasp_index + 1)))
    lo = np.where(np.isfinite(limits.lower), limits.lower, -np.pi)
    hi = np.where(np.isfinite(limits.upper), limits.upper, np.pi)
    seeds = []
    for _ in range(gen.ik_seeds):
        q = rng.uniform(lo, hi)
        q[akr.object.slice] = spec.object_state
        seeds.append(q)
    locked = np.arange(akr.object.start, akr.object.stop)
    sols = solve_ik(
        akr, spec.object_pose, akr.object_anchor_link, seeds,
        max_retries=gen.max_retries,
        tolerances=(gen.position_tolerance, gen.rotation_tolerance),
        distance_field=field, locked=locked, seed=gen.seed + grasp_index,
    )
    reps = cluster_ik(sols, gen.cluster_params(), seed=gen.seed)
    return [r.config for r in reps[:gen.start_representatives]]


# ---------------------------------------------------------------------------
# per-problem solving (worker side)

_WORKER_CTX: BatchContext | None = None


def _set_worker_context(ctx: BatchContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


@dataclass(frozen=True)
class ProblemResult:
    index: int
    grasp_index: int
    start_index: int
    goal_index: int
    waypoints: np.ndarray | None
    dt: float
    validation: ValidationReport | None
    effort: EffortStats | None
    failure_reason: str | None
    trace: tuple = ()


def solve_indexed_problem(ctx: BatchContext, index: int, g: int, s: int, k: int) -> ProblemResult:
    spec = ctx.spec
    gen = spec.generation
    if s >= len(ctx.starts[g]):
        return ProblemResult(index, g, s, k, None, gen.dt, None, None, "ik_failed")
    akr = ctx.akrs[g]
    problem = TrajectoryProblem(
        akr=akr,
        distance_field=ctx.distance_field,
        start=ctx.starts[g][s],
        goal=spec.goal_spec(k),
        constraints=ctx.constraints,
        limits=ctx.limits_per_grasp[g],
        horizon=gen.horizon,
        dt=gen.dt,
        seed=problem_seed(gen.seed, index),
    )
    trace: list | None = [] if ctx.debug_trace else None
    try:
        traj = optimize_trajectory(problem, trace=trace)
    except InfeasibleError as exc:
        reason = exc.diagnostics.get("reason") or "optimizer_infeasible"
        if reason not in FAILURE_REASONS:
            reason = "optimizer_infeasible"
        return ProblemResult(index, g, s, k, None, gen.dt, None, None, reason,
                             tuple(trace or ()))
    report = validate_trajectory(traj, akr, ctx.constraints, ctx.limits_per_grasp[g],
                                 ctx.distance_field)
    effort = compute_effort_stats(traj, akr)
    if not report.passed:
        return ProblemResult(index, g, s, k, None, gen.dt, report, effort,
                             report.failure_reason, tuple(trace or ()))
    return ProblemResult(index, g, s, k, traj.waypoints, gen.dt, report, effort,
                         None, tuple(trace or ()))


def _pool_entry(task: tuple[int, int, int, int]) -> ProblemResult:
    index, g, s, k = task
    return solve_indexed_problem(_WORKER_CTX, index, g, s, k)


# ---------------------------------------------------------------------------
# batch driver


@dataclass(frozen=True)
class BatchStats:
    attempted: int
    valid: int
    wall_time: float
    throughput: float
    effort_mean: dict
    effort_std: dict
    failure_counts: dict

    def to_json(self) -> dict:
        return {
            "attempted": self.attempted,
            "valid": self.valid,
            "wall_time_s": self.wall_time,
            "throughput_per_s": self.throughput,
            "effort_mean": self.effort_mean,
            "effort_std": self.effort_std,
            "failure_counts": self.failure_counts,
        }


def run_batch(spec: TaskSpec, workers: int, out_dir: str | Path,
              export_format: str = "jsonl", debug_trace: bool = False,
              ctx: BatchContext | None = None) -> BatchStats:
    """Generate, validate and export the full (grasp x start x goal) batch."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc

    if ctx is None:
        ctx = prepare_batch(spec, debug_trace=debug_trace)
    gen = spec.generation

    tasks = []
    n_g, n_s, n_k = len(spec.grasps), gen.start_representatives, len(spec.goals)
    for g in range(n_g):
        for s in range(n_s):
            for k in range(n_k):
                index = (g * n_s + s) * n_k + k
                tasks.append((index, g, s, k))

    start_time = time.perf_counter()
    if workers == 1:
        results = [solve_indexed_problem(ctx, *task) for task in tasks]
    else:
        _set_worker_context(ctx)  # inherited by forked pool workers
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pool_entry, tasks, chunksize=1))
    wall = time.perf_counter() - start_time

    results.sort(key=lambda r: r.index)
    records = [r for r in results if r.waypoints is not None]
    failures = [r for r in results if r.waypoints is None]

    (out_dir / "effective_config.json").write_text(
        json.dumps(effective_config(spec), indent=2, sort_keys=True))

    dataset_path = out_dir / "dataset.jsonl"
    with open(dataset_path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(ctx, r), sort_keys=True))
            fh.write("\n")
    if export_format == "binary":
        for r in records:
            export_binary(ctx, r, out_dir)

    failure_rows = [
        {"index": r.index, "grasp_index": r.grasp_index, "start_index": r.start_index,
         "goal_index": r.goal_index, "reason": r.failure_reason}
        for r in failures
    ]
    (out_dir / "failures.json").write_text(json.dumps(failure_rows, indent=2))

    if debug_trace:
        with open(out_dir / "trace.csv", "w", encoding="utf-8") as fh:
            fh.write("problem_index,round,iteration,objective,max_violation\n")
            for r in results:
                for row in r.trace:
                    fh.write(f"{r.index},{row[0]},{row[1]},{row[2]!r},{row[3]!r}\n")

    stats = compute_stats([r.effort for r in records], failure_rows, wall)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_json(), indent=2))
    write_stats_csv(stats, out_dir / "stats.csv")
    return stats


def compute_stats(efforts: list[EffortStats], failures: list[dict],
                  wall_time: float) -> BatchStats:
    attempted = len(efforts) + len(failures)
    counts = {reason: 0 for reason in FAILURE_REASONS}
    for row in failures:
        counts[row["reason"]] = counts.get(row["reason"], 0) + 1
    base = np.array([e.base_translation for e in efforts]) if efforts else np.zeros(0)
    arm = np.array([e.arm_rotation for e in efforts]) if efforts else np.zeros(0)
    mean = {"base_translation": float(base.mean()) if len(base) else 0.0,
            "arm_rotation": float(arm.mean()) if len(arm) else 0.0}
    std = {"base_translation": float(base.std()) if len(base) else 0.0,
           "arm_rotation": float(arm.std()) if len(arm) else 0.0}
    throughput = len(efforts) / wall_time if wall_time > 0 else 0.0
    return BatchStats(attempted, len(efforts), wall_time, throughput, mean, std, counts)


def write_stats_csv(stats: BatchStats, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value,stddev\n")
        fh.write(f"throughput_per_s,{stats.throughput!r},\n")
        fh.write(f"base_translation,{stats.effort_mean['base_translation']!r},"
                 f"{stats.effort_std['base_translation']!r}\n")
        fh.write(f"arm_rotation,{stats.effort_mean['arm_rotation']!r},"
                 f"{stats.effort_std['arm_rotation']!r}\n")
        for reason, count in stats.failure_counts.items():
            fh.write(f"failures.{reason},{count},\n")


# ---------------------------------------------------------------------------
# export formats


def record_to_json(ctx: BatchContext, r: ProblemResult) -> dict:
    return {
        "version": RECORD_VERSION,
        "joint_names": list(ctx.joint_names),
        "dt": r.dt,
        "waypoints": [list(map(float, row)) for row in r.waypoints],
        "grasp_index": r.grasp_index,
        "goal": {"index": r.goal_index,
                 "target": ctx.spec.goals[r.goal_index].tolist()},
        "validation": r.validation.to_json(),
        "effort": r.effort.to_json(),
        "provenance": {"spec_hash": ctx.spec.spec_hash,
                       "seed": problem_seed(ctx.spec.generation.seed, r.index)},
    }


RECORD_SCHEMA = {
    "type": "object",
    "required": ["version", "joint_names", "dt", "waypoints", "grasp_index",
                 "goal", "validation", "effort", "provenance"],
    "additionalProperties": False,
    "properties": {
        "version": {"type": "integer"},
        "joint_names": {"type": "array", "items": {"type": "string"}},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "waypoints": {"type": "array",
                      "items": {"type": "array", "items": {"type": "number"}}},
        "grasp_index": {"type": "integer", "minimum": 0},
        "goal": {"type": "object",
                 "required": ["index", "target"],
                 "additionalProperties": False,
                 "properties": {"index": {"type": "integer"},
                                "target": {"type": "array",
                                           "items": {"type": "number"}}}},
        "validation": {"type": "object"},
        "effort": {"type": "object",
                   "required": ["base_translation", "arm_rotation"],
                   "properties": {"base_translation": {"type": "number"},
                                  "arm_rotation": {"type": "number"}}},
        "provenance": {"type": "object",
                       "required": ["spec_hash", "seed"],
                       "additionalProperties": False,
                       "properties": {"spec_hash": {"type": "string"},
                                      "seed": {"type": "integer"}}},
    },
}


def export_trajectory(ctx: BatchContext, r: ProblemResult, out_dir: str | Path,
                      export_format: str = "jsonl") -> Path:
    """Write one validated record; jsonl appends to dataset.jsonl,
    binary writes a standalone .akrt file. Returns the written path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if export_format == "binary":
        return export_binary(ctx, r, out_dir)
    if export_format != "jsonl":
        raise ValueError(f"unknown export format {export_format!r}")
    path = out_dir / "dataset.jsonl"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record_to_json(ctx, r), sort_keys=True))
        fh.write("\n")
    return path


def export_binary(ctx: BatchContext, r: ProblemResult, out_dir: Path) -> Path:
    """AKRT binary record: header + row-major f64 waypoints, little-endian."""
    path = Path(out_dir) / f"trajectory_{r.index:06d}.akrt"
    T, width = r.waypoints.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<HIId", RECORD_VERSION, T, width, r.dt))
        fh.write(struct.pack("<I", len(ctx.joint_names)))
        for name in ctx.joint_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(r.waypoints, dtype="<f8").tobytes())
    return path


def import_binary(path: str | Path) -> tuple[Trajectory, list[str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise ParseError(f"{path}: not an AKRT file")
    offset = 4
    version, T, width, dt = struct.unpack_from("<HIId", raw, offset)
    if version != RECORD_VERSION:
        raise ParseError(f"{path}: unsupported record version {version}")
    offset += struct.calcsize("<HIId")
    (n_names,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    names = []
    for _ in range(n_names):
        (ln,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        names.append(raw[offset:offset + ln].decode("utf-8"))
        offset += ln
    waypoints = np.frombuffer(raw, dtype="<f8", offset=offset,
                              count=T * width).reshape(T, width)
    return Trajectory(waypoints.copy(), dt), names


def import_jsonl(path: str | Path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{i + 1}: {exc}") from exc
    return out


def revalidate_dataset(spec: TaskSpec, dataset_path: str | Path,
                       ctx: BatchContext | None = None) -> list[tuple[int, bool, str | None]]:
    """Re-check every exported record against a freshly prepared context.

    Returns (line number, passed, reason) per record.
    """
    if ctx is None:
        ctx = prepare_batch(spec)
    out = []
    for i, rec in enumerate(import_jsonl(dataset_path)):
        traj = Trajectory(np.asarray(rec["waypoints"], dtype=float), rec["dt"])
        akr = ctx.akrs[rec["grasp_index"]]
        report = validate_trajectory(traj, akr, ctx.constraints,
                                     ctx.limits_per_grasp[rec["grasp_index"]],
                                     ctx.distance_field)
        out.append((i, report.passed, report.failure_reason))
    return out
