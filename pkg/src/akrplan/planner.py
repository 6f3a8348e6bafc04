"""Whole-body trajectory optimization over the augmented chain.

The solve pipeline is: inverse kinematics for the start/goal object
states (damped least squares with random restarts), clustering of the
solutions into diverse representatives (k-means reduction followed by
affinity propagation with bounded output), then a penalty-method
trajectory optimization with L-BFGS-B inner iterations and analytic
gradients. Endpoints are pinned: the first waypoint is the given start
and the last is a goal configuration produced by IK, so the optimizer
shapes only the interior of the trajectory.

Grasp switching splits a task that no single grasp can complete into two
segments joined at an intermediate object state, with a collision-free
object-frozen robot reconfiguration between them.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .akr import AkrModel, GraspSpec, LayoutRange
from .collision import (
    DistanceField,
    stamp_mesh_occupancy,
    stamp_sphere_occupancy,
)
from .errors import DimensionError, InfeasibleError, StructureError, UnknownLinkError
from .geometry import (
    Pose,
    bquat_from_axis_angle,
    bquat_multiply,
    bquat_rotate,
    bquat_to_rotvec,
    cross3,
    quat_conjugate,
    quat_multiply,
    quat_to_rotvec,
)
from .kinematics import FIXED, PRISMATIC, REVOLUTE, KinematicTree, jacobian_point

logger = logging.getLogger(__name__)

STATIONARY = "stationary_attachment"
PLANAR = "planar_se2"
FREE = "free_floating"

GOAL_JOINT = "object_joint_target"
GOAL_SE3 = "object_se3_pose"
GOAL_CONFIG = "configuration"

# position : rotation weighting of the chain-deviation penalty (SI units)
CHAIN_POS_WEIGHT = 100.0
CHAIN_ROT_WEIGHT = 1.0
# spheres start paying a cost this far before actual contact
SOFT_COLLISION_MARGIN = 0.02

DEFAULT_POS_TOLERANCE = 0.01
DEFAULT_ROT_TOLERANCE = 0.01
DEFAULT_MAX_RETRIES = 10


@dataclass(frozen=True)
class GoalSpec:
    """Task goal: an object joint target, an object pose, or a full
    configuration (the latter drives object-frozen sub-problems)."""

    kind: str
    target: object
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.kind not in (GOAL_JOINT, GOAL_SE3, GOAL_CONFIG):
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.tolerance <= 0:
            raise ValueError("goal tolerance must be positive")
        if self.kind in (GOAL_JOINT, GOAL_CONFIG):
            object.__setattr__(self, "target",
                               np.asarray(self.target, dtype=float).reshape(-1))


@dataclass(frozen=True)
class ConstraintSet:
    """Attachment model of the object to its environment."""

    kind: str
    reference: Pose | None = None
    d_max: float = DEFAULT_POS_TOLERANCE
    theta_max: float = DEFAULT_ROT_TOLERANCE
    dz_max: float = DEFAULT_POS_TOLERANCE
    theta_planar_max: float = DEFAULT_ROT_TOLERANCE

    def __post_init__(self):
        if self.kind not in (STATIONARY, PLANAR, FREE):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind in (STATIONARY, PLANAR) and self.reference is None:
            raise ValueError(f"{self.kind} constraint needs a reference pose")
        for name in ("d_max", "theta_max", "dz_max", "theta_planar_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Limits:
    """Per-coordinate position bounds plus step (velocity) and
    second-difference/dt^2 (acceleration) magnitude caps."""

    lower: np.ndarray
    upper: np.ndarray
    step_max: np.ndarray
    accel_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        sm = np.broadcast_to(np.asarray(self.step_max, dtype=float), lo.shape).copy()
        am = np.broadcast_to(np.asarray(self.accel_max, dtype=float), lo.shape).copy()
        if np.any(lo > hi):
            raise ValueError("lower limit exceeds upper limit")
        if np.any(sm <= 0) or np.any(am <= 0):
            raise ValueError("step/accel limits must be positive")
        for name, arr in (("lower", lo), ("upper", hi), ("step_max", sm), ("accel_max", am)):
            object.__setattr__(self, name, arr)

    @staticmethod
    def from_tree(tree: KinematicTree, step_max: float = 0.5,
                  accel_max: float = 0.5) -> "Limits":
        lims = tree.joint_limits()
        return Limits(lims[:, 0], lims[:, 1], np.full(tree.n_actuated, step_max),
                      np.full(tree.n_actuated, accel_max))

    def contains(self, q: np.ndarray) -> bool:
        return bool(np.all(q >= self.lower - 1e-12) and np.all(q <= self.upper + 1e-12))


@dataclass(frozen=True)
class Trajectory:
    """T joint-space waypoints at a uniform dt."""

    waypoints: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[0] < 2:
            raise DimensionError("waypoints must be a (T, width) matrix with T >= 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "waypoints", w)

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[0]

    @property
    def width(self) -> int:
        return self.waypoints.shape[1]

    def steps(self) -> np.ndarray:
        return np.diff(self.waypoints, axis=0)

    def accelerations(self) -> np.ndarray:
        x = self.waypoints
        return (x[2:] - 2.0 * x[1:-1] + x[:-2]) / (self.dt * self.dt)


@dataclass(frozen=True)
class IkSolution:
    config: np.ndarray
    position_residual: float
    rotation_residual: float

    def __post_init__(self):
        object.__setattr__(self, "config", np.asarray(self.config, dtype=float).reshape(-1))
        if self.position_residual < 0 or self.rotation_residual < 0:
            raise ValueError("residuals must be non-negative")


@dataclass(frozen=True)
class ClusterParams:
    kmeans_k: int = 500
    ap_upper: int = 80
    ap_lower: int = 10
    ap_fallback: int = 30

    def __post_init__(self):
        if min(self.kmeans_k, self.ap_upper, self.ap_lower, self.ap_fallback) <= 0:
            raise ValueError("cluster parameters must be positive")
        if not self.ap_lower <= self.ap_fallback <= self.ap_upper:
            raise ValueError("need ap_lower <= ap_fallback <= ap_upper")


@dataclass(frozen=True)
class TrajectoryProblem:
    akr: AkrModel
    distance_field: DistanceField
    start: np.ndarray
    goal: GoalSpec
    constraints: ConstraintSet
    limits: Limits
    horizon: int = 30
    w_v: np.ndarray | None = None
    w_a: np.ndarray | None = None
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float).reshape(-1)
        if len(start) != self.akr.width:
            raise DimensionError("start configuration width mismatch")
        if self.horizon < 3:
            raise ValueError("horizon must be at least 3 waypoints")
        if not self.limits.contains(start):
            raise ValueError("start configuration violates position limits")
        wv = np.ones(self.akr.width) if self.w_v is None else \
            np.broadcast_to(np.asarray(self.w_v, dtype=float), (self.akr.width,)).copy()
        wa = np.zeros(self.akr.width) if self.w_a is None else \
            np.broadcast_to(np.asarray(self.w_a, dtype=float), (self.akr.width,)).copy()
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "w_v", wv)
        object.__setattr__(self, "w_a", wa)


def trajectory_cost(traj: Trajectory, w_v: np.ndarray, w_a: np.ndarray) -> float:
    """The smoothness objective: weighted squared steps + accelerations."""
    v = np.sum((w_v * traj.steps()) ** 2)
    a = np.sum((w_a * traj.accelerations()) ** 2)
    return float(v + a)


# ---------------------------------------------------------------------------
# inverse kinematics


def solve_ik(
    akr: AkrModel,
    target: Pose,
    link: str,
    seeds: list[np.ndarray],
    max_retries: int = DEFAULT_MAX_RETRIES,
    tolerances: tuple[float, float] = (DEFAULT_POS_TOLERANCE, DEFAULT_ROT_TOLERANCE),
    distance_field: DistanceField | None = None,
    locked: np.ndarray | None = None,
    seed: int = 0,
    max_iters: int = 150,
    damping: float = 0.05,
    step_clamp: float = 0.3,
) -> list[IkSolution]:
    """Damped-least-squares IK from each seed with random restarts.

    Only solutions within the residual tolerances, inside joint limits
    and collision-free (when a field is supplied) are returned — at most
    one per seed. `locked` coordinates are frozen at each seed's values,
    which is how object joints are pinned while solving for a robot
    configuration that holds a given object state.
    """
    if link not in akr.tree.links:
        raise UnknownLinkError(link)
    pos_tol, rot_tol = tolerances
    if pos_tol <= 0 or rot_tol <= 0:
        raise ValueError("tolerances must be positive")
    tree = akr.tree
    limits = tree.joint_limits()
    lo, hi = limits[:, 0], limits[:, 1]
    lo = np.where(np.isfinite(lo), lo, -np.pi)
    hi = np.where(np.isfinite(hi), hi, np.pi)
    locked_idx = np.asarray(locked, dtype=int) if locked is not None else np.zeros(0, dtype=int)
    rng = np.random.default_rng(seed)

    solutions: list[IkSolution] = []
    for raw_seed in seeds:
        q_seed = tree.check_configuration(raw_seed)
        pinned = q_seed[locked_idx]
        found = None
        for attempt in range(max_retries + 1):
            if attempt == 0:
                q0 = np.clip(q_seed, lo, hi)
            else:
                q0 = rng.uniform(lo, hi)
            q0[locked_idx] = pinned
            result = _dls(tree, target, link, q0, lo, hi, locked_idx, pinned,
                          pos_tol, rot_tol, max_iters, damping, step_clamp)
            if result is None:
                continue
            q, pres, rres = result
            if distance_field is not None:
                from .collision import check_collision
                if check_collision(akr, q, distance_field).collided:
                    continue
            found = IkSolution(q, pres, rres)
            break
        if found is not None:
            solutions.append(found)
    return solutions


def _dls(tree, target, link, q0, lo, hi, locked_idx, pinned,
         pos_tol, rot_tol, max_iters, damping, step_clamp):
    q = q0.copy()
    eye6 = np.eye(6)
    for _ in range(max_iters):
        poses = tree.link_poses(q)
        current = poses[link]
        ep = target.translation - current.translation
        er = quat_to_rotvec(quat_multiply(target.rotation, quat_conjugate(current.rotation)))
        pres = float(np.linalg.norm(ep))
        rres = float(np.linalg.norm(er))
        if pres <= pos_tol and rres <= rot_tol:
            return q, pres, rres
        J = jacobian_point(tree, poses, link, current.translation)
        if len(locked_idx):
            J = J.copy()
            J[:, locked_idx] = 0.0
        e = np.concatenate([ep, er])
        dq = J.T @ np.linalg.solve(J @ J.T + damping * damping * eye6, e)
        peak = np.max(np.abs(dq))
        if peak > step_clamp:
            dq *= step_clamp / peak
        q = np.clip(q + dq, lo, hi)
        q[locked_idx] = pinned
    return None


# ---------------------------------------------------------------------------
# clustering


def cluster_ik(solutions: list[IkSolution], params: ClusterParams = ClusterParams(),
               seed: int = 0) -> list[IkSolution]:
    """Reduce IK solutions to diverse representatives.

    Small inputs pass through unchanged. Larger sets are reduced by
    k-means (each cluster replaced by its medoid), then affinity
    propagation picks exemplars among the medoids; if the exemplar count
    falls outside [ap_lower, ap_upper] after one constrained rerun, the
    method falls back to k-means with ap_fallback clusters. Returned
    representatives are always actual input solutions, ordered by their
    original index (lowest index wins every tie).
    """
    n = len(solutions)
    if n == 0:
        return []
    if n <= params.ap_lower:
        return list(solutions)

    X = np.stack([s.config for s in solutions])
    rng_seed = int(np.random.default_rng(seed).integers(0, 2**31 - 1))

    k = min(n, max(params.kmeans_k, params.ap_lower))
    if k >= n:
        medoids = np.arange(n)
    else:
        medoids = _kmeans_medoids(X, k, rng_seed)

    M = X[medoids]
    picked = _affinity_exemplars(M, rng_seed, preference=None)
    if picked is None or not params.ap_lower <= len(picked) <= params.ap_upper:
        # one constrained rerun: pull the exemplar count toward the bounds
        sims = -_pairwise_sq(M)
        pref = float(np.min(sims)) if (picked is not None and len(picked) > params.ap_upper) \
            else float(np.median(sims) / 2.0)
        picked = _affinity_exemplars(M, rng_seed, preference=pref)
    if picked is None or not params.ap_lower <= len(picked) <= params.ap_upper:
        k_fb = min(params.ap_fallback, len(M))
        picked = _kmeans_medoids(M, k_fb, rng_seed) if k_fb < len(M) else np.arange(len(M))

    chosen = np.sort(medoids[np.asarray(picked, dtype=int)])
    return [solutions[int(i)] for i in chosen]


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    d = X[:, None, :] - X[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _kmeans_medoids(X: np.ndarray, k: int, rng_seed: int) -> np.ndarray:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=k, n_init=4, random_state=rng_seed).fit(X)
    medoids: list[int] = []
    for c in range(k):
        members = np.nonzero(km.labels_ == c)[0]
        if len(members) == 0:
            continue
        dist = np.linalg.norm(X[members] - km.cluster_centers_[c], axis=1)
        medoids.append(int(members[np.argmin(dist)]))
    return np.unique(np.array(medoids, dtype=int))


def _affinity_exemplars(M: np.ndarray, rng_seed: int, preference) -> np.ndarray | None:
    from sklearn.cluster import AffinityPropagation
    from sklearn.exceptions import ConvergenceWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        ap = AffinityPropagation(damping=0.9, max_iter=400, convergence_iter=20,
                                 preference=preference, random_state=rng_seed).fit(M)
    idx = ap.cluster_centers_indices_
    if idx is None or len(idx) == 0:
        return None
    return np.asarray(idx, dtype=int)


# ---------------------------------------------------------------------------
# trajectory optimization


class BatchChain:
    """Forward kinematics evaluated for a whole batch of configurations.

    Link poses come back as (B, 3) translation and (B, 4) quaternion
    arrays per link, and point-Jacobian contributions are produced as
    batched per-joint columns, so trajectory costs touch numpy a handful
    of times per joint rather than per waypoint.
    """

    def __init__(self, tree: KinematicTree):
        self.tree = tree
        self.link_index = {name: i for i, name in enumerate(tree.links)}
        self.root_index = self.link_index[tree.root]
        self.n_links = len(tree.links)
        self.W = tree.n_actuated
        steps = []
        for j in tree.dfs_joints:
            steps.append((
                j.kind,
                None if j.axis is None else j.axis.copy(),
                j.origin.translation.copy(),
                j.origin.rotation.copy(),
                j.reversed_motion,
                self.link_index[j.parent],
                self.link_index[j.child],
                tree.actuated_index.get(j.name, -1),
            ))
        self.steps = steps
        # affects[l, w]: does actuated joint w move link l?
        self.affects = np.zeros((self.n_links, self.W), dtype=bool)
        for j in tree.actuated_joints:
            w = tree.actuated_index[j.name]
            for name in tree.descendants(j.child):
                self.affects[self.link_index[name], w] = True
        # frame link whose pose carries each joint's axis and pivot point
        self.joint_frame = np.zeros(self.W, dtype=int)
        self.joint_axis = np.zeros((self.W, 3))
        self.joint_kind = []
        for j in tree.actuated_joints:
            w = tree.actuated_index[j.name]
            frame = j.parent if j.reversed_motion else j.child
            self.joint_frame[w] = self.link_index[frame]
            self.joint_axis[w] = j.axis
            self.joint_kind.append(j.kind)

    def poses(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, L, 3) translations and (B, L, 4) rotations for all links."""
        Q = np.atleast_2d(Q)
        B = Q.shape[0]
        t = np.zeros((B, self.n_links, 3))
        r = np.zeros((B, self.n_links, 4))
        r[:, self.root_index, 0] = 1.0
        for kind, axis, ot, oq, reversed_motion, pi, ci, ai in self.steps:
            pt, pq = t[:, pi], r[:, pi]
            if kind == FIXED:
                t[:, ci] = pt + bquat_rotate(pq, ot[None, :])
                r[:, ci] = bquat_multiply(pq, np.broadcast_to(oq, (B, 4)))
                continue
            q_j = Q[:, ai]
            if kind == REVOLUTE:
                mq = bquat_from_axis_angle(axis, q_j)
                if reversed_motion:
                    rot = bquat_multiply(pq, mq)
                    t[:, ci] = pt + bquat_rotate(rot, ot[None, :])
                    r[:, ci] = bquat_multiply(rot, np.broadcast_to(oq, (B, 4)))
                else:
                    t[:, ci] = pt + bquat_rotate(pq, ot[None, :])
                    r[:, ci] = bquat_multiply(bquat_multiply(pq, np.broadcast_to(oq, (B, 4))), mq)
            else:  # prismatic
                if reversed_motion:
                    shift = q_j[:, None] * bquat_rotate(pq, axis[None, :])
                    t[:, ci] = pt + shift + bquat_rotate(pq, ot[None, :])
                    r[:, ci] = bquat_multiply(pq, np.broadcast_to(oq, (B, 4)))
                else:
                    rot = bquat_multiply(pq, np.broadcast_to(oq, (B, 4)))
                    t[:, ci] = pt + bquat_rotate(pq, ot[None, :]) + \
                        q_j[:, None] * bquat_rotate(rot, axis[None, :])
                    r[:, ci] = rot
        return t, r

    def joint_axes_world(self, t: np.ndarray, r: np.ndarray):
        """Per actuated joint: world axis direction (B, 3) and pivot (B, 3)."""
        dirs = np.empty((t.shape[0], self.W, 3))
        pivots = np.empty((t.shape[0], self.W, 3))
        for w in range(self.W):
            frame = self.joint_frame[w]
            dirs[:, w] = bquat_rotate(r[:, frame], self.joint_axis[w][None, :])
            pivots[:, w] = t[:, frame]
        return dirs, pivots

    def accumulate_point_gradient(
        self,
        G: np.ndarray,
        link: int,
        points: np.ndarray,
        pull: np.ndarray,
        dirs: np.ndarray,
        pivots: np.ndarray,
        rows: np.ndarray,
    ) -> None:
        """Add d(pull . point)/dq for points rigidly attached to `link`.

        points, pull: (B, 3) with B == len(rows); rows maps each batch
        entry to its waypoint row in G.
        """
        for w in np.nonzero(self.affects[link])[0]:
            if self.joint_kind[w] == REVOLUTE:
                contrib = np.einsum(
                    "bi,bi->b", pull,
                    cross3(dirs[rows, w], points - pivots[rows, w]))
            else:
                contrib = np.einsum("bi,bi->b", pull, dirs[rows, w])
            np.add.at(G[:, w], rows, contrib)

    def accumulate_rotation_gradient(
        self,
        G: np.ndarray,
        link: int,
        pull: np.ndarray,
        dirs: np.ndarray,
        rows: np.ndarray,
    ) -> None:
        """Add d(pull . rotvec)/dq for the orientation of `link`."""
        for w in np.nonzero(self.affects[link])[0]:
            if self.joint_kind[w] != REVOLUTE:
                continue
            contrib = np.einsum("bi,bi->b", pull, dirs[rows, w])
            np.add.at(G[:, w], rows, contrib)


class _PenaltyCost:
    """Value + analytic gradient of the penalized trajectory objective.

    Variables are the interior waypoints; endpoints stay pinned. The
    collision term uses the distance field's trilinear gradient, the
    chain term uses batched anchor-link Jacobian columns. All kinematic
    terms are evaluated for every waypoint in one batched FK pass.
    """

    def __init__(self, problem: TrajectoryProblem, qa: np.ndarray, qb: np.ndarray):
        self.p = problem
        self.qa = qa
        self.qb = qb
        self.T = problem.horizon
        self.W = problem.akr.width
        self.dt2 = problem.dt * problem.dt
        self.mu_limit = 1.0
        self.mu_chain = 1.0
        self.mu_collision = 1.0
        self.chain = BatchChain(problem.akr.tree)
        self.check_chain = problem.constraints.kind in (STATIONARY, PLANAR)
        tree = problem.akr.tree
        self.sphere_links = {}
        for name in problem.akr.sphere_links():
            spheres = tree.links[name].spheres
            bc = spheres.centers.mean(axis=0)
            reach = float(np.max(np.linalg.norm(spheres.centers - bc, axis=1)
                                 + spheres.radii))
            self.sphere_links[self.chain.link_index[name]] = (
                spheres.centers, spheres.radii, bc, reach)
        self.pairs = [
            (self.chain.link_index[a], self.chain.link_index[b])
            for a, b in sorted(problem.akr.collision_pairs)
            if tree.links[a].spheres is not None and tree.links[b].spheres is not None
        ]
        self.anchor_index = self.chain.link_index[problem.akr.object_anchor_link]
        if self.check_chain:
            ref = problem.constraints.reference
            self.ref_t = ref.translation
            self.ref_q_conj = np.array([ref.rotation[0], -ref.rotation[1],
                                        -ref.rotation[2], -ref.rotation[3]])

    def stack(self, z: np.ndarray) -> np.ndarray:
        X = np.empty((self.T, self.W))
        X[0] = self.qa
        X[-1] = self.qb
        X[1:-1] = z.reshape(self.T - 2, self.W)
        return X

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        p = self.p
        X = self.stack(z)
        G = np.zeros_like(X)
        value = 0.0

        # smoothness
        D = np.diff(X, axis=0)
        wv2 = p.w_v * p.w_v
        value += float(np.sum(wv2 * D * D))
        WD = 2.0 * wv2 * D
        G[:-1] -= WD
        G[1:] += WD

        A = (X[2:] - 2.0 * X[1:-1] + X[:-2]) / self.dt2
        wa2 = p.w_a * p.w_a
        value += float(np.sum(wa2 * A * A))
        WA = 2.0 * wa2 * A / self.dt2
        G[2:] += WA
        G[1:-1] -= 2.0 * WA
        G[:-2] += WA

        # velocity / acceleration hinge penalties
        hv = np.abs(D) - p.limits.step_max
        np.maximum(hv, 0.0, out=hv)
        value += self.mu_limit * float(np.sum(hv * hv))
        sv = 2.0 * self.mu_limit * np.sign(D) * hv
        G[:-1] -= sv
        G[1:] += sv

        ha = np.abs(A) - p.limits.accel_max
        np.maximum(ha, 0.0, out=ha)
        value += self.mu_limit * float(np.sum(ha * ha))
        sa = 2.0 * self.mu_limit * np.sign(A) * ha / self.dt2
        G[2:] += sa
        G[1:-1] -= 2.0 * sa
        G[:-2] += sa

        # batched kinematic terms (chain + collision)
        t, r = self.chain.poses(X)
        dirs, pivots = self.chain.joint_axes_world(t, r)

        if self.check_chain:
            value = self._chain_term(value, G, t, r, dirs, pivots)
        value = self._collision_term(value, G, t, r, dirs, pivots)

        # endpoint rows stay pinned: their gradient never leaves this
        # function, the constraint values still count toward the total
        return value, G[1:-1].ravel()

    def _chain_term(self, value, G, t, r, dirs, pivots):
        mu = self.mu_chain
        anchor_t = t[:, self.anchor_index]
        anchor_q = r[:, self.anchor_index]
        rv = bquat_to_rotvec(bquat_multiply(anchor_q, self.ref_q_conj[None, :]))
        interior = np.arange(1, self.T - 1)
        if self.p.constraints.kind == STATIONARY:
            dp = anchor_t - self.ref_t
            value += mu * float(CHAIN_POS_WEIGHT * np.sum(dp * dp)
                                + CHAIN_ROT_WEIGHT * np.sum(rv * rv))
            self.chain.accumulate_point_gradient(
                G, self.anchor_index, anchor_t[interior],
                mu * 2.0 * CHAIN_POS_WEIGHT * dp[interior], dirs, pivots, interior)
            self.chain.accumulate_rotation_gradient(
                G, self.anchor_index, mu * 2.0 * CHAIN_ROT_WEIGHT * rv[interior],
                dirs, interior)
        else:  # planar SE(2): hold height, roll and pitch
            dz = anchor_t[:, 2] - self.ref_t[2]
            rv_xy = rv.copy()
            rv_xy[:, 2] = 0.0
            value += mu * float(CHAIN_POS_WEIGHT * np.sum(dz * dz)
                                + CHAIN_ROT_WEIGHT * np.sum(rv_xy * rv_xy))
            pull_p = np.zeros((len(interior), 3))
            pull_p[:, 2] = mu * 2.0 * CHAIN_POS_WEIGHT * dz[interior]
            self.chain.accumulate_point_gradient(
                G, self.anchor_index, anchor_t[interior], pull_p, dirs, pivots,
                interior)
            self.chain.accumulate_rotation_gradient(
                G, self.anchor_index, mu * 2.0 * CHAIN_ROT_WEIGHT * rv_xy[interior],
                dirs, interior)
        return value

    def _link_bounds(self, t, r):
        """World bounding-sphere centers per sphere link: {link: (T, 3)}."""
        return {
            li: bquat_rotate(r[:, li], bc[None, :]) + t[:, li]
            for li, (_, _, bc, _) in self.sphere_links.items()
        }

    def _centers_at(self, t, r, li, rows):
        centers_local = self.sphere_links[li][0]
        return bquat_rotate(r[rows, li, None, :], centers_local[None, :, :]) \
            + t[rows, li, None, :]

    def _collision_term(self, value, G, t, r, dirs, pivots):
        """Hinge costs against the field and between unmasked pairs.

        A per-link bounding sphere prunes waypoints before any per-sphere
        arithmetic; endpoints are pinned and never contribute."""
        mu = self.mu_collision
        field = self.p.distance_field
        bounds = self._link_bounds(t, r)
        interior = np.zeros(self.T, dtype=bool)
        interior[1:-1] = True

        for li, (centers_local, radii, _, reach) in self.sphere_links.items():
            d_bound = field.sample(bounds[li])
            rows = np.nonzero(interior & (d_bound < reach + SOFT_COLLISION_MARGIN))[0]
            if len(rows) == 0:
                continue
            centers = self._centers_at(t, r, li, rows)
            d, dgrad = field.sample_with_gradient(centers.reshape(-1, 3))
            h = (radii[None, :] + SOFT_COLLISION_MARGIN) - d.reshape(len(rows), -1)
            np.maximum(h, 0.0, out=h)
            if not h.any():
                continue
            value += mu * float(np.sum(h * h))
            ri, idx_s = np.nonzero(h)
            pull = (-2.0 * mu * h[ri, idx_s])[:, None] \
                * dgrad.reshape(len(rows), -1, 3)[ri, idx_s]
            self.chain.accumulate_point_gradient(
                G, li, centers[ri, idx_s], pull, dirs, pivots, rows[ri])

        for la, lb in self.pairs:
            _, ra, _, reach_a = self.sphere_links[la]
            _, rb, _, reach_b = self.sphere_links[lb]
            gap = bounds[la] - bounds[lb]
            d_bound = np.sqrt(np.einsum("ij,ij->i", gap, gap))
            rows = np.nonzero(interior & (d_bound < reach_a + reach_b
                                          + SOFT_COLLISION_MARGIN))[0]
            if len(rows) == 0:
                continue
            ca = self._centers_at(t, r, la, rows)
            cb = self._centers_at(t, r, lb, rows)
            diff = ca[:, :, None, :] - cb[:, None, :, :]
            dist = np.sqrt(np.einsum("...i,...i->...", diff, diff))
            h = (ra[:, None] + rb[None, :]) + SOFT_COLLISION_MARGIN - dist
            np.maximum(h, 0.0, out=h)
            if not h.any():
                continue
            value += mu * float(np.sum(h * h))
            ri, ia, ib = np.nonzero(h)
            n = diff[ri, ia, ib] / np.maximum(dist[ri, ia, ib], 1e-9)[:, None]
            pull = (-2.0 * mu * h[ri, ia, ib])[:, None] * n
            self.chain.accumulate_point_gradient(
                G, la, ca[ri, ia], pull, dirs, pivots, rows[ri])
            self.chain.accumulate_point_gradient(
                G, lb, cb[ri, ib], -pull, dirs, pivots, rows[ri])
        return value


def _constraint_violation(problem: TrajectoryProblem, traj: Trajectory) -> float:
    """Worst violation across limit, chain and collision checks (for traces)."""
    from . import validate as _validate

    report = _validate.validate_trajectory(
        traj, problem.akr, problem.constraints, problem.limits, problem.distance_field)
    worst = 0.0
    for frag in report.per_waypoint:
        if frag.d is not None:
            worst = max(worst, max(0.0, frag.d - problem.constraints.d_max),
                        max(0.0, frag.theta - problem.constraints.theta_max))
        if frag.d_z is not None:
            worst = max(worst, max(0.0, frag.d_z - problem.constraints.dz_max),
                        max(0.0, frag.theta_planar - problem.constraints.theta_planar_max))
    for v in report.limit_violations:
        worst = max(worst, v.magnitude)
    for hit in report.collision_hits:
        worst = max(worst, hit[-1])
    return worst


def optimize_trajectory(
    problem: TrajectoryProblem,
    goal_configs: list[np.ndarray] | None = None,
    trace: list | None = None,
    max_goal_candidates: int = 3,
) -> Trajectory:
    """Solve one trajectory problem; raises InfeasibleError on failure.

    For stationary joint-target goals the initial guess walks the object
    path with warm-started IK, which keeps every waypoint near the chain
    manifold and fixes the terminal configuration; otherwise goal
    configurations come from IK on the goal state (or `goal_configs`)
    and the interior starts as linear interpolation. When `trace` is a
    list it receives (round, iteration, penalty value, max constraint
    violation) rows.
    """
    best_diag: dict = {}
    walked = None

    if goal_configs is None and problem.goal.kind == GOAL_JOINT \
            and problem.constraints.kind == STATIONARY:
        walked, end_free = _manifold_walk(problem)
        if walked is not None:
            qb = walked[-1] if end_free else _repair_endpoint(problem, walked[-1])
            if qb is not None:
                traj = _solve_between(problem, walked[0], qb, trace,
                                      init=walked[1:-1])
                ok, best_diag = _accepts(problem, traj)
                if ok:
                    return traj

    candidates = goal_configs if goal_configs is not None else \
        _goal_candidates(problem, max_goal_candidates)
    if not candidates and not best_diag:
        raise InfeasibleError("no goal configuration found by IK",
                              {"reason": "ik_failed"})

    init = walked[1:-1] if walked is not None else None
    for qb in candidates:
        qb = np.asarray(qb, dtype=float).reshape(-1)
        traj = _solve_between(problem, problem.start, qb, trace, init=init)
        ok, diagnostics = _accepts(problem, traj)
        if ok:
            return traj
        if not best_diag or diagnostics.get("worst", np.inf) < best_diag.get("worst", np.inf):
            best_diag = diagnostics
    raise InfeasibleError("trajectory optimization did not reach feasibility", best_diag)


def _manifold_walk(problem: TrajectoryProblem) -> tuple[np.ndarray | None, bool]:
    """Chain-consistent initial trajectory for stationary joint goals.

    Sweeps the object linearly from start to goal; at each step the rest
    of the chain is re-solved by damped least squares warm-started from
    the previous waypoint, so the anchor stays at its reference pose all
    along. Returns ((T, W) configurations or None, endpoint collision-free).
    """
    akr = problem.akr
    tree = akr.tree
    limits = tree.joint_limits()
    lo = np.where(np.isfinite(limits[:, 0]), limits[:, 0], -np.pi)
    hi = np.where(np.isfinite(limits[:, 1]), limits[:, 1], np.pi)
    locked = np.arange(akr.object.start, akr.object.stop)
    phi0 = problem.start[akr.object.slice]
    phiT = np.asarray(problem.goal.target, dtype=float)
    ref = problem.constraints.reference

    X = np.empty((problem.horizon, akr.width))
    X[0] = problem.start
    q = problem.start.copy()
    for step in range(1, problem.horizon):
        alpha = step / (problem.horizon - 1)
        q = q.copy()
        q[locked] = phi0 + alpha * (phiT - phi0)
        result = _dls(tree, ref, akr.object_anchor_link, q, lo, hi,
                      locked, q[locked], 1e-4, 1e-4, max_iters=80,
                      damping=0.05, step_clamp=0.3)
        if result is None:
            return None, False
        q = result[0]
        X[step] = q
    from .collision import check_collision
    end_free = not check_collision(akr, X[-1], problem.distance_field).collided
    return X, end_free


def _repair_endpoint(problem: TrajectoryProblem, q_end: np.ndarray) -> np.ndarray | None:
    """Collision-free goal configuration near a colliding walked endpoint.

    Perturbs the virtual base locally and re-projects onto the chain
    manifold, staying within the posture family the walk arrived in
    instead of jumping to a distant IK branch.
    """
    from .collision import check_collision

    akr = problem.akr
    tree = akr.tree
    limits = tree.joint_limits()
    lo = np.where(np.isfinite(limits[:, 0]), limits[:, 0], -np.pi)
    hi = np.where(np.isfinite(limits[:, 1]), limits[:, 1], np.pi)
    locked = np.arange(akr.object.start, akr.object.stop)
    ref = problem.constraints.reference
    rng = np.random.default_rng(problem.seed + 9173)
    for attempt in range(16):
        seed_cfg = q_end.copy()
        if attempt > 0:
            seed_cfg[0] += rng.uniform(-0.4, 0.4)
            seed_cfg[1] += rng.uniform(-0.4, 0.4)
            seed_cfg[2] += rng.uniform(-0.7, 0.7)
            seed_cfg = np.clip(seed_cfg, lo, hi)
            seed_cfg[locked] = q_end[locked]
        result = _dls(tree, ref, akr.object_anchor_link, seed_cfg, lo, hi,
                      locked, q_end[locked], 1e-4, 1e-4, max_iters=100,
                      damping=0.05, step_clamp=0.3)
        if result is None:
            continue
        q = result[0]
        if not check_collision(akr, q, problem.distance_field).collided:
            return q
    return None


def _goal_candidates(problem: TrajectoryProblem, max_candidates: int) -> list[np.ndarray]:
    akr = problem.akr
    goal = problem.goal
    if goal.kind == GOAL_CONFIG:
        return [np.asarray(goal.target, dtype=float)]

    if goal.kind == GOAL_JOINT:
        if problem.constraints.kind != STATIONARY:
            raise StructureError(
                "object joint goals are only defined for stationary attachments")
        if len(goal.target) != len(akr.object):
            raise DimensionError("goal joint target width mismatch")
        seed_cfg = problem.start.copy()
        seed_cfg[akr.object.slice] = goal.target
        locked = np.arange(akr.object.start, akr.object.stop)
        target_pose = problem.constraints.reference
    else:  # GOAL_SE3
        seed_cfg = problem.start.copy()
        locked = None
        target_pose = goal.target

    sols = solve_ik(
        akr, target_pose, akr.object_anchor_link, [seed_cfg] * 3,
        distance_field=problem.distance_field, locked=locked, seed=problem.seed)
    if not sols:
        return []
    configs = [s.config for s in sols]
    dists = [float(np.linalg.norm(problem.w_v * (c - problem.start))) for c in configs]
    order = np.argsort(dists, kind="stable")
    unique: list[np.ndarray] = []
    for i in order:
        if not any(np.allclose(configs[i], u, atol=1e-6) for u in unique):
            unique.append(configs[i])
        if len(unique) >= max_candidates:
            break
    return unique


_MU_SCHEDULE = (1e2, 1e4, 1e6)
_MU_MAX_ITER = (150, 80, 60)


def _quick_feasible(cost: _PenaltyCost, X: np.ndarray) -> bool:
    """Cheap batched probe: are all constraints met with some margin?"""
    p = cost.p
    D = np.diff(X, axis=0)
    if np.any(np.abs(D) > p.limits.step_max + 1e-12):
        return False
    A = (X[2:] - 2.0 * X[1:-1] + X[:-2]) / cost.dt2
    if np.any(np.abs(A) > p.limits.accel_max + 1e-12):
        return False
    t, r = cost.chain.poses(X)
    if cost.check_chain:
        anchor_t = t[:, cost.anchor_index]
        anchor_q = r[:, cost.anchor_index]
        rv = bquat_to_rotvec(bquat_multiply(anchor_q, cost.ref_q_conj[None, :]))
        if p.constraints.kind == STATIONARY:
            d = np.linalg.norm(anchor_t - cost.ref_t, axis=1)
            theta = np.linalg.norm(rv, axis=1)
            if np.max(d) > 0.8 * p.constraints.d_max or \
                    np.max(theta) > 0.8 * p.constraints.theta_max:
                return False
        else:
            dz = np.abs(anchor_t[:, 2] - cost.ref_t[2])
            if np.max(dz) > 0.8 * p.constraints.dz_max or \
                    np.max(np.linalg.norm(rv[:, :2], axis=1)) > \
                    0.8 * p.constraints.theta_planar_max:
                return False
    bounds = cost._link_bounds(t, r)
    for li, (centers_local, radii, _, reach) in cost.sphere_links.items():
        d_bound = p.distance_field.sample(bounds[li])
        rows = np.nonzero(d_bound < reach + 1e-3)[0]
        if len(rows) == 0:
            continue
        centers = cost._centers_at(t, r, li, rows)
        d = p.distance_field.sample(centers.reshape(-1, 3)).reshape(len(rows), -1)
        if np.any(d < radii[None, :] + 1e-6):
            return False
    for la, lb in cost.pairs:
        _, ra, _, reach_a = cost.sphere_links[la]
        _, rb, _, reach_b = cost.sphere_links[lb]
        gap = bounds[la] - bounds[lb]
        d_bound = np.sqrt(np.einsum("ij,ij->i", gap, gap))
        rows = np.nonzero(d_bound < reach_a + reach_b + 1e-3)[0]
        if len(rows) == 0:
            continue
        ca = cost._centers_at(t, r, la, rows)
        cb = cost._centers_at(t, r, lb, rows)
        diff = ca[:, :, None, :] - cb[:, None, :, :]
        dist = np.sqrt(np.einsum("...i,...i->...", diff, diff))
        if np.any(dist < (ra[:, None] + rb[None, :]) + 1e-6):
            return False
    return True


def _solve_between(problem: TrajectoryProblem, qa: np.ndarray, qb: np.ndarray,
                   trace: list | None = None,
                   init: np.ndarray | None = None) -> Trajectory:
    T, W = problem.horizon, problem.akr.width
    cost = _PenaltyCost(problem, qa, qb)
    if init is not None:
        z = np.clip(init, problem.limits.lower, problem.limits.upper).ravel()
    else:
        alphas = np.linspace(0.0, 1.0, T)[1:-1, None]
        z = ((1.0 - alphas) * qa + alphas * qb).ravel()
    bounds = list(zip(np.tile(problem.limits.lower, T - 2),
                      np.tile(problem.limits.upper, T - 2)))

    for round_idx, (mu, max_iter) in enumerate(zip(_MU_SCHEDULE, _MU_MAX_ITER)):
        cost.mu_limit = mu
        cost.mu_chain = mu
        cost.mu_collision = mu

        rows = []
        if trace is not None:
            counter = {"i": 0}

            def callback(zk):
                value, _ = cost(zk)
                traj = Trajectory(cost.stack(zk), problem.dt)
                rows.append((round_idx, counter["i"], value,
                             _constraint_violation(problem, traj)))
                counter["i"] += 1
        else:
            callback = None

        res = minimize(cost, z, jac=True, method="L-BFGS-B", bounds=bounds,
                       callback=callback,
                       options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9})
        z = res.x
        if trace is not None:
            trace.extend(rows)
        if round_idx >= 1 and _quick_feasible(cost, cost.stack(z)):
            break

    X = cost.stack(z)
    np.clip(X, problem.limits.lower, problem.limits.upper, out=X)
    return Trajectory(X, problem.dt)


def _accepts(problem: TrajectoryProblem, traj: Trajectory) -> tuple[bool, dict]:
    from . import validate as _validate

    report = _validate.validate_trajectory(
        traj, problem.akr, problem.constraints, problem.limits, problem.distance_field)
    residual = goal_residual(problem, traj)
    ok = report.passed and residual <= problem.goal.tolerance
    diag = {
        "worst": _constraint_violation(problem, traj),
        "goal_residual": residual,
        "verdict": report.verdict,
        "reason": report.failure_reason if not report.passed else (
            None if ok else "goal_violation"),
    }
    return ok, diag


def goal_residual(problem: TrajectoryProblem, traj: Trajectory) -> float:
    """Squared task-space residual of the terminal waypoint."""
    xT = traj.waypoints[-1]
    goal = problem.goal
    if goal.kind == GOAL_CONFIG:
        e = xT - goal.target
        return float(e @ e)
    if goal.kind == GOAL_JOINT:
        e = xT[problem.akr.object.slice] - goal.target
        return float(e @ e)
    pose = problem.akr.tree.link_poses(xT)[problem.akr.object_anchor_link]
    target: Pose = goal.target
    dp = pose.translation - target.translation
    rv = quat_to_rotvec(quat_multiply(pose.rotation, quat_conjugate(target.rotation)))
    return float(dp @ dp + rv @ rv)


# ---------------------------------------------------------------------------
# grasp switching


@dataclass(frozen=True)
class GraspCandidate:
    """A grasp together with the AKR assembled for it, plus an optional
    start configuration already holding the object at the start state."""

    grasp: GraspSpec
    akr: AkrModel
    start: np.ndarray | None = None


def plan_grasp_switch(
    problem: TrajectoryProblem,
    candidates: list[GraspCandidate],
    mid_samples: int = 5,
) -> list[tuple[Trajectory, GraspSpec]]:
    """Single- or two-stage plan over a set of alternative grasps.

    If any grasp completes the task alone, the first that does (by
    candidate order) is returned as one segment. Otherwise intermediate
    object states evenly spaced between start and goal are tried in
    order; for the first state with feasible (grasp_1, grasp_2) segment
    pairs joined by a collision-free object-frozen reconfiguration, the
    pair with the lowest combined objective is returned.
    """
    if len(candidates) < 2:
        raise ValueError("grasp switching needs at least two grasp candidates")
    if mid_samples < 1:
        raise ValueError("mid_samples must be >= 1")
    if problem.goal.kind != GOAL_JOINT:
        raise StructureError("grasp switching is defined for object joint goals")

    phi0 = problem.start[problem.akr.object.slice].copy()
    phiT = np.asarray(problem.goal.target, dtype=float)

    for cand in candidates:
        try:
            sub = _segment_problem(problem, cand, phi0, phiT)
            traj = optimize_trajectory(sub)
            return [(traj, cand.grasp)]
        except InfeasibleError:
            continue

    fractions = (np.arange(1, mid_samples + 1)) / (mid_samples + 1)
    for frac in fractions:
        phi_mid = phi0 + frac * (phiT - phi0)
        feasible = []
        for i, c1 in enumerate(candidates):
            for j, c2 in enumerate(candidates):
                if i == j:
                    continue
                try:
                    pa = _segment_problem(problem, c1, phi0, phi_mid)
                    ta = optimize_trajectory(pa)
                    pb = _segment_problem(problem, c2, phi_mid, phiT)
                    tb = optimize_trajectory(pb)
                    _check_reconfiguration(problem, c1, c2, ta, tb)
                except InfeasibleError:
                    continue
                total = (trajectory_cost(ta, problem.w_v, problem.w_a)
                         + trajectory_cost(tb, problem.w_v, problem.w_a))
                feasible.append((total, i, j, ta, tb))
        if feasible:
            feasible.sort(key=lambda item: (item[0], item[1], item[2]))
            _, i, j, ta, tb = feasible[0]
            return [(ta, candidates[i].grasp), (tb, candidates[j].grasp)]

    raise InfeasibleError("no single- or two-stage grasp plan found",
                          {"reason": "optimizer_infeasible"})


def _segment_problem(problem: TrajectoryProblem, cand: GraspCandidate,
                     phi_from: np.ndarray, phi_to: np.ndarray) -> TrajectoryProblem:
    akr = cand.akr
    if cand.start is not None and np.allclose(
            cand.start[akr.object.slice], phi_from, atol=1e-9):
        start = cand.start
    else:
        start = _hold_state_config(problem, cand, phi_from)
        if start is None:
            raise InfeasibleError("no collision-free grasp configuration at the "
                                  "segment start", {"reason": "ik_failed"})
    return replace(problem, akr=akr, start=start,
                   goal=replace(problem.goal, target=phi_to))


def _hold_state_config(problem: TrajectoryProblem, cand: GraspCandidate,
                       phi: np.ndarray) -> np.ndarray | None:
    akr = cand.akr
    seed_cfg = (cand.start if cand.start is not None else problem.start).copy()
    seed_cfg[akr.object.slice] = phi
    locked = np.arange(akr.object.start, akr.object.stop)
    sols = solve_ik(akr, problem.constraints.reference, akr.object_anchor_link,
                    [seed_cfg] * 3, distance_field=problem.distance_field,
                    locked=locked, seed=problem.seed + 1)
    if not sols:
        return None
    dists = [float(np.linalg.norm(problem.w_v * (s.config - seed_cfg))) for s in sols]
    return sols[int(np.argmin(dists))].config


def robot_only_model(akr: AkrModel) -> AkrModel:
    """The robot portion of an AKR as a standalone model (m = 0)."""
    robot_links = [l for name, l in akr.tree.links.items() if name not in akr.object_links]
    robot_joints = [j for j in akr.tree.joints
                    if j.child not in akr.object_links and j.parent not in akr.object_links]
    tree = KinematicTree(robot_links, robot_joints)
    n = tree.n_actuated - 3
    pairs = frozenset(p for p in akr.collision_pairs
                      if p[0] not in akr.object_links and p[1] not in akr.object_links)
    return AkrModel(
        tree=tree, base=LayoutRange(0, 3), manipulator=LayoutRange(3, 3 + n),
        object=LayoutRange(3 + n, 3 + n), joint_weights=akr.joint_weights[:3 + n],
        collision_pairs=pairs, tcp_link=akr.tcp_link,
        object_anchor_link=akr.tcp_link, object_links=frozenset(),
    )


def _check_reconfiguration(problem: TrajectoryProblem, c1: GraspCandidate,
                           c2: GraspCandidate, ta: Trajectory, tb: Trajectory) -> Trajectory:
    """Plan the object-frozen robot motion between two grasp segments.

    The object is parked at the intermediate state and injected into the
    distance field as a static obstacle; the bare robot then moves from
    the release configuration to the re-grasp configuration.
    """
    robot = robot_only_model(c1.akr)
    width = robot.width

    end_a = ta.waypoints[-1]
    start_b = tb.waypoints[0]
    qa = end_a[:width]
    qb = start_b[:width]

    field = problem.distance_field
    occ = field.occupancy.copy()
    poses = c1.akr.tree.link_poses(end_a)
    for name in sorted(c1.akr.object_links):
        link = c1.akr.tree.links[name]
        world_pose = poses[name]
        if link.collision_mesh is not None:
            stamp_mesh_occupancy(occ, field.origin, field.voxel_size,
                                 link.collision_mesh.transformed(world_pose))
        elif link.spheres is not None:
            stamp_sphere_occupancy(occ, field.origin, field.voxel_size,
                                   link.spheres.transformed(world_pose))
    frozen_field = DistanceField.from_occupancy(field.origin, field.voxel_size, occ)

    sub = TrajectoryProblem(
        akr=robot,
        distance_field=frozen_field,
        start=qa,
        goal=GoalSpec(GOAL_CONFIG, qb, tolerance=max(problem.goal.tolerance, 1e-6)),
        constraints=ConstraintSet(FREE),
        limits=Limits(problem.limits.lower[:width], problem.limits.upper[:width],
                      problem.limits.step_max[:width], problem.limits.accel_max[:width]),
        horizon=problem.horizon,
        w_v=problem.w_v[:width], w_a=problem.w_a[:width],
        dt=problem.dt, seed=problem.seed + 2,
    )
    return optimize_trajectory(sub, goal_configs=[qb])
