"""akrplan: whole-body mobile-manipulation trajectory synthesis.

The library folds a mobile base, a manipulator and a grasped (possibly
articulated) object into one kinematic chain, plans constrained
trajectories over that chain against a voxelized distance field, and
generates validated trajectory datasets in batch.
"""

__version__ = "0.1.0"

from .errors import (
    AkrPlanError,
    DimensionError,
    GeometryError,
    InfeasibleError,
    NamingError,
    ParseError,
    ResourceLimitError,
    StructureError,
    UnknownLinkError,
    UnsupportedFeatureError,
)
from .geometry import Pose
from .mesh import Mesh, box_mesh, load_obj
from .kinematics import (
    Joint,
    KinematicTree,
    Link,
    forward_kinematics,
    insert_virtual_base,
    jacobian,
    load_robot_description,
    parse_robot_description,
)
from .akr import (
    AkrModel,
    GraspSpec,
    assemble_akr,
    compute_attachment,
    derive_collision_pairs,
    invert_tree,
    robot_base_pairs,
    scale_object_model,
)
from .collision import (
    CollisionReport,
    DistanceField,
    SphereSet,
    add_collision_spheres,
    build_distance_field,
    check_collision,
    fit_spheres,
    mask_phase,
    voxelize_mesh,
)
from .planner import (
    ClusterParams,
    ConstraintSet,
    GoalSpec,
    GraspCandidate,
    IkSolution,
    Limits,
    Trajectory,
    TrajectoryProblem,
    cluster_ik,
    optimize_trajectory,
    plan_grasp_switch,
    solve_ik,
    trajectory_cost,
)
from .validate import (
    EffortStats,
    ValidationReport,
    compute_effort_stats,
    validate_chain,
    validate_limits,
    validate_planar,
    validate_trajectory,
)
from .pipeline import (
    BatchStats,
    TaskSpec,
    load_task_spec,
    prepare_batch,
    run_batch,
)

__all__ = [name for name in dir() if not name.startswith("_")]
