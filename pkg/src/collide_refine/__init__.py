"""Multi-object 6D pose refinement via differentiable collision checking
on fused occupancy maps, with an ICP baseline, pose-agreement
accumulation and ADD/ADD-S evaluation on synthetic cluttered scenes."""

from .geometry import (
    Mesh,
    ObjectModel,
    Pose,
    Twist,
    compose,
    exp_update,
    invert,
    load_mesh,
    make_object_model,
    sample_model_points,
    sample_surface_points,
    save_mesh,
    transform_points,
)
from .voxelize import (
    GridSpec,
    OccupancyGrid,
    voxelize_occupancy,
    voxelize_occupancy_backward,
)
from .losses import (
    CollisionLossTerms,
    add_loss,
    adds_loss,
    collision_losses,
    confidence_weighted_loss,
    loss_schedule,
    total_scene_loss,
)
from .fusion import (
    FrameObservation,
    Intrinsics,
    SceneMap,
    SurroundGrids,
    backproject,
    load_scene_map,
    load_surround_grids,
    save_scene_map,
    save_surround_grids,
)
from .refine import (
    DivergenceError,
    IcpResult,
    ObjectHypothesis,
    RefineConfig,
    SceneHypothesis,
    icc_refine,
    icp_refine,
    refine_combined,
)
from .agreement import HypothesisBuffer, push_and_check, to_world
from .metrics import auc, evaluate_scene
from .scenegen import (
    CameraView,
    SceneSpec,
    generate_scene,
    perturb_poses,
    render_depth,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
