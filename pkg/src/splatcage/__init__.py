"""Cage-driven dynamics for 3D Gaussian splat hair.

A coarse watertight cage encloses the hair splats; position-based
dynamics moves the cage (roots pinned to the scalp by skinning, proxies
standing in for the splats during collision), and mean value coordinates
carry the motion back to every splat through its center and axis
endpoints. A rigged bald splat set rides the skinned head mesh directly.
"""

from .core import (Frame, GaussianSplat, MotionFrame, SkinnedMesh, SolverConfig,
                   SplatSet, matrix_to_quat, quat_from_axis_angle, quat_multiply,
                   quat_to_matrix, validate_splat_set)
from .bvh import MeshBvh, NonWatertightMeshError
from .rig import (TriangleFrame, bind_nearest, global_to_local, lbs_pose,
                  local_to_global, triangle_frame)
from .mvc import (ExteriorPointError, MvcWeights, ProxyBinding, apply_cage,
                  bake_weights, bind_proxies, mvc_weights_point, mvc_weights_points)
from .cage import (Cage, DecimationWarning, VoxelGrid, build_cage, decimate,
                   extract_surface, mark_roots, voxelize)
from .solver import (ConstraintSet, SolverState, build_constraints,
                     collision_penalty, predict, project_constraints,
                     update_velocities)
from .deform import SplatEndpoints, deform_set, endpoints, reconstruct, splat_endpoints
from .decompose import ReassignConfig, chamfer, reassign, split_boundary
from .engine import (Camera, Scene, SequenceReport, Simulation, concat_splatsets,
                     preview_project, run_sequence, step_frame)

__version__ = "0.1.0"

__all__ = [
    "Frame", "GaussianSplat", "MotionFrame", "SkinnedMesh", "SolverConfig",
    "SplatSet", "matrix_to_quat", "quat_from_axis_angle", "quat_multiply",
    "quat_to_matrix", "validate_splat_set",
    "MeshBvh", "NonWatertightMeshError",
    "TriangleFrame", "bind_nearest", "global_to_local", "lbs_pose",
    "local_to_global", "triangle_frame",
    "ExteriorPointError", "MvcWeights", "ProxyBinding", "apply_cage",
    "bake_weights", "bind_proxies", "mvc_weights_point", "mvc_weights_points",
    "Cage", "DecimationWarning", "VoxelGrid", "build_cage", "decimate",
    "extract_surface", "mark_roots", "voxelize",
    "ConstraintSet", "SolverState", "build_constraints", "collision_penalty",
    "predict", "project_constraints", "update_velocities",
    "SplatEndpoints", "deform_set", "endpoints", "reconstruct", "splat_endpoints",
    "ReassignConfig", "chamfer", "reassign", "split_boundary",
    "Camera", "Scene", "SequenceReport", "Simulation", "concat_splatsets",
    "preview_project", "run_sequence", "step_frame",
]
