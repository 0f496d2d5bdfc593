"""Triangle-local rigging of splats to a skinned mesh, plus LBS posing.

A local splat lives in the frame of its host triangle: origin at the
centroid, columns [e1_hat, n_hat, e1_hat x n_hat], and an isotropic
deformation scale eta = (|e1| + perpendicular height of v2) / 2. The
frame is recomputed from posed vertices each frame, so splats follow the
mesh rigidly and rescale with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Frame, MotionFrame, SkinnedMesh, SplatSet, matrix_to_quat,
                   quat_multiply, quat_normalize)
from .bvh import MeshBvh

_DEGENERATE_AREA = 1e-12


@dataclass
class TriangleFrame:
    R: np.ndarray      # (3, 3) rotation, columns [e1_hat, n_hat, e1_hat x n_hat]
    t: np.ndarray      # (3,) centroid
    eta: float         # deformation scale, > 0


def triangle_frames(vertices, faces, face_indices=None):
    """Frames for all (or selected) faces of a posed mesh, batched.

    Returns (R (K,3,3), t (K,3), eta (K,)); raises on degenerate faces.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if face_indices is not None:
        faces = faces[np.asarray(face_indices, dtype=np.int64)]
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    e1 = v1 - v0
    n = np.cross(e1, v2 - v0)
    area2 = np.linalg.norm(n, axis=1)
    if np.any(area2 <= 2 * _DEGENERATE_AREA):
        bad = int(np.nonzero(area2 <= 2 * _DEGENERATE_AREA)[0][0])
        raise ValueError(f"degenerate face (index {bad} of selection)")
    len_e1 = np.linalg.norm(e1, axis=1)
    e1_hat = e1 / len_e1[:, None]
    n_hat = n / area2[:, None]
    R = np.stack([e1_hat, n_hat, np.cross(e1_hat, n_hat)], axis=2)
    t = (v0 + v1 + v2) / 3.0
    # height of v2 over e1: 2*area / |e1|
    width = area2 / len_e1
    eta = 0.5 * (len_e1 + width)
    return R, t, eta


def triangle_frame(mesh_or_vertices, face: int, faces=None) -> TriangleFrame:
    """Frame of one face; accepts a SkinnedMesh or (vertices, faces)."""
    if isinstance(mesh_or_vertices, SkinnedMesh):
        verts, f = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        verts, f = mesh_or_vertices, faces
    R, t, eta = triangle_frames(verts, f, [face])
    return TriangleFrame(R[0], t[0], float(eta[0]))


def _frame_quats(R):
    return matrix_to_quat(R)


def local_to_global(splats: SplatSet, vertices, faces) -> SplatSet:
    """Triangle-local splats to world space through their host frames."""
    if splats.frame is not Frame.TRIANGLE_LOCAL or splats.bindings is None:
        raise ValueError("local_to_global requires a triangle-local set with bindings")
    R, t, eta = triangle_frames(vertices, faces, splats.bindings)
    mu = eta[:, None] * np.einsum("nij,nj->ni", R, splats.mu.astype(np.float64)) + t
    rot = quat_multiply(_frame_quats(R), splats.rot.astype(np.float64))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    scale = eta[:, None] * splats.scale.astype(np.float64)
    return SplatSet(mu, rot, scale, splats.opacity, splats.color,
                    splats.feature, bindings=None, frame=Frame.GLOBAL)


def global_to_local(splats: SplatSet, vertices, faces, bindings) -> SplatSet:
    """Exact inverse of `local_to_global` for the given host triangles."""
    if splats.frame is not Frame.GLOBAL:
        raise ValueError("global_to_local requires a global set")
    bindings = np.asarray(bindings, dtype=np.int32).reshape(len(splats))
    R, t, eta = triangle_frames(vertices, faces, bindings)
    mu = np.einsum("nji,nj->ni", R, splats.mu.astype(np.float64) - t) / eta[:, None]
    q_frame = _frame_quats(R)
    q_inv = q_frame * np.array([1.0, -1.0, -1.0, -1.0])
    rot = quat_multiply(q_inv, splats.rot.astype(np.float64))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    scale = splats.scale.astype(np.float64) / eta[:, None]
    return SplatSet(mu, rot, scale, splats.opacity, splats.color,
                    splats.feature, bindings=bindings, frame=Frame.TRIANGLE_LOCAL)


def splat_local_to_global(splat, frame: TriangleFrame):
    """Single-splat variant of `local_to_global` against an explicit frame."""
    from .core import GaussianSplat
    if splat.binding is None:
        raise ValueError("splat has no binding")
    mu = frame.eta * frame.R @ splat.mu.astype(np.float64) + frame.t
    rot = quat_multiply(matrix_to_quat(frame.R), quat_normalize(splat.rot))
    return GaussianSplat(mu=mu, rot=rot / np.linalg.norm(rot),
                         scale=frame.eta * splat.scale.astype(np.float64),
                         opacity=splat.opacity, color=splat.color,
                         feature=splat.feature, binding=splat.binding)


def splat_global_to_local(splat, frame: TriangleFrame, binding: int):
    from .core import GaussianSplat
    mu = frame.R.T @ (splat.mu.astype(np.float64) - frame.t) / frame.eta
    q_inv = matrix_to_quat(frame.R) * np.array([1.0, -1.0, -1.0, -1.0])
    rot = quat_multiply(q_inv, quat_normalize(splat.rot))
    return GaussianSplat(mu=mu, rot=rot / np.linalg.norm(rot),
                         scale=splat.scale.astype(np.float64) / frame.eta,
                         opacity=splat.opacity, color=splat.color,
                         feature=splat.feature, binding=int(binding))


def bind_nearest(splats: SplatSet, mesh: SkinnedMesh, mesh_bvh: MeshBvh = None) -> SplatSet:
    """Bind each global splat to its closest mesh triangle and localize it.

    Closest means closest surface point; exact ties go to the lower face
    index.
    """
    if mesh.n_faces == 0:
        raise ValueError("empty mesh")
    if splats.frame is not Frame.GLOBAL:
        raise ValueError("bind_nearest expects a global set")
    if mesh_bvh is None:
        mesh_bvh = MeshBvh(mesh.vertices, mesh.faces, require_watertight=False)
    face_ids, _, _ = mesh_bvh.closest_faces(splats.mu)
    return global_to_local(splats, mesh.vertices, mesh.faces, face_ids)


def lbs_pose(mesh: SkinnedMesh, motion: MotionFrame) -> np.ndarray:
    """Posed vertex positions (V, 3) float32.

    Joint-transform frames blend rigid transforms with the mesh skinning
    weights; explicit-vertex frames pass through verbatim.
    """
    if motion.explicit_vertices is not None:
        v = motion.explicit_vertices
        if v.shape[0] != mesh.n_vertices:
            raise ValueError(
                f"explicit vertex count {v.shape[0]} != mesh vertex count {mesh.n_vertices}")
        return v.astype(np.float32)

    if mesh.skin_weights is None:
        raise ValueError("mesh has no skinning weights")
    missing = [j for j in mesh.joints if j not in motion.joint_transforms]
    if missing:
        raise ValueError(f"motion frame missing joints: {', '.join(missing)}")
    rest = mesh.vertices.astype(np.float64)
    out = np.zeros_like(rest)
    for j, name in enumerate(mesh.joints):
        w = mesh.skin_weights[:, j].astype(np.float64)
        if not np.any(w):
            continue
        T = motion.joint_transforms[name]
        moved = rest @ T[:3, :3].T + T[:3, 3]
        out += w[:, None] * moved
    return out.astype(np.float32)


def blend_joint_transform(mesh: SkinnedMesh, motion: MotionFrame, weights) -> np.ndarray:
    """Weighted LBS 4x4 for arbitrary per-joint weights (rows of points).

    Used to transport anchored points with the same blend as the surface
    they sit on. `weights` is (K, J); returns (K, 4, 4).
    """
    w = np.asarray(weights, dtype=np.float64)
    out = np.zeros((w.shape[0], 4, 4), dtype=np.float64)
    for j, name in enumerate(mesh.joints):
        col = w[:, j]
        if not np.any(col):
            continue
        out += col[:, None, None] * motion.joint_transforms[name]
    return out
