"""Shared domain types, validation, and numeric conventions.

Quaternions are stored (w, x, y, z). Scales are linear standard deviations
in meters. Bulk math runs in float32; reductions that need headroom
(weight sums, distance sums) accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

QUAT_UNIT_TOL = 1e-6
QUAT_FIX_TOL = 1e-3  # silently renormalize up to here, error beyond


class Frame(Enum):
    GLOBAL = "global"
    TRIANGLE_LOCAL = "triangle_local"


@dataclass
class GaussianSplat:
    """One anisotropic Gaussian primitive.

    A splat is "global" when ``binding`` is None and "triangle-local" when
    ``binding`` holds the host triangle index; there is no third state.
    """

    mu: np.ndarray                      # (3,) position
    rot: np.ndarray                     # (4,) unit quaternion (w,x,y,z)
    scale: np.ndarray                   # (3,) per-axis stddev, > 0
    opacity: float = 1.0                # in [0, 1]
    color: np.ndarray = None            # (3,) RGB in [0, 1]
    feature: Optional[np.ndarray] = None  # (2,) segmentation logits
    binding: Optional[int] = None       # host triangle index

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float32).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float32).reshape(3)
        if self.color is None:
            self.color = np.full(3, 0.5, dtype=np.float32)
        self.color = np.asarray(self.color, dtype=np.float32).reshape(3)
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=np.float32).reshape(2)
        self.opacity = float(self.opacity)


class SplatSet:
    """Ordered set of splats sharing one frame tag, stored column-wise.

    Index is identity: every operation that maps a set preserves order.
    Columns are float32 arrays; ``bindings`` exists only for
    triangle-local sets.
    """

    def __init__(self, mu, rot, scale, opacity, color,
                 feature=None, bindings=None, frame: Frame = Frame.GLOBAL):
        n = len(mu)
        self.mu = np.ascontiguousarray(mu, dtype=np.float32).reshape(n, 3)
        self.rot = np.ascontiguousarray(rot, dtype=np.float32).reshape(n, 4)
        self.scale = np.ascontiguousarray(scale, dtype=np.float32).reshape(n, 3)
        self.opacity = np.ascontiguousarray(opacity, dtype=np.float32).reshape(n)
        self.color = np.ascontiguousarray(color, dtype=np.float32).reshape(n, 3)
        self.feature = None
        if feature is not None:
            self.feature = np.ascontiguousarray(feature, dtype=np.float32).reshape(n, 2)
        self.bindings = None
        if bindings is not None:
            self.bindings = np.ascontiguousarray(bindings, dtype=np.int32).reshape(n)
        self.frame = frame
        if frame is Frame.TRIANGLE_LOCAL and self.bindings is None:
            raise ValueError("triangle-local splat set requires bindings")
        if frame is Frame.GLOBAL and self.bindings is not None:
            raise ValueError("global splat set must not carry bindings")

    @classmethod
    def from_splats(cls, splats: Sequence[GaussianSplat], frame: Frame = None) -> "SplatSet":
        if len(splats) == 0:
            raise ValueError("empty splat list")
        bound = [s.binding is not None for s in splats]
        if frame is None:
            frame = Frame.TRIANGLE_LOCAL if all(bound) else Frame.GLOBAL
        has_feature = all(s.feature is not None for s in splats)
        return cls(
            mu=np.stack([s.mu for s in splats]),
            rot=np.stack([s.rot for s in splats]),
            scale=np.stack([s.scale for s in splats]),
            opacity=np.array([s.opacity for s in splats]),
            color=np.stack([s.color for s in splats]),
            feature=np.stack([s.feature for s in splats]) if has_feature else None,
            bindings=np.array([s.binding for s in splats]) if frame is Frame.TRIANGLE_LOCAL else None,
            frame=frame,
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            mu=self.mu[i], rot=self.rot[i], scale=self.scale[i],
            opacity=float(self.opacity[i]), color=self.color[i],
            feature=None if self.feature is None else self.feature[i],
            binding=None if self.bindings is None else int(self.bindings[i]),
        )

    def copy(self) -> "SplatSet":
        return SplatSet(
            self.mu.copy(), self.rot.copy(), self.scale.copy(),
            self.opacity.copy(), self.color.copy(),
            None if self.feature is None else self.feature.copy(),
            None if self.bindings is None else self.bindings.copy(),
            self.frame,
        )

    def select(self, indices) -> "SplatSet":
        idx = np.asarray(indices)
        return SplatSet(
            self.mu[idx], self.rot[idx], self.scale[idx],
            self.opacity[idx], self.color[idx],
            None if self.feature is None else self.feature[idx],
            None if self.bindings is None else self.bindings[idx],
            self.frame,
        )


@dataclass
class SkinnedMesh:
    """Head surface with skinning data; collision target and kinematic driver.

    ``skin_weights`` is a dense (V, J) matrix whose rows sum to 1; build it
    from sparse (joint, weight) pairs with :meth:`from_pairs`. Faces wind
    counter-clockwise seen from outside.
    """

    vertices: np.ndarray                 # (V, 3) float32
    faces: np.ndarray                    # (F, 3) int32
    joints: list = field(default_factory=list)
    skin_weights: Optional[np.ndarray] = None  # (V, J) float32
    scalp_faces: Optional[np.ndarray] = None   # face indices

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.skin_weights is not None:
            self.skin_weights = np.ascontiguousarray(self.skin_weights, dtype=np.float32)
        if self.scalp_faces is not None:
            self.scalp_faces = np.asarray(self.scalp_faces, dtype=np.int32).reshape(-1)

    @classmethod
    def from_pairs(cls, vertices, faces, joints, weight_pairs, scalp_faces=None) -> "SkinnedMesh":
        """Build from per-vertex lists of (joint_index, weight) pairs."""
        v = np.asarray(vertices, dtype=np.float32)
        dense = np.zeros((len(v), len(joints)), dtype=np.float32)
        for i, pairs in enumerate(weight_pairs):
            for j, w in pairs:
                dense[i, int(j)] += w
        return cls(v, np.asarray(faces), list(joints), dense, scalp_faces)

    def weight_pairs(self) -> list:
        """Sparse (joint_index, weight) pairs per vertex, for serialization."""
        out = []
        for row in self.skin_weights:
            nz = np.nonzero(row)[0]
            out.append([(int(j), float(row[j])) for j in nz])
        return out

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


@dataclass
class MotionFrame:
    """One timestep of driving signal: joint transforms or explicit vertices.

    Exactly one of the two variants is populated. Joint transforms are 4x4
    rigid matrices (row-major rotation + translation) keyed by joint name.
    """

    joint_transforms: Optional[dict] = None   # name -> (4, 4)
    explicit_vertices: Optional[np.ndarray] = None  # (V, 3)

    def __post_init__(self):
        if (self.joint_transforms is None) == (self.explicit_vertices is None):
            raise ValueError("exactly one of joint_transforms / explicit_vertices must be set")
        if self.joint_transforms is not None:
            self.joint_transforms = {
                k: np.asarray(v, dtype=np.float64).reshape(4, 4)
                for k, v in self.joint_transforms.items()
            }
            for name, t in self.joint_transforms.items():
                r = t[:3, :3]
                if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
                    raise ValueError(f"joint '{name}' rotation is not orthonormal")
        else:
            self.explicit_vertices = np.asarray(self.explicit_vertices, dtype=np.float32).reshape(-1, 3)

    @classmethod
    def identity(cls, joints) -> "MotionFrame":
        return cls(joint_transforms={name: np.eye(4) for name in joints})


@dataclass
class SolverConfig:
    """Simulation parameters; defaults follow the engine's tuning notes.

    All values are config-file and CLI exposed. ``collision_margin`` is the
    tolerance band kept between proxies and the collision surface.
    """

    dt: float = 1.0 / 30.0
    substeps: int = 4
    iterations: int = 15
    gravity: np.ndarray = None            # (3,) m/s^2
    damping: float = 0.02                 # in [0, 1)
    stretch_compliance: float = 0.0
    bend_compliance: float = 0.0
    collision_margin: float = 0.002
    max_splats_warn: int = 200_000
    volume_constraint: bool = False       # optional global cage-volume term
    volume_compliance: float = 0.0

    def __post_init__(self):
        if self.gravity is None:
            self.gravity = np.array([0.0, 0.0, -9.8], dtype=np.float32)
        self.gravity = np.asarray(self.gravity, dtype=np.float32).reshape(3)
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must be in [0, 1)")
        if self.stretch_compliance < 0 or self.bend_compliance < 0:
            raise ValueError("compliances must be nonnegative")
        if self.collision_margin < 0:
            raise ValueError("collision_margin must be >= 0")

    def replace(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


# --- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    index: int
    rule: str

    def __str__(self):
        return f"splat {self.index}: {self.rule}"


def validate_splat_set(splats: SplatSet) -> list:
    """Check every splat invariant; returns a list of `Violation` reports.

    Pure reporting: never raises, never mutates, idempotent.
    """
    reports = []
    norms = np.linalg.norm(splats.rot.astype(np.float64), axis=1)
    for i in np.nonzero(np.abs(norms - 1.0) > QUAT_UNIT_TOL)[0]:
        reports.append(Violation(int(i), "non-unit quaternion"))
    for i in np.nonzero(~np.all(splats.scale > 0, axis=1))[0]:
        reports.append(Violation(int(i), "non-positive scale"))
    bad_op = (splats.opacity < 0) | (splats.opacity > 1)
    for i in np.nonzero(bad_op)[0]:
        reports.append(Violation(int(i), "opacity out of range"))
    bad_col = ~np.all((splats.color >= 0) & (splats.color <= 1), axis=1)
    for i in np.nonzero(bad_col)[0]:
        reports.append(Violation(int(i), "color out of range"))
    if splats.frame is Frame.TRIANGLE_LOCAL:
        if splats.bindings is None:
            reports.append(Violation(-1, "triangle-local set without bindings"))
        else:
            for i in np.nonzero(splats.bindings < 0)[0]:
                reports.append(Violation(int(i), "negative binding index"))
    elif splats.bindings is not None:
        reports.append(Violation(-1, "global set carries bindings"))
    return sorted(reports, key=lambda r: (r.index, r.rule))


# --- quaternions ------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > QUAT_FIX_TOL):
        raise ValueError("quaternion norm deviates from 1 by more than 1e-3")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) in (w,x,y,z) order to rotation matrix (..., 3, 3).

    Inputs within 1e-3 of unit norm are renormalized silently; anything
    farther is an error.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) to unit quaternion (..., 4), w >= 0.

    Shepperd's method, branching on the largest diagonal combination for
    stability; vectorized over leading axes.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    n = m.shape[0]
    q = np.empty((n, 4), dtype=np.float64)

    t = np.einsum("nii->n", m)
    c0 = t
    c1 = m[:, 0, 0]
    c2 = m[:, 1, 1]
    c3 = m[:, 2, 2]
    choice = np.argmax(np.stack([c0, c1, c2, c3]), axis=0)

    idx = choice == 0
    if np.any(idx):
        s = np.sqrt(t[idx] + 1.0) * 2
        q[idx, 0] = 0.25 * s
        q[idx, 1] = (m[idx, 2, 1] - m[idx, 1, 2]) / s
        q[idx, 2] = (m[idx, 0, 2] - m[idx, 2, 0]) / s
        q[idx, 3] = (m[idx, 1, 0] - m[idx, 0, 1]) / s
    idx = choice == 1
    if np.any(idx):
        s = np.sqrt(1.0 + m[idx, 0, 0] - m[idx, 1, 1] - m[idx, 2, 2]) * 2
        q[idx, 0] = (m[idx, 2, 1] - m[idx, 1, 2]) / s
        q[idx, 1] = 0.25 * s
        q[idx, 2] = (m[idx, 0, 1] + m[idx, 1, 0]) / s
        q[idx, 3] = (m[idx, 0, 2] + m[idx, 2, 0]) / s
    idx = choice == 2
    if np.any(idx):
        s = np.sqrt(1.0 + m[idx, 1, 1] - m[idx, 0, 0] - m[idx, 2, 2]) * 2
        q[idx, 0] = (m[idx, 0, 2] - m[idx, 2, 0]) / s
        q[idx, 1] = (m[idx, 0, 1] + m[idx, 1, 0]) / s
        q[idx, 2] = 0.25 * s
        q[idx, 3] = (m[idx, 1, 2] + m[idx, 2, 1]) / s
    idx = choice == 3
    if np.any(idx):
        s = np.sqrt(1.0 + m[idx, 2, 2] - m[idx, 0, 0] - m[idx, 1, 1]) * 2
        q[idx, 0] = (m[idx, 1, 0] - m[idx, 0, 1]) / s
        q[idx, 1] = (m[idx, 0, 2] + m[idx, 2, 0]) / s
        q[idx, 2] = (m[idx, 1, 2] + m[idx, 2, 1]) / s
        q[idx, 3] = 0.25 * s

    flip = q[:, 0] < 0
    q[flip] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])
