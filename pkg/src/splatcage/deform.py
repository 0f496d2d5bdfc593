"""The 7-point splat representation and principal-axis deformation.

Each splat is tracked by its center and six axis endpoints. After the
tracked points move, only the principal (longest) axis drives the update:
new center = midpoint of its endpoints, rotation = minimal rotation of
the axis direction, scale = one axis-length ratio applied to all three
components. The principal axis is chosen once from the source and never
re-picked, so frames cannot pop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame, GaussianSplat, SplatSet, quat_multiply, quat_to_matrix

_AXIS_EPS = 1e-9
_ANTIPODAL_EPS = 1e-6


@dataclass
class SplatEndpoints:
    """Center plus axis endpoints ordered (x+, x-, y+, y-, z+, z-)."""

    center: np.ndarray        # (3,)
    axis_ends: np.ndarray     # (6, 3)
    principal_axis: int       # 0, 1, or 2

    def points(self) -> np.ndarray:
        return np.vstack([self.center[None, :], self.axis_ends])


def splat_endpoints(splats: SplatSet) -> np.ndarray:
    """Tracked points for every splat, (N, 7, 3) float32.

    Row order per splat: center, x+, x-, y+, y-, z+, z-.
    """
    mu = splats.mu.astype(np.float64)
    R = quat_to_matrix(splats.rot)            # (N, 3, 3)
    arms = R * splats.scale.astype(np.float64)[:, None, :]  # column i scaled by s_i
    pts = np.empty((len(splats), 7, 3), dtype=np.float64)
    pts[:, 0] = mu
    for axis in range(3):
        pts[:, 1 + 2 * axis] = mu + arms[:, :, axis]
        pts[:, 2 + 2 * axis] = mu - arms[:, :, axis]
    return pts.astype(np.float32)


def principal_axes(splats: SplatSet) -> np.ndarray:
    """Longest-axis index per splat; ties break to x before y before z."""
    return np.argmax(splats.scale, axis=1).astype(np.int8)


def endpoints(splat: GaussianSplat) -> SplatEndpoints:
    """Tracked points of one splat in global space."""
    one = SplatSet(splat.mu[None], splat.rot[None], splat.scale[None],
                   [splat.opacity], splat.color[None])
    pts = splat_endpoints(one)[0]
    return SplatEndpoints(center=pts[0], axis_ends=pts[1:],
                          principal_axis=int(principal_axes(one)[0]))


@dataclass
class _SourceCache:
    """Per-splat source quantities reused every frame by reconstruction."""

    principal: np.ndarray     # (N,) axis index
    u_src: np.ndarray         # (N, 3) unit principal direction
    len_src: np.ndarray       # (N,) principal endpoint separation
    fallback_axis: np.ndarray  # (N, 3) second-longest axis direction


def _source_cache(splats: SplatSet) -> _SourceCache:
    prin = principal_axes(splats).astype(np.int64)
    R = quat_to_matrix(splats.rot)
    n = len(splats)
    u = R[np.arange(n), :, prin]
    lengths = 2.0 * splats.scale[np.arange(n), prin].astype(np.float64)
    order = np.argsort(-splats.scale, axis=1, kind="stable")
    second = order[:, 1]
    fallback = R[np.arange(n), :, second]
    return _SourceCache(prin, u, lengths, fallback)


def _delta_rotation_quats(u_src, u_dst, fallback_axis):
    """Minimal rotation quaternions taking each u_src to u_dst.

    Antipodal pairs rotate 180 degrees about the splat's second-longest
    axis so the choice is deterministic.
    """
    c = np.einsum("ni,ni->n", u_src, u_dst)
    axis = np.cross(u_src, u_dst)
    s = np.linalg.norm(axis, axis=1)
    q = np.empty((len(u_src), 4), dtype=np.float64)
    regular = s > _ANTIPODAL_EPS
    if np.any(regular):
        ang = np.arctan2(s[regular], c[regular])
        ax = axis[regular] / s[regular, None]
        q[regular, 0] = np.cos(0.5 * ang)
        q[regular, 1:] = np.sin(0.5 * ang)[:, None] * ax
    aligned = (~regular) & (c >= 0)
    q[aligned] = np.array([1.0, 0.0, 0.0, 0.0])
    flipped = (~regular) & (c < 0)
    if np.any(flipped):
        q[flipped, 0] = 0.0
        q[flipped, 1:] = fallback_axis[flipped]
        q[flipped] /= np.linalg.norm(q[flipped], axis=1, keepdims=True)
    return q


def _reconstruct_batch(splats: SplatSet, cache: _SourceCache,
                       deformed_pts: np.ndarray) -> SplatSet:
    """Deformed splat set from deformed tracked points (N, 7, 3)."""
    n = len(splats)
    idx = np.arange(n)
    plus = deformed_pts[idx, 1 + 2 * cache.principal].astype(np.float64)
    minus = deformed_pts[idx, 2 + 2 * cache.principal].astype(np.float64)
    mu = 0.5 * (plus + minus)

    diff = plus - minus
    len_dst = np.linalg.norm(diff, axis=1)
    degenerate = len_dst < _AXIS_EPS
    safe_len = np.where(degenerate, 1.0, len_dst)
    u_dst = diff / safe_len[:, None]
    u_dst[degenerate] = cache.u_src[degenerate]  # keep orientation, mute below

    dq = _delta_rotation_quats(cache.u_src, u_dst, cache.fallback_axis)
    rot = quat_multiply(dq, splats.rot.astype(np.float64))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)

    ratio = np.where(degenerate, 1.0, len_dst / cache.len_src)
    scale = splats.scale.astype(np.float64) * ratio[:, None]
    opacity = np.where(degenerate, 0.0, splats.opacity)
    return SplatSet(mu, rot, scale, opacity, splats.color, splats.feature,
                    bindings=None, frame=Frame.GLOBAL)


def reconstruct(splat: GaussianSplat, source: SplatEndpoints,
                deformed_points: np.ndarray) -> GaussianSplat:
    """Single-splat deformation from its 7 deformed tracked points.

    Degenerate deformed axes (length < 1e-9) keep the source pose but come
    back with opacity 0 so the frame can render without popping artifacts.
    """
    if 2.0 * float(np.max(splat.scale)) < _AXIS_EPS:
        raise ValueError("source principal axis length below 1e-9")
    one = SplatSet(splat.mu[None], splat.rot[None], splat.scale[None],
                   [splat.opacity], splat.color[None],
                   None if splat.feature is None else splat.feature[None])
    cache = _source_cache(one)
    pts = np.asarray(deformed_points, dtype=np.float64).reshape(1, 7, 3)
    return _reconstruct_batch(one, cache, pts)[0]


def deform_set(hair: SplatSet, weights, deformed_cage_vertices) -> SplatSet:
    """Full cage-driven deformation: move tracked points, rebuild splats."""
    from .mvc import apply_cage
    if weights.n_splats != len(hair):
        raise ValueError("weights were baked for a different splat count")
    pts = apply_cage(weights, deformed_cage_vertices)
    return _reconstruct_batch(hair, _source_cache(hair), pts)
