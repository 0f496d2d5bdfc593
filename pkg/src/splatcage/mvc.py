"""Mean value coordinates for closed triangle cages.

Weights are computed once against the rest cage with the robust
spherical-triangle formulation (vertex snap, on-face barycentric
fallback, coplanar-triangle skip) and reused verbatim on deformed cage
vertices. Each splat contributes 7 tracked points: center plus the six
axis endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .core import SplatSet

POINTS_PER_SPLAT = 7

_VERTEX_SNAP = 1e-8     # times cage diameter
_ON_FACE_EPS = 1e-12    # pi - h below this means the point sits on the face
_COPLANAR_EPS = 1e-10   # spherical-triangle determinant cutoff
_SURFACE_SLACK = 1e-7   # times diameter; beyond this outside is an error


class ExteriorPointError(ValueError):
    def __init__(self, msg, indices=None):
        super().__init__(msg)
        self.indices = indices


@dataclass
class MvcWeights:
    """Dense weight tensor mapping cage vertices to splat tracked points."""

    weights: np.ndarray      # (N, 7, M) float32

    @property
    def n_splats(self) -> int:
        return self.weights.shape[0]

    @property
    def n_points_per_splat(self) -> int:
        return self.weights.shape[1]

    @property
    def n_cage_verts(self) -> int:
        return self.weights.shape[2]

    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1, self.weights.shape[2])

    def truncated(self, eps: float = 1e-7) -> "MvcWeights":
        """Zero out |w| < eps and renormalize rows to keep partition of unity."""
        w = self.weights.copy()
        w[np.abs(w) < eps] = 0.0
        sums = w.sum(axis=2, dtype=np.float64)  # stays near 1 for valid rows
        w = (w / sums[:, :, None]).astype(np.float32)
        return MvcWeights(w)


@dataclass
class ProxyBinding:
    """Collision stand-in for one cage vertex: its nearest splat's center row."""

    source_splat: int
    weight_row: np.ndarray   # (M,) float32


def _cage_arrays(cage):
    if isinstance(cage, tuple):
        verts, faces = cage
    else:
        verts, faces = cage.vertices, cage.faces
    return (np.ascontiguousarray(verts, dtype=np.float64).reshape(-1, 3),
            np.ascontiguousarray(faces, dtype=np.int32).reshape(-1, 3))


def _cage_bvh(cage, verts, faces):
    if not isinstance(cage, tuple) and hasattr(cage, "bvh"):
        return cage.bvh()
    from .bvh import MeshBvh
    return MeshBvh(verts, faces)


def cage_diameter(verts: np.ndarray) -> float:
    return float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))


def mvc_weights_point(x, cage) -> np.ndarray:
    """Length-M MVC weight vector of one point strictly inside the cage.

    Points on the surface get the barycentric weights of the containing
    feature; points outside raise ExteriorPointError.
    """
    verts, faces = _cage_arrays(cage)
    diam = cage_diameter(verts)
    x = np.asarray(x, dtype=np.float64).reshape(3)
    sd, _, _ = _cage_bvh(cage, verts, faces).signed_distance(x)
    if sd > _SURFACE_SLACK * diam:
        raise ExteriorPointError(f"exterior point (signed distance {sd:.3g})")
    out = np.empty(len(verts), dtype=np.float64)
    status = _mvc_point(verts, faces, x[0], x[1], x[2], _VERTEX_SNAP * diam, out)
    if status != 0:
        raise ExteriorPointError("degenerate MVC weight sum (point outside or on a fold)")
    return out


def mvc_weights_points(points, cage, check_interior: bool = True) -> np.ndarray:
    """Batched weights, (P, M) float64; raises listing offending indices."""
    verts, faces = _cage_arrays(cage)
    diam = cage_diameter(verts)
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if check_interior:
        sd, _, _ = _cage_bvh(cage, verts, faces).signed_distance(pts)
        bad = np.nonzero(sd > _SURFACE_SLACK * diam)[0]
        if len(bad):
            raise ExteriorPointError(
                f"{len(bad)} points outside the cage (first: {bad[:8].tolist()})",
                indices=bad)
    out = np.empty((len(pts), len(verts)), dtype=np.float64)
    status = np.empty(len(pts), dtype=np.int32)
    _mvc_batch(verts, faces, pts, _VERTEX_SNAP * diam, out, status)
    bad = np.nonzero(status != 0)[0]
    if len(bad):
        raise ExteriorPointError(
            f"{len(bad)} points with degenerate weight sums (first: {bad[:8].tolist()})",
            indices=bad)
    return out


def bake_weights(hair: SplatSet, cage) -> MvcWeights:
    """MVC rows for the 7 tracked points of every hair splat.

    Deterministic given input order; errors list the splat indices whose
    endpoints fall outside the cage so the caller can re-dilate.
    """
    from .deform import splat_endpoints
    pts = splat_endpoints(hair).reshape(-1, 3)
    try:
        rows = mvc_weights_points(pts, cage)
    except ExteriorPointError as e:
        if e.indices is None:
            raise
        splat_idx = sorted(set(int(i) // POINTS_PER_SPLAT for i in e.indices))
        raise ExteriorPointError(
            f"endpoints of {len(splat_idx)} splats outside the cage "
            f"(first splats: {splat_idx[:8]}); increase dilation or voxel size",
            indices=np.asarray(splat_idx)) from None
    n = len(hair)
    return MvcWeights(rows.reshape(n, POINTS_PER_SPLAT, -1).astype(np.float32))


def apply_cage(weights, deformed_vertices) -> np.ndarray:
    """Deformed positions from fixed weights: x_d = sum_m w_m * c_d,m.

    Accepts an MvcWeights (returns (N, 7, 3)), a single row (returns (3,)),
    or a (K, M) stack (returns (K, 3)).
    """
    cage_pos = np.ascontiguousarray(deformed_vertices, dtype=np.float32)
    if isinstance(weights, MvcWeights):
        w = weights.flat()
        if w.shape[1] != cage_pos.shape[0]:
            raise ValueError(
                f"cage vertex count {cage_pos.shape[0]} != weight columns {w.shape[1]}")
        out = w @ cage_pos
        return out.reshape(weights.n_splats, weights.n_points_per_splat, 3)
    w = np.asarray(weights, dtype=np.float32)
    if w.shape[-1] != cage_pos.shape[0]:
        raise ValueError(
            f"cage vertex count {cage_pos.shape[0]} != weight columns {w.shape[-1]}")
    return w @ cage_pos


def bind_proxies(cage, hair: SplatSet, weights: MvcWeights) -> list:
    """One ProxyBinding per cage vertex: nearest splat center's MVC row.

    The proxy of vertex j later evaluates as weight_row @ predicted cage
    positions, i.e. where that splat's center would land.
    """
    if len(hair) == 0:
        raise ValueError("empty hair set")
    verts, _ = _cage_arrays(cage)
    if weights.n_splats != len(hair):
        raise ValueError("weights were baked for a different splat count")
    tree = cKDTree(hair.mu.astype(np.float64))
    dist, idx = tree.query(verts)
    out = []
    for j in range(len(verts)):
        # exact ties resolve to the lowest splat index
        ties = tree.query_ball_point(verts[j], dist[j] * (1 + 1e-12) + 1e-15)
        src = min(ties) if ties else int(idx[j])
        out.append(ProxyBinding(int(src), weights.weights[src, 0, :].copy()))
    return out


def proxy_weight_matrix(proxies) -> np.ndarray:
    """(J, M) float32 stack of proxy rows, for the solver kernel."""
    return np.ascontiguousarray(np.stack([p.weight_row for p in proxies]), dtype=np.float32)


# --- kernels ----------------------------------------------------------------

@njit(cache=True)
def _mvc_point(verts, faces, px, py, pz, snap, out):
    """Robust MVC of one point; fills `out`, returns 0 on success."""
    m = verts.shape[0]
    d = np.empty(m, dtype=np.float64)
    u = np.empty((m, 3), dtype=np.float64)
    for j in range(m):
        ux = verts[j, 0] - px
        uy = verts[j, 1] - py
        uz = verts[j, 2] - pz
        dj = np.sqrt(ux * ux + uy * uy + uz * uz)
        if dj < snap:
            for k in range(m):
                out[k] = 0.0
            out[j] = 1.0
            return 0
        d[j] = dj
        u[j, 0] = ux / dj
        u[j, 1] = uy / dj
        u[j, 2] = uz / dj

    for k in range(m):
        out[k] = 0.0
    total = 0.0
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        l0 = _dist3(u, i1, i2)
        l1 = _dist3(u, i2, i0)
        l2 = _dist3(u, i0, i1)
        t0 = 2.0 * np.arcsin(min(1.0, 0.5 * l0))
        t1 = 2.0 * np.arcsin(min(1.0, 0.5 * l1))
        t2 = 2.0 * np.arcsin(min(1.0, 0.5 * l2))
        h = 0.5 * (t0 + t1 + t2)
        if np.pi - h < _ON_FACE_EPS:
            # the point lies on this face: plain 2D barycentric weights
            w0 = np.sin(t0) * d[i1] * d[i2]
            w1 = np.sin(t1) * d[i2] * d[i0]
            w2 = np.sin(t2) * d[i0] * d[i1]
            s = w0 + w1 + w2
            for k in range(m):
                out[k] = 0.0
            out[i0] = w0 / s
            out[i1] = w1 / s
            out[i2] = w2 / s
            return 0
        det = (u[i0, 0] * (u[i1, 1] * u[i2, 2] - u[i1, 2] * u[i2, 1])
               - u[i0, 1] * (u[i1, 0] * u[i2, 2] - u[i1, 2] * u[i2, 0])
               + u[i0, 2] * (u[i1, 0] * u[i2, 1] - u[i1, 1] * u[i2, 0]))
        if abs(det) < _COPLANAR_EPS:
            continue
        sin_h = np.sin(h)
        st0 = np.sin(t0)
        st1 = np.sin(t1)
        st2 = np.sin(t2)
        c0 = 2.0 * sin_h * np.sin(h - t0) / (st1 * st2) - 1.0
        c1 = 2.0 * sin_h * np.sin(h - t1) / (st2 * st0) - 1.0
        c2 = 2.0 * sin_h * np.sin(h - t2) / (st0 * st1) - 1.0
        c0 = min(1.0, max(-1.0, c0))
        c1 = min(1.0, max(-1.0, c1))
        c2 = min(1.0, max(-1.0, c2))
        sgn = 1.0 if det > 0.0 else -1.0
        s0 = sgn * np.sqrt(max(0.0, 1.0 - c0 * c0))
        s1 = sgn * np.sqrt(max(0.0, 1.0 - c1 * c1))
        s2 = sgn * np.sqrt(max(0.0, 1.0 - c2 * c2))
        if abs(s0) < _COPLANAR_EPS or abs(s1) < _COPLANAR_EPS or abs(s2) < _COPLANAR_EPS:
            continue
        w0 = (t0 - c1 * t2 - c2 * t1) / (d[i0] * st1 * s2)
        w1 = (t1 - c2 * t0 - c0 * t2) / (d[i1] * st2 * s0)
        w2 = (t2 - c0 * t1 - c1 * t0) / (d[i2] * st0 * s1)
        out[i0] += w0
        out[i1] += w1
        out[i2] += w2
        total += w0 + w1 + w2

    if abs(total) < 1e-12:
        return 1
    inv = 1.0 / total
    for k in range(m):
        out[k] *= inv
    return 0


@njit(cache=True, inline="always")
def _dist3(u, a, b):
    dx = u[a, 0] - u[b, 0]
    dy = u[a, 1] - u[b, 1]
    dz = u[a, 2] - u[b, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True, parallel=True)
def _mvc_batch(verts, faces, points, snap, out, status):
    for p in prange(points.shape[0]):
        status[p] = _mvc_point(verts, faces, points[p, 0], points[p, 1],
                               points[p, 2], snap, out[p])
