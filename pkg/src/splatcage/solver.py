"""Position-based dynamics on cage vertices.

Each substep: semi-implicit prediction, Gauss-Seidel constraint
projection in a fixed order (stretch, bend, optional volume, collision),
then finite-difference velocity update. Stretch and bend use XPBD
compliance so stiffness is independent of the iteration count; collision
is a hard positional clamp evaluated at proxy points (or directly at the
vertices when no proxies are given).

Projection runs inside one compiled kernel; collision queries within a
sweep are batched from a snapshot of the predicted positions and the
corrections applied per vertex afterwards, which is identical to applying
them one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit, prange

from .bvh import MeshBvh, _signed_distance_one
from .cage import Cage
from .core import SolverConfig

_EMPTY_F32_2D = np.zeros((0, 0), dtype=np.float32)


@dataclass
class ConstraintSet:
    """Stretch and bend constraints derived from the cage rest pose."""

    edges: np.ndarray              # (E, 2) int32
    rest_lengths: np.ndarray       # (E,) float32
    stretch_compliance: np.ndarray  # (E,) float32
    bend_quads: np.ndarray         # (B, 4) int32: edge v1, v2, opposite v3, v4
    rest_angles: np.ndarray        # (B,) float32 dihedral
    bend_compliance: np.ndarray    # (B,) float32
    collision_margin: float
    volume_faces: np.ndarray       # (F, 3) int32 (used only if volume enabled)
    rest_volume: float
    volume_enabled: bool
    volume_compliance: float

    @property
    def n_stretch(self) -> int:
        return len(self.edges)

    @property
    def n_bend(self) -> int:
        return len(self.bend_quads)


@dataclass
class SolverState:
    """Mutable particle state; kinematic vertices have inv_mass 0."""

    positions: np.ndarray     # (M, 3) float32, current
    velocities: np.ndarray    # (M, 3) float32
    predicted: np.ndarray     # (M, 3) float32
    inv_mass: np.ndarray      # (M,) float32
    lambda_stretch: np.ndarray
    lambda_bend: np.ndarray
    lambda_volume: np.ndarray
    time: float = 0.0

    @classmethod
    def from_cage(cls, cage: Cage, constraints: ConstraintSet) -> "SolverState":
        return cls(
            positions=cage.vertices.astype(np.float32).copy(),
            velocities=cage.velocities.astype(np.float32).copy(),
            predicted=cage.vertices.astype(np.float32).copy(),
            inv_mass=cage.inv_mass.astype(np.float32).copy(),
            lambda_stretch=np.zeros(constraints.n_stretch, dtype=np.float32),
            lambda_bend=np.zeros(constraints.n_bend, dtype=np.float32),
            lambda_volume=np.zeros(1, dtype=np.float32),
        )

    def reset_lambdas(self):
        self.lambda_stretch[:] = 0
        self.lambda_bend[:] = 0
        self.lambda_volume[:] = 0


def build_constraints(cage: Cage, config: SolverConfig) -> ConstraintSet:
    """One stretch constraint per unique edge, one bend per interior edge.

    A watertight cage has every edge interior, so both lists run over the
    same edges; quads are (edge v1, v2, opposite of lower face, opposite of
    higher face). Rest quantities come from the cage rest pose through the
    same arithmetic the projection kernel uses.
    """
    from .bvh import edge_topology, signed_volume
    edges, face_edge_ids = edge_topology(cage.faces)
    pos = cage.vertices.astype(np.float32)
    rest_len = _edge_lengths(pos, edges.astype(np.int32))

    # map edge -> its two faces (lower face first)
    n_edges = len(edges)
    efaces = np.full((n_edges, 2), -1, dtype=np.int64)
    for f in range(len(cage.faces)):
        for k in range(3):
            e = face_edge_ids[f, k]
            if efaces[e, 0] < 0:
                efaces[e, 0] = f
            else:
                efaces[e, 1] = f
    quads = np.empty((n_edges, 4), dtype=np.int32)
    for e in range(n_edges):
        v1, v2 = edges[e]
        f1, f2 = efaces[e]
        others1 = [v for v in cage.faces[f1] if v != v1 and v != v2]
        others2 = [v for v in cage.faces[f2] if v != v1 and v != v2]
        quads[e] = (v1, v2, others1[0], others2[0])
    rest_ang = _dihedral_angles(pos, quads)

    return ConstraintSet(
        edges=edges.astype(np.int32),
        rest_lengths=rest_len,
        stretch_compliance=np.full(n_edges, config.stretch_compliance, dtype=np.float32),
        bend_quads=quads,
        rest_angles=rest_ang,
        bend_compliance=np.full(n_edges, config.bend_compliance, dtype=np.float32),
        collision_margin=config.collision_margin,
        volume_faces=cage.faces.astype(np.int32),
        rest_volume=signed_volume(cage.vertices, cage.faces),
        volume_enabled=config.volume_constraint,
        volume_compliance=config.volume_compliance,
    )


def predict(state: SolverState, config: SolverConfig, dt: float,
            kinematic_targets: Optional[np.ndarray] = None) -> np.ndarray:
    """Semi-implicit Euler prediction; kinematic vertices go to their targets.

    Free: v <- (1 - damping) * (v + dt * inv_mass * g); p <- c + dt * v.
    Kinematic: p <- target, v <- (target - c) / dt (target defaults to the
    current position, i.e. a resting driver).
    """
    free = state.inv_mass > 0
    g = config.gravity.astype(np.float32)
    dt32 = np.float32(dt)
    v = state.velocities
    v[free] = np.float32(1.0 - config.damping) * (
        v[free] + dt32 * state.inv_mass[free, None] * g[None, :])
    state.predicted[free] = state.positions[free] + dt32 * v[free]

    kin = ~free
    if np.any(kin):
        if kinematic_targets is None:
            targets = state.positions[kin]
        else:
            targets = np.asarray(kinematic_targets, dtype=np.float32).reshape(-1, 3)
        state.predicted[kin] = targets
        v[kin] = (targets - state.positions[kin]) / dt32
    return state.predicted


def project_constraints(state: SolverState, constraints: ConstraintSet,
                        mesh_bvh: Optional[MeshBvh] = None,
                        proxies=None, iterations: int = 15,
                        dt: float = 1.0 / 30.0) -> np.ndarray:
    """Gauss-Seidel projection of the predicted positions, in place.

    `proxies` is a list of ProxyBinding or a prebuilt (J, M) row matrix;
    with a mesh BVH but no proxies, collision tests the cage vertices
    directly. Kinematic positions are never modified.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    collision_mode = 0
    proxy_w = _EMPTY_F32_2D
    if mesh_bvh is not None:
        if proxies is not None:
            from .mvc import proxy_weight_matrix
            proxy_w = proxies if isinstance(proxies, np.ndarray) else proxy_weight_matrix(proxies)
            proxy_w = np.ascontiguousarray(proxy_w, dtype=np.float32)
            if proxy_w.shape != (len(state.positions), len(state.positions)):
                raise ValueError("proxy matrix must be (cage verts, cage verts)")
            collision_mode = 1
        else:
            collision_mode = 2
        bvh_args = mesh_bvh._kernel_args()
    else:
        bvh_args = _dummy_bvh_args()

    _project_kernel(
        state.predicted, state.inv_mass,
        constraints.edges, constraints.rest_lengths,
        constraints.stretch_compliance, state.lambda_stretch,
        constraints.bend_quads, constraints.rest_angles,
        constraints.bend_compliance, state.lambda_bend,
        constraints.volume_faces, 1 if constraints.volume_enabled else 0,
        np.float64(constraints.rest_volume), np.float32(constraints.volume_compliance),
        state.lambda_volume,
        proxy_w, collision_mode, np.float64(constraints.collision_margin),
        bvh_args, iterations, np.float64(dt))
    return state.predicted


def update_velocities(state: SolverState, dt: float) -> SolverState:
    """Finite-difference velocity update and time advance."""
    free = state.inv_mass > 0
    dt32 = np.float32(dt)
    state.velocities[free] = (state.predicted[free] - state.positions[free]) / dt32
    state.positions[:] = state.predicted
    state.time += dt
    return state


def collision_penalty(points, mesh_bvh: MeshBvh, margin: float) -> float:
    """Sum of squared margin violations: sum max(0, eps - sd)^2."""
    sd, _, _ = mesh_bvh.signed_distance(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    gap = np.maximum(0.0, margin - sd)
    return float(np.sum(gap.astype(np.float64) ** 2))


def _dummy_bvh_args():
    z3 = np.zeros((0, 3), dtype=np.float64)
    zi = np.zeros(0, dtype=np.int32)
    return (z3, z3, zi, zi, zi, zi, zi,
            np.zeros((0, 3, 3), dtype=np.float64),
            np.zeros((0, 3), dtype=np.int32),
            np.zeros((0, 3), dtype=np.int32),
            z3, z3, z3)


# --- kernels ----------------------------------------------------------------

@njit(cache=True)
def _edge_lengths(pos, edges):
    out = np.empty(len(edges), dtype=np.float32)
    for e in range(len(edges)):
        i, j = edges[e, 0], edges[e, 1]
        dx = np.float64(pos[i, 0]) - np.float64(pos[j, 0])
        dy = np.float64(pos[i, 1]) - np.float64(pos[j, 1])
        dz = np.float64(pos[i, 2]) - np.float64(pos[j, 2])
        out[e] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return out


@njit(cache=True)
def _cos_dihedral(pos, i1, i2, i3, i4):
    """Cosine of the dihedral across edge (i1, i2) with wings i3, i4."""
    p1x, p1y, p1z = np.float64(pos[i1, 0]), np.float64(pos[i1, 1]), np.float64(pos[i1, 2])
    ax, ay, az = pos[i2, 0] - p1x, pos[i2, 1] - p1y, pos[i2, 2] - p1z
    bx, by, bz = pos[i3, 0] - p1x, pos[i3, 1] - p1y, pos[i3, 2] - p1z
    cx, cy, cz = pos[i4, 0] - p1x, pos[i4, 1] - p1y, pos[i4, 2] - p1z
    n1x, n1y, n1z = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
    n2x, n2y, n2z = ay * cz - az * cy, az * cx - ax * cz, ax * cy - ay * cx
    l1 = np.sqrt(n1x * n1x + n1y * n1y + n1z * n1z)
    l2 = np.sqrt(n2x * n2x + n2y * n2y + n2z * n2z)
    if l1 < 1e-300 or l2 < 1e-300:
        return 1.0
    d = (n1x * n2x + n1y * n2y + n1z * n2z) / (l1 * l2)
    return min(1.0, max(-1.0, d))


@njit(cache=True)
def _dihedral_angles(pos, quads):
    out = np.empty(len(quads), dtype=np.float32)
    for b in range(len(quads)):
        d = _cos_dihedral(pos, quads[b, 0], quads[b, 1], quads[b, 2], quads[b, 3])
        out[b] = np.arccos(d)
    return out


@njit(cache=True, parallel=True)
def _project_kernel(pred, inv_mass, edges, rest_len, stretch_comp, lam_s,
                    quads, rest_ang, bend_comp, lam_b,
                    vol_faces, vol_enabled, rest_volume, vol_comp, lam_v,
                    proxy_w, collision_mode, margin, bvh_args, iterations, dt):
    (node_min, node_max, node_left, node_right, node_start, node_count,
     tri_order, tri, faces, face_edge_ids, face_normals, vertex_normals,
     edge_normals) = bvh_args
    dt2 = dt * dt
    n_verts = pred.shape[0]

    for _ in range(iterations):
        # stretch
        for e in range(edges.shape[0]):
            i = edges[e, 0]
            j = edges[e, 1]
            wi = np.float64(inv_mass[i])
            wj = np.float64(inv_mass[j])
            wsum = wi + wj
            if wsum <= 0.0:
                continue
            dx = np.float64(pred[i, 0]) - np.float64(pred[j, 0])
            dy = np.float64(pred[i, 1]) - np.float64(pred[j, 1])
            dz = np.float64(pred[i, 2]) - np.float64(pred[j, 2])
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist < 1e-12:
                continue
            c = dist - np.float64(rest_len[e])
            alpha = np.float64(stretch_comp[e]) / dt2
            dlam = (-c - alpha * np.float64(lam_s[e])) / (wsum + alpha)
            lam_s[e] += np.float32(dlam)
            nx, ny, nz = dx / dist, dy / dist, dz / dist
            pred[i, 0] += np.float32(wi * dlam * nx)
            pred[i, 1] += np.float32(wi * dlam * ny)
            pred[i, 2] += np.float32(wi * dlam * nz)
            pred[j, 0] -= np.float32(wj * dlam * nx)
            pred[j, 1] -= np.float32(wj * dlam * ny)
            pred[j, 2] -= np.float32(wj * dlam * nz)

        # bend (dihedral angle)
        for b in range(quads.shape[0]):
            i1 = quads[b, 0]
            i2 = quads[b, 1]
            i3 = quads[b, 2]
            i4 = quads[b, 3]
            w1 = np.float64(inv_mass[i1])
            w2 = np.float64(inv_mass[i2])
            w3 = np.float64(inv_mass[i3])
            w4 = np.float64(inv_mass[i4])
            if w1 + w2 + w3 + w4 <= 0.0:
                continue
            p1x, p1y, p1z = np.float64(pred[i1, 0]), np.float64(pred[i1, 1]), np.float64(pred[i1, 2])
            ax, ay, az = pred[i2, 0] - p1x, pred[i2, 1] - p1y, pred[i2, 2] - p1z
            bx, by, bz = pred[i3, 0] - p1x, pred[i3, 1] - p1y, pred[i3, 2] - p1z
            cx, cy, cz = pred[i4, 0] - p1x, pred[i4, 1] - p1y, pred[i4, 2] - p1z
            n1x, n1y, n1z = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
            n2x, n2y, n2z = ay * cz - az * cy, az * cx - ax * cz, ax * cy - ay * cx
            l23 = np.sqrt(n1x * n1x + n1y * n1y + n1z * n1z)
            l24 = np.sqrt(n2x * n2x + n2y * n2y + n2z * n2z)
            if l23 < 1e-14 or l24 < 1e-14:
                continue
            n1x, n1y, n1z = n1x / l23, n1y / l23, n1z / l23
            n2x, n2y, n2z = n2x / l24, n2y / l24, n2z / l24
            d = n1x * n2x + n1y * n2y + n1z * n2z
            d = min(1.0, max(-1.0, d))
            one_m_d2 = 1.0 - d * d
            if one_m_d2 < 1e-12:
                continue
            # gradients of d (PBD appendix), relative to p1
            q3x = (ay * n2z - az * n2y + (n1y * az - n1z * ay) * d) / l23
            q3y = (az * n2x - ax * n2z + (n1z * ax - n1x * az) * d) / l23
            q3z = (ax * n2y - ay * n2x + (n1x * ay - n1y * ax) * d) / l23
            q4x = (ay * n1z - az * n1y + (n2y * az - n2z * ay) * d) / l24
            q4y = (az * n1x - ax * n1z + (n2z * ax - n2x * az) * d) / l24
            q4z = (ax * n1y - ay * n1x + (n2x * ay - n2y * ax) * d) / l24
            q2x = -(by * n2z - bz * n2y + (n1y * bz - n1z * by) * d) / l23 \
                  - (cy * n1z - cz * n1y + (n2y * cz - n2z * cy) * d) / l24
            q2y = -(bz * n2x - bx * n2z + (n1z * bx - n1x * bz) * d) / l23 \
                  - (cz * n1x - cx * n1z + (n2z * cx - n2x * cz) * d) / l24
            q2z = -(bx * n2y - by * n2x + (n1x * by - n1y * bx) * d) / l23 \
                  - (cx * n1y - cy * n1x + (n2x * cy - n2y * cx) * d) / l24
            q1x = -q2x - q3x - q4x
            q1y = -q2y - q3y - q4y
            q1z = -q2z - q3z - q4z
            sum_wq = (w1 * (q1x * q1x + q1y * q1y + q1z * q1z)
                      + w2 * (q2x * q2x + q2y * q2y + q2z * q2z)
                      + w3 * (q3x * q3x + q3y * q3y + q3z * q3z)
                      + w4 * (q4x * q4x + q4y * q4y + q4z * q4z))
            if sum_wq < 1e-14:
                continue
            c = np.arccos(d) - np.float64(rest_ang[b])
            alpha = np.float64(bend_comp[b]) / dt2
            grad2 = sum_wq / one_m_d2
            dlam = (-c - alpha * np.float64(lam_b[b])) / (grad2 + alpha)
            lam_b[b] += np.float32(dlam)
            s = dlam / np.sqrt(one_m_d2)
            pred[i1, 0] += np.float32(w1 * s * q1x)
            pred[i1, 1] += np.float32(w1 * s * q1y)
            pred[i1, 2] += np.float32(w1 * s * q1z)
            pred[i2, 0] += np.float32(w2 * s * q2x)
            pred[i2, 1] += np.float32(w2 * s * q2y)
            pred[i2, 2] += np.float32(w2 * s * q2z)
            pred[i3, 0] += np.float32(w3 * s * q3x)
            pred[i3, 1] += np.float32(w3 * s * q3y)
            pred[i3, 2] += np.float32(w3 * s * q3z)
            pred[i4, 0] += np.float32(w4 * s * q4x)
            pred[i4, 1] += np.float32(w4 * s * q4y)
            pred[i4, 2] += np.float32(w4 * s * q4z)

        # optional global volume preservation
        if vol_enabled == 1:
            vol = 0.0
            grads = np.zeros((n_verts, 3), dtype=np.float64)
            for f in range(vol_faces.shape[0]):
                ia = vol_faces[f, 0]
                ib = vol_faces[f, 1]
                ic = vol_faces[f, 2]
                axv, ayv, azv = np.float64(pred[ia, 0]), np.float64(pred[ia, 1]), np.float64(pred[ia, 2])
                bxv, byv, bzv = np.float64(pred[ib, 0]), np.float64(pred[ib, 1]), np.float64(pred[ib, 2])
                cxv, cyv, czv = np.float64(pred[ic, 0]), np.float64(pred[ic, 1]), np.float64(pred[ic, 2])
                vol += (axv * (byv * czv - bzv * cyv)
                        - ayv * (bxv * czv - bzv * cxv)
                        + azv * (bxv * cyv - byv * cxv)) / 6.0
                grads[ia, 0] += (byv * czv - bzv * cyv) / 6.0
                grads[ia, 1] += (bzv * cxv - bxv * czv) / 6.0
                grads[ia, 2] += (bxv * cyv - byv * cxv) / 6.0
                grads[ib, 0] += (cyv * azv - czv * ayv) / 6.0
                grads[ib, 1] += (czv * axv - cxv * azv) / 6.0
                grads[ib, 2] += (cxv * ayv - cyv * axv) / 6.0
                grads[ic, 0] += (ayv * bzv - azv * byv) / 6.0
                grads[ic, 1] += (azv * bxv - axv * bzv) / 6.0
                grads[ic, 2] += (axv * byv - ayv * bxv) / 6.0
            denom = 0.0
            for j in range(n_verts):
                w = np.float64(inv_mass[j])
                denom += w * (grads[j, 0] ** 2 + grads[j, 1] ** 2 + grads[j, 2] ** 2)
            alpha = np.float64(vol_comp) / dt2
            if denom + alpha > 1e-14:
                c = vol - rest_volume
                dlam = (-c - alpha * np.float64(lam_v[0])) / (denom + alpha)
                lam_v[0] += np.float32(dlam)
                for j in range(n_verts):
                    w = np.float64(inv_mass[j])
                    if w > 0.0:
                        pred[j, 0] += np.float32(w * dlam * grads[j, 0])
                        pred[j, 1] += np.float32(w * dlam * grads[j, 1])
                        pred[j, 2] += np.float32(w * dlam * grads[j, 2])

        # collision: batch queries from a snapshot, then per-vertex clamps
        if collision_mode > 0:
            if collision_mode == 1:
                prox = np.dot(proxy_w, pred)
            else:
                prox = pred.copy()
            n_prox = prox.shape[0]
            sds = np.empty(n_prox, dtype=np.float64)
            nrm = np.empty((n_prox, 3), dtype=np.float64)
            for j in prange(n_prox):
                if inv_mass[j] > 0.0:
                    sd, _, _, _, nx, ny, nz = _signed_distance_one(
                        node_min, node_max, node_left, node_right, node_start,
                        node_count, tri_order, tri, faces, face_edge_ids,
                        face_normals, vertex_normals, edge_normals,
                        np.float64(prox[j, 0]), np.float64(prox[j, 1]),
                        np.float64(prox[j, 2]))
                    sds[j] = sd
                    nrm[j, 0] = nx
                    nrm[j, 1] = ny
                    nrm[j, 2] = nz
                else:
                    sds[j] = 1e30
            for j in range(n_prox):
                if sds[j] < margin:
                    push = margin - sds[j]
                    pred[j, 0] += np.float32(push * nrm[j, 0])
                    pred[j, 1] += np.float32(push * nrm[j, 1])
                    pred[j, 2] += np.float32(push * nrm[j, 2])
