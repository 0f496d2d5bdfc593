"""Coarse watertight cage construction around a splat cloud.

Pipeline: voxelize the tracked points (with dilation and a morphological
close), extract the boundary-quad surface, then decimate with quadric
edge collapses under a hard enclosure constraint: a collapse that would
sweep the surface inward across any tracked point, or bring a new face
closer to one than the margin, is rejected. Scalp-adjacent vertices are
marked kinematic and anchored to a barycentric point for skinning.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .bvh import (MeshBvh, NonWatertightMeshError, _point_triangle,
                  edge_topology, signed_volume)
from .core import SkinnedMesh

_STRUCT26 = np.ones((3, 3, 3), dtype=bool)
_FLIP_EPS = 1e-10
_MIN_AREA2 = 1e-16


class DecimationWarning(UserWarning):
    pass


@dataclass
class VoxelGrid:
    origin: np.ndarray       # (3,) world position of corner (0,0,0)
    voxel_size: float
    dims: np.ndarray         # (3,) int
    occupancy: np.ndarray    # bool, shape dims

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupancy))


@dataclass
class Cage:
    """Coarse watertight simulation cage.

    inv_mass 0 marks kinematic vertices; each of those carries a
    root_anchor (scalp face index + barycentric coords) that prescribes
    its motion. anchor_face is -1 on free vertices.
    """

    vertices: np.ndarray             # (M, 3) float32, rest pose
    faces: np.ndarray                # (F, 3) int32
    inv_mass: np.ndarray = None      # (M,) float32
    velocities: np.ndarray = None    # (M, 3) float32
    anchor_face: np.ndarray = None   # (M,) int32, -1 when free
    anchor_bary: np.ndarray = None   # (M, 3) float32
    _bvh: Optional[MeshBvh] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        m = len(self.vertices)
        if self.inv_mass is None:
            self.inv_mass = np.ones(m, dtype=np.float32)
        self.inv_mass = np.ascontiguousarray(self.inv_mass, dtype=np.float32).reshape(m)
        if self.velocities is None:
            self.velocities = np.zeros((m, 3), dtype=np.float32)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float32).reshape(m, 3)
        if self.anchor_face is None:
            self.anchor_face = np.full(m, -1, dtype=np.int32)
        self.anchor_face = np.asarray(self.anchor_face, dtype=np.int32).reshape(m)
        if self.anchor_bary is None:
            self.anchor_bary = np.zeros((m, 3), dtype=np.float32)
        self.anchor_bary = np.asarray(self.anchor_bary, dtype=np.float32).reshape(m, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def kinematic_mask(self) -> np.ndarray:
        return self.inv_mass == 0

    def bvh(self) -> MeshBvh:
        if self._bvh is None:
            self._bvh = MeshBvh(self.vertices, self.faces)
        return self._bvh

    def validate(self):
        edge_topology(self.faces)
        if signed_volume(self.vertices, self.faces) <= 0:
            raise NonWatertightMeshError("cage is inside-out")
        if np.any(self.inv_mass < 0):
            raise ValueError("negative inverse mass")
        kin = self.kinematic_mask()
        if np.any(kin & (self.anchor_face < 0)):
            raise ValueError("kinematic vertex without root anchor")

    def copy(self) -> "Cage":
        return Cage(self.vertices.copy(), self.faces.copy(), self.inv_mass.copy(),
                    self.velocities.copy(), self.anchor_face.copy(), self.anchor_bary.copy())


# --- voxelization -----------------------------------------------------------

def voxelize(points, voxel_size: float, dilation: int = 2) -> VoxelGrid:
    """Occupancy grid of the points, dilated and closed, padded all around.

    Dilation uses the 26-neighborhood `dilation` times; a single
    dilate-then-erode pass afterwards seals internal tunnels. The bounding
    box is padded by (dilation + 1) voxels so growth never clips.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point list")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be > 0")
    pad = dilation + 1
    vmin = pts.min(axis=0)
    vmax = pts.max(axis=0)
    origin = vmin - pad * voxel_size
    dims = np.floor((vmax - origin) / voxel_size).astype(np.int64) + 1 + pad
    occ = np.zeros(dims, dtype=bool)
    idx = np.floor((pts - origin) / voxel_size).astype(np.int64)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if dilation > 0:
        occ = ndimage.binary_dilation(occ, structure=_STRUCT26, iterations=dilation)
    occ = ndimage.binary_closing(occ, structure=_STRUCT26)
    return VoxelGrid(origin=origin, voxel_size=float(voxel_size),
                     dims=dims.astype(np.int64), occupancy=occ)


# corner offsets per face direction, wound CCW seen from outside
_FACE_TABLE = {
    (+1, 0, 0): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    (-1, 0, 0): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
    (0, +1, 0): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
    (0, -1, 0): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
    (0, 0, +1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    (0, 0, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
}


def extract_surface(grid: VoxelGrid):
    """Boundary-quad surface of the occupancy, welded and outward-oriented.

    Returns (vertices (V, 3) float64, faces (F, 3) int32); watertight by
    construction for well-behaved occupancies, verified before returning.
    """
    occ = grid.occupancy
    if not occ.any():
        raise ValueError("no occupied voxels")
    n_comp = ndimage.label(occ, structure=ndimage.generate_binary_structure(3, 1))[1]
    if n_comp != 1:
        raise ValueError(f"disconnected occupancy ({n_comp} components); increase dilation")

    ny1 = occ.shape[1] + 1
    nz1 = occ.shape[2] + 1
    quads = []
    padded = np.pad(occ, 1, constant_values=False)
    for direction, corners in _FACE_TABLE.items():
        dx, dy, dz = direction
        neighbor = padded[1 + dx:occ.shape[0] + 1 + dx,
                          1 + dy:occ.shape[1] + 1 + dy,
                          1 + dz:occ.shape[2] + 1 + dz]
        cells = np.nonzero(occ & ~neighbor)
        if len(cells[0]) == 0:
            continue
        ci = np.stack(cells, axis=1)  # (Q, 3)
        ids = np.empty((len(ci), 4), dtype=np.int64)
        for k, (ox, oy, oz) in enumerate(corners):
            ids[:, k] = ((ci[:, 0] + ox) * ny1 + (ci[:, 1] + oy)) * nz1 + (ci[:, 2] + oz)
        quads.append(ids)
    quads = np.concatenate(quads, axis=0)

    tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], axis=0)
    unique_ids, faces = np.unique(tris, return_inverse=True)
    faces = faces.reshape(tris.shape).astype(np.int32)

    iz = unique_ids % nz1
    iy = (unique_ids // nz1) % ny1
    ix = unique_ids // (nz1 * ny1)
    verts = grid.origin + grid.voxel_size * np.stack([ix, iy, iz], axis=1).astype(np.float64)

    try:
        edge_topology(faces)
    except NonWatertightMeshError as e:
        raise NonWatertightMeshError(
            f"voxel surface is non-manifold ({e}); increase dilation") from None
    return verts, faces


# --- decimation -------------------------------------------------------------

class _PointGrid:
    """Uniform hash grid over the tracked points for AABB range queries."""

    def __init__(self, points, cell):
        self.points = points
        self.cell = cell
        keys = np.floor(points / cell).astype(np.int64)
        self.table = {}
        for i, k in enumerate(map(tuple, keys)):
            self.table.setdefault(k, []).append(i)
        self.table = {k: np.array(v, dtype=np.int64) for k, v in self.table.items()}

    def query_aabb(self, lo, hi):
        klo = np.floor(lo / self.cell).astype(np.int64)
        khi = np.floor(hi / self.cell).astype(np.int64)
        parts = []
        for x in range(klo[0], khi[0] + 1):
            for y in range(klo[1], khi[1] + 1):
                for z in range(klo[2], khi[2] + 1):
                    arr = self.table.get((x, y, z))
                    if arr is not None:
                        parts.append(arr)
        if not parts:
            return None
        idx = np.concatenate(parts)
        p = self.points[idx]
        keep = np.all((p >= lo) & (p <= hi), axis=1)
        return idx[keep]


def _face_quadric(tri):
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    area2 = np.linalg.norm(n)
    if area2 < 1e-300:
        return np.zeros((4, 4))
    n = n / area2
    p = np.array([n[0], n[1], n[2], -np.dot(n, tri[0])])
    return 0.5 * area2 * np.outer(p, p)


def decimate(vertices, faces, target_vertices: int,
             tracked_points=None, margin: float = 0.0):
    """Quadric edge-collapse decimation that never loses enclosed points.

    Candidate placements try the quadric-optimal position first, then the
    midpoint, endpoints, and outward-nudged midpoints. Every candidate is
    vetted with a local winding-number delta over nearby tracked points
    (exact containment change) and a distance floor of `margin` against
    the replacement faces. Emits a DecimationWarning when the target is
    unreachable; output is always watertight.
    """
    if target_vertices < 4:
        raise ValueError("target must be >= 4")
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3).copy()
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3).copy()
    edge_topology(faces)
    nv = len(verts)
    if nv <= target_vertices:
        return verts.copy(), faces.astype(np.int32).copy()

    grid = None
    if tracked_points is not None and len(tracked_points):
        tracked = np.asarray(tracked_points, dtype=np.float64).reshape(-1, 3)
        diag = np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))
        grid = _PointGrid(tracked, cell=max(diag / 32.0, 4.0 * margin, 1e-9))

    alive_v = np.ones(nv, dtype=bool)
    alive_f = np.ones(len(faces), dtype=bool)
    v_faces = [set() for _ in range(nv)]
    for fi, f in enumerate(faces):
        for v in f:
            v_faces[v].add(fi)

    quadrics = np.zeros((nv, 4, 4))
    for fi, f in enumerate(faces):
        q = _face_quadric(verts[f])
        for v in f:
            quadrics[v] += q

    version = np.zeros(nv, dtype=np.int64)

    def neighbors(v):
        out = set()
        for fi in v_faces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    def optimal_position(a, b):
        q = quadrics[a] + quadrics[b]
        A = q[:3, :3]
        rhs = -q[:3, 3]
        try:
            if abs(np.linalg.det(A)) > 1e-12 * (np.trace(A) / 3.0 + 1e-300) ** 3:
                x = np.linalg.solve(A, rhs)
                if np.isfinite(x).all():
                    return x
        except np.linalg.LinAlgError:
            pass
        return None

    def cost_of(a, b, pos):
        q = quadrics[a] + quadrics[b]
        h = np.append(pos, 1.0)
        return float(h @ q @ h)

    def push_edge(a, b):
        if a > b:
            a, b = b, a
        pos = optimal_position(a, b)
        if pos is None:
            pos = 0.5 * (verts[a] + verts[b])
        heapq.heappush(heap, (cost_of(a, b, pos), a, b, version[a], version[b]))

    heap = []
    seen = set()
    for f in faces:
        for k in range(3):
            a, b = int(f[k]), int(f[(k + 1) % 3])
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                push_edge(*key)
    del seen

    n_alive = nv

    def try_collapse(a, b):
        nonlocal n_alive
        shared = v_faces[a] & v_faces[b]
        if len(shared) != 2:
            return False
        na = neighbors(a)
        nb = neighbors(b)
        opposite = set()
        for fi in shared:
            opposite.update(int(v) for v in faces[fi] if v != a and v != b)
        if na & nb != opposite:
            return False  # link condition: collapse would pinch the surface

        ring = sorted(v_faces[a] | v_faces[b])
        old_tris = np.array([verts[faces[fi]] for fi in ring])
        kept = [fi for fi in ring if fi not in shared]
        ring_edge = np.sqrt(np.mean(np.sum(
            (old_tris[:, 1] - old_tris[:, 0]) ** 2, axis=1)))
        area_n = np.cross(old_tris[:, 1] - old_tris[:, 0], old_tris[:, 2] - old_tris[:, 0])
        outward = area_n.sum(axis=0)
        nrm = np.linalg.norm(outward)
        outward = outward / nrm if nrm > 1e-300 else np.zeros(3)

        candidates = []
        opt = optimal_position(a, b)
        if opt is not None:
            candidates.append(opt)
        mid = 0.5 * (verts[a] + verts[b])
        candidates.extend([mid, verts[a].copy(), verts[b].copy(),
                           mid + 0.25 * ring_edge * outward,
                           mid + 0.5 * ring_edge * outward])

        for pos in candidates:
            new_tris = []
            ok = True
            for fi in kept:
                tri = verts[faces[fi]].copy()
                old_n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
                for k in range(3):
                    if faces[fi][k] == a or faces[fi][k] == b:
                        tri[k] = pos
                new_n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
                if np.dot(new_n, new_n) < _MIN_AREA2 or np.dot(new_n, old_n) <= _FLIP_EPS:
                    ok = False
                    break
                new_tris.append(tri)
            if not ok:
                continue
            new_tris = np.array(new_tris)

            if grid is not None:
                all_pts = np.vstack([old_tris.reshape(-1, 3), pos[None]])
                lo = all_pts.min(axis=0) - margin
                hi = all_pts.max(axis=0) + margin
                cand = grid.query_aabb(lo, hi)
                if cand is not None and len(cand):
                    pts = grid.points[cand]
                    dw = (_winding_sum(pts, new_tris) - _winding_sum(pts, old_tris))
                    if np.any(np.abs(dw) > 0.25):
                        continue
                    if margin > 0:
                        d2 = _min_dist2_to_tris(pts, new_tris)
                        if np.any(d2 < margin * margin):
                            continue

            # commit
            verts[a] = pos
            quadrics[a] += quadrics[b]
            for fi in shared:
                alive_f[fi] = False
                for v in faces[fi]:
                    v_faces[v].discard(fi)
            for fi in list(v_faces[b]):
                faces[fi][faces[fi] == b] = a
                v_faces[b].discard(fi)
                v_faces[a].add(fi)
            alive_v[b] = False
            version[a] += 1
            version[b] += 1
            n_alive -= 1
            for nb2 in sorted(neighbors(a)):
                push_edge(a, int(nb2))
            return True
        return False

    while n_alive > target_vertices and heap:
        cost, a, b, va, vb = heapq.heappop(heap)
        if not (alive_v[a] and alive_v[b]):
            continue
        if version[a] != va or version[b] != vb:
            continue
        try_collapse(a, b)

    if n_alive > target_vertices:
        warnings.warn(
            f"decimation stopped at {n_alive} vertices (target {target_vertices}): "
            "remaining collapses would violate enclosure or topology",
            DecimationWarning)

    remap = -np.ones(nv, dtype=np.int64)
    remap[alive_v] = np.arange(int(alive_v.sum()))
    out_faces = remap[faces[alive_f]]
    return verts[alive_v].copy(), out_faces.astype(np.int32)


@njit(cache=True)
def _winding_sum(points, tris):
    """Sum of solid angles of the triangles per point, over 4*pi."""
    out = np.empty(points.shape[0], dtype=np.float64)
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for t in range(tris.shape[0]):
            ax, ay, az = tris[t, 0, 0] - px, tris[t, 0, 1] - py, tris[t, 0, 2] - pz
            bx, by, bz = tris[t, 1, 0] - px, tris[t, 1, 1] - py, tris[t, 1, 2] - pz
            cx, cy, cz = tris[t, 2, 0] - px, tris[t, 2, 1] - py, tris[t, 2, 2] - pz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            det = (ax * (by * cz - bz * cy)
                   - ay * (bx * cz - bz * cx)
                   + az * (bx * cy - by * cx))
            denom = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                     + (bx * cx + by * cy + bz * cz) * la
                     + (cx * ax + cy * ay + cz * az) * lb)
            total += 2.0 * np.arctan2(det, denom)
        out[i] = total / (4.0 * np.pi)
    return out


@njit(cache=True)
def _min_dist2_to_tris(points, tris):
    out = np.empty(points.shape[0], dtype=np.float64)
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for t in range(tris.shape[0]):
            qx, qy, qz, _ = _point_triangle(
                tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2],
                tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2],
                tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2], px, py, pz)
            d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d2 < best:
                best = d2
        out[i] = best
    return out


# --- roots ------------------------------------------------------------------

def barycentric_coords(tri, point):
    """Barycentric coordinates of a point w.r.t. a triangle (clamped later)."""
    v0 = tri[1] - tri[0]
    v1 = tri[2] - tri[0]
    v2 = np.asarray(point, dtype=np.float64) - tri[0]
    d00 = np.dot(v0, v0)
    d01 = np.dot(v0, v1)
    d11 = np.dot(v1, v1)
    d20 = np.dot(v2, v0)
    d21 = np.dot(v2, v1)
    denom = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    return np.array([1.0 - v - w, v, w])


def mark_roots(cage: Cage, mesh: SkinnedMesh, radius: float) -> Cage:
    """Flag cage vertices near the scalp as kinematic and anchor them.

    Anchors store the nearest scalp face (global index) and the
    barycentric coordinates of the closest point on it. Idempotent.
    """
    if mesh.scalp_faces is None or len(mesh.scalp_faces) == 0:
        raise ValueError("mesh has no scalp_faces")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    scalp = mesh.faces[mesh.scalp_faces]
    patch = MeshBvh(mesh.vertices, scalp, require_watertight=False)
    local_face, closest, dist = patch.closest_faces(cage.vertices)

    out = cage.copy()
    out.inv_mass = np.ones(cage.n_vertices, dtype=np.float32)
    out.anchor_face = np.full(cage.n_vertices, -1, dtype=np.int32)
    out.anchor_bary = np.zeros((cage.n_vertices, 3), dtype=np.float32)
    kin = dist <= radius
    if not np.any(kin):
        raise ValueError(f"no roots found within radius {radius}")
    for j in np.nonzero(kin)[0]:
        gface = int(mesh.scalp_faces[local_face[j]])
        tri = mesh.vertices[mesh.faces[gface]].astype(np.float64)
        bary = np.clip(barycentric_coords(tri, closest[j]), 0.0, 1.0)
        bary /= bary.sum()
        out.inv_mass[j] = 0.0
        out.anchor_face[j] = gface
        out.anchor_bary[j] = bary.astype(np.float32)
    return out


# --- pipeline ---------------------------------------------------------------

def build_cage(points, voxel_size: float = None, dilation: int = 2,
               target_vertices: int = 500):
    """points -> voxelize -> surface -> decimate, with enclosure margin.

    Default voxel size is 2% of the point bounding-box diagonal; the
    decimation margin is half a voxel. Returns (Cage, VoxelGrid).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if voxel_size is None:
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        voxel_size = max(0.02 * diag, 1e-9)
    grid = voxelize(pts, voxel_size, dilation)
    verts, faces = extract_surface(grid)
    verts, faces = decimate(verts, faces, target_vertices,
                            tracked_points=pts, margin=0.5 * voxel_size)
    cage = Cage(vertices=verts, faces=faces)
    cage.validate()
    return cage, grid
