"""Triangle-mesh BVH with closest-point and signed-distance queries.

Inside/outside is decided by the angle-weighted pseudo-normal of the
closest feature (face, edge, or vertex), which is exact for watertight
meshes and O(log n) with the tree. Queries are compiled with numba and
safe to run in parallel; build and refit are single-threaded numpy.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_LEAF_SIZE = 4
_STACK_CAP = 128


class NonWatertightMeshError(ValueError):
    pass


def edge_topology(faces: np.ndarray, require_watertight: bool = True):
    """Unique undirected edges and per-face edge ids.

    Returns (edges (E,2), face_edge_ids (F,3)) with local edge k of a face
    being (v_k, v_{k+1}). Watertightness here means every undirected edge
    has exactly two halfedges, one per direction.
    """
    faces = np.asarray(faces, dtype=np.int64)
    halfedges = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    und = np.sort(halfedges, axis=1)
    edges, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    if require_watertight:
        if np.any(counts != 2):
            raise NonWatertightMeshError(
                f"{int(np.sum(counts != 2))} edges not shared by exactly 2 faces")
        directed = np.unique(halfedges, axis=0)
        if len(directed) != len(halfedges):
            raise NonWatertightMeshError("inconsistent face orientation (repeated halfedge)")
    return edges.astype(np.int32), inverse.reshape(-1, 3).astype(np.int32)


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    tri = v[np.asarray(faces)]
    return float(np.einsum("ij,ij->", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0)


def _pseudo_normals(vertices, faces, edges, face_edge_ids):
    """Face normals plus angle-weighted vertex and edge pseudo-normals."""
    v = vertices[faces]  # (F, 3, 3)
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area2 = np.linalg.norm(fn, axis=1)
    fn = fn / np.maximum(area2, 1e-300)[:, None]

    vn = np.zeros((len(vertices), 3), dtype=np.float64)
    for k in range(3):
        e1 = v[:, (k + 1) % 3] - v[:, k]
        e2 = v[:, (k + 2) % 3] - v[:, k]
        cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300)
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vn, faces[:, k], ang[:, None] * fn)
    vn /= np.maximum(np.linalg.norm(vn, axis=1), 1e-300)[:, None]

    en = np.zeros((len(edges), 3), dtype=np.float64)
    np.add.at(en, face_edge_ids.ravel(), np.repeat(fn, 3, axis=0))
    en /= np.maximum(np.linalg.norm(en, axis=1), 1e-300)[:, None]
    return fn, vn, en


class MeshBvh:
    """Axis-aligned BVH over mesh faces, refittable for posed vertices.

    Topology is fixed at construction; `refit` updates boxes and
    pseudo-normals for new vertex positions in O(n) without rebuilding.
    """

    def __init__(self, vertices, faces, require_watertight: bool = True):
        self.faces = np.ascontiguousarray(faces, dtype=np.int32).reshape(-1, 3)
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise ValueError("empty mesh")
        self.edges, self.face_edge_ids = edge_topology(self.faces, require_watertight)
        self.watertight = require_watertight
        if require_watertight and signed_volume(vertices, self.faces) <= 0:
            raise NonWatertightMeshError("mesh is inside-out (negative enclosed volume)")

        centroids = vertices[self.faces].mean(axis=1)
        n_faces = len(self.faces)
        order = np.arange(n_faces, dtype=np.int32)
        # node arrays grow during the build; children always follow parents
        self._node_left = []
        self._node_right = []
        self._node_start = []
        self._node_count = []
        self._build(order, centroids, 0, n_faces)
        self.tri_order = order
        self.node_left = np.array(self._node_left, dtype=np.int32)
        self.node_right = np.array(self._node_right, dtype=np.int32)
        self.node_start = np.array(self._node_start, dtype=np.int32)
        self.node_count = np.array(self._node_count, dtype=np.int32)
        del self._node_left, self._node_right, self._node_start, self._node_count
        self.node_min = np.zeros((len(self.node_left), 3), dtype=np.float64)
        self.node_max = np.zeros((len(self.node_left), 3), dtype=np.float64)
        self.refit(vertices)

    def _build(self, order, centroids, lo, hi) -> int:
        nid = len(self._node_left)
        self._node_left.append(-1)
        self._node_right.append(-1)
        self._node_start.append(lo)
        self._node_count.append(hi - lo)
        if hi - lo > _LEAF_SIZE:
            cen = centroids[order[lo:hi]]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            local = np.argsort(cen[:, axis], kind="stable")
            order[lo:hi] = order[lo:hi][local]
            mid = (lo + hi) // 2
            self._node_left[nid] = self._build(order, centroids, lo, mid)
            self._node_right[nid] = self._build(order, centroids, mid, hi)
            self._node_count[nid] = 0
        return nid

    def refit(self, vertices):
        """Update geometry for new vertex positions (same topology)."""
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.tri = np.ascontiguousarray(self.vertices[self.faces])  # (F, 3, 3)
        self.face_normals, self.vertex_normals, self.edge_normals = _pseudo_normals(
            self.vertices, self.faces.astype(np.int64), self.edges, self.face_edge_ids)

        sorted_tris = self.tri[self.tri_order]
        tmin = sorted_tris.min(axis=1)
        tmax = sorted_tris.max(axis=1)
        # children have larger indices than parents, so one reverse sweep works
        for nid in range(len(self.node_left) - 1, -1, -1):
            left = self.node_left[nid]
            if left < 0:
                s, c = self.node_start[nid], self.node_count[nid]
                self.node_min[nid] = tmin[s:s + c].min(axis=0)
                self.node_max[nid] = tmax[s:s + c].max(axis=0)
            else:
                right = self.node_right[nid]
                self.node_min[nid] = np.minimum(self.node_min[left], self.node_min[right])
                self.node_max[nid] = np.maximum(self.node_max[left], self.node_max[right])
        return self

    def _kernel_args(self):
        return (self.node_min, self.node_max, self.node_left, self.node_right,
                self.node_start, self.node_count, self.tri_order, self.tri,
                self.faces, self.face_edge_ids, self.face_normals,
                self.vertex_normals, self.edge_normals)

    def signed_distance(self, points):
        """Signed distance, closest point, and feature pseudo-normal per point.

        Negative inside, positive outside. Accepts (3,) or (N, 3); scalar
        input returns scalars.
        """
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.ascontiguousarray(pts.reshape(-1, 3))
        sd = np.empty(len(pts), dtype=np.float64)
        cp = np.empty((len(pts), 3), dtype=np.float64)
        nrm = np.empty((len(pts), 3), dtype=np.float64)
        _signed_distance_batch(pts, *self._kernel_args(), sd, cp, nrm)
        if single:
            return float(sd[0]), cp[0], nrm[0]
        return sd, cp, nrm

    def contains(self, points):
        sd, _, _ = self.signed_distance(points)
        return sd < 0 if np.ndim(sd) else sd < 0

    def closest_faces(self, points):
        """Closest face index per point, lowest index winning near-exact ties.

        Returns (face_ids, closest_points, distances).
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        fid = np.empty(len(pts), dtype=np.int32)
        cp = np.empty((len(pts), 3), dtype=np.float64)
        d = np.empty(len(pts), dtype=np.float64)
        _closest_faces_batch(pts, *self._kernel_args(), fid, cp, d)
        return fid, cp, d


# --- numba kernels ----------------------------------------------------------

@njit(cache=True)
def _point_triangle(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    """Closest point on a triangle and the feature region it lies on.

    Region: 0/1/2 vertex a/b/c, 3/4/5 edge ab/bc/ca, 6 interior.
    (Ericson, Real-Time Collision Detection, 5.1.5.)
    """
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 0

    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 1

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz, 3

    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 2

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz, 5

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz), 4

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w, 6)


@njit(cache=True)
def _box_d2(bmin, bmax, nid, px, py, pz):
    d2 = 0.0
    for k in range(3):
        p = px if k == 0 else (py if k == 1 else pz)
        lo = bmin[nid, k]
        hi = bmax[nid, k]
        if p < lo:
            d2 += (lo - p) * (lo - p)
        elif p > hi:
            d2 += (p - hi) * (p - hi)
    return d2


@njit(cache=True)
def _query_nearest(node_min, node_max, node_left, node_right, node_start,
                   node_count, tri_order, tri, px, py, pz):
    """Nearest triangle to a point: (sorted index, d2, closest xyz, region)."""
    stack = np.empty(_STACK_CAP, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    best_d2 = np.inf
    best_t = -1
    bqx = bqy = bqz = 0.0
    best_region = -1
    while top > 0:
        top -= 1
        nid = stack[top]
        if _box_d2(node_min, node_max, nid, px, py, pz) >= best_d2:
            continue
        left = node_left[nid]
        if left < 0:
            s = node_start[nid]
            for t in range(s, s + node_count[nid]):
                f = tri_order[t]
                qx, qy, qz, region = _point_triangle(
                    tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2],
                    tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2],
                    tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2], px, py, pz)
                d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
                if d2 < best_d2:
                    best_d2 = d2
                    best_t = f
                    bqx, bqy, bqz = qx, qy, qz
                    best_region = region
        else:
            right = node_right[nid]
            dl = _box_d2(node_min, node_max, left, px, py, pz)
            dr = _box_d2(node_min, node_max, right, px, py, pz)
            if dl < dr:
                stack[top] = right
                top += 1
                stack[top] = left
                top += 1
            else:
                stack[top] = left
                top += 1
                stack[top] = right
                top += 1
    return best_t, best_d2, bqx, bqy, bqz, best_region


@njit(cache=True)
def _feature_normal(f, region, faces, face_edge_ids, face_normals,
                    vertex_normals, edge_normals):
    if region == 6:
        return face_normals[f, 0], face_normals[f, 1], face_normals[f, 2]
    if region < 3:
        v = faces[f, region]
        return vertex_normals[v, 0], vertex_normals[v, 1], vertex_normals[v, 2]
    e = face_edge_ids[f, region - 3]
    return edge_normals[e, 0], edge_normals[e, 1], edge_normals[e, 2]


@njit(cache=True)
def _signed_distance_one(node_min, node_max, node_left, node_right, node_start,
                         node_count, tri_order, tri, faces, face_edge_ids,
                         face_normals, vertex_normals, edge_normals,
                         px, py, pz):
    f, d2, qx, qy, qz, region = _query_nearest(
        node_min, node_max, node_left, node_right, node_start, node_count,
        tri_order, tri, px, py, pz)
    nx, ny, nz = _feature_normal(f, region, faces, face_edge_ids,
                                 face_normals, vertex_normals, edge_normals)
    d = np.sqrt(d2)
    dot = (px - qx) * nx + (py - qy) * ny + (pz - qz) * nz
    if dot < 0.0:
        d = -d
    return d, qx, qy, qz, nx, ny, nz


@njit(cache=True, parallel=True)
def _signed_distance_batch(points, node_min, node_max, node_left, node_right,
                           node_start, node_count, tri_order, tri, faces,
                           face_edge_ids, face_normals, vertex_normals,
                           edge_normals, out_sd, out_cp, out_n):
    for i in prange(points.shape[0]):
        sd, qx, qy, qz, nx, ny, nz = _signed_distance_one(
            node_min, node_max, node_left, node_right, node_start, node_count,
            tri_order, tri, faces, face_edge_ids, face_normals,
            vertex_normals, edge_normals,
            points[i, 0], points[i, 1], points[i, 2])
        out_sd[i] = sd
        out_cp[i, 0] = qx
        out_cp[i, 1] = qy
        out_cp[i, 2] = qz
        out_n[i, 0] = nx
        out_n[i, 1] = ny
        out_n[i, 2] = nz


@njit(cache=True)
def _collect_ties(node_min, node_max, node_left, node_right, node_start,
                  node_count, tri_order, tri, px, py, pz, bound_d2):
    """Lowest original face index among faces within bound_d2 of the point."""
    stack = np.empty(_STACK_CAP, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    best_f = 2147483647
    while top > 0:
        top -= 1
        nid = stack[top]
        if _box_d2(node_min, node_max, nid, px, py, pz) > bound_d2:
            continue
        left = node_left[nid]
        if left < 0:
            s = node_start[nid]
            for t in range(s, s + node_count[nid]):
                f = tri_order[t]
                qx, qy, qz, _ = _point_triangle(
                    tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2],
                    tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2],
                    tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2], px, py, pz)
                d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
                if d2 <= bound_d2 and f < best_f:
                    best_f = f
        else:
            stack[top] = node_left[nid]
            top += 1
            stack[top] = node_right[nid]
            top += 1
    return best_f


@njit(cache=True, parallel=True)
def _closest_faces_batch(points, node_min, node_max, node_left, node_right,
                         node_start, node_count, tri_order, tri, faces,
                         face_edge_ids, face_normals, vertex_normals,
                         edge_normals, out_f, out_cp, out_d):
    for i in prange(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        f, d2, qx, qy, qz, _ = _query_nearest(
            node_min, node_max, node_left, node_right, node_start, node_count,
            tri_order, tri, px, py, pz)
        tol = 1e-12 * (1.0 + d2)
        f = _collect_ties(node_min, node_max, node_left, node_right, node_start,
                          node_count, tri_order, tri, px, py, pz, d2 + tol)
        out_f[i] = f
        out_cp[i, 0] = qx
        out_cp[i, 1] = qy
        out_cp[i, 2] = qz
        out_d[i] = np.sqrt(d2)
