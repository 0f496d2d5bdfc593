"""Synthetic assets: head meshes, hair splat clouds, and motion scripts.

Everything is generated from a seed so scenes are reproducible. Units are
meters; the default head radius is 0.1 m with hair floating a few
millimeters off the scalp, which keeps rest poses collision-free at the
default margin.
"""

from __future__ import annotations

import numpy as np

from .core import Frame, GaussianSplat, MotionFrame, SkinnedMesh, SplatSet, matrix_to_quat

HEAD_RADIUS = 0.1
NECK_PIVOT = np.array([0.0, 0.0, -0.12])


# --- head -------------------------------------------------------------------

def icosphere(radius: float = HEAD_RADIUS, subdivisions: int = 2):
    """Unit icosahedron subdivided and projected onto a sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        midpoint = {}
        verts = list(verts)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts[a] + verts[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
        verts = np.array(verts)
    return verts * radius, faces.astype(np.int32)


def head_mesh(radius: float = HEAD_RADIUS, subdivisions: int = 2,
              scalp_height: float = 0.25) -> SkinnedMesh:
    """Convex skinned head: one rigid 'head' joint, upper cap marked scalp."""
    verts, faces = icosphere(radius, subdivisions)
    centroids = verts[faces].mean(axis=1)
    scalp = np.nonzero(centroids[:, 2] > scalp_height * radius)[0]
    weights = np.ones((len(verts), 1), dtype=np.float32)
    return SkinnedMesh(vertices=verts, faces=faces, joints=["head"],
                       skin_weights=weights, scalp_faces=scalp.astype(np.int32))


# --- hair clouds ------------------------------------------------------------

def _strand_splats(rng, n, radius, gap, theta_root, theta_tip, phi_range,
                   length_scale, thin_scale, shell=0.012, color_base=(0.22, 0.13, 0.07)):
    """Splats along great-circle strands hugging a sphere of given radius."""
    t = rng.uniform(0.0, 1.0, n)
    phi = rng.uniform(*phi_range, n)
    theta = theta_root + t * (theta_tip - theta_root)
    r = radius + gap + rng.uniform(0.0, shell, n)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    pos = np.stack([r * sin_t * np.cos(phi), r * sin_t * np.sin(phi), r * cos_t], axis=1)
    # strand tangent: d(pos)/d(theta), unit
    tangent = np.stack([cos_t * np.cos(phi), cos_t * np.sin(phi), -sin_t], axis=1)
    rot = _rot_x_to(tangent, rng)
    long_s = rng.uniform(0.7, 1.3, n) * length_scale
    thin_s = rng.uniform(0.6, 1.4, (n, 2)) * thin_scale
    scale = np.column_stack([long_s, thin_s])
    color = np.clip(np.asarray(color_base) + rng.normal(0, 0.03, (n, 3)), 0.0, 1.0)
    opacity = rng.uniform(0.75, 1.0, n)
    return pos, rot, scale, opacity, color


def _rot_x_to(directions, rng):
    """Quaternions mapping +x to each direction, random roll about the axis."""
    d = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    x = np.array([1.0, 0.0, 0.0])
    v = np.cross(np.broadcast_to(x, d.shape), d)
    s = np.linalg.norm(v, axis=1)
    c = d[:, 0]
    q = np.empty((len(d), 4))
    ok = s > 1e-9
    ang = np.arctan2(s[ok], c[ok])
    q[ok, 0] = np.cos(0.5 * ang)
    q[ok, 1:] = np.sin(0.5 * ang)[:, None] * (v[ok] / s[ok, None])
    q[~ok] = [1.0, 0.0, 0.0, 0.0]
    flipped = (~ok) & (c < 0)
    q[flipped] = [0.0, 0.0, 0.0, 1.0]
    return q


def _assemble(pos, rot, scale, opacity, color) -> SplatSet:
    return SplatSet(pos, rot, scale, opacity, color, frame=Frame.GLOBAL)


def hair_bob(n: int = 3000, radius: float = HEAD_RADIUS, seed: int = 0) -> SplatSet:
    """Chin-length bob: strands all around, pole down to below the ears."""
    rng = np.random.default_rng(seed)
    parts = _strand_splats(rng, n, radius, gap=0.006,
                           theta_root=0.12 * np.pi, theta_tip=0.62 * np.pi,
                           phi_range=(0.0, 2.0 * np.pi),
                           length_scale=0.008, thin_scale=0.0014)
    return _assemble(*parts)


def hair_ponytail(n: int = 3000, radius: float = HEAD_RADIUS, seed: int = 1) -> SplatSet:
    """Close cap plus a bundle hanging down the back (-y)."""
    rng = np.random.default_rng(seed)
    n_cap = n // 2
    cap = _strand_splats(rng, n_cap, radius, gap=0.005,
                         theta_root=0.1 * np.pi, theta_tip=0.45 * np.pi,
                         phi_range=(0.0, 2.0 * np.pi),
                         length_scale=0.006, thin_scale=0.0012)
    n_tail = n - n_cap
    t = rng.uniform(0.0, 1.0, n_tail)
    root = np.array([0.0, -radius - 0.008, 0.35 * radius])
    sway = 0.25 * radius
    pos = root[None, :] + np.stack([
        rng.normal(0, 0.012, n_tail),
        -0.02 - 0.02 * t + rng.normal(0, 0.008, n_tail),
        -t * (1.9 * radius) + rng.normal(0, 0.006, n_tail) - sway * t * t,
    ], axis=1) * 1.0
    tangent = np.stack([np.zeros(n_tail), np.full(n_tail, -0.25), -np.ones(n_tail)], axis=1)
    rot = _rot_x_to(tangent, rng)
    scale = np.column_stack([rng.uniform(0.7, 1.3, n_tail) * 0.01,
                             rng.uniform(0.6, 1.4, (n_tail, 2)) * 0.0016])
    color = np.clip(0.18 + rng.normal(0, 0.03, (n_tail, 3)) * [1, 0.6, 0.4], 0, 1)
    opacity = rng.uniform(0.75, 1.0, n_tail)
    return _assemble(np.vstack([cap[0], pos]), np.vstack([cap[1], rot]),
                     np.vstack([cap[2], scale]), np.concatenate([cap[3], opacity]),
                     np.vstack([cap[4], color]))


def hair_curly(n: int = 3000, radius: float = HEAD_RADIUS, seed: int = 2) -> SplatSet:
    """Thick wavy volume: deeper shell, chubbier splats, jittered tangents."""
    rng = np.random.default_rng(seed)
    pos, rot, scale, opacity, color = _strand_splats(
        rng, n, radius, gap=0.006, theta_root=0.1 * np.pi, theta_tip=0.58 * np.pi,
        phi_range=(0.0, 2.0 * np.pi), length_scale=0.005, thin_scale=0.002,
        shell=0.03)
    pos = pos + rng.normal(0, 0.004, pos.shape)
    # re-roll orientations completely for the curls
    dirs = rng.normal(size=(n, 3))
    rot = _rot_x_to(dirs, rng)
    return _assemble(pos, rot, scale, opacity, color)


HAIR_FIXTURES = {"bob": hair_bob, "ponytail": hair_ponytail, "curly": hair_curly}


def bald_splats(mesh: SkinnedMesh, n: int = 800, seed: int = 3) -> SplatSet:
    """Skin-toned surface splats for the bald component, in global space."""
    rng = np.random.default_rng(seed)
    tri = mesh.vertices[mesh.faces].astype(np.float64)
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    fidx = rng.choice(len(tri), size=n, p=area / area.sum())
    bary = rng.dirichlet(np.ones(3), size=n)
    pos = np.einsum("nk,nkj->nj", bary, tri[fidx])
    normals = np.cross(tri[fidx, 1] - tri[fidx, 0], tri[fidx, 2] - tri[fidx, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pos += 0.0015 * normals
    rot = _rot_x_to(normals, rng)
    scale = np.column_stack([np.full(n, 0.0015), rng.uniform(0.8, 1.2, (n, 2)) * 0.004])
    color = np.clip([0.78, 0.6, 0.5] + rng.normal(0, 0.02, (n, 3)), 0, 1)
    return _assemble(pos, rot, scale, rng.uniform(0.9, 1.0, n), color)


# --- motion -----------------------------------------------------------------

def _pivot_transform(R: np.ndarray, pivot: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = pivot - R @ pivot
    return T


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def nodding_motion(n_frames: int, amplitude: float = np.deg2rad(18.0),
                   period_s: float = 2.0, dt: float = 1.0 / 30.0,
                   pivot=NECK_PIVOT, joint: str = "head") -> list:
    """Sinusoidal pitch about the neck pivot, one MotionFrame per timestep."""
    frames = []
    for k in range(n_frames):
        angle = amplitude * np.sin(2.0 * np.pi * (k + 1) * dt / period_s)
        frames.append(MotionFrame(joint_transforms={
            joint: _pivot_transform(_rot_x(angle), np.asarray(pivot, dtype=np.float64))}))
    return frames


def shaking_motion(n_frames: int, amplitude: float = np.deg2rad(25.0),
                   period_s: float = 1.6, dt: float = 1.0 / 30.0,
                   pivot=NECK_PIVOT, joint: str = "head") -> list:
    """Sinusoidal yaw (head shake) about the neck pivot."""
    frames = []
    for k in range(n_frames):
        angle = amplitude * np.sin(2.0 * np.pi * (k + 1) * dt / period_s)
        frames.append(MotionFrame(joint_transforms={
            joint: _pivot_transform(_rot_z(angle), np.asarray(pivot, dtype=np.float64))}))
    return frames


def identity_motion(n_frames: int, joint: str = "head") -> list:
    return [MotionFrame.identity([joint]) for _ in range(n_frames)]


def translation_motion(n_frames: int, offset, joint: str = "head") -> list:
    """Constant rigid offset applied every frame."""
    T = np.eye(4)
    T[:3, 3] = np.asarray(offset, dtype=np.float64)
    return [MotionFrame(joint_transforms={joint: T.copy()}) for _ in range(n_frames)]


# --- scenes -----------------------------------------------------------------

def demo_scene(kind: str = "bob", n_hair: int = 3000, n_bald: int = 600,
               cage_verts: int = 220, seed: int = 0, dilation: int = 2,
               voxel_size: float = None, root_radius: float = None,
               config=None):
    """Fully assembled scene for one of the bundled hair fixtures."""
    from .cage import build_cage, mark_roots
    from .deform import splat_endpoints
    from .engine import Scene
    from .mvc import bake_weights, bind_proxies
    from .rig import bind_nearest

    if kind not in HAIR_FIXTURES:
        raise ValueError(f"unknown fixture '{kind}' (have {sorted(HAIR_FIXTURES)})")
    mesh = head_mesh()
    hair = HAIR_FIXTURES[kind](n_hair, seed=seed)
    tracked = splat_endpoints(hair).reshape(-1, 3)
    cage, grid = build_cage(tracked, voxel_size=voxel_size, dilation=dilation,
                            target_vertices=cage_verts)
    if root_radius is None:
        root_radius = 3.0 * grid.voxel_size
    cage = mark_roots(cage, mesh, root_radius)
    weights = bake_weights(hair, cage)
    proxies = bind_proxies(cage, hair, weights)
    bald = bind_nearest(bald_splats(mesh, n_bald, seed=seed + 17), mesh)
    from .core import SolverConfig
    return Scene(bald_local=bald, hair=hair, cage=cage, weights=weights,
                 proxies=proxies, mesh=mesh, solver=config or SolverConfig())
