"""File formats: splat PLY, mesh/cage OBJ + JSON sidecars, motion, weights.

Splat files use the common 3DGS binary PLY layout so external viewers
work unmodified: scales stored as natural log of meters, opacity as a
logit, colors as SH DC coefficients, rot_0..rot_3 = (w, x, y, z).
Triangle-local sets add a uint `binding` property. All binary formats are
little-endian and byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cage import Cage
from .core import Frame, MotionFrame, SkinnedMesh, SolverConfig, SplatSet
from .mvc import MvcWeights, POINTS_PER_SPLAT

SH_C0 = 0.28209479177387814
_LOGIT_CLIP = 88.0  # sigmoid saturates to exactly 0/1 in float32 beyond this

_BASE_PROPS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _logit(a):
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.log(a) - np.log1p(-a)
    return np.clip(out, -_LOGIT_CLIP, _LOGIT_CLIP)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def write_splats_ply(path, splats: SplatSet):
    """Binary little-endian PLY in the standard 3DGS vertex layout."""
    path = Path(path)
    props = list(_BASE_PROPS)
    if splats.feature is not None:
        props += ["seg_0", "seg_1"]
    local = splats.frame is Frame.TRIANGLE_LOCAL

    fields = [(p, "<f4") for p in props]
    if local:
        fields.append(("binding", "<u4"))
    rec = np.zeros(len(splats), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = splats.mu.T
    fdc = (splats.color.astype(np.float64) - 0.5) / SH_C0
    rec["f_dc_0"], rec["f_dc_1"], rec["f_dc_2"] = fdc.T.astype(np.float32)
    rec["opacity"] = _logit(splats.opacity).astype(np.float32)
    logs = np.log(splats.scale.astype(np.float64)).astype(np.float32)
    rec["scale_0"], rec["scale_1"], rec["scale_2"] = logs.T
    rec["rot_0"], rec["rot_1"], rec["rot_2"], rec["rot_3"] = splats.rot.T
    if splats.feature is not None:
        rec["seg_0"], rec["seg_1"] = splats.feature.T
    if local:
        rec["binding"] = splats.bindings.astype(np.uint32)

    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {len(splats)}"]
    lines += [f"property float {p}" for p in props]
    if local:
        lines.append("property uint binding")
    lines += ["end_header", ""]
    try:
        with open(path, "wb") as f:
            f.write("\n".join(lines).encode("ascii"))
            f.write(rec.tobytes())
    except OSError as e:
        raise OSError(f"cannot write splat file {path}: {e}") from e


def read_splats_ply(path) -> SplatSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read splat file {path}: {e}") from e
    header_end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or header_end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:header_end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n = None
    fields = []
    for line in header:
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "element" and n is not None and tok[1] != "vertex":
            break
        elif tok[:1] == ["property"] and n is not None:
            kind, name = tok[1], tok[2]
            np_kind = {"float": "<f4", "float32": "<f4", "uint": "<u4",
                       "uint32": "<u4", "int": "<i4"}.get(kind)
            if np_kind is None:
                raise ValueError(f"{path}: unsupported property type {kind}")
            fields.append((name, np_kind))
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    rec = np.frombuffer(raw, dtype=np.dtype(fields), count=n,
                        offset=header_end + len(b"end_header\n"))
    names = rec.dtype.names
    missing = [p for p in _BASE_PROPS if p not in names]
    if missing:
        raise ValueError(f"{path}: missing properties {missing}")

    mu = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    color = 0.5 + SH_C0 * np.stack([rec["f_dc_0"], rec["f_dc_1"], rec["f_dc_2"]],
                                   axis=1).astype(np.float64)
    opacity = _sigmoid(rec["opacity"])
    scale = np.exp(np.stack([rec["scale_0"], rec["scale_1"], rec["scale_2"]],
                            axis=1).astype(np.float64))
    rot = np.stack([rec["rot_0"], rec["rot_1"], rec["rot_2"], rec["rot_3"]], axis=1)
    feature = None
    if "seg_0" in names and "seg_1" in names:
        feature = np.stack([rec["seg_0"], rec["seg_1"]], axis=1)
    bindings = None
    frame = Frame.GLOBAL
    if "binding" in names:
        bindings = rec["binding"].astype(np.int32)
        frame = Frame.TRIANGLE_LOCAL
    return SplatSet(mu, rot, scale, opacity, color, feature, bindings, frame)


# --- OBJ + sidecars ---------------------------------------------------------

def _write_obj(path, vertices, faces):
    with open(path, "w", encoding="ascii") as f:
        for v in np.asarray(vertices, dtype=np.float32):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in np.asarray(faces, dtype=np.int64):
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def _read_obj(path):
    verts, faces = [], []
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as e:
        raise OSError(f"cannot read OBJ {path}: {e}") from e
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
            faces.append(idx)
    return np.array(verts, dtype=np.float32), np.array(faces, dtype=np.int32)


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_mesh(path, mesh: SkinnedMesh):
    """OBJ (v/f) plus a JSON sidecar with joints, weights, scalp faces."""
    _write_obj(path, mesh.vertices, mesh.faces)
    side = {
        "joints": list(mesh.joints),
        "weights": [[[j, w] for j, w in pairs] for pairs in mesh.weight_pairs()],
        "scalp_faces": [] if mesh.scalp_faces is None else mesh.scalp_faces.tolist(),
    }
    _sidecar(path).write_text(json.dumps(side), encoding="ascii")


def read_mesh(path) -> SkinnedMesh:
    verts, faces = _read_obj(path)
    side_path = _sidecar(path)
    try:
        side = json.loads(side_path.read_text(encoding="ascii"))
    except OSError as e:
        raise OSError(f"cannot read mesh sidecar {side_path}: {e}") from e
    scalp = np.asarray(side.get("scalp_faces", []), dtype=np.int32)
    return SkinnedMesh.from_pairs(verts, faces, side["joints"], side["weights"],
                                  scalp_faces=scalp if len(scalp) else None)


def write_cage(path, cage: Cage):
    """OBJ plus a JSON sidecar with inverse masses and root anchors."""
    _write_obj(path, cage.vertices, cage.faces)
    anchors = []
    for j in range(cage.n_vertices):
        if cage.anchor_face[j] < 0:
            anchors.append(None)
        else:
            anchors.append({"face": int(cage.anchor_face[j]),
                            "bary": [float(b) for b in cage.anchor_bary[j]]})
    side = {"inv_mass": [float(w) for w in cage.inv_mass], "root_anchor": anchors}
    _sidecar(path).write_text(json.dumps(side), encoding="ascii")


def read_cage(path) -> Cage:
    verts, faces = _read_obj(path)
    side_path = _sidecar(path)
    try:
        side = json.loads(side_path.read_text(encoding="ascii"))
    except OSError as e:
        raise OSError(f"cannot read cage sidecar {side_path}: {e}") from e
    m = len(verts)
    inv_mass = np.asarray(side["inv_mass"], dtype=np.float32)
    anchor_face = np.full(m, -1, dtype=np.int32)
    anchor_bary = np.zeros((m, 3), dtype=np.float32)
    for j, a in enumerate(side["root_anchor"]):
        if a is not None:
            anchor_face[j] = int(a["face"])
            anchor_bary[j] = a["bary"]
    return Cage(verts, faces, inv_mass=inv_mass,
                anchor_face=anchor_face, anchor_bary=anchor_bary)


# --- motion -----------------------------------------------------------------

def write_motion(path, frames):
    out = []
    for fr in frames:
        if fr.joint_transforms is not None:
            out.append({"joints": {name: [float(x) for x in t.reshape(16)]
                                   for name, t in fr.joint_transforms.items()}})
        else:
            out.append({"vertices": [float(x) for x in fr.explicit_vertices.reshape(-1)]})
    Path(path).write_text(json.dumps(out), encoding="ascii")


def read_motion(path) -> list:
    try:
        data = json.loads(Path(path).read_text(encoding="ascii"))
    except OSError as e:
        raise OSError(f"cannot read motion file {path}: {e}") from e
    frames = []
    for i, entry in enumerate(data):
        if "joints" in entry:
            frames.append(MotionFrame(joint_transforms={
                name: np.asarray(vals, dtype=np.float64).reshape(4, 4)
                for name, vals in entry["joints"].items()}))
        elif "vertices" in entry:
            frames.append(MotionFrame(
                explicit_vertices=np.asarray(entry["vertices"], dtype=np.float32).reshape(-1, 3)))
        else:
            raise ValueError(f"motion frame {i}: needs 'joints' or 'vertices'")
    return frames


# --- weight cache -----------------------------------------------------------

_MAGIC = b"MVCW"
_PAIR_DTYPE = np.dtype([("index", "<u4"), ("weight", "<f4")])


def write_weights(path, weights: MvcWeights):
    """Sparse row cache: magic, version, N, M, then per-row (count, pairs)."""
    n, p, m = weights.weights.shape
    flat = weights.weights.reshape(n * p, m)
    mask = flat != 0
    counts = mask.sum(axis=1).astype(np.uint32)
    rows_idx, cols_idx = np.nonzero(mask)
    pairs = np.empty(len(cols_idx), dtype=_PAIR_DTYPE)
    pairs["index"] = cols_idx.astype(np.uint32)
    pairs["weight"] = flat[rows_idx, cols_idx]

    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IQQ", 1, n, m))
            if counts.min() == counts.max():
                # uniform rows: one interleaved block
                k = int(counts[0])
                row_dtype = np.dtype([("count", "<u4"), ("pairs", _PAIR_DTYPE, (k,))])
                block = np.empty(n * p, dtype=row_dtype)
                block["count"] = k
                block["pairs"] = pairs.reshape(n * p, k)
                f.write(block.tobytes())
            else:
                boundaries = np.concatenate([[0], np.cumsum(counts)])
                pair_bytes = pairs.tobytes()
                for r in range(n * p):
                    f.write(struct.pack("<I", counts[r]))
                    f.write(pair_bytes[boundaries[r] * 8:boundaries[r + 1] * 8])
    except OSError as e:
        raise OSError(f"cannot write weight cache {path}: {e}") from e


def read_weights(path) -> MvcWeights:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read weight cache {path}: {e}") from e
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic (expected MVCW)")
    version, n, m = struct.unpack_from("<IQQ", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported weight cache version {version}")
    rows = n * POINTS_PER_SPLAT
    dense = np.zeros((rows, m), dtype=np.float32)
    off = 4 + 20
    (first_count,) = struct.unpack_from("<I", raw, off)
    uniform_size = off + rows * (4 + first_count * 8)
    if len(raw) == uniform_size:
        row_dtype = np.dtype([("count", "<u4"), ("pairs", _PAIR_DTYPE, (first_count,))])
        block = np.frombuffer(raw, dtype=row_dtype, count=rows, offset=off)
        if np.all(block["count"] == first_count):
            cols = block["pairs"]["index"].astype(np.int64)
            dense[np.arange(rows)[:, None], cols] = block["pairs"]["weight"]
            return MvcWeights(dense.reshape(n, POINTS_PER_SPLAT, m))
    for r in range(rows):
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        pairs = np.frombuffer(raw, dtype=_PAIR_DTYPE, count=count, offset=off)
        off += count * 8
        dense[r, pairs["index"]] = pairs["weight"]
    return MvcWeights(dense.reshape(n, POINTS_PER_SPLAT, m))


# --- solver config ----------------------------------------------------------

_CONFIG_FLOATS = {"dt", "damping", "stretch_compliance", "bend_compliance",
                  "collision_margin", "volume_compliance"}
_CONFIG_INTS = {"substeps", "iterations", "max_splats_warn"}
_CONFIG_BOOLS = {"volume_constraint"}


def read_config(path) -> SolverConfig:
    """Flat key=value file mirroring SolverConfig fields; # starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in _CONFIG_FLOATS:
            values[key] = float(val)
        elif key in _CONFIG_INTS:
            values[key] = int(val)
        elif key in _CONFIG_BOOLS:
            values[key] = val.lower() in ("1", "true", "yes", "on")
        elif key == "gravity":
            parts = [float(x) for x in val.split(",")]
            if len(parts) == 1:
                parts = [0.0, 0.0, -abs(parts[0])]
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: gravity needs 1 or 3 components")
            values["gravity"] = np.array(parts, dtype=np.float32)
        else:
            raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
    return SolverConfig(**values)


def write_config(path, config: SolverConfig):
    lines = [f"dt={config.dt!r}", f"substeps={config.substeps}",
             f"iterations={config.iterations}",
             "gravity=" + ",".join(repr(float(g)) for g in config.gravity),
             f"damping={config.damping!r}",
             f"stretch_compliance={config.stretch_compliance!r}",
             f"bend_compliance={config.bend_compliance!r}",
             f"collision_margin={config.collision_margin!r}",
             f"max_splats_warn={config.max_splats_warn}",
             f"volume_constraint={'true' if config.volume_constraint else 'false'}",
             f"volume_compliance={config.volume_compliance!r}", ""]
    Path(path).write_text("\n".join(lines), encoding="ascii")


def read_camera(path):
    from .engine import Camera
    try:
        data = json.loads(Path(path).read_text(encoding="ascii"))
    except OSError as e:
        raise OSError(f"cannot read camera {path}: {e}") from e
    return Camera(pose=np.asarray(data["pose"], dtype=np.float64).reshape(4, 4),
                  fx=float(data["fx"]), fy=float(data["fy"]),
                  cx=float(data["cx"]), cy=float(data["cy"]),
                  width=int(data["width"]), height=int(data["height"]))
