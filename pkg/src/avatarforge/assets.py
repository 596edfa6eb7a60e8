"""Neutral body-model asset format and the synthetic toy body generator.

The toy body is a single closed genus-0 surface of revolution around +Y:
a capsule torso with a small spherical head, 2*n_rings segments around the
axis and 4*n_rings-2 latitude rings between the two poles. Topology,
labels, skinning and UVs are fully deterministic; the RNG seed only
perturbs the shape/expression/pose blendshape bases.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum

import numpy as np

from .container import load_arrays, save_arrays
from .errors import DimensionError, InvariantError, ParseError


class PartLabel(IntEnum):
    HEAD = 0
    BODY = 1
    LEFT_HAND = 2
    RIGHT_HAND = 3
    FACE_INTERIOR = 4
    JAW = 5
    OTHER = 6


class Joint(IntEnum):
    ROOT = 0
    SPINE = 1
    NECK = 2
    JAW = 3
    LEFT_ARM = 4
    RIGHT_ARM = 5


ROOT_PARENT = -1  # sentinel in `parents`


@dataclass
class TemplateModel:
    """Rest-pose body asset: mesh, blendshape bases, skeleton, skinning.

    All arrays are float64/int32 and are frozen (non-writeable) after
    construction so the model can be shared read-only across threads.
    """

    vertices: np.ndarray  # (N, 3) meters
    faces: np.ndarray  # (F, 3) int32, CCW from outside
    uv_coords: np.ndarray  # (N, 2) in [0, 1]^2
    shape_basis: np.ndarray  # (N, 3, S_b)
    expr_basis: np.ndarray  # (N, 3, S_e)
    pose_basis: np.ndarray  # (N, 3, 9*(K-1))
    joint_regressor: np.ndarray  # (K, N), rows sum to 1
    skin_weights: np.ndarray  # (N, K), rows sum to 1, entries >= 0
    parents: np.ndarray  # (K,) int32, parents[0] == -1
    part_labels: np.ndarray  # (N,) int32 PartLabel codes
    subdivision_mask: np.ndarray  # (F,) bool

    def __post_init__(self):
        for f in fields(self):
            arr = getattr(self, f.name)
            arr = np.asarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, f.name, arr)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[2]


_FIELD_DTYPES = {
    "vertices": np.float64,
    "faces": np.int32,
    "uv_coords": np.float64,
    "shape_basis": np.float64,
    "expr_basis": np.float64,
    "pose_basis": np.float64,
    "joint_regressor": np.float64,
    "skin_weights": np.float64,
    "parents": np.int32,
    "part_labels": np.int32,
    "subdivision_mask": np.bool_,
}

_SUM_TOL = 1e-9


def validate_template(model: TemplateModel) -> None:
    """Raise DimensionError / InvariantError if the model is inconsistent."""
    n = model.vertices.shape[0] if model.vertices.ndim == 2 else -1
    k = model.parents.shape[0] if model.parents.ndim == 1 else -1
    f = model.faces.shape[0] if model.faces.ndim == 2 else -1
    expected = {
        "vertices": (n, 3),
        "faces": (f, 3),
        "uv_coords": (n, 2),
        "shape_basis": (n, 3, model.shape_basis.shape[2] if model.shape_basis.ndim == 3 else -1),
        "expr_basis": (n, 3, model.expr_basis.shape[2] if model.expr_basis.ndim == 3 else -1),
        "pose_basis": (n, 3, 9 * (k - 1)),
        "joint_regressor": (k, n),
        "skin_weights": (n, k),
        "parents": (k,),
        "part_labels": (n,),
        "subdivision_mask": (f,),
    }
    for name, shape in expected.items():
        arr = getattr(model, name)
        if arr.shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")

    for name in ("vertices", "uv_coords", "shape_basis", "expr_basis", "pose_basis",
                 "joint_regressor", "skin_weights"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise InvariantError(f"{name} contains non-finite values")

    w = model.skin_weights
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise InvariantError("skin_weights entries outside [0, 1]")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > _SUM_TOL):
        raise InvariantError("skin_weights rows do not sum to 1")
    if np.any(np.abs(model.joint_regressor.sum(axis=1) - 1.0) > _SUM_TOL):
        raise InvariantError("joint_regressor rows do not sum to 1")

    if model.parents[0] != ROOT_PARENT:
        raise InvariantError("parents[0] must be the root sentinel (-1)")
    for j in range(1, k):
        seen = set()
        cur = j
        while cur != 0:
            if cur in seen or not (0 <= cur < k):
                raise InvariantError(f"joint {j}: parents do not form a tree rooted at 0")
            seen.add(cur)
            cur = int(model.parents[cur])
            if cur == ROOT_PARENT:
                raise InvariantError(f"joint {j}: disconnected from root")

    if np.any(model.faces < 0) or np.any(model.faces >= n):
        raise InvariantError("face indices out of range")
    if np.any(model.uv_coords < 0.0) or np.any(model.uv_coords > 1.0):
        raise InvariantError("uv_coords outside [0, 1]^2")
    labels = model.part_labels
    if np.any(labels < 0) or np.any(labels > max(PartLabel)):
        raise InvariantError("part_labels outside the PartLabel enum range")


def save_model(model: TemplateModel, path) -> None:
    """Write the model; save followed by load is the identity on all fields."""
    arrays = {f.name: np.ascontiguousarray(getattr(model, f.name), dtype=_FIELD_DTYPES[f.name])
              for f in fields(model)}
    save_arrays(path, arrays)


def load_model(path) -> TemplateModel:
    """Load and validate a model asset."""
    arrays = load_arrays(path)
    missing = [name for name in _FIELD_DTYPES if name not in arrays]
    if missing:
        raise ParseError(f"{path}: missing arrays {missing}")
    kwargs = {}
    for name, dtype in _FIELD_DTYPES.items():
        arr = arrays[name]
        if arr.dtype != np.dtype(dtype):
            raise ParseError(f"{path}: array {name!r} has dtype {arr.dtype}, expected {np.dtype(dtype)}")
        kwargs[name] = arr
    model = TemplateModel(**kwargs)
    validate_template(model)
    return model


# ---------------------------------------------------------------------------
# Toy body generator
# ---------------------------------------------------------------------------

# Geometry constants (meters). The head is deliberately small relative to
# the torso so per-label vertex density mirrors the real asset family,
# where the head carries most of the mesh resolution.
_HEAD_CENTER_Y = 1.45
_HEAD_RADIUS = 0.085
_HEAD_MAX_POLAR = 0.75 * np.pi  # sphere opening where the neck attaches
_NECK_Y, _NECK_R = 1.30, 0.045
_TORSO_KNOTS = np.array([
    # (y, radius) from shoulders down; final knot is the bottom pole
    (1.24, 0.160),
    (1.05, 0.200),
    (0.80, 0.170),
    (0.55, 0.200),
    (0.30, 0.160),
    (0.10, 0.100),
    (0.00, 0.000),
])

SHAPE_DIM = 4
EXPR_DIM = 3


def _profile(n_rings: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-ring (y, radius) from the top pole down. Returns (y, r, h_head)."""
    m = 4 * n_rings - 2
    h = n_rings // 2
    ys = np.empty(m)
    rs = np.empty(m)

    # Head sphere rings 0..h-1.
    phi = _HEAD_MAX_POLAR * (np.arange(1, h + 1) / h)
    ys[:h] = _HEAD_CENTER_Y + _HEAD_RADIUS * np.cos(phi)
    rs[:h] = _HEAD_RADIUS * np.sin(phi)

    # Neck ring.
    ys[h], rs[h] = _NECK_Y, _NECK_R

    # Torso rings h+1..m-1, uniform in arc length along the knot polyline
    # (the polyline ends at the bottom pole, which is not a ring).
    seg = np.diff(_TORSO_KNOTS, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    n_torso = m - h - 1
    t = cum[-1] * (np.arange(1, n_torso + 1) / (n_torso + 1))
    ys[h + 1:] = np.interp(t, cum, _TORSO_KNOTS[:, 0])
    rs[h + 1:] = np.interp(t, cum, _TORSO_KNOTS[:, 1])
    return ys, rs, h


def _smooth_field(rng: np.random.Generator, points: np.ndarray, n_cols: int,
                  sigma: float, envelope: np.ndarray | None = None) -> np.ndarray:
    """(N, 3, n_cols) basis of low-frequency trigonometric random fields."""
    n = points.shape[0]
    out = np.zeros((n, 3, n_cols))
    for c in range(n_cols):
        for axis in range(3):
            val = np.zeros(n)
            for _ in range(3):
                k = rng.uniform(-3.0, 3.0, size=3)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = rng.normal(0.0, sigma)
                val += amp * np.sin(points @ k + phase)
            out[:, axis, c] = val
    if envelope is not None:
        out *= envelope[:, None, None]
    return out


def make_toy_body(seed: int, n_rings: int) -> TemplateModel:
    """Deterministic capsule-torso humanoid with a spherical head.

    n_rings=8 gives N=482 vertices, F=960 faces, K=6 joints. The head
    region is left out of the subdivision mask (it is already dense);
    torso faces are masked for upsampling.
    """
    if n_rings < 4:
        raise ValueError("n_rings must be >= 4")
    s = 2 * n_rings
    ys, rs, h = _profile(n_rings)
    m = ys.shape[0]
    n = s * m + 2

    # Vertices: top pole, rings top->bottom, bottom pole.
    az = 2.0 * np.pi * np.arange(s) / s
    cos_az, sin_az = np.cos(az), np.sin(az)  # azimuth 0 faces +Z
    verts = np.empty((n, 3))
    verts[0] = (0.0, _HEAD_CENTER_Y + _HEAD_RADIUS, 0.0)
    ring_idx = 1 + np.arange(m)[:, None] * s + np.arange(s)[None, :]
    verts[ring_idx.ravel(), 0] = np.outer(rs, sin_az).ravel()
    verts[ring_idx.ravel(), 1] = np.repeat(ys, s)
    verts[ring_idx.ravel(), 2] = np.outer(rs, cos_az).ravel()
    verts[n - 1] = (0.0, 0.0, 0.0)

    def rv(ring: int, seg: int) -> int:
        return 1 + ring * s + (seg % s)

    # Faces, CCW viewed from outside.
    faces = []
    for j in range(s):
        faces.append((0, rv(0, j), rv(0, j + 1)))
    for i in range(m - 1):
        for j in range(s):
            a, b = rv(i, j), rv(i + 1, j)
            a2, b2 = rv(i, j + 1), rv(i + 1, j + 1)
            faces.append((a, b, b2))
            faces.append((a, b2, a2))
    for j in range(s):
        faces.append((n - 1, rv(m - 1, j + 1), rv(m - 1, j)))
    faces = np.asarray(faces, dtype=np.int32)

    # Subdivision mask: head cap + bands above the neck ring stay dense
    # (mask False); everything below is upsampled (True).
    n_head_faces = s + 2 * s * h
    mask = np.ones(faces.shape[0], dtype=bool)
    mask[:n_head_faces] = False

    # Part labels.
    labels = np.full(n, int(PartLabel.BODY), dtype=np.int32)
    labels[0] = PartLabel.HEAD
    for i in range(h):
        labels[ring_idx[i]] = PartLabel.HEAD
    front = [j for j in range(s) if min(j, s - j) <= s // 8]
    if h >= 3:
        for j in front:
            labels[rv(h - 3, j)] = PartLabel.FACE_INTERIOR
    for i in (h - 2, h - 1):
        if i >= 0:
            for j in front:
                labels[rv(i, j)] = PartLabel.JAW
    side = [s // 4 - 1, s // 4, s // 4 + 1]
    for i in (h + 1, h + 2):
        for j in side:
            labels[rv(i, j)] = PartLabel.LEFT_HAND
            labels[rv(i, j + s // 2)] = PartLabel.RIGHT_HAND

    # Joint regressor: uniform over defining vertex sets.
    k = len(Joint)
    regressor = np.zeros((k, n))
    ring_hip = h + 1 + (2 * (m - h - 1)) // 3
    ring_chest = h + 1 + (m - h - 1) // 4

    def uniform_row(joint: Joint, idx: np.ndarray) -> None:
        regressor[joint, idx] = 1.0 / idx.shape[0]

    uniform_row(Joint.ROOT, ring_idx[ring_hip])
    uniform_row(Joint.SPINE, ring_idx[ring_chest])
    uniform_row(Joint.NECK, ring_idx[h])
    uniform_row(Joint.JAW, np.flatnonzero(labels == PartLabel.JAW))
    uniform_row(Joint.LEFT_ARM, np.flatnonzero(labels == PartLabel.LEFT_HAND))
    uniform_row(Joint.RIGHT_ARM, np.flatnonzero(labels == PartLabel.RIGHT_HAND))

    parents = np.array([ROOT_PARENT, Joint.ROOT, Joint.SPINE, Joint.NECK,
                        Joint.SPINE, Joint.SPINE], dtype=np.int32)

    # Skin weights: pure per region, linear spine->root ramp down the torso.
    weights = np.zeros((n, k))
    weights[0, Joint.NECK] = 1.0
    for i in range(h):
        weights[ring_idx[i], Joint.NECK] = 1.0
    weights[np.flatnonzero(labels == PartLabel.JAW)] = 0.0
    weights[np.flatnonzero(labels == PartLabel.JAW), Joint.JAW] = 1.0
    weights[ring_idx[h], Joint.NECK] = 0.5
    weights[ring_idx[h], Joint.SPINE] = 0.5
    for i in range(h + 1, m):
        u = (i - h) / (m - h)
        if u <= 0.35:
            w_spine = 1.0
        elif u >= 0.75:
            w_spine = 0.0
        else:
            w_spine = 1.0 - (u - 0.35) / 0.4
        weights[ring_idx[i], Joint.SPINE] = w_spine
        weights[ring_idx[i], Joint.ROOT] = 1.0 - w_spine
    weights[n - 1] = 0.0
    weights[n - 1, Joint.ROOT] = 1.0
    for lab, joint in ((PartLabel.LEFT_HAND, Joint.LEFT_ARM),
                       (PartLabel.RIGHT_HAND, Joint.RIGHT_ARM)):
        idx = np.flatnonzero(labels == lab)
        weights[idx] = 0.0
        weights[idx, joint] = 0.6
        weights[idx, Joint.SPINE] = 0.4
    weights /= weights.sum(axis=1, keepdims=True)

    # UVs: cylindrical strip for the body, polar disk for the head.
    uv = np.empty((n, 2))
    u_col = np.arange(s) / s
    body_v_lo, body_v_hi = 0.04, 0.66
    y_body_min, y_body_max = 0.0, _NECK_Y
    for i in range(h, m):
        vcoord = body_v_lo + (body_v_hi - body_v_lo) * (ys[i] - y_body_min) / (y_body_max - y_body_min)
        uv[ring_idx[i], 0] = u_col
        uv[ring_idx[i], 1] = vcoord
    uv[n - 1] = (0.0, body_v_lo)
    disk_c, disk_r = np.array([0.5, 0.84]), 0.14
    uv[0] = disk_c
    for i in range(h):
        rho = disk_r * (_HEAD_MAX_POLAR * (i + 1) / h) / _HEAD_MAX_POLAR
        uv[ring_idx[i], 0] = disk_c[0] + rho * sin_az
        uv[ring_idx[i], 1] = disk_c[1] + rho * cos_az

    # Blendshape bases: the only seeded part of the asset.
    rng = np.random.default_rng(seed)
    head_center = np.array([0.0, _HEAD_CENTER_Y, 0.0])
    falloff = np.exp(-np.sum((verts - head_center) ** 2, axis=1) / (2.0 * (1.8 * _HEAD_RADIUS) ** 2))
    shape_basis = _smooth_field(rng, verts, SHAPE_DIM, sigma=0.02)
    expr_basis = _smooth_field(rng, verts, EXPR_DIM, sigma=0.008, envelope=falloff)
    # Pose correctives are supported only where the driving joint has
    # skinning influence, so posing one joint moves exactly its vertices.
    pose_basis = _smooth_field(rng, verts, 9 * (k - 1), sigma=0.0015)
    for j in range(1, k):
        pose_basis[:, :, 9 * (j - 1): 9 * j] *= weights[:, j, None, None]

    return TemplateModel(
        vertices=verts,
        faces=faces,
        uv_coords=uv,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_basis=pose_basis,
        joint_regressor=regressor,
        skin_weights=weights,
        parents=parents,
        part_labels=labels,
        subdivision_mask=mask,
    )
