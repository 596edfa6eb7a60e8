"""Partial midpoint subdivision with interpolated attributes, plus the
learnable displacement layer.

Masked faces split 4-ways at edge midpoints each round; unmasked faces
bordering the masked region are stitched (2- or 3-way fan) over the
induced midpoints so the surface stays watertight. Midpoint attributes
are endpoint means; new vertices are appended after the originals sorted
by (min_endpoint, max_endpoint) within each round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import TemplateModel
from .body import BodyParams, PosedMesh, SkinData, lbs_forward_skin, _blendshaped, _check_params
from .errors import DimensionError
from .rotations import rodrigues


@dataclass(eq=False)
class SubdividedModel:
    base: TemplateModel
    vertices_rest: np.ndarray  # (N_s, 3)
    faces: np.ndarray  # (F_s, 3) int32
    uv_coords: np.ndarray  # (N_s, 2)
    skin_weights_up: np.ndarray  # (N_s, K)
    parent_map: np.ndarray  # (N_s, 3): [vertexA, vertexB, t]; t=0 for originals
    shape_basis: np.ndarray  # lifted (N_s, 3, S_b)
    expr_basis: np.ndarray
    pose_basis: np.ndarray
    part_labels_up: np.ndarray  # (N_s,)
    face_mask: np.ndarray  # (F_s,) bool: face descends from a masked base face

    def __post_init__(self):
        for name in ("vertices_rest", "faces", "uv_coords", "skin_weights_up",
                     "parent_map", "shape_basis", "expr_basis", "pose_basis",
                     "part_labels_up", "face_mask"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        # lazy caches keyed by texture size (editing/export)
        object.__setattr__(self, "_ownership_cache", {})

    @property
    def n_vertices(self) -> int:
        return self.vertices_rest.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_joints(self) -> int:
        return self.base.n_joints

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[2]


@dataclass(eq=False)
class DisplacementLayer:
    """Learnable per-vertex offsets in the rest (canonical) space."""

    d: np.ndarray  # (N_s, 3) meters

    @classmethod
    def zeros(cls, sub: SubdividedModel) -> "DisplacementLayer":
        return cls(d=np.zeros((sub.n_vertices, 3)))


def _split_once(verts, faces, face_mask, attrs, labels):
    """One subdivision round. attrs: list of per-vertex float arrays."""
    n = verts.shape[0]
    midpoint_of: dict[tuple[int, int], int] = {}
    edges = set()
    for f in np.flatnonzero(face_mask):
        a, b, c = (int(v) for v in faces[f])
        edges.add((min(a, b), max(a, b)))
        edges.add((min(b, c), max(b, c)))
        edges.add((min(c, a), max(c, a)))
    for idx, (a, b) in enumerate(sorted(edges)):
        midpoint_of[(a, b)] = n + idx

    n_new = len(midpoint_of)
    new_verts = np.empty((n + n_new, 3))
    new_verts[:n] = verts
    new_attrs = [np.empty((n + n_new,) + a.shape[1:]) for a in attrs]
    for na, a in zip(new_attrs, attrs):
        na[:n] = a
    new_labels = np.empty(n + n_new, dtype=labels.dtype)
    new_labels[:n] = labels
    parent = np.empty((n + n_new, 3))
    parent[:n, 0] = parent[:n, 1] = np.arange(n)
    parent[:n, 2] = 0.0

    for (a, b), m in midpoint_of.items():
        new_verts[m] = 0.5 * (verts[a] + verts[b])
        for na, arr in zip(new_attrs, attrs):
            na[m] = 0.5 * (arr[a] + arr[b])
        # first (lower-index) endpoint wins label disagreements
        new_labels[m] = labels[a]
        parent[m] = (a, b, 0.5)

    def mid(a: int, b: int) -> int | None:
        return midpoint_of.get((min(a, b), max(a, b)))

    out_faces: list[tuple[int, int, int]] = []
    out_mask: list[bool] = []

    def emit(tri, masked):
        out_faces.append(tri)
        out_mask.append(masked)

    for f in range(faces.shape[0]):
        v0, v1, v2 = (int(v) for v in faces[f])
        if face_mask[f]:
            m01, m12, m20 = mid(v0, v1), mid(v1, v2), mid(v2, v0)
            emit((v0, m01, m20), True)
            emit((v1, m12, m01), True)
            emit((v2, m20, m12), True)
            emit((m01, m12, m20), True)
            continue
        mids = (mid(v0, v1), mid(v1, v2), mid(v2, v0))
        count = sum(m is not None for m in mids)
        if count == 0:
            emit((v0, v1, v2), False)
        elif count == 3:
            m01, m12, m20 = mids
            emit((v0, m01, m20), False)
            emit((v1, m12, m01), False)
            emit((v2, m20, m12), False)
            emit((m01, m12, m20), False)
        elif count == 1:
            # rotate so the split edge is (v0, v1)
            k = next(i for i, m in enumerate(mids) if m is not None)
            tri = (v0, v1, v2)
            a, b, c = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            m = mids[k]
            emit((a, m, c), False)
            emit((m, b, c), False)
        else:
            # rotate so the two split edges are (v0,v1) and (v1,v2)
            k = next(i for i, m in enumerate(mids) if m is None)
            tri = (v0, v1, v2)
            a, b, c = tri[(k + 1) % 3], tri[(k + 2) % 3], tri[k]
            mab = mid(a, b)
            mbc = mid(b, c)
            emit((a, mab, c), False)
            emit((mab, mbc, c), False)
            emit((mab, b, mbc), False)

    return (new_verts, np.asarray(out_faces, dtype=np.int32),
            np.asarray(out_mask, dtype=bool), new_attrs, new_labels, parent)


def subdivide_partial(model: TemplateModel, rounds: int = 1) -> SubdividedModel:
    """Split masked faces `rounds` times; border faces are stitched."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    verts = np.array(model.vertices)
    faces = np.array(model.faces)
    face_mask = np.array(model.subdivision_mask)
    labels = np.array(model.part_labels)
    n_base = verts.shape[0]
    attrs = [
        np.array(model.uv_coords),
        np.array(model.skin_weights),
        np.array(model.shape_basis),
        np.array(model.expr_basis),
        np.array(model.pose_basis),
    ]
    parents_full = None
    for _ in range(rounds):
        verts, faces, face_mask, attrs, labels, parent = _split_once(
            verts, faces, face_mask, attrs, labels)
        if parents_full is None:
            parents_full = parent
        else:
            parents_full = np.vstack([parents_full, parent[parents_full.shape[0]:]])

    uv, weights, sbasis, ebasis, pbasis = attrs
    weights = weights / weights.sum(axis=1, keepdims=True)
    return SubdividedModel(
        base=model,
        vertices_rest=verts,
        faces=faces,
        uv_coords=uv,
        skin_weights_up=weights,
        parent_map=parents_full,
        shape_basis=sbasis,
        expr_basis=ebasis,
        pose_basis=pbasis,
        part_labels_up=labels,
        face_mask=face_mask,
    )


def as_template(sub: SubdividedModel) -> TemplateModel:
    """Repackage a subdivided model as a standalone template asset."""
    return TemplateModel(
        vertices=sub.vertices_rest,
        faces=sub.faces,
        uv_coords=sub.uv_coords,
        shape_basis=sub.shape_basis,
        expr_basis=sub.expr_basis,
        pose_basis=sub.pose_basis,
        joint_regressor=_lift_regressor(sub),
        skin_weights=sub.skin_weights_up,
        parents=sub.base.parents,
        part_labels=sub.part_labels_up,
        subdivision_mask=sub.face_mask,
    )


def _lift_regressor(sub: SubdividedModel) -> np.ndarray:
    """Base joint regressor re-indexed onto the upsampled vertex set.

    Original vertices keep their regression weight; midpoints get zero, so
    regressed joints are unchanged by subdivision.
    """
    k = sub.base.n_joints
    reg = np.zeros((k, sub.n_vertices))
    reg[:, : sub.base.n_vertices] = sub.base.joint_regressor
    return reg


def skin_data(sub: SubdividedModel) -> SkinData:
    """Skinning arrays for the upsampled body; joints stay base-driven."""
    return SkinData(
        template=sub.vertices_rest,
        shape_basis=sub.shape_basis,
        expr_basis=sub.expr_basis,
        pose_basis=sub.pose_basis,
        skin_weights=sub.skin_weights_up,
        parents=sub.base.parents,
        base_template=sub.base.vertices,
        base_shape_basis=sub.base.shape_basis,
        joint_regressor=sub.base.joint_regressor,
    )


def personalized_template(sub: SubdividedModel, disp: DisplacementLayer,
                          params: BodyParams) -> np.ndarray:
    """Blendshapes on the lifted bases plus the displacement layer."""
    sd = skin_data(sub)
    _check_params(sd, params)
    rot_body = rodrigues(params.theta.body_pose)
    return _blendshaped(sd, params, rot_body, disp.d)


def posed_avatar(sub: SubdividedModel, disp: DisplacementLayer,
                 params: BodyParams) -> PosedMesh:
    """Pose the displaced, upsampled body.

    Joints are regressed from the base-resolution, displacement-free
    shape so D cannot dislocate the skeleton; displacements live in the
    rest space and are skinned with their vertex.
    """
    if disp.d.shape != (sub.n_vertices, 3):
        raise DimensionError(f"displacement: expected {(sub.n_vertices, 3)}, got {disp.d.shape}")
    return lbs_forward_skin(skin_data(sub), params, displacement=disp.d)
