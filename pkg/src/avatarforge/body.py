"""Parametric body forward model and its reverse-mode derivatives.

The pipeline is: blendshapes on the rest template, joint regression from
the shape-only template, then linear blend skinning along the kinematic
tree. Skinning transforms are accumulated in a joint-local form

    rot_k = rot_parent @ R_k          (world rotation)
    off_k = off_parent + rot_parent @ (j_k - R_k j_k)

so that at the zero pose every transform is exactly (I, 0) and the posed
mesh reproduces the template bit-for-bit.

``lbs_backward`` walks the same graph in reverse and returns exact
gradients for every learnable block; finite differences in the test suite
are the independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assets import TemplateModel
from .errors import DimensionError, StaleTapeError
from .rotations import rodrigues, rodrigues_backward


@dataclass(eq=False)
class PoseParams:
    """Axis-angle pose: per-joint body rotations (root excluded) + root."""

    body_pose: np.ndarray  # (K-1, 3) radians; row i drives joint i+1
    root_orient: np.ndarray  # (3,)
    root_transl: np.ndarray  # (3,) meters

    @classmethod
    def zeros(cls, n_joints: int) -> "PoseParams":
        return cls(
            body_pose=np.zeros((n_joints - 1, 3)),
            root_orient=np.zeros(3),
            root_transl=np.zeros(3),
        )

    def copy(self) -> "PoseParams":
        return PoseParams(self.body_pose.copy(), self.root_orient.copy(),
                          self.root_transl.copy())


@dataclass(eq=False)
class BodyParams:
    beta: np.ndarray  # (S_b,)
    theta: PoseParams
    psi: np.ndarray  # (S_e,)

    @classmethod
    def zeros(cls, model) -> "BodyParams":
        return cls(
            beta=np.zeros(model.shape_dim),
            theta=PoseParams.zeros(model.n_joints),
            psi=np.zeros(model.expr_dim),
        )


@dataclass(eq=False)
class LbsGradients:
    beta: np.ndarray
    psi: np.ndarray
    body_pose: np.ndarray
    root_orient: np.ndarray
    root_transl: np.ndarray
    displacement: np.ndarray | None = None


@dataclass(eq=False)
class LbsTape:
    """Intermediates of one lbs_forward call; single-consumer."""

    skin: "SkinData"
    params: BodyParams
    displacement: np.ndarray | None
    rest: np.ndarray  # (N, 3) template after blendshapes (+D)
    rotations: np.ndarray  # (K, 3, 3) local joint rotations, root first
    world_rot: np.ndarray  # (K, 3, 3)
    world_off: np.ndarray  # (K, 3)
    local_off: np.ndarray  # (K, 3) the (j_k - R_k j_k) terms
    joints_rest: np.ndarray  # (K, 3)
    topo: list[int]


@dataclass(eq=False)
class PosedMesh:
    vertices: np.ndarray  # (N, 3)
    joints_world: np.ndarray  # (K, 3)
    jacobian_tape: LbsTape


@dataclass(eq=False)
class SkinData:
    """Arrays needed to pose one resolution of the body.

    For the base model this simply aliases the TemplateModel fields; the
    subdivision module builds one from the lifted arrays while keeping the
    base-resolution pieces used for joint regression.
    """

    template: np.ndarray  # (N, 3)
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    pose_basis: np.ndarray
    skin_weights: np.ndarray  # (N, K)
    parents: np.ndarray
    base_template: np.ndarray  # (Nb, 3) for J(beta)
    base_shape_basis: np.ndarray  # (Nb, 3, S_b)
    joint_regressor: np.ndarray  # (K, Nb)

    @classmethod
    def from_model(cls, model: TemplateModel) -> "SkinData":
        return cls(
            template=model.vertices,
            shape_basis=model.shape_basis,
            expr_basis=model.expr_basis,
            pose_basis=model.pose_basis,
            skin_weights=model.skin_weights,
            parents=model.parents,
            base_template=model.vertices,
            base_shape_basis=model.shape_basis,
            joint_regressor=model.joint_regressor,
        )


def _check_params(skin: SkinData, params: BodyParams) -> None:
    k = skin.parents.shape[0]
    if params.beta.shape != (skin.shape_basis.shape[2],):
        raise DimensionError(f"beta: expected ({skin.shape_basis.shape[2]},), got {params.beta.shape}")
    if params.psi.shape != (skin.expr_basis.shape[2],):
        raise DimensionError(f"psi: expected ({skin.expr_basis.shape[2]},), got {params.psi.shape}")
    if params.theta.body_pose.shape != (k - 1, 3):
        raise DimensionError(f"body_pose: expected ({k - 1}, 3), got {params.theta.body_pose.shape}")
    if params.theta.root_orient.shape != (3,) or params.theta.root_transl.shape != (3,):
        raise DimensionError("root_orient/root_transl must have shape (3,)")


def _pose_coeffs(rot_body: np.ndarray) -> np.ndarray:
    """Flattened (R_j - I) per non-root joint, joint-major row-major."""
    return (rot_body - np.eye(3)).reshape(-1)


def _blendshaped(skin: SkinData, params: BodyParams, rot_body: np.ndarray,
                 displacement: np.ndarray | None) -> np.ndarray:
    rest = skin.template + skin.shape_basis @ params.beta + skin.expr_basis @ params.psi
    rest = rest + skin.pose_basis @ _pose_coeffs(rot_body)
    if displacement is not None:
        if displacement.shape != rest.shape:
            raise DimensionError(f"displacement: expected {rest.shape}, got {displacement.shape}")
        rest = rest + displacement
    return rest


# joints_rest depends only on (model arrays, beta); beta changes per
# optimization step while theta changes per animation sample, so the last
# few results are memoized.
_JOINTS_CACHE: dict[tuple[int, bytes], np.ndarray] = {}
_JOINTS_CACHE_MAX = 8


def _rest_joints(skin: SkinData, beta: np.ndarray) -> np.ndarray:
    key = (id(skin.joint_regressor), beta.tobytes())
    hit = _JOINTS_CACHE.get(key)
    if hit is not None:
        return hit
    joints = skin.joint_regressor @ (skin.base_template + skin.base_shape_basis @ beta)
    if len(_JOINTS_CACHE) >= _JOINTS_CACHE_MAX:
        _JOINTS_CACHE.pop(next(iter(_JOINTS_CACHE)))
    _JOINTS_CACHE[key] = joints
    return joints


def _topo_order(parents: np.ndarray) -> list[int]:
    k = parents.shape[0]
    order: list[int] = [0]
    placed = {0}
    while len(order) < k:
        progressed = False
        for j in range(1, k):
            if j not in placed and int(parents[j]) in placed:
                order.append(j)
                placed.add(j)
                progressed = True
        if not progressed:
            raise DimensionError("parents array does not describe a tree")
    return order


def shaped_template(model: TemplateModel, params: BodyParams) -> np.ndarray:
    """Rest template plus shape/expression/pose-corrective blendshapes."""
    skin = SkinData.from_model(model)
    _check_params(skin, params)
    rot_body = rodrigues(params.theta.body_pose)
    return _blendshaped(skin, params, rot_body, None)


def regress_joints(model: TemplateModel, shaped: np.ndarray) -> np.ndarray:
    """Joint positions as the linear regression of (any) shaped vertices."""
    if shaped.ndim != 2 or shaped.shape != (model.n_vertices, 3):
        raise DimensionError(f"shaped: expected {(model.n_vertices, 3)}, got {shaped.shape}")
    return model.joint_regressor @ shaped


def lbs_forward_skin(skin: SkinData, params: BodyParams,
                     displacement: np.ndarray | None = None) -> PosedMesh:
    """LBS forward on prepared skin data; see lbs_forward."""
    _check_params(skin, params)
    k = skin.parents.shape[0]

    rot_body = rodrigues(params.theta.body_pose)
    rest = _blendshaped(skin, params, rot_body, displacement)
    joints_rest = _rest_joints(skin, params.beta)

    rotations = np.empty((k, 3, 3))
    rotations[0] = rodrigues(params.theta.root_orient)
    rotations[1:] = rot_body

    topo = _topo_order(skin.parents)
    world_rot = np.empty((k, 3, 3))
    world_off = np.empty((k, 3))
    local_off = joints_rest - np.einsum("kij,kj->ki", rotations, joints_rest)
    for j in topo:
        p = int(skin.parents[j])
        if p < 0:
            world_rot[j] = rotations[j]
            world_off[j] = local_off[j]
        else:
            world_rot[j] = world_rot[p] @ rotations[j]
            world_off[j] = world_off[p] + world_rot[p] @ local_off[j]

    w = skin.skin_weights
    delta_rot = world_rot - np.eye(3)
    posed = rest + np.einsum("nk,kij,nj->ni", w, delta_rot, rest)
    posed += w @ world_off + params.theta.root_transl
    joints_world = world_off + np.einsum("kij,kj->ki", world_rot, joints_rest)
    joints_world = joints_world + params.theta.root_transl

    tape = LbsTape(
        skin=skin,
        params=params,
        displacement=displacement,
        rest=rest,
        rotations=rotations,
        world_rot=world_rot,
        world_off=world_off,
        local_off=local_off,
        joints_rest=joints_rest,
        topo=topo,
    )
    return PosedMesh(vertices=posed, joints_world=joints_world, jacobian_tape=tape)


def lbs_forward(model: TemplateModel, params: BodyParams) -> PosedMesh:
    """Pose the base-resolution body; the tape supports lbs_backward."""
    return lbs_forward_skin(SkinData.from_model(model), params)


def lbs_backward(tape: LbsTape, grad_vertices: np.ndarray) -> LbsGradients:
    """Exact reverse-mode gradients of <grad_vertices, posed_vertices>.

    Raises StaleTapeError if the arrays feeding the recorded forward no
    longer reproduce the taped rest template or weights.
    """
    skin = tape.skin
    params = tape.params
    k = skin.parents.shape[0]
    g = np.asarray(grad_vertices, dtype=np.float64)
    if g.shape != tape.rest.shape:
        raise DimensionError(f"grad_vertices: expected {tape.rest.shape}, got {g.shape}")

    rot_body = rodrigues(params.theta.body_pose)
    if not np.array_equal(_blendshaped(skin, params, rot_body, tape.displacement), tape.rest):
        raise StaleTapeError("model or displacement mutated since forward")

    w = skin.skin_weights
    rest = tape.rest
    delta_rot = tape.world_rot - np.eye(3)

    grad_transl = g.sum(axis=0)
    bar_wrot = np.einsum("nk,ni,nj->kij", w, g, rest)
    bar_woff = np.einsum("nk,ni->ki", w, g)
    grad_rest = g + np.einsum("nk,kij,ni->nj", w, delta_rot, g)

    # Reverse kinematic chain.
    bar_rot_local = np.zeros((k, 3, 3))
    bar_u = np.zeros((k, 3))
    for j in reversed(tape.topo):
        p = int(skin.parents[j])
        if p < 0:
            bar_rot_local[j] += bar_wrot[j]
            bar_u[j] += bar_woff[j]
        else:
            bar_wrot[p] += bar_wrot[j] @ tape.rotations[j].T
            bar_rot_local[j] += tape.world_rot[p].T @ bar_wrot[j]
            bar_woff[p] += bar_woff[j]
            bar_wrot[p] += np.outer(bar_woff[j], tape.local_off[j])
            bar_u[j] += tape.world_rot[p].T @ bar_woff[j]

    # u_k = j_k - R_k j_k
    bar_joints = bar_u - np.einsum("kij,ki->kj", tape.rotations, bar_u)
    bar_rot_local -= np.einsum("ki,kj->kij", bar_u, tape.joints_rest)

    # Pose-corrective blendshape path adds to the non-root rotations.
    coeff_bar = np.einsum("nic,ni->c", skin.pose_basis, grad_rest)
    bar_rot_local[1:] += coeff_bar.reshape(k - 1, 3, 3)

    grad_body_pose = rodrigues_backward(params.theta.body_pose, bar_rot_local[1:])
    grad_root_orient = rodrigues_backward(params.theta.root_orient, bar_rot_local[0])

    grad_beta = np.einsum("nis,ni->s", skin.shape_basis, grad_rest)
    grad_psi = np.einsum("nis,ni->s", skin.expr_basis, grad_rest)

    # joints_rest = regressor @ (base_template + base_shape_basis beta)
    grad_base_shaped = skin.joint_regressor.T @ bar_joints
    grad_beta = grad_beta + np.einsum("nis,ni->s", skin.base_shape_basis, grad_base_shaped)

    grad_disp = grad_rest.copy() if tape.displacement is not None else None
    return LbsGradients(
        beta=grad_beta,
        psi=grad_psi,
        body_pose=grad_body_pose,
        root_orient=grad_root_orient,
        root_transl=grad_transl,
        displacement=grad_disp,
    )
