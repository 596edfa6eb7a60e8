"""Differentiable software rasterizer: unlit albedo RGB and world-normal
images with analytic backward passes.

Forward: z-buffered perspective rasterization, perspective-correct
barycentrics, per-pixel bilinear texture lookup and interpolation of
area-weighted vertex normals. Background is a configurable clear color.

Backward: exact bilinear adjoint for texels; vertex-position gradients
follow the barycentric/attribute chain on interior pixels (including the
vertex-normal dependence). Coverage-change (silhouette) gradients are
zero by design.

Faces behind the near plane or degenerate on screen are skipped, not
clipped; scenes are expected to sit fully in front of the camera.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .camera import CameraSpec, project
from .errors import DimensionError, StaleTapeError

NEAR_PLANE = 1e-2
DEFAULT_CLEAR = (1.0, 1.0, 1.0)


@dataclass(eq=False)
class RenderMesh:
    """The geometry a render consumes: posed vertices + static topology/UV."""

    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    uv_coords: np.ndarray  # (N, 2)


@dataclass(eq=False)
class PixelTape:
    mesh: RenderMesh
    texture: np.ndarray
    cam: CameraSpec
    face_id: np.ndarray  # (H, W) int32, -1 for background
    bary: np.ndarray  # (H, W, 3)
    screen: np.ndarray  # (N, 2)
    depth: np.ndarray  # (N,)
    vnormals: np.ndarray  # (N, 3) normalized
    vnormals_raw: np.ndarray  # (N, 3) pre-normalization
    fingerprint: bytes


@dataclass(eq=False)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    normal: np.ndarray  # (H, W, 3), world normals mapped by (n+1)/2
    mask: np.ndarray  # (H, W) bool
    pixel_tape: PixelTape


def _digest(*arrays: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).view(np.uint8).data)
    return h.digest()


def _check_texture(texture: np.ndarray) -> None:
    if texture.ndim != 3 or texture.shape[2] != 3 or texture.shape[0] != texture.shape[1]:
        raise DimensionError(f"texture must be (R, R, 3), got {texture.shape}")
    r = texture.shape[0]
    if r & (r - 1) != 0:
        raise DimensionError(f"texture side must be a power of two, got {r}")


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals; returns (normalized, raw sums)."""
    tri = vertices[faces]
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    raw = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(raw, faces[:, c], face_n)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = np.where(norm < 1e-20, 1.0, norm)
    unit = raw / safe
    unit[norm[:, 0] < 1e-20] = (0.0, 0.0, 1.0)
    return unit, raw


def _bilinear_setup(uv: np.ndarray, r: int):
    """Texel indices and weights for clamp-to-edge bilinear sampling."""
    x = uv[:, 0] * r - 0.5
    y = uv[:, 1] * r - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    i0 = np.clip(x0.astype(np.int64), 0, r - 1)
    i1 = np.clip(x0.astype(np.int64) + 1, 0, r - 1)
    j0 = np.clip(y0.astype(np.int64), 0, r - 1)
    j1 = np.clip(y0.astype(np.int64) + 1, 0, r - 1)
    return (i0, i1, j0, j1, fx, fy)


def _bilinear_sample(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    r = texture.shape[0]
    i0, i1, j0, j1, fx, fy = _bilinear_setup(uv, r)
    fx = fx[:, None]
    fy = fy[:, None]
    return ((1 - fy) * ((1 - fx) * texture[j0, i0] + fx * texture[j0, i1])
            + fy * ((1 - fx) * texture[j1, i0] + fx * texture[j1, i1]))


def _rasterize(cam: CameraSpec, screen: np.ndarray, depth: np.ndarray,
               faces: np.ndarray):
    """Z-buffered coverage. Returns (face_id (H,W), bary (H,W,3))."""
    w, h = cam.resolution
    face_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3))

    s = screen[faces]  # (F, 3, 2)
    d = depth[faces]  # (F, 3)
    ok = np.all(d > NEAR_PLANE, axis=1)
    e01 = s[:, 1] - s[:, 0]
    e02 = s[:, 2] - s[:, 0]
    area2 = e01[:, 0] * e02[:, 1] - e01[:, 1] * e02[:, 0]
    ok &= np.abs(area2) > 1e-12

    x_lo = np.maximum(np.ceil(s[:, :, 0].min(axis=1) - 0.5), 0).astype(np.int64)
    x_hi = np.minimum(np.floor(s[:, :, 0].max(axis=1) - 0.5), w - 1).astype(np.int64)
    y_lo = np.maximum(np.ceil(s[:, :, 1].min(axis=1) - 0.5), 0).astype(np.int64)
    y_hi = np.minimum(np.floor(s[:, :, 1].max(axis=1) - 0.5), h - 1).astype(np.int64)
    nx = x_hi - x_lo + 1
    ny = y_hi - y_lo + 1
    ok &= (nx > 0) & (ny > 0)

    fids = np.flatnonzero(ok)
    if fids.size == 0:
        return face_id, bary
    counts = (nx[fids] * ny[fids]).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    cand_face = np.repeat(fids, counts)
    t = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
    cand_ix = x_lo[cand_face] + t % nx[cand_face]
    cand_iy = y_lo[cand_face] + t // nx[cand_face]

    px = cand_ix + 0.5
    py = cand_iy + 0.5
    sc = s[cand_face]  # (T, 3, 2)
    w0 = ((sc[:, 2, 0] - sc[:, 1, 0]) * (py - sc[:, 1, 1])
          - (sc[:, 2, 1] - sc[:, 1, 1]) * (px - sc[:, 1, 0]))
    w1 = ((sc[:, 0, 0] - sc[:, 2, 0]) * (py - sc[:, 2, 1])
          - (sc[:, 0, 1] - sc[:, 2, 1]) * (px - sc[:, 2, 0]))
    w2 = ((sc[:, 1, 0] - sc[:, 0, 0]) * (py - sc[:, 0, 1])
          - (sc[:, 1, 1] - sc[:, 0, 1]) * (px - sc[:, 0, 0]))
    a2 = area2[cand_face]
    sign = np.sign(a2)
    inside = (w0 * sign >= 0) & (w1 * sign >= 0) & (w2 * sign >= 0)
    if not inside.any():
        return face_id, bary

    cand_face = cand_face[inside]
    cand_ix = cand_ix[inside]
    cand_iy = cand_iy[inside]
    lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / a2[inside, None]
    q = lam / d[cand_face]
    inv_depth = q.sum(axis=1)
    pix_depth = 1.0 / inv_depth
    b = q * pix_depth[:, None]

    lin = cand_iy * w + cand_ix
    order = np.lexsort((cand_face, pix_depth, lin))
    lin_sorted = lin[order]
    first = np.ones(lin_sorted.size, dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    win = order[first]

    face_id[cand_iy[win], cand_ix[win]] = cand_face[win].astype(np.int32)
    bary[cand_iy[win], cand_ix[win]] = b[win]
    return face_id, bary


def render(mesh: RenderMesh, texture: np.ndarray, cam: CameraSpec,
           clear_color: tuple[float, float, float] = DEFAULT_CLEAR) -> RenderOutput:
    """Rasterize the mesh into RGB (bilinear albedo) and normal images."""
    _check_texture(texture)
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    if verts.shape != mesh.uv_coords.shape[:1] + (3,):
        raise DimensionError("vertices/uv_coords vertex counts differ")
    if not np.all(np.isfinite(verts)):
        raise DimensionError("mesh vertices contain non-finite values")

    screen, depth = project(cam, verts)
    face_id, bary = _rasterize(cam, screen, depth, mesh.faces)
    vnorm, vnorm_raw = vertex_normals(verts, mesh.faces)

    w, h = cam.resolution
    rgb = np.empty((h, w, 3))
    rgb[:] = clear_color
    normal = np.empty((h, w, 3))
    normal[:] = clear_color
    mask = face_id >= 0

    iy, ix = np.nonzero(mask)
    if iy.size:
        f = face_id[iy, ix]
        b = bary[iy, ix]
        corners = mesh.faces[f]
        uv_pix = np.einsum("pc,pcd->pd", b, mesh.uv_coords[corners])
        rgb[iy, ix] = _bilinear_sample(texture, uv_pix)
        n_raw = np.einsum("pc,pcd->pd", b, vnorm[corners])
        n_len = np.linalg.norm(n_raw, axis=1, keepdims=True)
        n_unit = n_raw / np.where(n_len < 1e-20, 1.0, n_len)
        normal[iy, ix] = 0.5 * (n_unit + 1.0)

    tape = PixelTape(
        mesh=mesh,
        texture=texture,
        cam=cam,
        face_id=face_id,
        bary=bary,
        screen=screen,
        depth=depth,
        vnormals=vnorm,
        vnormals_raw=vnorm_raw,
        fingerprint=_digest(verts, texture),
    )
    return RenderOutput(rgb=rgb, normal=normal, mask=mask, pixel_tape=tape)


def render_backward(tape: PixelTape, grad_rgb: np.ndarray | None,
                    grad_normal: np.ndarray | None,
                    with_vertex_grads: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Pull image-space gradients back to (texels, vertex positions).

    grad_rgb / grad_normal may be None for a zero gradient on that image.
    Background pixels contribute nothing. Returns (grad_texture (R,R,3),
    grad_vertices (N,3)).
    """
    mesh = tape.mesh
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    if _digest(verts, tape.texture) != tape.fingerprint:
        raise StaleTapeError("mesh vertices or texture mutated since render")

    r = tape.texture.shape[0]
    grad_tex = np.zeros_like(tape.texture)
    grad_verts = np.zeros_like(verts)

    iy, ix = np.nonzero(tape.face_id >= 0)
    if iy.size == 0:
        return grad_tex, grad_verts

    g_rgb = np.zeros((iy.size, 3)) if grad_rgb is None else np.asarray(grad_rgb)[iy, ix]
    g_nimg = np.zeros((iy.size, 3)) if grad_normal is None else np.asarray(grad_normal)[iy, ix]

    f = tape.face_id[iy, ix]
    corners = mesh.faces[f]  # (P, 3)
    b = tape.bary[iy, ix]  # (P, 3)
    uv_k = mesh.uv_coords[corners]  # (P, 3, 2)
    uv_pix = np.einsum("pc,pcd->pd", b, uv_k)

    # --- texel adjoint + d rgb/d uv ---------------------------------------
    i0, i1, j0, j1, fx, fy = _bilinear_setup(uv_pix, r)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    for jj, ii, ww in ((j0, i0, w00), (j0, i1, w10), (j1, i0, w01), (j1, i1, w11)):
        np.add.at(grad_tex, (jj, ii), ww[:, None] * g_rgb)

    g_b = np.zeros_like(b)
    tex = tape.texture
    t00, t10, t01, t11 = tex[j0, i0], tex[j0, i1], tex[j1, i0], tex[j1, i1]
    dc_du = r * ((1 - fy)[:, None] * (t10 - t00) + fy[:, None] * (t11 - t01))
    dc_dv = r * ((1 - fx)[:, None] * (t01 - t00) + fx[:, None] * (t11 - t10))
    g_u = np.sum(g_rgb * dc_du, axis=1)
    g_v = np.sum(g_rgb * dc_dv, axis=1)
    g_b += g_u[:, None] * uv_k[:, :, 0] + g_v[:, None] * uv_k[:, :, 1]

    # --- normal-image chain -------------------------------------------------
    g_nv = np.zeros_like(verts)  # grad w.r.t. normalized vertex normals
    if grad_normal is not None:
        g_n = 0.5 * g_nimg  # (n+1)/2 encoding
        n_k = tape.vnormals[corners]  # (P, 3, 3)
        n_raw = np.einsum("pc,pcd->pd", b, n_k)
        n_len = np.linalg.norm(n_raw, axis=1, keepdims=True)
        n_len = np.where(n_len < 1e-20, 1.0, n_len)
        n_unit = n_raw / n_len
        g_raw = (g_n - n_unit * np.sum(g_n * n_unit, axis=1, keepdims=True)) / n_len
        g_b += np.einsum("pd,pcd->pc", g_raw, n_k)
        if with_vertex_grads:
            per_corner = b[:, :, None] * g_raw[:, None, :]  # (P, 3, 3)
            for c in range(3):
                np.add.at(g_nv, corners[:, c], per_corner[:, c])

    if not with_vertex_grads:
        return grad_tex, grad_verts

    # --- barycentric chain to screen positions and depths -------------------
    s_k = tape.screen[corners]  # (P, 3, 2)
    d_k = tape.depth[corners]  # (P, 3)
    # b_i = (lam_i / d_i) / Q with Q = sum_j lam_j / d_j, so lam_i ~ b_i d_i.
    lam = b * d_k
    lam /= lam.sum(axis=1, keepdims=True)
    pix_depth = 1.0 / np.sum(lam / d_k, axis=1, keepdims=True)

    g_q = (g_b - np.sum(g_b * b, axis=1, keepdims=True)) * pix_depth
    g_lam = g_q / d_k
    g_d = -g_q * lam / d_k**2

    # lam_i = W_i / (W0+W1+W2)
    area2 = (
        (s_k[:, 1, 0] - s_k[:, 0, 0]) * (s_k[:, 2, 1] - s_k[:, 0, 1])
        - (s_k[:, 1, 1] - s_k[:, 0, 1]) * (s_k[:, 2, 0] - s_k[:, 0, 0])
    )
    g_w = (g_lam - np.sum(g_lam * lam, axis=1, keepdims=True)) / area2[:, None]

    px = (ix + 0.5).astype(np.float64)
    py = (iy + 0.5).astype(np.float64)
    g_s = np.zeros_like(s_k)
    for i in range(3):
        a_idx, b_idx = (i + 1) % 3, (i + 2) % 3
        ax, ay = s_k[:, a_idx, 0], s_k[:, a_idx, 1]
        bx, by = s_k[:, b_idx, 0], s_k[:, b_idx, 1]
        gw = g_w[:, i]
        g_s[:, a_idx, 0] += gw * (by - py)
        g_s[:, a_idx, 1] += gw * (px - bx)
        g_s[:, b_idx, 0] += gw * (py - ay)
        g_s[:, b_idx, 1] += gw * (ax - px)

    # screen -> camera-frame (a, b, d); sx=(a/(d tx)+1) w/2, sy=(1-b/(d ty)) h/2
    cam = tape.cam
    wpix, hpix = cam.resolution
    ty = np.tan(np.deg2rad(cam.fov_y) / 2.0)
    tx = ty * (wpix / hpix)
    eye, right, up, fwd = cam.basis()
    rel = verts - eye
    a_all = rel @ right
    b_all = rel @ up
    a_k = a_all[corners]
    b_cam_k = b_all[corners]

    g_sx = g_s[:, :, 0]
    g_sy = g_s[:, :, 1]
    g_a = g_sx * (wpix / (2.0 * d_k * tx))
    g_bcam = -g_sy * (hpix / (2.0 * d_k * ty))
    g_d = g_d + g_sx * (-wpix * a_k / (2.0 * d_k**2 * tx)) \
        + g_sy * (hpix * b_cam_k / (2.0 * d_k**2 * ty))

    g_p = (g_a[..., None] * right + g_bcam[..., None] * up + g_d[..., None] * fwd)
    for c in range(3):
        np.add.at(grad_verts, corners[:, c], g_p[:, c])

    # --- vertex-normal field back to positions -------------------------------
    if grad_normal is not None and np.any(g_nv):
        raw_len = np.linalg.norm(tape.vnormals_raw, axis=1, keepdims=True)
        raw_len = np.where(raw_len < 1e-20, 1.0, raw_len)
        unit = tape.vnormals
        g_raw_v = (g_nv - unit * np.sum(g_nv * unit, axis=1, keepdims=True)) / raw_len
        faces = mesh.faces
        g_m = g_raw_v[faces[:, 0]] + g_raw_v[faces[:, 1]] + g_raw_v[faces[:, 2]]
        tri = verts[faces]
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        g_e1 = np.cross(e2, g_m)
        g_e2 = np.cross(g_m, e1)
        np.add.at(grad_verts, faces[:, 0], -(g_e1 + g_e2))
        np.add.at(grad_verts, faces[:, 1], g_e1)
        np.add.at(grad_verts, faces[:, 2], g_e2)

    return grad_tex, grad_verts


def downsample_area(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsampling by an integer factor."""
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DimensionError(f"image {img.shape} not divisible by factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3)).reshape(
        h // factor, w // factor, *img.shape[2:])
