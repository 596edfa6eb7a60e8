"""Post-optimization utilities: mesh/texture export, animation playback,
and part-level shape/texture swapping.

Exports are wavefront-style text (one UV and one normal per vertex, so
face records are ``f i/i/i``) plus an 8-bit PNG texture and a material
file referencing it. Output bytes are deterministic for fixed inputs.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .assets import PartLabel
from .body import BodyParams, PoseParams
from .errors import DimensionError, IoError, ParseError, TopologyMismatchError
from .render import vertex_normals
from .subdivision import SubdividedModel, posed_avatar


@dataclass(eq=False)
class ExportBundle:
    mesh_path: Path
    material_path: Path
    texture_path: Path


@dataclass(eq=False)
class SequenceFrame:
    pose: PoseParams
    psi: np.ndarray | None = None  # expression override; None keeps the avatar's


@dataclass(eq=False)
class AnimationSequence:
    fps: float
    frames: list[SequenceFrame]


def load_sequence(path) -> AnimationSequence:
    """Parse the JSON sequence format; missing pose fields default to zero."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read sequence {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed sequence {path}: {exc}") from exc
    if not isinstance(data, dict) or "frames" not in data:
        raise ParseError(f"{path}: sequence must be an object with a frames list")
    frames = []
    for i, fr in enumerate(data["frames"]):
        body = np.asarray(fr.get("body_pose", []), dtype=np.float64)
        if body.size == 0:
            body = np.zeros((0, 3))
        if body.ndim != 2 or body.shape[1] != 3:
            raise ParseError(f"{path}: frame {i} body_pose must be a list of [x, y, z]")
        pose = PoseParams(
            body_pose=body,
            root_orient=np.asarray(fr.get("root_orient", [0.0, 0.0, 0.0]), dtype=np.float64),
            root_transl=np.asarray(fr.get("root_transl", [0.0, 0.0, 0.0]), dtype=np.float64),
        )
        psi = fr.get("psi")
        frames.append(SequenceFrame(pose=pose,
                                    psi=None if psi is None else np.asarray(psi, dtype=np.float64)))
    return AnimationSequence(fps=float(data.get("fps", 30.0)), frames=frames)


def save_png(path, image: np.ndarray) -> None:
    """Write a float [0,1] (H, W, 3) image as 8-bit PNG, v-up convention
    (array row 0 becomes the bottom row of the file)."""
    quant = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(quant[::-1]).save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    """Read an 8-bit image file into a float [0,1] array, v-up convention."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return arr[::-1].copy()


def _fmt(x: float) -> str:
    return f"{x:.8f}"


def _write_obj(path: Path, verts: np.ndarray, uv: np.ndarray, normals: np.ndarray,
               faces: np.ndarray, mtl_name: str) -> None:
    lines = [f"mtllib {mtl_name}", "usemtl avatar"]
    for v in verts:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for t in uv:
        lines.append(f"vt {_fmt(t[0])} {_fmt(t[1])}")
    for n in normals:
        lines.append(f"vn {_fmt(n[0])} {_fmt(n[1])} {_fmt(n[2])}")
    for f in faces:
        a, b, c = int(f[0]) + 1, int(f[1]) + 1, int(f[2]) + 1
        lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def export(state, sub: SubdividedModel, pose: PoseParams, path) -> ExportBundle:
    """Write the posed, displaced, textured avatar next to `path`."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix == ".obj" else path
    base.parent.mkdir(parents=True, exist_ok=True)
    mesh_path = base.with_suffix(".obj")
    mtl_path = base.with_suffix(".mtl")
    tex_path = base.with_suffix(".png")

    params = BodyParams(beta=state.beta, theta=pose, psi=state.psi)
    posed = posed_avatar(sub, state.displacement, params)
    normals, _ = vertex_normals(posed.vertices, sub.faces)
    _write_obj(mesh_path, posed.vertices, sub.uv_coords, normals, sub.faces, mtl_path.name)
    try:
        mtl_path.write_text(
            f"newmtl avatar\nKd 1.0 1.0 1.0\nmap_Kd {tex_path.name}\n")
    except OSError as exc:
        raise IoError(f"cannot write {mtl_path}: {exc}") from exc
    save_png(tex_path, state.texture)
    return ExportBundle(mesh_path=mesh_path, material_path=mtl_path, texture_path=tex_path)


def animate(state, sub: SubdividedModel, sequence: AnimationSequence, out_dir,
            threads: int = 1) -> list[ExportBundle]:
    """Export one bundle per sequence frame; the texture is shared."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = sub.n_joints
    for i, fr in enumerate(sequence.frames):
        if fr.pose.body_pose.shape != (k - 1, 3):
            raise DimensionError(
                f"frame {i}: body_pose has {fr.pose.body_pose.shape[0]} joints, "
                f"asset needs {k - 1}")

    tex_path = out_dir / "texture.png"
    mtl_path = out_dir / "avatar.mtl"
    save_png(tex_path, state.texture)
    mtl_path.write_text(f"newmtl avatar\nKd 1.0 1.0 1.0\nmap_Kd {tex_path.name}\n")

    def one(i: int) -> ExportBundle:
        fr = sequence.frames[i]
        psi = state.psi if fr.psi is None else fr.psi
        params = BodyParams(beta=state.beta, theta=fr.pose, psi=psi)
        posed = posed_avatar(sub, state.displacement, params)
        normals, _ = vertex_normals(posed.vertices, sub.faces)
        mesh_path = out_dir / f"frame_{i:04d}.obj"
        _write_obj(mesh_path, posed.vertices, sub.uv_coords, normals, sub.faces, mtl_path.name)
        return ExportBundle(mesh_path=mesh_path, material_path=mtl_path, texture_path=tex_path)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(sequence.frames))))
    return [one(i) for i in range(len(sequence.frames))]


# ---------------------------------------------------------------------------
# Part-level editing
# ---------------------------------------------------------------------------

def _face_labels(sub: SubdividedModel) -> np.ndarray:
    """Per-face label: majority of corner labels, first corner on ties."""
    lab = sub.part_labels_up[sub.faces]  # (F, 3)
    out = np.empty(sub.n_faces, dtype=np.int32)
    for i in range(sub.n_faces):
        a, b, c = lab[i]
        if b == c and a != b:
            out[i] = b
        else:
            out[i] = a
    return out


def texel_part_ownership(sub: SubdividedModel, size: int,
                         supersample: int = 4) -> np.ndarray:
    """(size, size) map assigning every texel to exactly one part label.

    Each face's UV triangle is point-sampled on a supersample grid; the
    label covering the most subsamples owns the texel (approximating
    largest covered area). Texels no triangle covers fall to OTHER.
    """
    cache = sub._ownership_cache
    if size in cache:
        return cache[size]
    counts = np.zeros((size, size, max(PartLabel) + 1), dtype=np.int32)
    face_lab = _face_labels(sub)
    uv = sub.uv_coords * size  # texel units
    ss = supersample
    sub_off = (np.arange(ss) + 0.5) / ss
    for f in range(sub.n_faces):
        tri = uv[sub.faces[f]]
        lo = np.floor(tri.min(axis=0)).astype(int)
        hi = np.ceil(tri.max(axis=0)).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, size)
        if np.any(hi <= lo):
            continue
        xs = (np.arange(lo[0], hi[0])[:, None] + sub_off[None, :]).ravel()
        ys = (np.arange(lo[1], hi[1])[:, None] + sub_off[None, :]).ravel()
        px, py = np.meshgrid(xs, ys, indexing="ij")
        (x0, y0), (x1, y1), (x2, y2) = tri
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        sign = 1.0 if area > 0 else -1.0
        inside = (w0 * sign >= 0) & (w1 * sign >= 0) & (w2 * sign >= 0)
        if not inside.any():
            continue
        ti = np.floor(px[inside]).astype(int)
        tj = np.floor(py[inside]).astype(int)
        np.add.at(counts[:, :, face_lab[f]], (tj, ti), 1)
    covered = counts.sum(axis=2) > 0
    owner = np.argmax(counts, axis=2).astype(np.int32)
    owner[~covered] = PartLabel.OTHER
    cache[size] = owner
    return owner


def _as_label(part) -> PartLabel:
    if isinstance(part, PartLabel):
        return part
    if isinstance(part, str):
        return PartLabel[part.upper()]
    return PartLabel(int(part))


def part_swap(a, b, part, sub: SubdividedModel, smooth_iters: int = 0):
    """Return `a` with the part's displacements and texels taken from `b`.

    Everything outside the part stays bit-identical to `a`. Optional
    Laplacian smoothing relaxes displacements within a 2-ring of the part
    boundary.
    """
    label = _as_label(part)
    if a.displacement.d.shape != b.displacement.d.shape \
            or a.texture.shape != b.texture.shape \
            or a.displacement.d.shape[0] != sub.n_vertices:
        raise TopologyMismatchError("avatar states are not built on the same asset")

    out = a.copy()
    vmask = sub.part_labels_up == label
    out.displacement.d[vmask] = b.displacement.d[vmask]
    owner = texel_part_ownership(sub, a.texture.shape[0])
    tmask = owner == label
    out.texture[tmask] = b.texture[tmask]

    if smooth_iters > 0:
        ring = _boundary_two_ring(sub, vmask)
        adj = _vertex_adjacency(sub)
        d = out.displacement.d
        for _ in range(smooth_iters):
            snap = d.copy()
            for v in np.flatnonzero(ring):
                nbrs = adj[v]
                if nbrs:
                    d[v] = 0.5 * snap[v] + 0.5 * snap[list(nbrs)].mean(axis=0)
    return out


def _vertex_adjacency(sub: SubdividedModel) -> list[set[int]]:
    adj: list[set[int]] = [set() for _ in range(sub.n_vertices)]
    for f in sub.faces:
        a, b, c = (int(x) for x in f)
        adj[a].update((b, c))
        adj[b].update((a, c))
        adj[c].update((a, b))
    return adj


def _boundary_two_ring(sub: SubdividedModel, vmask: np.ndarray) -> np.ndarray:
    adj = _vertex_adjacency(sub)
    boundary = np.zeros(sub.n_vertices, dtype=bool)
    for v in range(sub.n_vertices):
        if any(vmask[n] != vmask[v] for n in adj[v]):
            boundary[v] = True
    ring = boundary.copy()
    for _ in range(2):
        grown = ring.copy()
        for v in np.flatnonzero(ring):
            for n in adj[v]:
                grown[n] = True
        ring = grown
    return ring
