"""Training loop: combined texture + geometry-consistency objective with
progressive RGB resolution, animation-in-the-loop jaw sampling, per-block
adaptive-moment updates, and deterministic checkpointing.

Gradient routing is exclusive by construction: the texture block is
updated only from the texture SDS branch and the geometry blocks (beta,
psi, displacement) only from the consistency branch.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .assets import PartLabel, TemplateModel
from .body import BodyParams, PoseParams, lbs_backward
from .camera import bounds_of, sample_camera
from .config import OptimConfig
from .container import load_arrays, save_arrays
from .errors import ConfigError, DimensionError, NonFiniteError
from .guidance import (AnalyticOracle, DiffusionSchedule, encode,
                       sds_consistency_grad, sds_texture_grad)
from .render import RenderMesh, render, render_backward
from .subdivision import DisplacementLayer, SubdividedModel, posed_avatar, subdivide_partial

GEOMETRY_BLOCKS = ("beta", "psi", "D")
ALL_BLOCKS = GEOMETRY_BLOCKS + ("texture",)


@dataclass(eq=False)
class AvatarState:
    beta: np.ndarray
    psi: np.ndarray
    displacement: DisplacementLayer
    texture: np.ndarray  # (R, R, 3) in [0, 1]

    @classmethod
    def initial(cls, sub: SubdividedModel, texture_size: int) -> "AvatarState":
        return cls(
            beta=np.zeros(sub.shape_dim),
            psi=np.zeros(sub.expr_dim),
            displacement=DisplacementLayer.zeros(sub),
            texture=np.full((texture_size, texture_size, 3), 0.5),
        )

    def copy(self) -> "AvatarState":
        return AvatarState(self.beta.copy(), self.psi.copy(),
                           DisplacementLayer(self.displacement.d.copy()),
                           self.texture.copy())


@dataclass(eq=False)
class GalleryFrame:
    jaw_pose: np.ndarray  # (3,) axis-angle
    body_pose: np.ndarray | None = None  # (K-1, 3), used when pose sampling is on
    psi: np.ndarray | None = None  # expression override for this frame


@dataclass(eq=False)
class AnimationGallery:
    frames: list[GalleryFrame]

    def __post_init__(self):
        if not self.frames:
            raise DimensionError("animation gallery must be non-empty")
        for fr in self.frames:
            if not np.all(np.isfinite(fr.jaw_pose)):
                raise DimensionError("gallery frame contains non-finite jaw pose")

    def __len__(self) -> int:
        return len(self.frames)


def default_gallery(n: int = 8, max_angle: float = 0.35) -> AnimationGallery:
    """Jaw-opening sweep; body pose and expression stay unmodified."""
    angles = np.linspace(0.0, max_angle, n)
    return AnimationGallery([GalleryFrame(jaw_pose=np.array([a, 0.0, 0.0]))
                             for a in angles])


def jaw_joint_index(model: TemplateModel) -> int:
    """Joint with the largest total skinning weight on jaw-labeled vertices."""
    jaw_verts = np.flatnonzero(model.part_labels == PartLabel.JAW)
    if jaw_verts.size == 0:
        raise DimensionError("asset has no jaw-labeled vertices")
    return int(model.skin_weights[jaw_verts].sum(axis=0).argmax())


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_update(param: np.ndarray, grad: np.ndarray, st: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    st.step += 1
    st.m = beta1 * st.m + (1.0 - beta1) * grad
    st.v = beta2 * st.v + (1.0 - beta2) * grad * grad
    m_hat = st.m / (1.0 - beta1**st.step)
    v_hat = st.v / (1.0 - beta2**st.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(eq=False)
class GuidanceBundle:
    texture: object
    consistency: object

    @classmethod
    def resolve(cls, providers) -> "GuidanceBundle":
        if isinstance(providers, cls):
            return providers
        if isinstance(providers, dict):
            return cls(texture=providers["texture"], consistency=providers["consistency"])
        return cls(texture=providers, consistency=providers)


class ReferenceViewOracle:
    """Analytic oracle whose target follows the training view.

    Before each SDS call the step hands over the camera and pose; the
    oracle renders a frozen reference avatar there and targets its RGB
    latent (kind="rgb") or the alpha-mixed RGB/normal latent ("mixed").
    SDS then descends a per-view quadratic whose optimum is the reference.
    """

    def __init__(self, ref_state: AvatarState, sub: SubdividedModel,
                 sched: DiffusionSchedule, encoder_id: str,
                 kind: str = "rgb", alpha: float = 0.5):
        if kind not in ("rgb", "mixed"):
            raise ConfigError(f"oracle kind must be rgb|mixed, got {kind!r}")
        self.ref_state = ref_state
        self.sub = sub
        self.sched = sched
        self.encoder_id = encoder_id
        self.kind = kind
        self.alpha = alpha
        self._target = None

    def on_view(self, cam, params: BodyParams) -> None:
        posed = posed_avatar(self.sub, self.ref_state.displacement, params)
        mesh = RenderMesh(posed.vertices, self.sub.faces, self.sub.uv_coords)
        out = render(mesh, self.ref_state.texture, cam)
        z_rgb = encode(out.rgb, self.encoder_id)
        if self.kind == "rgb":
            self._target = z_rgb
        else:
            z_nrm = encode(out.normal, self.encoder_id)
            z_rgb.z = self.alpha * z_rgb.z + (1.0 - self.alpha) * z_nrm.z
            self._target = z_rgb

    def predict_noise(self, z_t, prompt: str, t: int, eps=None):
        if self._target is None:
            raise ConfigError("reference oracle used before any on_view call")
        return AnalyticOracle(self._target, self.sched).predict_noise(z_t, prompt, t, eps=eps)


@dataclass(eq=False)
class StepReport:
    iteration: int
    mode: str
    frame_index: int
    resolution: int
    t_tex: int
    t_cons: int
    grad_norms: dict
    wall_time: float


@dataclass(eq=False)
class RunHandles:
    """Everything step() needs besides the mutable state."""

    model: TemplateModel
    sub: SubdividedModel
    sched: DiffusionSchedule
    gallery: AnimationGallery
    providers: GuidanceBundle
    config: OptimConfig
    jaw_joint: int
    adam: dict

    @classmethod
    def build(cls, model: TemplateModel, config: OptimConfig, providers,
              gallery: AnimationGallery | None = None,
              sub: SubdividedModel | None = None) -> "RunHandles":
        sub = sub or subdivide_partial(model, config.rounds)
        return cls(
            model=model,
            sub=sub,
            sched=DiffusionSchedule(),
            gallery=gallery or default_gallery(config.gallery_size),
            providers=GuidanceBundle.resolve(providers),
            config=config,
            jaw_joint=jaw_joint_index(model),
            adam={},
        )


def _adam_for(handles: RunHandles, state: AvatarState) -> dict:
    if not handles.adam:
        handles.adam = {
            "beta": AdamState.like(state.beta),
            "psi": AdamState.like(state.psi),
            "D": AdamState.like(state.displacement.d),
            "texture": AdamState.like(state.texture),
        }
    return handles.adam


def _check_finite(arr: np.ndarray, block: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(block)


def _head_bounds(sub: SubdividedModel, verts: np.ndarray) -> np.ndarray:
    head = np.isin(sub.part_labels_up,
                   (PartLabel.HEAD, PartLabel.JAW, PartLabel.FACE_INTERIOR))
    if not head.any():
        return bounds_of(verts)
    return bounds_of(verts[head])


def _effective_alpha(config: OptimConfig, iteration: int) -> float:
    if config.alpha_final is None or config.iters <= 1:
        return config.alpha
    frac = iteration / (config.iters - 1)
    return config.alpha + frac * (config.alpha_final - config.alpha)


def step(state: AvatarState, handles: RunHandles, iteration: int,
         rng: np.random.Generator) -> StepReport:
    """One optimization step; mutates state and the adam slots in handles."""
    t_start = time.perf_counter()
    cfg = handles.config
    sub = handles.sub
    adam = _adam_for(handles, state)

    # 1. gallery frame (jaw mandatory, body pose behind the config flag)
    frame_index = int(rng.integers(len(handles.gallery)))
    frame = handles.gallery.frames[frame_index]
    body_pose = np.zeros((sub.n_joints - 1, 3))
    if cfg.sample_body_pose and frame.body_pose is not None:
        body_pose = frame.body_pose.copy()
    body_pose[handles.jaw_joint - 1] = frame.jaw_pose
    psi_used = frame.psi if frame.psi is not None else state.psi
    psi_overridden = frame.psi is not None
    params = BodyParams(
        beta=state.beta,
        theta=PoseParams(body_pose=body_pose, root_orient=np.zeros(3),
                         root_transl=np.zeros(3)),
        psi=psi_used,
    )

    # 2. pose and frame the avatar
    posed = posed_avatar(sub, state.displacement, params)
    mesh = RenderMesh(posed.vertices, sub.faces, sub.uv_coords)
    cam, mode = sample_camera(
        rng, cfg.p_head, bounds_of(posed.vertices), _head_bounds(sub, posed.vertices),
        fov_full=cfg.fov_full, fov_head=cfg.fov_head, fill_fraction=cfg.fill_fraction)
    prompt = cfg.prompts[mode.value]
    resolution = cfg.resolution_at(iteration)

    grad_norms = {name: 0.0 for name in ALL_BLOCKS}
    t_tex = t_cons = -1
    # Branch latent shapes differ under the progressive schedule, so the
    # share flag shares the noise level t; eps stays per-branch.
    shared_t = None

    # 3. texture SDS at the scheduled resolution -> texture block only
    if cfg.lambda_tex > 0.0:
        cam_tex = cam.with_resolution(resolution, resolution)
        if hasattr(handles.providers.texture, "on_view"):
            handles.providers.texture.on_view(cam_tex, params)
        out_tex = render(mesh, state.texture, cam_tex)
        res_tex = sds_texture_grad(handles.sched, handles.providers.texture, out_tex,
                                   prompt, rng, encoder_id=cfg.encoder)
        t_tex = res_tex.t
        grad_tex_img = cfg.lambda_tex * res_tex.grad_pixels
        grad_texture, _ = render_backward(out_tex.pixel_tape, grad_tex_img, None,
                                          with_vertex_grads=False)
        _check_finite(grad_texture, "texture")
        grad_norms["texture"] = float(np.linalg.norm(grad_texture))
        adam_update(state.texture, grad_texture, adam["texture"], cfg.learning_rates["texture"])
        if cfg.share_t_eps:
            shared_t = res_tex.t

    # 4. consistency SDS at the fixed resolution -> geometry blocks only
    if cfg.lambda_c > 0.0:
        cr = cfg.consistency_resolution
        cam_c = cam.with_resolution(cr, cr)
        if hasattr(handles.providers.consistency, "on_view"):
            handles.providers.consistency.on_view(cam_c, params)
        out_c = render(mesh, state.texture, cam_c)
        z_rgb = encode(out_c.rgb, cfg.encoder)  # detached: constant for this step
        z_nrm = encode(out_c.normal, cfg.encoder)
        res_c = sds_consistency_grad(
            handles.sched, handles.providers.consistency, z_rgb, z_nrm,
            _effective_alpha(cfg, iteration), prompt, rng,
            t=shared_t)
        t_cons = res_c.t
        grad_nrm_img = cfg.lambda_c * res_c.grad_pixels
        _, grad_verts = render_backward(out_c.pixel_tape, None, grad_nrm_img,
                                        with_vertex_grads=True)
        lbs_grads = lbs_backward(posed.jacobian_tape, grad_verts)
        geo = {"beta": lbs_grads.beta,
               "psi": np.zeros_like(state.psi) if psi_overridden else lbs_grads.psi,
               "D": lbs_grads.displacement}
        for name, grad in geo.items():
            _check_finite(grad, name)
            grad_norms[name] = float(np.linalg.norm(grad))
        adam_update(state.beta, geo["beta"], adam["beta"], cfg.learning_rates["beta"])
        adam_update(state.psi, geo["psi"], adam["psi"], cfg.learning_rates["psi"])
        adam_update(state.displacement.d, geo["D"], adam["D"], cfg.learning_rates["D"])

    # 5. clamp invariants
    np.clip(state.texture, 0.0, 1.0, out=state.texture)
    norms = np.linalg.norm(state.displacement.d, axis=1)
    over = norms > cfg.displacement_cap
    if over.any():
        state.displacement.d[over] *= (cfg.displacement_cap / norms[over])[:, None]
    for name, arr in (("beta", state.beta), ("psi", state.psi),
                      ("D", state.displacement.d), ("texture", state.texture)):
        _check_finite(arr, name)

    return StepReport(
        iteration=iteration,
        mode=mode.value,
        frame_index=frame_index,
        resolution=resolution,
        t_tex=t_tex,
        t_cons=t_cons,
        grad_norms=grad_norms,
        wall_time=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# Checkpointing and the run loop
# ---------------------------------------------------------------------------

def _split_u128(x: int) -> tuple[int, int]:
    return x & 0xFFFFFFFFFFFFFFFF, x >> 64


def _join_u128(lo: int, hi: int) -> int:
    return (hi << 64) | lo


def _rng_state_arrays(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ConfigError("only PCG64 generators can be checkpointed")
    s_lo, s_hi = _split_u128(st["state"]["state"])
    i_lo, i_hi = _split_u128(st["state"]["inc"])
    return np.array([s_lo, s_hi, i_lo, i_hi, st["has_uint32"], st["uinteger"]],
                    dtype=np.uint64)


def _restore_rng(arr: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": _join_u128(int(arr[0]), int(arr[1])),
                  "inc": _join_u128(int(arr[2]), int(arr[3]))},
        "has_uint32": int(arr[4]),
        "uinteger": int(arr[5]),
    }
    return rng


def save_checkpoint(path, state: AvatarState, adam: dict, rng: np.random.Generator,
                    iteration: int) -> None:
    arrays = {
        "iteration": np.array([iteration], dtype=np.int64),
        "beta": state.beta,
        "psi": state.psi,
        "displacement": state.displacement.d,
        "texture": state.texture,
        "rng_state": _rng_state_arrays(rng),
    }
    for name, st in adam.items():
        arrays[f"adam_{name}_m"] = st.m
        arrays[f"adam_{name}_v"] = st.v
        arrays[f"adam_{name}_t"] = np.array([st.step], dtype=np.int64)
    save_arrays(path, arrays)


def load_checkpoint(path) -> tuple[AvatarState, dict, np.random.Generator, int]:
    arrays = load_arrays(path)
    state = AvatarState(
        beta=arrays["beta"].copy(),
        psi=arrays["psi"].copy(),
        displacement=DisplacementLayer(arrays["displacement"].copy()),
        texture=arrays["texture"].copy(),
    )
    adam = {}
    for name in ALL_BLOCKS:
        if f"adam_{name}_m" in arrays:
            adam[name] = AdamState(m=arrays[f"adam_{name}_m"].copy(),
                                   v=arrays[f"adam_{name}_v"].copy(),
                                   step=int(arrays[f"adam_{name}_t"][0]))
    rng = _restore_rng(arrays["rng_state"])
    return state, adam, rng, int(arrays["iteration"][0])


_LOG_FIELDS = ["iteration", "mode", "t_tex", "t_cons", "resolution",
               "grad_texture", "grad_beta", "grad_psi", "grad_D", "wall_time"]


@dataclass(eq=False)
class RunResult:
    state: AvatarState
    run_dir: Path
    log_path: Path
    reports: list = dc_field(default_factory=list)


def run(config: OptimConfig, model: TemplateModel, providers, run_dir,
        gallery: AnimationGallery | None = None, resume: bool = False) -> RunResult:
    """Execute the full optimization; deterministic given config.seed and
    deterministic providers. Checkpoints land in run_dir and runs can
    resume from the latest one bit-exactly."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml())

    handles = RunHandles.build(model, config, providers, gallery=gallery)
    start_iter = 0
    state = AvatarState.initial(handles.sub, config.texture_size)
    rng = np.random.default_rng(config.seed)

    log_path = run_dir / "log.csv"
    if resume:
        ckpts = sorted(run_dir.glob("checkpoint_*.avf"))
        if ckpts:
            state, adam, rng, start_iter = load_checkpoint(ckpts[-1])
            handles.adam = adam

    mode = "a" if (resume and start_iter > 0 and log_path.exists()) else "w"
    reports = []
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        for it in range(start_iter, config.iters):
            report = step(state, handles, it, rng)
            reports.append(report)
            writer.writerow({
                "iteration": report.iteration,
                "mode": report.mode,
                "t_tex": report.t_tex,
                "t_cons": report.t_cons,
                "resolution": report.resolution,
                "grad_texture": f"{report.grad_norms['texture']:.6e}",
                "grad_beta": f"{report.grad_norms['beta']:.6e}",
                "grad_psi": f"{report.grad_norms['psi']:.6e}",
                "grad_D": f"{report.grad_norms['D']:.6e}",
                "wall_time": f"{report.wall_time:.4f}",
            })
            last = it + 1 == config.iters
            if config.checkpoint_every > 0 and ((it + 1) % config.checkpoint_every == 0 or last):
                save_checkpoint(run_dir / f"checkpoint_{it + 1:06d}.avf",
                                state, handles.adam, rng, it + 1)
    return RunResult(state=state, run_dir=run_dir, log_path=log_path, reports=reports)
