"""Command-line entry point.

Subcommands: generate, animate, edit, render, check, make-toy-assets.
Exit codes: 0 success, 1 failed check, 2 configuration/input error,
3 guidance-provider error.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .assets import PartLabel, load_model, make_toy_body, save_model, validate_template
from .body import BodyParams, PoseParams, lbs_backward, lbs_forward
from .camera import CameraSpec, bounds_of
from .config import ConfigError, OptimConfig, load_config
from .errors import AvatarForgeError, ProviderError
from .export import animate, export, load_png, load_sequence, part_swap, save_png
from .guidance import (DiffusionSchedule, ImageTargetOracle, analytic_oracle,
                       encode, encode_adjoint, sds_texture_grad)
from .optimizer import (AvatarState, load_checkpoint, run, save_checkpoint)
from .remote import RemoteProvider
from .render import RenderMesh, render, render_backward
from .subdivision import DisplacementLayer, posed_avatar, subdivide_partial

ENDPOINT_ENV = "AVATAR_FORGE_ENDPOINT"


def _resolve_assets_path(cfg: OptimConfig, config_path: str | None) -> Path:
    if cfg.assets is None:
        raise ConfigError("config has no 'assets' path")
    p = Path(cfg.assets)
    if not p.is_absolute() and not p.exists() and config_path:
        alt = Path(config_path).parent / p
        if alt.exists():
            return alt
    return p


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg.seed = args.seed
    model = load_model(_resolve_assets_path(cfg, args.config))
    if args.guidance == "remote":
        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ConfigError("remote guidance needs --endpoint or AVATAR_FORGE_ENDPOINT")
        provider = RemoteProvider(endpoint, timeout=args.timeout)
    else:
        if not args.target:
            raise ConfigError("analytic guidance needs --target IMAGE")
        provider = ImageTargetOracle(load_png(args.target), cfg.encoder)
    run_dir = Path(args.out or f"runs/{Path(args.config).stem}")
    result = run(cfg, model, provider, run_dir, resume=args.resume)
    sub = subdivide_partial(model, cfg.rounds)
    export(result.state, sub, PoseParams.zeros(model.n_joints), run_dir / "avatar")
    print(f"run complete: {run_dir}")
    return 0


def cmd_animate(args) -> int:
    model = load_model(args.assets)
    sub = subdivide_partial(model, args.rounds)
    state, _, _, _ = load_checkpoint(args.state)
    seq = load_sequence(args.sequence)
    bundles = animate(state, sub, seq, args.out, threads=args.threads)
    print(f"exported {len(bundles)} frames to {args.out}")
    return 0


def cmd_edit(args) -> int:
    model = load_model(args.assets)
    sub = subdivide_partial(model, args.rounds)
    state_a, _, _, _ = load_checkpoint(args.a)
    state_b, _, _, _ = load_checkpoint(args.b)
    result = part_swap(state_a, state_b, args.part, sub, smooth_iters=args.smooth)
    save_checkpoint(args.out, result, {}, np.random.default_rng(0), 0)
    print(f"wrote swapped state to {args.out}")
    return 0


def cmd_render(args) -> int:
    model = load_model(args.assets)
    sub = subdivide_partial(model, args.rounds)
    if args.state:
        state, _, _, _ = load_checkpoint(args.state)
    else:
        state = AvatarState.initial(sub, args.texture_size)
    posed = posed_avatar(sub, state.displacement, BodyParams(
        beta=state.beta, theta=PoseParams.zeros(model.n_joints), psi=state.psi))
    bounds = bounds_of(posed.vertices)
    half_diag = 0.5 * float(np.linalg.norm(bounds[1] - bounds[0]))
    radius = args.radius or half_diag / (np.tan(np.deg2rad(args.fov) / 2.0) * 0.75)
    cam = CameraSpec(radius=radius, polar=args.polar, azimuth=args.azimuth,
                     fov_y=args.fov, look_at=0.5 * (bounds[0] + bounds[1]),
                     resolution=(args.resolution, args.resolution))
    out = render(RenderMesh(posed.vertices, sub.faces, sub.uv_coords), state.texture, cam)
    save_png(args.out, out.rgb)
    if args.normals:
        save_png(Path(args.out).with_suffix(".normal.png"), out.normal)
    print(f"wrote {args.out}")
    return 0


def cmd_make_toy_assets(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = make_toy_body(args.seed or 0, args.rings)
    save_model(model, out / "toy.avf")
    cfg = OptimConfig(assets="toy.avf", iters=50, texture_size=64,
                      consistency_resolution=64, encoder="identity",
                      resolution_schedule=[(0, 32), (10, 64)], checkpoint_every=25)
    (out / "toy.yaml").write_text(cfg.to_yaml())
    seq = {
        "fps": 10,
        "frames": [{"body_pose": [[0.04 * i if j == 2 else 0.0, 0.0, 0.0]
                                  for j in range(model.n_joints - 1)]}
                   for i in range(10)],
    }
    import json
    (out / "jaw_sweep.json").write_text(json.dumps(seq, indent=1))
    print(f"toy assets in {out}")
    return 0


# ---------------------------------------------------------------------------
# check: invariant and gradient suites
# ---------------------------------------------------------------------------

def _check_assets(model) -> str | None:
    validate_template(model)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "roundtrip.avf"
        save_model(model, p)
        again = load_model(p)
        for name in ("vertices", "skin_weights", "faces"):
            if not np.array_equal(getattr(model, name), getattr(again, name)):
                return f"round-trip mismatch on {name}"
    return None


def _check_lbs(model) -> str | None:
    rng = np.random.default_rng(0)
    zero = lbs_forward(model, BodyParams.zeros(model))
    if zero.vertices.tobytes() != model.vertices.tobytes():
        return "zero-pose posing is not bit-exact"
    for trial in range(5):
        params = BodyParams(
            beta=rng.normal(size=model.shape_dim) * 0.5,
            theta=PoseParams(rng.normal(size=(model.n_joints - 1, 3)) * 0.3,
                             rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.2),
            psi=rng.normal(size=model.expr_dim) * 0.5)
        posed = lbs_forward(model, params)
        g = rng.normal(size=posed.vertices.shape)
        grads = lbs_backward(posed.jacobian_tape, g)
        h = 1e-5
        d = rng.normal(size=params.theta.body_pose.shape)
        bp = params.theta.body_pose
        pp = BodyParams(params.beta, PoseParams(bp + h * d, params.theta.root_orient,
                                                params.theta.root_transl), params.psi)
        pm = BodyParams(params.beta, PoseParams(bp - h * d, params.theta.root_orient,
                                                params.theta.root_transl), params.psi)
        fd = np.sum(g * (lbs_forward(model, pp).vertices
                         - lbs_forward(model, pm).vertices)) / (2 * h)
        an = np.sum(grads.body_pose * d)
        if abs(fd - an) / max(abs(fd), 1e-12) > 1e-6:
            return f"pose gradient mismatch (trial {trial})"
    return None


def _check_subdivision(model) -> str | None:
    sub = subdivide_partial(model, 1)
    n_masked = int(model.subdivision_mask.sum())
    children = int(sub.face_mask.sum())
    if children != 4 * n_masked:
        return f"masked faces produced {children} children, expected {4 * n_masked}"
    sums = sub.skin_weights_up.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-9:
        return "upsampled skin weights do not sum to 1"
    return None


def _check_render(model) -> str | None:
    rng = np.random.default_rng(0)
    sub = subdivide_partial(model, 1)
    posed = posed_avatar(sub, DisplacementLayer.zeros(sub), BodyParams.zeros(model))
    mesh = RenderMesh(posed.vertices, sub.faces, sub.uv_coords)
    tex = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    bounds = bounds_of(posed.vertices)
    cam = CameraSpec(radius=3.0, polar=80.0, azimuth=30.0, fov_y=45.0,
                     look_at=0.5 * (bounds[0] + bounds[1]), resolution=(48, 48))
    out = render(mesh, tex, cam)
    g_rgb = rng.normal(size=out.rgb.shape)
    grad_tex, _ = render_backward(out.pixel_tape, g_rgb, None, with_vertex_grads=False)
    h = 1e-3
    flat = np.argsort(np.abs(grad_tex).ravel())[-3:]
    for idx in flat:
        j, i, c = np.unravel_index(idx, grad_tex.shape)
        tp, tm = tex.copy(), tex.copy()
        tp[j, i, c] += h
        tm[j, i, c] -= h
        fd = np.sum(g_rgb * (render(mesh, tp, cam).rgb - render(mesh, tm, cam).rgb)) / (2 * h)
        if abs(fd - grad_tex[j, i, c]) / max(abs(fd), 1e-12) > 1e-10:
            return f"texel gradient mismatch at {(j, i, c)}"
    return None


def _check_guidance(model) -> str | None:
    rng = np.random.default_rng(0)
    sched = DiffusionSchedule()
    target = rng.uniform(size=(16, 16, 3))
    cur = rng.uniform(size=(16, 16, 3))
    oracle = analytic_oracle(encode(target, "identity"), sched)
    closed = encode_adjoint(encode(cur, "identity").z - encode(target, "identity").z,
                            "identity")
    from types import SimpleNamespace
    acc = np.zeros_like(cur)
    n = 200
    for _ in range(n):
        acc += sds_texture_grad(sched, oracle, SimpleNamespace(rgb=cur), "", rng,
                                t=500).grad_pixels
    rel = np.linalg.norm(acc / n - closed) / np.linalg.norm(closed)
    if rel > 0.05:
        return f"oracle equivalence off by {rel:.2%}"
    return None


CHECKS = {
    "assets": _check_assets,
    "lbs": _check_lbs,
    "subdivision": _check_subdivision,
    "render": _check_render,
    "guidance": _check_guidance,
}


def cmd_check(args) -> int:
    model = load_model(args.assets)
    names = [args.only] if args.only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check suite(s): {unknown}; have {list(CHECKS)}")
    failed = []
    for name in names:
        detail = CHECKS[name](model)
        status = "PASS" if detail is None else f"FAIL ({detail})"
        print(f"{name:<12} {status}")
        if detail is not None:
            failed.append(name)
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarforge",
                                description="parametric avatar optimization engine")
    sp = p.add_subparsers(dest="command", required=True)

    g = sp.add_parser("generate", help="run the optimization loop and export the avatar")
    g.add_argument("--config", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--seed", type=int)
    g.add_argument("--guidance", choices=("analytic", "remote"), default="analytic")
    g.add_argument("--endpoint")
    g.add_argument("--target", help="reference image for the analytic oracle")
    g.add_argument("--timeout", type=float, default=30.0)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--out", help="run directory")
    g.add_argument("--resume", action="store_true")
    g.set_defaults(func=cmd_generate)

    a = sp.add_parser("animate", help="export a posed frame sequence")
    a.add_argument("--assets", required=True)
    a.add_argument("--state", required=True, help="checkpoint file")
    a.add_argument("--sequence", required=True, help="animation JSON")
    a.add_argument("--rounds", type=int, default=1)
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_animate)

    e = sp.add_parser("edit", help="swap a body part between two avatars")
    e.add_argument("--assets", required=True)
    e.add_argument("--a", required=True, help="base avatar checkpoint")
    e.add_argument("--b", required=True, help="donor avatar checkpoint")
    e.add_argument("--part", required=True,
                   choices=[l.name.lower() for l in PartLabel])
    e.add_argument("--rounds", type=int, default=1)
    e.add_argument("--smooth", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    r = sp.add_parser("render", help="render a single view to PNG")
    r.add_argument("--assets", required=True)
    r.add_argument("--state")
    r.add_argument("--rounds", type=int, default=1)
    r.add_argument("--texture-size", type=int, default=64)
    r.add_argument("--polar", type=float, default=80.0)
    r.add_argument("--azimuth", type=float, default=30.0)
    r.add_argument("--fov", type=float, default=45.0)
    r.add_argument("--radius", type=float)
    r.add_argument("--resolution", type=int, default=256)
    r.add_argument("--normals", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sp.add_parser("check", help="run invariant and gradient self-checks")
    c.add_argument("--assets", required=True)
    c.add_argument("--only", help="run a single suite")
    c.set_defaults(func=cmd_check)

    t = sp.add_parser("make-toy-assets", help="write toy body, config, sequence")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rings", type=int, default=8)
    t.set_defaults(func=cmd_make_toy_assets)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 3
    except AvatarForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
