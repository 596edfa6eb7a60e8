"""Score-distillation gradients and pluggable noise-prediction providers.

The in-process latent space is a 3-channel stand-in: the ``identity``
encoder is a channel-first copy scaled to [-1, 1]; ``pool8`` additionally
8x8 average-pools. Both are linear, so their adjoints are exact and SDS
behavior is verifiable against closed forms via the analytic oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import DimensionError, ProviderError

ENCODERS = ("identity", "pool8")


@dataclass(eq=False)
class LatentImage:
    z: np.ndarray  # (C, h, w)
    encoder_id: str

    def __post_init__(self):
        if self.encoder_id not in ENCODERS:
            raise DimensionError(f"unknown encoder {self.encoder_id!r}")
        if self.z.ndim != 3:
            raise DimensionError(f"latent must be (C, h, w), got {self.z.shape}")


@dataclass(eq=False)
class DiffusionSchedule:
    """Cumulative-product schedule from a linear beta ramp."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    w: Callable[[int], float] = field(default=lambda t: 1.0)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alpha_bar = np.cumprod(1.0 - betas)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based step t in [1, T]."""
        if not (1 <= t <= self.T):
            raise DimensionError(f"t must be in [1, {self.T}], got {t}")
        return float(self.alpha_bar[t - 1])

    def sample_t(self, rng: np.random.Generator) -> int:
        """Uniform t over the central [0.02 T, 0.98 T] band."""
        lo = max(1, int(np.ceil(0.02 * self.T)))
        hi = min(self.T, int(np.floor(0.98 * self.T)))
        return int(rng.integers(lo, hi + 1))


class GuidanceProvider(Protocol):
    def predict_noise(self, z_t: LatentImage, prompt: str, t: int,
                      eps: np.ndarray | None = None) -> np.ndarray: ...


def encode(image: np.ndarray, encoder_id: str) -> LatentImage:
    """Image (H, W, 3) in [0, 1] -> latent (3, h, w)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    scaled = (2.0 * image - 1.0).transpose(2, 0, 1)
    if encoder_id == "identity":
        return LatentImage(z=scaled.copy(), encoder_id="identity")
    if encoder_id == "pool8":
        c, h, w = scaled.shape
        if h % 8 or w % 8:
            raise DimensionError(f"pool8 needs H, W divisible by 8, got {h}x{w}")
        z = scaled.reshape(c, h // 8, 8, w // 8, 8).mean(axis=(2, 4))
        return LatentImage(z=z, encoder_id="pool8")
    raise DimensionError(f"unknown encoder {encoder_id!r}")


def encode_adjoint(grad_z: np.ndarray, encoder_id: str) -> np.ndarray:
    """Exact adjoint of `encode`: latent gradient -> pixel gradient."""
    if encoder_id == "identity":
        return 2.0 * grad_z.transpose(1, 2, 0)
    if encoder_id == "pool8":
        up = np.repeat(np.repeat(grad_z, 8, axis=1), 8, axis=2)
        return (2.0 / 64.0) * up.transpose(1, 2, 0)
    raise DimensionError(f"unknown encoder {encoder_id!r}")


def add_noise(sched: DiffusionSchedule, z: LatentImage, t: int,
              eps: np.ndarray) -> LatentImage:
    """z_t = sqrt(ab_t) z + sqrt(1 - ab_t) eps."""
    if eps.shape != z.z.shape:
        raise DimensionError(f"eps shape {eps.shape} != latent shape {z.z.shape}")
    ab = sched.alpha_bar_at(t)
    return LatentImage(z=np.sqrt(ab) * z.z + np.sqrt(1.0 - ab) * eps,
                       encoder_id=z.encoder_id)


@dataclass(eq=False)
class SdsResult:
    grad_pixels: np.ndarray  # (H, W, 3)
    t: int


def sds_texture_grad(sched: DiffusionSchedule, provider: GuidanceProvider,
                     render_out, prompt: str, rng: np.random.Generator, *,
                     encoder_id: str = "identity",
                     t: int | None = None,
                     eps: np.ndarray | None = None) -> SdsResult:
    """One stochastic SDS gradient w.r.t. the rendered RGB pixels.

    The returned pixel gradient is the encoder pullback of
    w(t) (eps_hat - eps); chaining through render_backward supplies the
    texture-space factor.
    """
    z = encode(render_out.rgb, encoder_id)
    if t is None:
        t = sched.sample_t(rng)
    if eps is None:
        eps = rng.standard_normal(z.z.shape)
    z_t = add_noise(sched, z, t, eps)
    eps_hat = provider.predict_noise(z_t, prompt, t, eps=eps)
    if eps_hat.shape != z.z.shape:
        raise ProviderError(f"provider returned shape {eps_hat.shape}, expected {z.z.shape}")
    residual = sched.w(t) * (eps_hat - eps)
    return SdsResult(grad_pixels=encode_adjoint(residual, encoder_id), t=t)


def sds_consistency_grad(sched: DiffusionSchedule, provider: GuidanceProvider,
                         rgb_latent: LatentImage, normal_latent: LatentImage,
                         alpha: float, prompt: str, rng: np.random.Generator, *,
                         t: int | None = None,
                         eps: np.ndarray | None = None) -> SdsResult:
    """SDS on the interpolated latent alpha z_rgb + (1-alpha) z_normal.

    The RGB latent is treated as a constant (its branch is detached); the
    residual is pulled back only along the (1-alpha) normal path, so the
    returned gradient is w.r.t. the normal-image pixels and nothing ever
    flows to the RGB branch.
    """
    if rgb_latent.z.shape != normal_latent.z.shape:
        raise DimensionError("rgb/normal latent shapes differ")
    if not (0.0 <= alpha <= 1.0):
        raise DimensionError(f"alpha must be in [0, 1], got {alpha}")
    z_mix = LatentImage(z=alpha * rgb_latent.z + (1.0 - alpha) * normal_latent.z,
                        encoder_id=normal_latent.encoder_id)
    if t is None:
        t = sched.sample_t(rng)
    if eps is None:
        eps = rng.standard_normal(z_mix.z.shape)
    z_t = add_noise(sched, z_mix, t, eps)
    eps_hat = provider.predict_noise(z_t, prompt, t, eps=eps)
    if eps_hat.shape != z_mix.z.shape:
        raise ProviderError(f"provider returned shape {eps_hat.shape}, expected {z_mix.z.shape}")
    residual = sched.w(t) * (eps_hat - eps) * (1.0 - alpha)
    return SdsResult(grad_pixels=encode_adjoint(residual, normal_latent.encoder_id), t=t)


class AnalyticOracle:
    """Desk-scale provider: E[eps_hat - eps] equals z - z_target, so SDS
    descends the latent MSE to the target. The prompt is ignored."""

    def __init__(self, z_target: LatentImage, sched: DiffusionSchedule | None = None):
        if not np.all(np.isfinite(z_target.z)):
            raise DimensionError("z_target contains non-finite values")
        self.z_target = z_target
        self.sched = sched or DiffusionSchedule()

    def predict_noise(self, z_t: LatentImage, prompt: str, t: int,
                      eps: np.ndarray | None = None) -> np.ndarray:
        if eps is None:
            raise ProviderError("analytic oracle requires the injected noise")
        if z_t.z.shape != self.z_target.z.shape:
            raise ProviderError(
                f"latent shape {z_t.z.shape} != target shape {self.z_target.z.shape}")
        ab = self.sched.alpha_bar_at(t)
        z0_hat = (z_t.z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        return eps + (z0_hat - self.z_target.z)


def analytic_oracle(z_target: LatentImage,
                    sched: DiffusionSchedule | None = None) -> AnalyticOracle:
    return AnalyticOracle(z_target, sched)


class ImageTargetOracle:
    """Analytic oracle whose target adapts to the caller's latent shape.

    Progressive optimization queries at several resolutions; the target
    image is area-downsampled to each requested size (sizes must divide
    the target resolution) and encoded on demand.
    """

    def __init__(self, target_image: np.ndarray, encoder_id: str,
                 sched: DiffusionSchedule | None = None):
        if target_image.ndim != 3 or target_image.shape[2] != 3:
            raise DimensionError(f"target image must be (H, W, 3), got {target_image.shape}")
        self.image = np.asarray(target_image, dtype=np.float64)
        self.encoder_id = encoder_id
        self.sched = sched or DiffusionSchedule()
        self._cache: dict[tuple[int, ...], AnalyticOracle] = {}

    def _oracle_for(self, shape: tuple[int, ...]) -> AnalyticOracle:
        hit = self._cache.get(shape)
        if hit is not None:
            return hit
        c, h, w = shape
        scale = 8 if self.encoder_id == "pool8" else 1
        need_h, need_w = h * scale, w * scale
        src_h, src_w = self.image.shape[:2]
        if src_h % need_h or src_w % need_w:
            raise ProviderError(
                f"target {src_h}x{src_w} not divisible down to {need_h}x{need_w}")
        fy, fx = src_h // need_h, src_w // need_w
        img = self.image
        if fy > 1 or fx > 1:
            img = img.reshape(need_h, fy, need_w, fx, 3).mean(axis=(1, 3))
        oracle = AnalyticOracle(encode(img, self.encoder_id), self.sched)
        self._cache[shape] = oracle
        return oracle

    def predict_noise(self, z_t: LatentImage, prompt: str, t: int,
                      eps: np.ndarray | None = None) -> np.ndarray:
        return self._oracle_for(z_t.z.shape).predict_noise(z_t, prompt, t, eps=eps)
