"""avatarforge: differentiable parametric-avatar optimization engine."""

from .assets import PartLabel, TemplateModel, load_model, make_toy_body, save_model
from .body import BodyParams, PoseParams, lbs_backward, lbs_forward
from .camera import CameraSpec, ViewMode, sample_camera
from .config import OptimConfig, load_config
from .guidance import DiffusionSchedule, LatentImage, analytic_oracle
from .optimizer import AvatarState, run, step
from .render import RenderMesh, render, render_backward
from .subdivision import DisplacementLayer, SubdividedModel, posed_avatar, subdivide_partial

__version__ = "0.1.0"

__all__ = [
    "AvatarState", "BodyParams", "CameraSpec", "DiffusionSchedule",
    "DisplacementLayer", "LatentImage", "OptimConfig", "PartLabel",
    "PoseParams", "RenderMesh", "SubdividedModel", "TemplateModel",
    "ViewMode", "analytic_oracle", "lbs_backward", "lbs_forward",
    "load_config", "load_model", "make_toy_body", "posed_avatar", "render",
    "render_backward", "run", "sample_camera", "save_model", "step",
    "subdivide_partial", "__version__",
]
