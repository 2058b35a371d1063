"""Sparse-view Gaussian splatting toolkit: rasterizer with per-pixel confidence,
analytic gradients, camera conditioning, refine-and-densify optimization."""
from .core import CameraView, GaussianCloud, GaussianSplat, RenderOutput, RgbdImage, activate_opacity, sh_to_rgb
from .render import RasterConfig, confidence_map, enhancer_confidence, normalize_confidence_for_display, project_gaussian, rasterize

__version__ = "0.1.0"

__all__ = [
    "CameraView", "GaussianCloud", "GaussianSplat", "RenderOutput", "RgbdImage", "RasterConfig",
    "activate_opacity", "sh_to_rgb", "confidence_map", "enhancer_confidence",
    "normalize_confidence_for_display", "project_gaussian", "rasterize",
]
