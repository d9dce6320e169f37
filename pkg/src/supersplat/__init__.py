"""Differentiable 2D Gaussian surfel splatting with spatially varying
per-surfel color and opacity (bilinear corners, movable kernels, tiny MLPs)."""

from .appearance import (Appearance, BilinearParams, ConstantParams,
                         MovableKernelParams, ShCoefficients, TinyMlpParams,
                         eval_sh, param_count, svf_bilinear, svf_eval,
                         svf_movable_kernels, svf_mlp, svf_vjp)
from .geometry import (Camera, IntersectionSample, SurfelGeometry, intersect,
                       intersect_vjp, look_at)
from .renderer import RenderConfig, RenderOutput, render, render_backward
from .scene import (GradientBuffer, Scene, empty_scene, make_scene,
                    seed_scene)

__version__ = "0.1.0"
