"""Per-surfel appearance: view-dependent SH color plus the spatially varying
color/opacity functions evaluated at the intersection point p = (u, v).

Variants:
  constant     single opacity (sigmoid-activated), color from SH alone
  bilinear     four quadrant corners blended with sigmoid-rescaled bilinear
               weights; the rescale rate lambda_s is learnable
  mk           k movable kernels with exponential distance falloff
  mk-sigmoid   same kernels with a 1 - tanh(d^2) falloff
  mlp          a tiny 3-layer dense network 2 -> H -> H -> 4, sigmoid hidden
               activations, linear output (rgb delta + alpha)

The raw function outputs are unconstrained (color deltas and opacities may go
negative); the renderer clamps opacity at compositing time.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import (TAG_BILINEAR, TAG_CONSTANT, TAG_KERNELS,
                      TAG_KERNELS_SIGMOID, TAG_MLP, svf_eval_core,
                      svf_vjp_core)
from .sh import n_coeffs, sh_basis

VARIANT_TAGS = {
    "constant": TAG_CONSTANT,
    "bilinear": TAG_BILINEAR,
    "mk": TAG_KERNELS,
    "mk-sigmoid": TAG_KERNELS_SIGMOID,
    "mlp": TAG_MLP,
}
TAG_NAMES = {tag: name for name, tag in VARIANT_TAGS.items()}

DEFAULT_LAMBDA_S = 5.0
DEFAULT_LAMBDA_E = 0.1
DEFAULT_KERNEL_COUNT = 4
DEFAULT_HIDDEN = 4
LAMBDA_S_MIN = 1e-3


def svf_width(variant, k=DEFAULT_KERNEL_COUNT, hidden=DEFAULT_HIDDEN):
    """Packed parameter-row width for one surfel of the given variant."""
    if variant == "constant":
        return 1
    if variant == "bilinear":
        return 17
    if variant in ("mk", "mk-sigmoid"):
        return 6 * k
    if variant == "mlp":
        return hidden * hidden + 8 * hidden + 4
    raise ValueError(f"unknown appearance variant {variant!r}")


def param_count(variant, k=DEFAULT_KERNEL_COUNT, hidden=DEFAULT_HIDDEN, sh_degree=3):
    """Trainable scalars per surfel: geometry (9) + SH + variant parameters."""
    return 9 + 3 * n_coeffs(sh_degree) + svf_width(variant, k, hidden)


@dataclass
class ShCoefficients:
    """RGB spherical-harmonic coefficients, (degree+1)^2 triplets."""

    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expected = (n_coeffs(self.degree), 3)
        if self.coeffs.shape != expected:
            raise ValueError(f"SH degree {self.degree} needs coeffs of shape "
                             f"{expected}, got {self.coeffs.shape}")


def eval_sh(sh, direction):
    """View-dependent color: basis(direction) @ coeffs + 0.5 per channel."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("eval_sh expects a unit direction")
    basis = sh_basis(direction, sh.degree)
    return basis @ sh.coeffs + 0.5


@dataclass
class ConstantParams:
    opacity: float


@dataclass
class BilinearParams:
    corner_colors: np.ndarray      # (4, 3), quadrant order (-u-v, -u+v, +u-v, +u+v)
    corner_opacities: np.ndarray   # (4,)
    lambda_s: float = DEFAULT_LAMBDA_S

    def to_row(self):
        return np.concatenate([
            np.asarray(self.corner_colors, dtype=np.float64).reshape(12),
            np.asarray(self.corner_opacities, dtype=np.float64).reshape(4),
            [self.lambda_s],
        ])

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(row[:12].reshape(4, 3).copy(), row[12:16].copy(), float(row[16]))


@dataclass
class MovableKernelParams:
    kernel_centers: np.ndarray     # (k, 2) in uv units
    kernel_colors: np.ndarray      # (k, 3)
    kernel_opacities: np.ndarray   # (k,)
    lambda_e: float = DEFAULT_LAMBDA_E
    kernel_form: str = "exponential"

    def __post_init__(self):
        if self.kernel_form not in ("exponential", "sigmoid"):
            raise ValueError(f"unknown kernel form {self.kernel_form!r}")
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be non-negative")

    @property
    def k(self):
        return np.asarray(self.kernel_centers).shape[0]

    def to_row(self):
        k = self.k
        return np.concatenate([
            np.asarray(self.kernel_centers, dtype=np.float64).reshape(2 * k),
            np.asarray(self.kernel_colors, dtype=np.float64).reshape(3 * k),
            np.asarray(self.kernel_opacities, dtype=np.float64).reshape(k),
        ])

    @classmethod
    def from_row(cls, row, lambda_e=DEFAULT_LAMBDA_E, kernel_form="exponential"):
        row = np.asarray(row, dtype=np.float64)
        k = row.size // 6
        return cls(row[:2 * k].reshape(k, 2).copy(),
                   row[2 * k:5 * k].reshape(k, 3).copy(),
                   row[5 * k:].copy(), lambda_e, kernel_form)


@dataclass
class TinyMlpParams:
    w1: np.ndarray  # (H, 2)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    w3: np.ndarray  # (4, H)
    b3: np.ndarray  # (4,), last component is the opacity bias

    @property
    def hidden(self):
        return np.asarray(self.b1).size

    def to_row(self):
        return np.concatenate([
            np.asarray(self.w1, dtype=np.float64).reshape(-1),
            np.asarray(self.b1, dtype=np.float64).reshape(-1),
            np.asarray(self.w2, dtype=np.float64).reshape(-1),
            np.asarray(self.b2, dtype=np.float64).reshape(-1),
            np.asarray(self.w3, dtype=np.float64).reshape(-1),
            np.asarray(self.b3, dtype=np.float64).reshape(-1),
        ])

    @classmethod
    def from_row(cls, row, hidden=DEFAULT_HIDDEN):
        row = np.asarray(row, dtype=np.float64)
        h = hidden
        o = 0
        w1 = row[o:o + 2 * h].reshape(h, 2).copy(); o += 2 * h
        b1 = row[o:o + h].copy(); o += h
        w2 = row[o:o + h * h].reshape(h, h).copy(); o += h * h
        b2 = row[o:o + h].copy(); o += h
        w3 = row[o:o + 4 * h].reshape(4, h).copy(); o += 4 * h
        b3 = row[o:o + 4].copy()
        return cls(w1, b1, w2, b2, w3, b3)


@dataclass
class Appearance:
    """Appearance of one surfel: SH coefficients plus one variant's params."""

    sh: ShCoefficients
    params: object  # ConstantParams | BilinearParams | MovableKernelParams | TinyMlpParams

    @property
    def variant(self):
        if isinstance(self.params, ConstantParams):
            return "constant"
        if isinstance(self.params, BilinearParams):
            return "bilinear"
        if isinstance(self.params, MovableKernelParams):
            return "mk-sigmoid" if self.params.kernel_form == "sigmoid" else "mk"
        if isinstance(self.params, TinyMlpParams):
            return "mlp"
        raise ValueError(f"unknown appearance params type {type(self.params)}")


def _eval_row(tag, row, k, hidden, lam_e, p):
    scratch = np.empty(max(4 * hidden, 1))
    fr, fg, fb, fa = svf_eval_core(tag, row, k, hidden, lam_e,
                                   float(p[0]), float(p[1]), scratch)
    return np.array([fr, fg, fb]), fa


def svf_bilinear(p, params):
    """Sigmoid-rescaled bilinear blend of the four corners at p."""
    return _eval_row(TAG_BILINEAR, params.to_row(), 0, 0, 0.0, p)


def svf_movable_kernels(p, params):
    """Sum of distance-weighted kernel colors/opacities at p."""
    tag = TAG_KERNELS_SIGMOID if params.kernel_form == "sigmoid" else TAG_KERNELS
    return _eval_row(tag, params.to_row(), params.k, 0, params.lambda_e, p)


def svf_mlp(p, params):
    """Tiny-MLP color delta and opacity at p."""
    return _eval_row(TAG_MLP, params.to_row(), 0, params.hidden, 0.0, p)


def svf_eval(p, params):
    """Dispatch on the params type; constant yields (0, sigmoid(opacity))."""
    if isinstance(params, ConstantParams):
        return _eval_row(TAG_CONSTANT, np.array([params.opacity]), 0, 0, 0.0, p)
    if isinstance(params, BilinearParams):
        return svf_bilinear(p, params)
    if isinstance(params, MovableKernelParams):
        return svf_movable_kernels(p, params)
    if isinstance(params, TinyMlpParams):
        return svf_mlp(p, params)
    raise ValueError(f"unknown appearance params type {type(params)}")


def svf_vjp(p, params, d_rgb, d_alpha):
    """Backward pass of the spatially varying function.

    Args:
        p: evaluation point (u, v).
        params: the variant parameters used in the forward pass.
        d_rgb: cotangent on the color delta, shape (3,).
        d_alpha: cotangent on the opacity output.

    Returns:
        (d_p, d_params): gradient w.r.t. p as a (2,) array, and an instance of
        the same parameter class holding per-field gradients (fixed fields
        such as lambda_e report zero).
    """
    d_rgb = np.asarray(d_rgb, dtype=np.float64)
    if isinstance(params, ConstantParams):
        tag, row, k, hidden, lam_e = TAG_CONSTANT, np.array([params.opacity]), 0, 0, 0.0
    elif isinstance(params, BilinearParams):
        tag, row, k, hidden, lam_e = TAG_BILINEAR, params.to_row(), 0, 0, 0.0
    elif isinstance(params, MovableKernelParams):
        tag = TAG_KERNELS_SIGMOID if params.kernel_form == "sigmoid" else TAG_KERNELS
        row, k, hidden, lam_e = params.to_row(), params.k, 0, params.lambda_e
    elif isinstance(params, TinyMlpParams):
        tag, row, k, hidden, lam_e = TAG_MLP, params.to_row(), 0, params.hidden, 0.0
    else:
        raise ValueError(f"unknown appearance params type {type(params)}")

    grad = np.zeros(row.size)
    scratch = np.empty(max(4 * hidden, 1))
    du, dv = svf_vjp_core(tag, row, k, hidden, lam_e,
                          float(p[0]), float(p[1]),
                          d_rgb[0], d_rgb[1], d_rgb[2], float(d_alpha),
                          grad, 0, scratch)
    d_p = np.array([du, dv])
    if isinstance(params, ConstantParams):
        return d_p, ConstantParams(float(grad[0]))
    if isinstance(params, BilinearParams):
        return d_p, BilinearParams.from_row(grad)
    if isinstance(params, MovableKernelParams):
        return d_p, MovableKernelParams.from_row(grad, lambda_e=0.0,
                                                 kernel_form=params.kernel_form)
    return d_p, TinyMlpParams.from_row(grad, hidden=hidden)
