"""Spherical-harmonics lighting toolkit.

Projection of equirectangular panoramas onto a 9-term basis, diffuse irradiance
rendering and image-based relighting, photometric supervision losses with
analytic gradients, and inverse-rendering lighting estimators.
"""

from .sh import (SH_LAYOUT, ShCoefficients, SphericalDirection, attention_mask, basis_grid,
                 direction_grid, eval_basis, pixel_to_direction, project, reconstruct,
                 solid_angle_weights)
from .images import (EquirectImage, FormatError, NormalMap, load_hdr, load_ldr, load_pfm,
                     resize_bilinear, resize_normal_map, save_hdr, save_ldr, save_pfm)
from .render import (A_HAT, C1, C2, C3, C4, C5, blend_lights, build_irradiance_matrices,
                      dering, generate_relit_sample, irradiance_at, irradiance_basis,
                      irradiance_map, relight)
from .losses import (LossReport, LossWeights, PhotometricObjective, check_gradients,
                     loss_rc, loss_rl, loss_sh, spectral_prior, total_loss)
from .fitting import (ComputationError, EvalResult, FitConfig, evaluate_pair,
                      fit_gradient_descent, fit_least_squares, m_rmse)

__version__ = "0.1.0"

__all__ = [
    "SH_LAYOUT", "ShCoefficients", "SphericalDirection", "attention_mask", "basis_grid",
    "direction_grid", "eval_basis", "pixel_to_direction", "project", "reconstruct",
    "solid_angle_weights",
    "EquirectImage", "FormatError", "NormalMap", "load_hdr", "load_ldr", "load_pfm",
    "resize_bilinear", "resize_normal_map", "save_hdr", "save_ldr", "save_pfm",
    "A_HAT", "C1", "C2", "C3", "C4", "C5", "blend_lights", "build_irradiance_matrices",
    "dering", "generate_relit_sample", "irradiance_at", "irradiance_basis",
    "irradiance_map", "relight",
    "LossReport", "LossWeights", "PhotometricObjective", "check_gradients", "loss_rc",
    "loss_rl", "loss_sh", "spectral_prior", "total_loss",
    "ComputationError", "EvalResult", "FitConfig", "evaluate_pair",
    "fit_gradient_descent", "fit_least_squares", "m_rmse",
    "__version__",
]
