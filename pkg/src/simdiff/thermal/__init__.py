"""Melt-pool heat model, calibration, synthetic spatter video and optical flow."""
from .calibrate import CalibrationConfig, CalibrationResult, calibrate, calibration_loss
from .clips import ClipSpec, gen_thermal_dataset, render_clip
from .flow import estimate_flow, estimate_flows
from .heat import (KERNELS, HeatParams, LaserPath, ThermalGrid, greens_function, meltpool_field,
                   meltpool_with_grad, pde_residual, quadrature_nodes)
from .spatter import Particles, SpawnConfig, ThermalScene, render_frame, spatter_mask, spatter_step, splat_particles

__all__ = [
    "CalibrationConfig", "CalibrationResult", "ClipSpec", "HeatParams", "KERNELS", "LaserPath", "Particles",
    "SpawnConfig", "ThermalGrid", "ThermalScene", "calibrate", "calibration_loss", "estimate_flow",
    "estimate_flows", "gen_thermal_dataset", "greens_function", "meltpool_field", "meltpool_with_grad",
    "pde_residual", "quadrature_nodes", "render_clip", "render_frame", "spatter_mask", "spatter_step",
    "splat_particles",
]
