"""Desk-scale experiment drivers: polynomial bilevel tuning and stereo localization."""

from .poly import (BilevelTrace, poly_bilevel, poly_global_min, poly_problem,
                   poly_sampler, poly_value)
from .stereo import (CameraModel, LocalizationInstance, StereoSetup,
                     build_localization_qcqp, calibrate_baseline,
                     jacobian_compare, nominal_camera, stereo_measure,
                     umeyama_solve)

__all__ = [
    "BilevelTrace", "poly_bilevel", "poly_global_min", "poly_problem",
    "poly_sampler", "poly_value",
    "CameraModel", "LocalizationInstance", "StereoSetup",
    "build_localization_qcqp", "calibrate_baseline", "jacobian_compare",
    "nominal_camera", "stereo_measure", "umeyama_solve",
]
