"""Initial velocity and gravity estimation for rolling-shutter VIO rigs.

The pipeline: integrate IMU signals to per-scanline poses, assemble the
linear constraint system from image-point correspondences, eliminate the
per-ray depths, and fit the remaining seven-parameter homogeneous system
with one of several estimators (least squares, Taubin, iterative reweight,
renormalization) or refine with a bundle-adjustment baseline.
"""

from .ba import BundleAdjustmentInitializer, init_points, refine, refine_lm, reproject
from .bias import (
    BiasConfig,
    accel_bias_columns,
    assemble_with_bias,
    gyro_bias_jacobians,
)
from .estimators import (
    InitEstimate,
    IterativeReweightInitializer,
    LeastSquaresInitializer,
    RenormalizationInitializer,
    TaubinInitializer,
    dehomogenize,
    solve_iter_reweight,
    solve_ls,
    solve_renorm,
    solve_taubin,
)
from .geometry import (
    ImuSample,
    ImuStream,
    Observation,
    Pose,
    RigCalibration,
    ScanlineGeometry,
    calibrated_ray,
    integrate_rotation,
    integrate_rotations,
    integrate_translation,
    scanline_pose,
    upsample_imu,
)
from .noise import (
    PointNoiseModel,
    RowCovariances,
    full_jacobian,
    jacobian_ray,
    jacobian_schur,
    propagate,
    propagate_all,
)
from .synth import (
    McResult,
    Scenario,
    ScenarioConfig,
    TrajectorySpec,
    error_metrics,
    generate_scenario,
    perturb,
    ransac_prune,
    run_monte_carlo,
)
from .system import (
    Correspondence,
    CorrespondenceSet,
    FullSystem,
    ReducedSystem,
    Track,
    assemble,
    full_least_squares,
    make_pairing,
    pair_coefficients,
    recover_depths,
    reduce_system,
    reduced_least_squares,
)
from .validation import (
    DegenerateRayError,
    DegenerateTrackError,
    FileFormatError,
    InsufficientDataError,
    SolutionAtInfinityError,
)

__version__ = "0.1.0"
