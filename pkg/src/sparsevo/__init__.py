"""Monocular direct sparse visual odometry.

Windowed photometric bundle adjustment over keyframe poses, affine
brightness, inverse-depth points and (optionally) intrinsics, with
first-estimate-Jacobian marginalization, plus the tracking frontend,
dataset loaders and the evaluation harness.
"""

from .geometry import (BehindCameraError, CameraIntrinsics, SE3Pose,
                       Sim3Transform, WarpResult, adjoint, boxplus,
                       relative_pose, se3_exp, se3_log, so3_exp, so3_log,
                       warp_point, warp_points)
from .photometric import (AffineBrightness, CalibratedImage, DEFAULT_PATTERN,
                          PATTERNS, PhotometricCalibration, ResidualPattern,
                          brightness_prior, brightness_transfer, correct_image,
                          gradient_weight, huber, huber_weight,
                          inverse_from_response, pattern_residuals, point_energy)
from .window import (FrameState, InverseDepthPoint, OptimizeStats,
                     QuadraticPrior, ResidualJacobian, WindowedSystem,
                     build_system, dump_matrix, full_hessian,
                     gauss_newton_iterate, linearize_residual, load_matrix,
                     marginalize_frame, marginalize_points,
                     marginalize_variables, solve_schur, solve_schur_dense)

__version__ = "0.1.0"
