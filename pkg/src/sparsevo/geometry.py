"""SE(3) / Sim(3) algebra and the pinhole camera model.

Conventions used throughout the package:

* Poses map world coordinates into the camera frame: ``P_cam = R @ P_world + t``.
* Tangent vectors are 6-vectors ``[rho, omega]`` (translational part first).
* Increments act from the left: ``boxplus(x, T) = exp(hat(x)) @ T``.
* Integer pixel coordinates address pixel centers; bilinear interpolation of
  an HxW image is valid on ``[0, W-2] x [0, H-2]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their Taylor expansions.
SMALL_ANGLE = 1e-8

# Camera-frame depths at or below this cannot be projected.
MIN_PROJECTION_DEPTH = 1e-12


class BehindCameraError(ValueError):
    """Projection of a point at or behind the camera plane."""


def hat(omega):
    """3-vector -> skew-symmetric matrix."""
    wx, wy, wz = omega
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _rodrigues_coefficients(angle):
    """Return (A, B, C) with R = I + A*hat + B*hat^2, V = I + B*hat + C*hat^2."""
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        A = 1.0 - a2 / 6.0
        B = 0.5 - a2 / 24.0
        C = 1.0 / 6.0 - a2 / 120.0
    else:
        a2 = angle * angle
        A = np.sin(angle) / angle
        B = (1.0 - np.cos(angle)) / a2
        C = (1.0 - A) / a2
    return A, B, C


def so3_exp(omega):
    """Rotation-vector exponential (Rodrigues formula with Taylor fallback)."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = float(np.linalg.norm(omega))
    A, B, _ = _rodrigues_coefficients(angle)
    K = hat(omega)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R):
    """Inverse of so3_exp. Accurate down to zero rotation."""
    R = np.asarray(R, dtype=np.float64)
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = float(np.arccos(trace))
    axis_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < SMALL_ANGLE:
        # R ~ I + hat(w): the off-diagonal differences are 2w to first order.
        return 0.5 * axis_raw
    if angle > np.pi - 1e-6:
        # Near pi the axis must be recovered from the symmetric part.
        M = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # Fix signs from the largest component.
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and M[i, k] < 0:
                    axis[i] = -axis[i]
        if axis_raw @ axis < 0:
            axis = -axis
        n = np.linalg.norm(axis)
        if n > 0:
            axis = axis / n
        return angle * axis
    return (0.5 * angle / np.sin(angle)) * axis_raw


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform; ``rotation`` is 3x3, ``translation`` is a 3-vector."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        dev = np.abs(R @ R.T - np.eye(3)).max()
        if dev > 1e-4 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        if dev > 1e-9:
            # Long composition chains accumulate round-off; snap back to the
            # nearest rotation instead of letting it grow.
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
            if np.linalg.det(R) < 0:
                R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return SE3Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self * other (apply other first)."""
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        """Transform one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M):
        M = np.asarray(M, dtype=np.float64)
        return SE3Pose(M[:3, :3], M[:3, 3])

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def se3_exp(x) -> SE3Pose:
    """Tangent 6-vector [rho, omega] -> SE3Pose."""
    x = np.asarray(x, dtype=np.float64).reshape(6)
    rho, omega = x[:3], x[3:]
    angle = float(np.linalg.norm(omega))
    A, B, C = _rodrigues_coefficients(angle)
    K = hat(omega)
    K2 = K @ K
    R = np.eye(3) + A * K + B * K2
    V = np.eye(3) + B * K + C * K2
    return SE3Pose(R, V @ rho)


def se3_log(T: SE3Pose):
    """Inverse of se3_exp."""
    omega = so3_log(T.rotation)
    angle = float(np.linalg.norm(omega))
    K = hat(omega)
    K2 = K @ K
    if angle < SMALL_ANGLE:
        # V^-1 = I - K/2 + K^2/12 + O(angle^4)
        Vinv = np.eye(3) - 0.5 * K + K2 / 12.0
    else:
        A, B, _ = _rodrigues_coefficients(angle)
        coeff = (1.0 - 0.5 * A / B) / (angle * angle)
        Vinv = np.eye(3) - 0.5 * K + coeff * K2
    return np.concatenate([Vinv @ T.translation, omega])


def boxplus(x, T: SE3Pose) -> SE3Pose:
    """Left-multiplicative state increment exp(x) * T."""
    return se3_exp(x).compose(T)


def adjoint(T: SE3Pose):
    """6x6 adjoint for the [rho, omega] ordering: Ad(T) [r, w] = [Rr + t x Rw, Rw]."""
    A = np.zeros((6, 6))
    A[:3, :3] = T.rotation
    A[:3, 3:] = hat(T.translation) @ T.rotation
    A[3:, 3:] = T.rotation
    return A


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform q = scale * R p + t."""

    pose: SE3Pose
    scale: float

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @staticmethod
    def identity():
        return Sim3Transform(SE3Pose.identity(), 1.0)

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.pose.rotation.T) + self.pose.translation

    def inverse(self) -> "Sim3Transform":
        s = 1.0 / self.scale
        Rt = self.pose.rotation.T
        return Sim3Transform(SE3Pose(Rt, -s * (Rt @ self.pose.translation)), s)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        R = self.pose.rotation @ other.pose.rotation
        t = self.scale * (self.pose.rotation @ other.pose.translation) + self.pose.translation
        return Sim3Transform(SE3Pose(R, t), self.scale * other.scale)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 4 or self.height < 4:
            raise ValueError("image size too small")

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_parameters(self, params) -> "CameraIntrinsics":
        fx, fy, cx, cy = [float(v) for v in params]
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height)

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level `level` (2x2 averaging per level).

        Averaging 2x2 blocks puts the new pixel center (i) at old coordinate
        (2i + 0.5), hence c' = (c - 0.5) / 2.
        """
        f = 2.0 ** level
        w, h = self.width, self.height
        for _ in range(level):
            w = (w + 1) // 2
            h = (h + 1) // 2
        return CameraIntrinsics(self.fx / f, self.fy / f,
                                (self.cx + 0.5) / f - 0.5, (self.cy + 0.5) / f - 0.5,
                                w, h)


def project(point, intrinsics: CameraIntrinsics):
    """Camera-frame 3D point -> pixel. Raises BehindCameraError for z <= 1e-12."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= MIN_PROJECTION_DEPTH:
        raise BehindCameraError(f"depth {p[2]} not projectable")
    return np.array([intrinsics.fx * p[0] / p[2] + intrinsics.cx,
                     intrinsics.fy * p[1] / p[2] + intrinsics.cy])


def backproject(pixel, inverse_depth, intrinsics: CameraIntrinsics):
    """Pixel + inverse depth -> camera-frame 3D point. Requires d > 0."""
    if inverse_depth <= 0:
        raise ValueError(f"inverse depth must be positive, got {inverse_depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    z = 1.0 / inverse_depth
    return np.array([(u - intrinsics.cx) / intrinsics.fx * z,
                     (v - intrinsics.cy) / intrinsics.fy * z,
                     z])


def normalized_ray(pixels, intrinsics: CameraIntrinsics):
    """Pixels (..., 2) -> unit-depth rays (..., 3)."""
    p = np.asarray(pixels, dtype=np.float64)
    x = (p[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (p[..., 1] - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def interpolation_bounds(intrinsics: CameraIntrinsics, margin: float = 0.0):
    """(x_min, x_max, y_min, y_max) of the valid bilinear domain."""
    return (margin, intrinsics.width - 2 - margin, margin, intrinsics.height - 2 - margin)


@dataclass(frozen=True)
class WarpResult:
    pixel: np.ndarray
    inverse_depth: float
    valid: bool


def relative_pose(host: SE3Pose, target: SE3Pose) -> SE3Pose:
    """T_th mapping host-frame coordinates into the target frame."""
    return target.compose(host.inverse())


def warp_point(pixel, inverse_depth, host_pose: SE3Pose, target_pose: SE3Pose,
               intrinsics: CameraIntrinsics) -> WarpResult:
    """Reproject a host pixel with inverse depth d into the target frame.

    Works projectively through u = R n + d t, so d = 0 (point at infinity)
    is legal. Returns the warped pixel, the inverse depth in the target
    frame, and a validity flag (in front of the camera and inside the
    bilinear interpolation domain). Invalid warps are flagged, never clamped.
    """
    if inverse_depth < 0:
        raise ValueError(f"inverse depth must be >= 0, got {inverse_depth}")
    T = relative_pose(host_pose, target_pose)
    n = normalized_ray(np.asarray(pixel, dtype=np.float64), intrinsics)
    u = T.rotation @ n + inverse_depth * T.translation
    if u[2] <= MIN_PROJECTION_DEPTH:
        return WarpResult(np.full(2, np.nan), np.nan, False)
    px = np.array([intrinsics.fx * u[0] / u[2] + intrinsics.cx,
                   intrinsics.fy * u[1] / u[2] + intrinsics.cy])
    d_target = inverse_depth / u[2]
    x_min, x_max, y_min, y_max = interpolation_bounds(intrinsics)
    valid = bool(x_min <= px[0] <= x_max and y_min <= px[1] <= y_max)
    return WarpResult(px, d_target, valid)


def warp_points(pixels, inverse_depths, relative: SE3Pose, intrinsics: CameraIntrinsics):
    """Vectorized warp of (..., 2) pixels with matching inverse depths.

    Returns (pixels (..., 2), target inverse depths, valid mask). Entries
    behind the camera or outside the interpolation domain are invalid.
    """
    n = normalized_ray(pixels, intrinsics)
    d = np.asarray(inverse_depths, dtype=np.float64)
    u = n @ relative.rotation.T + d[..., None] * relative.translation
    z = u[..., 2]
    front = z > MIN_PROJECTION_DEPTH
    z_safe = np.where(front, z, 1.0)
    px = np.stack([intrinsics.fx * u[..., 0] / z_safe + intrinsics.cx,
                   intrinsics.fy * u[..., 1] / z_safe + intrinsics.cy], axis=-1)
    d_target = np.where(front, d / z_safe, np.nan)
    x_min, x_max, y_min, y_max = interpolation_bounds(intrinsics)
    valid = (front & (px[..., 0] >= x_min) & (px[..., 0] <= x_max)
             & (px[..., 1] >= y_min) & (px[..., 1] <= y_max))
    px = np.where(front[..., None], px, np.nan)
    return px, d_target, valid
