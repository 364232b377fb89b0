"""Analytic test scenes with exact ground truth.

A textured plane at z = 0 is rendered by intersecting each pixel ray with the
plane and evaluating a closed-form texture at the hit point, so ground-truth
pose and inverse depth are exact at every pixel center. The texture mixes
coarse and fine spatial frequencies: the coarse terms survive the top pyramid
levels for tracking, the fine ones carry the gradient needed for candidate
selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose
from .photometric import CalibratedImage


def default_texture(x, y):
    """Smooth multi-frequency texture.

    Frequencies are kept moderate on purpose: at the default orbit geometry
    the shortest wavelength stays above ~25 pixels, so bilinear resampling
    attenuates contrast by well under 1%. Sharper textures make the affine
    brightness fit absorb the interpolation loss, which biases b estimates.
    """
    return (128.0
            + 26.0 * np.sin(1.9 * x + 0.7) * np.cos(1.3 * y - 0.4)
            + 18.0 * np.sin(3.4 * x - 1.3 * y + 0.5)
            + 24.0 * np.cos(6.8 * x + 2.1 * y - 1.0)
            + 46.0 * np.sin(7.3 * x - 0.8) * np.cos(6.4 * y + 0.4)
            + 26.0 * np.sin(9.2 * x + 4.1 * y + 0.3)
            + 18.0 * np.cos(8.6 * y - 3.1 * x + 2.2))


def ramp_image(width, height, gx, gy, offset=64.0):
    """I(x, y) = offset + gx*x + gy*y. Bilinear interpolation reproduces a
    ramp exactly, which makes finite differences of warped samples agree
    with analytic derivatives to machine precision."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return offset + gx * xs + gy * ys


@dataclass(frozen=True)
class SyntheticFrame:
    """A rendered frame with exact ground truth."""

    index: int
    timestamp: float
    image: CalibratedImage
    pose: SE3Pose           # world -> camera
    inverse_depth: np.ndarray  # (H, W) ground-truth inverse depth


class PlaneScene:
    """Textured plane z = plane_z rendered through a pinhole camera."""

    def __init__(self, texture=default_texture, plane_z=0.0):
        self.texture = texture
        self.plane_z = float(plane_z)

    def render(self, pose: SE3Pose, intrinsics: CameraIntrinsics, exposure=1.0):
        """Returns (corrected intensity (H, W), inverse depth (H, W)).

        The corrected intensity is exposure * irradiance; rays that miss the
        plane would be a caller bug, so they raise.
        """
        w, h = intrinsics.width, intrinsics.height
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        n = np.stack([(xs - intrinsics.cx) / intrinsics.fx,
                      (ys - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(xs)], axis=-1)
        # World ray direction: R^T n, camera center: -R^T t.
        D = n @ pose.rotation
        C = pose.center()
        if np.any(D[..., 2] >= -1e-12) and C[2] > self.plane_z:
            raise ValueError("some pixel rays do not hit the plane")
        s = (self.plane_z - C[2]) / D[..., 2]
        if np.any(s <= 0):
            raise ValueError("plane behind the camera")
        X = C[0] + s * D[..., 0]
        Y = C[1] + s * D[..., 1]
        # Camera-frame depth of the hit point is s (rays have unit z-depth).
        return exposure * self.texture(X, Y), 1.0 / s

    def frame(self, index, pose, intrinsics, exposure=1.0, timestamp=None):
        intensity, idepth = self.render(pose, intrinsics, exposure)
        image = CalibratedImage(intensity, exposure)
        ts = float(index) * 0.05 if timestamp is None else timestamp
        return SyntheticFrame(index, ts, image, pose, idepth)


def orbit_intrinsics(width=160, height=120, focal=130.0):
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                            width, height)


def look_at_pose(center, target, up_hint):
    """World->camera pose for a camera at `center` whose optical axis points
    at `target`. `up_hint` must not be parallel to the view direction."""
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    f = f / np.linalg.norm(f)
    x = np.cross(np.asarray(up_hint, dtype=np.float64), f)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("up_hint parallel to the viewing direction")
    x = x / nx
    y = np.cross(f, x)
    R = np.stack([x, y, f])      # rows: camera axes in world coordinates
    return SE3Pose(R, -R @ center)


def orbit_pose(theta, radius=1.2, height=2.2, target_radius=0.3, phase=0.5):
    """Camera on a circle above the plane, aimed near the origin.

    The aim point moves with theta so the sequence carries rotation about all
    axes, and the up hint follows the orbit tangent to stay well-conditioned
    in the straight-down configuration.
    """
    center = np.array([radius * np.cos(theta), radius * np.sin(theta), height])
    target = np.array([target_radius * np.cos(theta + phase),
                       target_radius * np.sin(theta + phase), 0.0])
    tangent = np.array([-np.sin(theta), np.cos(theta), 0.0])
    return look_at_pose(center, target, tangent)


def orbit_sequence(n_frames=200, sweep=2.0 * np.pi, intrinsics=None,
                   scene=None, radius=1.2, height=2.2, exposure=1.0,
                   reverse=False):
    """Render an orbit around the plane; exact poses, exact depths.

    With reverse=True the same physical views are visited in opposite order
    (frame indices and timestamps still increase).
    """
    if intrinsics is None:
        intrinsics = orbit_intrinsics()
    if scene is None:
        scene = PlaneScene()
    thetas = np.linspace(0.0, sweep, n_frames, endpoint=False)
    if reverse:
        thetas = thetas[::-1]
    frames = []
    for i, th in enumerate(thetas):
        pose = orbit_pose(th, radius=radius, height=height)
        frames.append(scene.frame(i, pose, intrinsics, exposure))
    return frames, intrinsics


def trajectory_diameter(poses):
    """Largest pairwise camera-center distance."""
    c = np.stack([p.center() for p in poses])
    best = 0.0
    for i in range(len(c)):
        d = np.linalg.norm(c[i + 1:] - c[i], axis=1)
        if len(d):
            best = max(best, float(d.max()))
    return best
