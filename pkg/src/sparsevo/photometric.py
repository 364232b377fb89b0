"""Photometric calibration, robust weights, and the pattern energy.

The forward image formation model is ``I = G(t * V * B)`` for irradiance B,
exposure time t, vignette V and response G. ``correct_image`` inverts it up
to exposure: ``I' = G^-1(I) / V``. All downstream photometric quantities
(residuals, energies) operate on corrected intensities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, relative_pose, warp_points

PYRAMID_LEVELS = 6


def huber(r, gamma):
    """Huber energy: r^2/2 inside the threshold, gamma*(|r| - gamma/2) outside."""
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    return np.where(a <= gamma, 0.5 * r * r, gamma * (a - 0.5 * gamma))


def huber_weight(r, gamma):
    """IRLS weight so that huber'(r) = weight * r: 1 inside, gamma/|r| outside."""
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    with np.errstate(divide="ignore"):
        w = np.where(a <= gamma, 1.0, gamma / np.where(a > 0, a, 1.0))
    return w


def gradient_weight(gradient, constant):
    """Down-weight high-gradient host pixels: c^2 / (c^2 + |grad|^2).

    `gradient` holds (..., 2) image gradient vectors.
    """
    g = np.asarray(gradient, dtype=np.float64)
    g2 = np.sum(g * g, axis=-1)
    c2 = constant * constant
    return c2 / (c2 + g2)


@dataclass(frozen=True)
class AffineBrightness:
    """Per-frame brightness transfer parameters (a, b)."""

    a: float = 0.0
    b: float = 0.0


def brightness_transfer(host_exposure, host_ab: AffineBrightness,
                        target_exposure, target_ab: AffineBrightness):
    """Scale factor (t_j e^{a_j}) / (t_i e^{a_i}) of the affine model."""
    return (target_exposure * np.exp(target_ab.a)) / (host_exposure * np.exp(host_ab.a))


def brightness_prior(frames, lambda_a, lambda_b):
    """Quadratic pull of the affine parameters toward zero.

    `frames` is a sequence of AffineBrightness (or anything with .a/.b).
    Returns (energy, gradient, hessian_diagonal) over the flattened
    [a_0, b_0, a_1, b_1, ...] ordering. Energy is sum(l_a a^2 + l_b b^2);
    an infinite lambda pins the parameter (gradient/Hessian entries of a
    pinned coordinate are returned as 0 and callers must keep it fixed).
    """
    n = len(frames)
    grad = np.zeros(2 * n)
    hess = np.zeros(2 * n)
    energy = 0.0
    for k, f in enumerate(frames):
        for j, (lam, v) in enumerate(((lambda_a, f.a), (lambda_b, f.b))):
            if np.isinf(lam):
                continue
            energy += lam * v * v
            grad[2 * k + j] = 2.0 * lam * v
            hess[2 * k + j] = 2.0 * lam
    return energy, grad, hess


@dataclass(frozen=True)
class ResidualPattern:
    """Pixel offsets a point's energy is summed over. Offset (0,0) is the center."""

    offsets: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 2)
        if not (o == [0, 0]).all(axis=1).any():
            raise ValueError("pattern must contain the center offset (0, 0)")
        object.__setattr__(self, "offsets", o)

    def __len__(self):
        return len(self.offsets)

    @property
    def radius(self):
        return int(np.abs(self.offsets).max())


def _dense_block(r):
    return [(i, j) for j in range(-r, r + 1) for i in range(-r, r + 1)]


# Residual pattern registry. Id 8 is the default spread pattern: a center
# pixel, its 2-px axis neighbours and three of the four diagonal neighbours.
PATTERNS = {
    1: ResidualPattern([(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]),
    2: ResidualPattern([(0, 0), (1, 1), (-1, 1), (1, -1), (-1, -1)]),
    3: ResidualPattern(_dense_block(1)),
    4: ResidualPattern([(0, 0), (2, 0), (-2, 0), (0, 2), (0, -2),
                        (1, 1), (-1, 1), (1, -1), (-1, -1)]),
    5: ResidualPattern([(0, 0), (2, 2), (-2, 2), (2, -2), (-2, -2), (2, 0), (-2, 0),
                        (0, 2), (0, -2), (1, 1), (-1, 1), (1, -1), (-1, -1)]),
    6: ResidualPattern(_dense_block(2)),
    7: ResidualPattern([(0, 0), (2, 2), (-2, 2), (2, -2), (-2, -2), (2, 0), (-2, 0),
                        (0, 2), (0, -2), (1, 1), (-1, 1), (1, -1), (-1, -1),
                        (3, 1), (3, -1), (-3, 1), (-3, -1), (1, 3), (-1, 3),
                        (1, -3), (-1, -3)]),
    8: ResidualPattern([(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2),
                        (-1, -1), (-1, 1), (1, 1)]),
    9: ResidualPattern([(2 * i, 2 * j) for j in range(-2, 3) for i in range(-2, 3)]),
}

DEFAULT_PATTERN = PATTERNS[8]


@dataclass(frozen=True)
class PhotometricCalibration:
    """Inverse response lookup, vignette map, and exposure availability.

    ``inverse_response[i]`` maps the raw 8-bit intensity i to the corrected
    (irradiance-scale) value; it must be strictly increasing. The vignette
    has values in (0, 1].
    """

    inverse_response: np.ndarray
    vignette: np.ndarray
    has_exposures: bool = False

    def __post_init__(self):
        inv = np.asarray(self.inverse_response, dtype=np.float64).reshape(-1)
        if inv.shape != (256,):
            raise ValueError(f"inverse response must have 256 entries, got {inv.shape}")
        if not np.all(np.diff(inv) > 0):
            raise ValueError("inverse response must be strictly increasing")
        vig = np.asarray(self.vignette, dtype=np.float64)
        if vig.ndim != 2:
            raise ValueError("vignette must be a 2D map")
        if vig.min() <= 0 or vig.max() > 1.0 + 1e-9:
            raise ValueError("vignette values must lie in (0, 1]")
        object.__setattr__(self, "inverse_response", inv)
        object.__setattr__(self, "vignette", vig)

    @staticmethod
    def identity(width, height, has_exposures=False):
        return PhotometricCalibration(np.arange(256, dtype=np.float64),
                                      np.ones((height, width)), has_exposures)


def inverse_from_response(response_samples):
    """Invert 256 ascending response samples G(k), k on a uniform [0,255] grid.

    Returns the 256-entry inverse lookup U with G(U[i]) = i, computed by
    linear interpolation; U is clamped to [0, 255] outside the sampled range.
    """
    g = np.asarray(response_samples, dtype=np.float64).reshape(-1)
    if g.shape != (256,):
        raise ValueError(f"response must have 256 samples, got {g.shape}")
    if not np.all(np.diff(g) > 0):
        raise ValueError("response samples must be strictly increasing")
    x = np.arange(256, dtype=np.float64)
    inv = np.interp(x, g, x, left=0.0, right=255.0)
    # np.interp clamps flat outside the data range, which can produce equal
    # neighbouring entries; nudge them apart to keep the table invertible.
    eps = 1e-9
    for i in range(1, 256):
        if inv[i] <= inv[i - 1]:
            inv[i] = inv[i - 1] + eps
    return inv


def correct_image(raw, calibration: PhotometricCalibration):
    """Undo response and vignette: I'(x) = G^-1(I(x)) / V(x).

    Raw intensities are looked up in the 256-entry inverse table with linear
    interpolation between integer levels (raw inputs may be float arrays).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != calibration.vignette.shape:
        raise ValueError(f"image shape {raw.shape} does not match vignette "
                         f"{calibration.vignette.shape}")
    if raw.min() < 0 or raw.max() > 255:
        raise ValueError("raw intensities must lie in [0, 255]")
    flat = np.interp(raw.ravel(), np.arange(256), calibration.inverse_response)
    return (flat.reshape(raw.shape) / calibration.vignette)


def half_sample(image, mask=None):
    """2x2 average downsampling with ceil dimensions (edge-replicated pad).

    With a validity mask, each output pixel averages only its valid sources
    and is valid if at least one source is.
    """
    h, w = image.shape
    ph, pw = h + (h & 1), w + (w & 1)
    img = image
    if (ph, pw) != (h, w):
        img = np.pad(image, ((0, ph - h), (0, pw - w)), mode="edge")
    if mask is None:
        q = img.reshape(ph // 2, 2, pw // 2, 2)
        return q.mean(axis=(1, 3)), None
    m = np.pad(mask, ((0, ph - h), (0, pw - w)), mode="edge") if (ph, pw) != (h, w) else mask
    mq = m.reshape(ph // 2, 2, pw // 2, 2).astype(np.float64)
    q = (img * m).reshape(ph // 2, 2, pw // 2, 2)
    count = mq.sum(axis=(1, 3))
    out_mask = count > 0
    out = np.zeros_like(count)
    np.divide(q.sum(axis=(1, 3)), count, out=out, where=out_mask)
    return out, out_mask


class PyramidLevel:
    """One pyramid level: corrected intensities, gradients, validity mask."""

    __slots__ = ("intensity", "grad_x", "grad_y", "mask")

    def __init__(self, intensity, mask=None):
        self.intensity = np.ascontiguousarray(intensity, dtype=np.float64)
        # Centered differences in the interior, one-sided at the borders.
        self.grad_y, self.grad_x = np.gradient(self.intensity)
        self.mask = mask

    @property
    def shape(self):
        return self.intensity.shape


class CalibratedImage:
    """A photometrically corrected frame with its image pyramid.

    Exposure time stays attached to the frame (the model keeps t outside the
    corrected image). The optional mask marks valid pixels after geometric
    rectification.
    """

    def __init__(self, intensity, exposure=1.0, mask=None, levels=PYRAMID_LEVELS):
        intensity = np.asarray(intensity, dtype=np.float64)
        if intensity.ndim != 2:
            raise ValueError("intensity must be a 2D array")
        self.exposure = float(exposure)
        if self.exposure <= 0:
            raise ValueError("exposure must be positive")
        self.levels = [PyramidLevel(intensity, mask)]
        img, m = intensity, mask
        for _ in range(1, levels):
            img, m = half_sample(img, m)
            self.levels.append(PyramidLevel(img, m))

    @property
    def intensity(self):
        return self.levels[0].intensity

    @property
    def shape(self):
        return self.levels[0].intensity.shape


def sample_bilinear(image, xs, ys):
    """Bilinear interpolation at float coordinates; caller guarantees bounds."""
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    i00 = image[y0, x0]
    i01 = image[y0, x0 + 1]
    i10 = image[y0 + 1, x0]
    i11 = image[y0 + 1, x0 + 1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    return top + fy * (bot - top)


def in_bounds(xs, ys, shape, margin=0.0):
    h, w = shape
    return ((xs >= margin) & (xs <= w - 2 - margin)
            & (ys >= margin) & (ys <= h - 2 - margin))


def sample_image(level: PyramidLevel, xs, ys, with_gradient=False):
    """Sample a pyramid level (and optionally its gradient) with validity.

    Coordinates outside the bilinear domain, or touching rectification-invalid
    pixels, are reported invalid and their samples are NaN.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = in_bounds(xs, ys, level.shape)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    vals = sample_bilinear(level.intensity, xc, yc)
    if level.mask is not None:
        x0 = np.floor(xc).astype(np.int64)
        y0 = np.floor(yc).astype(np.int64)
        m = level.mask
        valid = valid & m[y0, x0] & m[y0, x0 + 1] & m[y0 + 1, x0] & m[y0 + 1, x0 + 1]
    vals = np.where(valid, vals, np.nan)
    if not with_gradient:
        return vals, valid
    gx = np.where(valid, sample_bilinear(level.grad_x, xc, yc), np.nan)
    gy = np.where(valid, sample_bilinear(level.grad_y, xc, yc), np.nan)
    return vals, np.stack([gx, gy], axis=-1), valid


def pattern_residuals(pixel, inverse_depth, host, target, intrinsics: CameraIntrinsics,
                      pattern: ResidualPattern = DEFAULT_PATTERN):
    """Photometric residuals of one point over the pattern.

    `host` and `target` provide .image (CalibratedImage), .pose (SE3Pose),
    .a, .b and .exposure. Every pattern offset warps with the point's single
    shared inverse depth. Returns (residuals (K,), valid mask (K,)).
    """
    offsets = pattern.offsets.astype(np.float64)
    host_px = np.asarray(pixel, dtype=np.float64) + offsets
    rel = relative_pose(host.pose, target.pose)
    warped, _, valid = warp_points(host_px, np.full(len(offsets), inverse_depth),
                                   rel, intrinsics)
    host_level = host.image.levels[0]
    target_level = target.image.levels[0]
    host_vals, host_valid = sample_image(host_level, host_px[:, 0], host_px[:, 1])
    tgt_vals, tgt_valid = sample_image(target_level,
                                       np.where(valid, warped[:, 0], 0.0),
                                       np.where(valid, warped[:, 1], 0.0))
    valid = valid & host_valid & tgt_valid
    scale = brightness_transfer(host.image.exposure, AffineBrightness(host.a, host.b),
                                target.image.exposure, AffineBrightness(target.a, target.b))
    r = (tgt_vals - target.b) - scale * (host_vals - host.b)
    return np.where(valid, r, np.nan), valid


def point_energy(pixel, inverse_depth, host, target, intrinsics: CameraIntrinsics,
                 pattern: ResidualPattern = DEFAULT_PATTERN,
                 huber_gamma=9.0, gradient_constant=50.0):
    """Weighted Huber energy of one point in one target frame.

    Returns (energy, residuals, valid). Any invalid pattern pixel invalidates
    the whole observation (energy NaN, valid False) so callers can drop it.
    """
    r, valid = pattern_residuals(pixel, inverse_depth, host, target, intrinsics, pattern)
    if not valid.all():
        return np.nan, r, False
    level = host.image.levels[0]
    _, grad, _ = sample_image(level, np.asarray([float(pixel[0])]),
                              np.asarray([float(pixel[1])]), with_gradient=True)
    w_p = float(gradient_weight(grad[0], gradient_constant))
    energy = float(np.sum(w_p * huber(r, huber_gamma)))
    return energy, r, True
