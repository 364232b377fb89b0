"""Data selection and initialization around the windowed optimizer.

Coarse two-frame tracking against the newest keyframe, the keyframe and
marginalization policies, gradient-stratified candidate selection, discrete
epipolar candidate tracking, clearance-greedy activation, and median-adaptive
outlier rejection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, SE3Pose, adjoint, boxplus,
                       normalized_ray, relative_pose, se3_exp, warp_points,
                       MIN_PROJECTION_DEPTH)
from .photometric import (AffineBrightness, CalibratedImage, DEFAULT_PATTERN,
                          PYRAMID_LEVELS, ResidualPattern, brightness_transfer,
                          gradient_weight, huber, huber_weight, half_sample,
                          sample_image)
from .window import (WindowedSystem, Observation, OBS_ACTIVE, OBS_OUTLIER,
                     POINT_ACTIVE, POINT_OUTLIER, drop_outlier_observations)

CANDIDATE_ALIVE = "alive"
CANDIDATE_DISCARDED = "discarded"


@dataclass
class FrameView:
    """Duck-typed frame (image, pose, affine brightness) for residual code."""

    image: CalibratedImage
    pose: SE3Pose
    a: float = 0.0
    b: float = 0.0

    @property
    def exposure(self):
        return self.image.exposure


# ---------------------------------------------------------------------------
# Tracker reference: semi-dense inverse depth maps on the newest keyframe.
# ---------------------------------------------------------------------------


def _dilate_depth(depth, mask):
    """3x3 dilation: invalid pixels with valid neighbours get their average."""
    h, w = depth.shape
    pd = np.zeros((h + 2, w + 2))
    pm = np.zeros((h + 2, w + 2), dtype=bool)
    pd[1:-1, 1:-1] = np.where(mask, depth, 0.0)
    pm[1:-1, 1:-1] = mask
    s = np.zeros_like(depth)
    c = np.zeros_like(depth)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            s += pd[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
            c += pm[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
    grow = (~mask) & (c > 0)
    out = np.where(mask, depth, 0.0)
    out[grow] = s[grow] / c[grow]
    return out, mask | grow


def _depth_pyramid(pixels, idepths, shape, levels=PYRAMID_LEVELS):
    """Splat (pixel, inverse depth) samples into per-level dilated maps."""
    h, w = shape
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    if len(pixels):
        xs = np.clip(np.rint(pixels[:, 0]).astype(np.int64), 0, w - 1)
        ys = np.clip(np.rint(pixels[:, 1]).astype(np.int64), 0, h - 1)
        np.add.at(acc, (ys, xs), idepths)
        np.add.at(cnt, (ys, xs), 1.0)
    mask = cnt > 0
    depth = np.zeros((h, w))
    depth[mask] = acc[mask] / cnt[mask]
    maps = []
    d, m = _dilate_depth(depth, mask)
    maps.append((d, m))
    for _ in range(1, levels):
        d, m = half_sample(d, m)
        d = np.where(m, d, 0.0)
        d, m = _dilate_depth(d, m)
        maps.append((d, m))
    return maps


class TrackerReference:
    """The newest keyframe plus semi-dense inverse depth per pyramid level."""

    def __init__(self, keyframe_id, image: CalibratedImage, pose: SE3Pose,
                 a, b, depth_maps):
        self.keyframe_id = keyframe_id
        self.image = image
        self.pose = pose
        self.a = float(a)
        self.b = float(b)
        self.depth_maps = depth_maps

    @property
    def exposure(self):
        return self.image.exposure

    @staticmethod
    def from_system(system: WindowedSystem, keyframe_id):
        """Project all active points into the keyframe and dilate."""
        kf = system.frame(keyframe_id)
        pixels, idepths = [], []
        for p in system.active_points():
            if p.host_id == keyframe_id:
                pixels.append(p.pixel.astype(np.float64))
                idepths.append(p.idepth)
                continue
            host = system.frame(p.host_id)
            rel = relative_pose(host.pose, kf.pose)
            px, dt, valid = warp_points(p.pixel.astype(np.float64)[None, :],
                                        np.asarray([max(p.idepth, 0.0)]),
                                        rel, system.intrinsics)
            if valid[0] and np.isfinite(dt[0]) and dt[0] > 0:
                pixels.append(px[0])
                idepths.append(float(dt[0]))
        pixels = np.asarray(pixels).reshape(-1, 2)
        idepths = np.asarray(idepths, dtype=np.float64)
        maps = _depth_pyramid(pixels, idepths, kf.image.shape)
        return TrackerReference(keyframe_id, kf.image, kf.pose, kf.a, kf.b, maps)

    @staticmethod
    def from_samples(keyframe_id, image, pose, a, b, pixels, idepths):
        maps = _depth_pyramid(np.asarray(pixels, dtype=np.float64).reshape(-1, 2),
                              np.asarray(idepths, dtype=np.float64), image.shape)
        return TrackerReference(keyframe_id, image, pose, a, b, maps)


# ---------------------------------------------------------------------------
# Coarse two-frame tracking.
# ---------------------------------------------------------------------------


@dataclass
class TrackResult:
    relative_pose: SE3Pose        # reference keyframe -> new frame
    alpha: float                  # a_new - a_ref
    beta: float                   # b_new
    rmse_per_level: list
    flow: float = 0.0             # root mean square flow, pixels
    flow_translation: float = 0.0  # same with the rotation removed
    valid_fraction: float = 0.0
    lost: bool = False
    recovered: bool = False

    def brightness_change(self, ref_exposure, new_exposure):
        """|log(e^alpha t_new / t_ref)|, the keyframe criterion's a-term."""
        return abs(self.alpha + np.log(new_exposure / ref_exposure))


def _level_data(reference: TrackerReference, level):
    depth, mask = reference.depth_maps[level]
    ys, xs = np.nonzero(mask & (depth > 0))
    lv = reference.image.levels[level]
    vals = lv.intensity[ys, xs]
    grad = np.stack([lv.grad_x[ys, xs], lv.grad_y[ys, xs]], axis=-1)
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    return px, depth[ys, xs], vals, grad


def _track_level(px, d_ref, ref_vals, w_p, new_level, intr_l, t_ratio,
                 state, huber_gamma, fix_affine, max_iterations=12):
    """GN over (pose, alpha, beta) on one pyramid level. Mutates nothing;
    returns (state, energy, n_valid)."""
    rel, alpha, beta = state
    energy = None
    for _ in range(max_iterations):
        warped, _, valid = warp_points(px, d_ref, rel, intr_l)
        xs = np.where(valid, warped[..., 0], 0.0)
        ys = np.where(valid, warped[..., 1], 0.0)
        vals, grad, ok = sample_image(new_level, xs, ys, with_gradient=True)
        valid = valid & ok
        if valid.sum() < 8:
            return (rel, alpha, beta), np.inf, int(valid.sum())
        s = np.exp(alpha) * t_ratio
        r = np.where(valid, (vals - beta) - s * ref_vals, 0.0)
        w = np.where(valid, w_p * huber_weight(r, huber_gamma), 0.0)
        e = float(np.sum(np.where(valid, w_p * huber(r, huber_gamma), 0.0)))
        if energy is not None and e > energy * (1 + 1e-12) + 1e-12:
            # Step made things worse: revert to the stored best and stop.
            return best_state, energy, n_valid
        energy, best_state, n_valid = e, (rel, alpha, beta), int(valid.sum())

        # Geometry Jacobian at the current estimate from the center pixels.
        n = normalized_ray(px, intr_l)
        u = n @ rel.rotation.T + d_ref[:, None] * rel.translation
        z = np.where(u[..., 2] > MIN_PROJECTION_DEPTH, u[..., 2], 1.0)
        zinv = 1.0 / z
        jpi = np.zeros(u.shape[:-1] + (2, 3))
        jpi[..., 0, 0] = intr_l.fx * zinv
        jpi[..., 0, 2] = -intr_l.fx * u[..., 0] * zinv * zinv
        jpi[..., 1, 1] = intr_l.fy * zinv
        jpi[..., 1, 2] = -intr_l.fy * u[..., 1] * zinv * zinv
        hat_u = np.zeros(u.shape[:-1] + (3, 3))
        ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
        hat_u[..., 0, 1], hat_u[..., 0, 2] = -uz, uy
        hat_u[..., 1, 0], hat_u[..., 1, 2] = uz, -ux
        hat_u[..., 2, 0], hat_u[..., 2, 1] = -uy, ux
        j_rel = np.concatenate([d_ref[:, None, None, None] * jpi[:, None],
                                -np.einsum("nij,njk->nik", jpi, hat_u)[:, None]],
                               axis=-1)[:, 0]
        rows = np.zeros(px.shape[:-1] + (8,))
        rows[:, :6] = np.einsum("nc,ncd->nd", grad, j_rel)
        rows[:, 6] = -s * ref_vals
        rows[:, 7] = -1.0
        free = [0, 1, 2, 3, 4, 5] if fix_affine else [0, 1, 2, 3, 4, 5, 6, 7]
        A = rows[:, free]
        wv = w[:, None] * A
        Hs = A.T @ wv
        gs = wv.T @ r
        # Tiny Levenberg damping keeps coarse levels stable; the windowed
        # optimizer below never damps.
        Hs = Hs + 1e-8 * max(np.abs(np.diag(Hs)).max(), 1e-12) * np.eye(len(free))
        try:
            step = np.linalg.solve(Hs, -gs)
        except np.linalg.LinAlgError:
            return best_state, energy, n_valid
        full = np.zeros(8)
        full[free] = step
        rel = boxplus(full[:6], rel)
        alpha += full[6]
        beta += full[7]
        if np.abs(full).max() < 1e-6:
            return (rel, alpha, beta), energy, n_valid
    return (rel, alpha, beta), energy, n_valid


def _flow_stats(px, d_ref, rel, intr):
    """(f, f_t): RMS flow of reference pixels, and with rotation removed."""
    warped, _, valid = warp_points(px, d_ref, rel, intr)
    rel_t = SE3Pose(np.eye(3), rel.translation)
    warped_t, _, valid_t = warp_points(px, d_ref, rel_t, intr)
    f = f_t = 0.0
    if valid.any():
        f = float(np.sqrt(np.mean(np.sum((warped[valid] - px[valid]) ** 2, axis=-1))))
    if valid_t.any():
        f_t = float(np.sqrt(np.mean(np.sum((warped_t[valid_t] - px[valid_t]) ** 2,
                                           axis=-1))))
    return f, f_t


def track_frame(reference: TrackerReference, new_image: CalibratedImage,
                motion_prior: SE3Pose, intrinsics: CameraIntrinsics,
                huber_gamma=9.0, gradient_constant=50.0,
                previous_rmse=None, fix_affine=False,
                recovery_rotation_deg=3.0, lost_rmse=18.0) -> TrackResult:
    """Coarse-to-fine direct alignment of the new frame against the reference.

    motion_prior is the predicted reference->new relative pose. When the
    final RMSE exceeds twice the previous frame's, the coarsest level is
    re-run from 27 small-rotation perturbations of the prior and the best
    restart wins; if the result still exceeds the lost threshold the frame is
    flagged lost.
    """
    levels = list(range(len(reference.depth_maps) - 1, -1, -1))
    per_level = {}
    for L in levels:
        px, d, vals, grad = _level_data(reference, L)
        if len(px) == 0:
            continue
        w_p = gradient_weight(grad, gradient_constant)
        per_level[L] = (px, d, vals, w_p)
    if not per_level:
        return TrackResult(motion_prior, 0.0, 0.0, [], lost=True)

    t_ratio = new_image.exposure / reference.exposure

    def run(init_rel, coarse_only=False):
        state = (init_rel, 0.0, 0.0)
        rmses = []
        n_valid = 0
        for L in levels:
            if L not in per_level:
                continue
            px, d, vals, w_p = per_level[L]
            state, e, n_valid = _track_level(
                px, d, vals, w_p, new_image.levels[L], intrinsics.scaled(L),
                t_ratio, state, huber_gamma, fix_affine)
            rmses.append(np.sqrt(2.0 * e / max(n_valid, 1)) if np.isfinite(e) else np.inf)
            if coarse_only:
                break
        return state, rmses, n_valid

    state, rmses, n_valid = run(motion_prior)
    recovered = False
    threshold = 2.0 * previous_rmse if previous_rmse is not None else np.inf
    if rmses and rmses[-1] > threshold:
        r = np.deg2rad(recovery_rotation_deg)
        best = (rmses[0] if rmses else np.inf, motion_prior)
        for ix in (-1, 0, 1):
            for iy in (-1, 0, 1):
                for iz in (-1, 0, 1):
                    if ix == iy == iz == 0:
                        continue
                    init = boxplus(np.array([0, 0, 0, ix * r, iy * r, iz * r]),
                                   motion_prior)
                    _, coarse_rmses, _ = run(init, coarse_only=True)
                    if coarse_rmses and coarse_rmses[0] < best[0]:
                        best = (coarse_rmses[0], init)
        state2, rmses2, n_valid2 = run(best[1])
        if rmses2 and rmses2[-1] < rmses[-1]:
            state, rmses, n_valid = state2, rmses2, n_valid2
            recovered = True

    rel, alpha, beta = state
    px0, d0, _, _ = per_level[min(per_level)]
    f, f_t = _flow_stats(px0, d0, rel, intrinsics)
    total = len(per_level[min(per_level)][0])
    result = TrackResult(rel, alpha, beta, rmses, flow=f, flow_translation=f_t,
                         valid_fraction=n_valid / max(total, 1), recovered=recovered)
    final = rmses[-1] if rmses else np.inf
    if not np.isfinite(final) or (previous_rmse is not None
                                  and final > max(3.0 * previous_rmse, lost_rmse)):
        result.lost = True
    return result


# ---------------------------------------------------------------------------
# Keyframe and marginalization policy.
# ---------------------------------------------------------------------------


@dataclass
class KeyframeDecision:
    """Weighted flow/brightness criterion for creating a keyframe."""

    f: float
    f_t: float
    a: float
    w_f: float = 1.0
    w_ft: float = 1.0
    w_a: float = 1.0
    threshold: float = 1.0

    def __post_init__(self):
        if self.f < 0 or self.f_t < 0 or self.a < 0:
            raise ValueError("flow and brightness statistics must be >= 0")

    def score(self):
        return self.w_f * self.f + self.w_ft * self.f_t + self.w_a * self.a


def keyframe_needed(decision: KeyframeDecision) -> bool:
    return decision.score() > decision.threshold


def visibility_fraction(system: WindowedSystem, host_id, target_id):
    """Fraction of the host's active points whose centers warp validly into
    the target frame.

    A host with no active points is vacuously visible: the few-points-visible
    rule reads "n_visible < 5% of n_points", which no empty set satisfies.
    Returning 0 here instead turns every point-starved stretch into a window
    collapse (each new keyframe immediately evicts the previous one, leaving
    no baseline for candidate search to recover with).
    """
    pts = system.points_in_host(host_id)
    if not pts:
        return 1.0
    host = system.frame(host_id)
    target = system.frame(target_id)
    rel = relative_pose(host.pose, target.pose)
    px = np.stack([p.pixel for p in pts]).astype(np.float64)
    d = np.array([max(p.idepth, 0.0) for p in pts])
    _, _, valid = warp_points(px, d, rel, system.intrinsics)
    return float(valid.mean())


def select_marginalization_frame(system: WindowedSystem, max_frames,
                                 min_visibility=0.05, epsilon=1e-3):
    """Next keyframe to marginalize, or None.

    The newest two keyframes are always kept. Any older frame with less than
    min_visibility of its points visible in the newest is selected first;
    otherwise, when the window exceeds max_frames, the frame maximizing the
    heuristically-spread distance score is selected.
    """
    if len(system.frames) <= 2:
        return None
    newest = system.frames[-1]
    eligible = system.frames[:-2]
    for f in eligible:
        if visibility_fraction(system, f.id, newest.id) < min_visibility:
            return f.id
    if len(system.frames) <= max_frames:
        return None
    centers = {f.id: f.pose.center() for f in system.frames}

    def dist(i, j):
        return float(np.linalg.norm(centers[i] - centers[j]))

    older = [f.id for f in system.frames[:-1]][::-1]  # I_2, I_3, ... (newest first)
    best, best_score = None, -np.inf
    for f in eligible:
        # sqrt of distance to the newest, times inverse closeness to the
        # other old frames: pushes marginalization toward spatially bunched,
        # far-from-current keyframes.
        others = [j for j in older[1:] if j != f.id]
        s = np.sqrt(dist(f.id, newest.id)) * sum(1.0 / (dist(f.id, j) + epsilon)
                                                 for j in others)
        if s > best_score:
            best, best_score = f.id, s
    return best


# ---------------------------------------------------------------------------
# Candidate selection.
# ---------------------------------------------------------------------------


def _block_reduce_median(mag, block):
    h, w = mag.shape
    out = np.zeros((int(np.ceil(h / block)), int(np.ceil(w / block))))
    for by in range(out.shape[0]):
        for bx in range(out.shape[1]):
            out[by, bx] = np.median(mag[by * block:(by + 1) * block,
                                        bx * block:(bx + 1) * block])
    return out


def select_candidates(raw_image, d=3.0, gradient_threshold=7.0,
                      threshold_block=32, margin=3):
    """Gradient-stratified candidate pixels with pass labels {1, 2, 3}.

    The adaptive threshold is the median absolute gradient of the enclosing
    threshold_block square plus gradient_threshold; passes 2 and 3 run on
    doubled and quadrupled block sizes with the additive term halved and
    quartered, only inside blocks where the earlier passes found nothing.
    Selection happens on the raw image, before photometric correction.
    """
    img = np.asarray(raw_image, dtype=np.float64)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    h, w = img.shape
    med = _block_reduce_median(mag, threshold_block)
    by = np.minimum(np.arange(h) // threshold_block, med.shape[0] - 1)
    bx = np.minimum(np.arange(w) // threshold_block, med.shape[1] - 1)
    base = med[np.ix_(by, bx)]

    ok_margin = np.zeros((h, w), dtype=bool)
    ok_margin[margin:h - margin, margin:w - margin] = True

    selected = []
    labels = []
    taken_blocks = set()  # (pass-1 block coords) that produced a selection
    d1 = max(int(round(d)), 1)
    sizes = [d1, 2 * d1, 4 * d1]
    adds = [gradient_threshold, gradient_threshold / 2.0, gradient_threshold / 4.0]
    occupied = np.zeros((h, w), dtype=bool)
    for pidx, (size, add) in enumerate(zip(sizes, adds)):
        thresh = base + add
        for y0 in range(0, h, size):
            for x0 in range(0, w, size):
                if pidx > 0:
                    # only fill blocks the earlier passes left empty
                    if occupied[y0:y0 + size, x0:x0 + size].any():
                        continue
                blk = mag[y0:y0 + size, x0:x0 + size]
                mask = (blk > thresh[y0:y0 + size, x0:x0 + size]) \
                    & ok_margin[y0:y0 + size, x0:x0 + size]
                if not mask.any():
                    continue
                flat = np.where(mask.ravel(), blk.ravel(), -np.inf)
                k = int(np.argmax(flat))
                yy, xx = y0 + k // blk.shape[1], x0 + k % blk.shape[1]
                selected.append((xx, yy))
                labels.append(pidx + 1)
                occupied[yy, xx] = True
    return np.asarray(selected, dtype=np.int64).reshape(-1, 2), np.asarray(labels)


def adapt_block_size(d, selected_count, target_count, lo=1.0, hi=12.0):
    """Scale the selection block size toward the candidate budget."""
    if target_count <= 0 or selected_count <= 0:
        return d
    return float(np.clip(d * np.sqrt(selected_count / target_count), lo, hi))


# ---------------------------------------------------------------------------
# Epipolar candidate tracking.
# ---------------------------------------------------------------------------


@dataclass
class CandidateTrack:
    """A candidate point being depth-initialized by epipolar search."""

    host_id: int
    pixel: np.ndarray
    pass_label: int
    idepth: float = 1.0
    idepth_min: float = 0.05
    idepth_max: float = 5.0
    variance: float = np.inf
    status: str = CANDIDATE_ALIVE
    converged: bool = False
    observations: int = 0
    host_values: np.ndarray = field(default=None, repr=False)
    weight: float = 1.0

    def interval_width(self):
        return self.idepth_max - self.idepth_min


def make_candidates(host_id, image: CalibratedImage, pixels, labels,
                    pattern: ResidualPattern = DEFAULT_PATTERN,
                    gradient_constant=50.0, idepth_range=(0.05, 5.0)):
    """Build CandidateTracks, caching host pattern intensities."""
    level = image.levels[0]
    h, w = level.shape
    out = []
    offs = pattern.offsets
    for (x, y), lab in zip(pixels, labels):
        xs, ys = x + offs[:, 0], y + offs[:, 1]
        if xs.min() < 0 or ys.min() < 0 or xs.max() > w - 2 or ys.max() > h - 2:
            continue
        c = CandidateTrack(host_id, np.array([x, y], dtype=np.int64), int(lab),
                           idepth=0.5 * (idepth_range[0] + idepth_range[1]),
                           idepth_min=idepth_range[0], idepth_max=idepth_range[1])
        c.host_values = level.intensity[ys, xs].copy()
        grad = np.array([level.grad_x[y, x], level.grad_y[y, x]])
        c.weight = float(gradient_weight(grad, gradient_constant))
        out.append(c)
    return out


def _idepth_from_pixel(q, ray_rot, t, intr, axis):
    """Invert the epipolar parametrization: inverse depth whose warp lands at
    pixel coordinate q along the given axis."""
    if axis == 0:
        kappa = (q - intr.cx) / intr.fx
        num = kappa * ray_rot[2] - ray_rot[0]
        den = t[0] - kappa * t[2]
    else:
        kappa = (q - intr.cy) / intr.fy
        num = kappa * ray_rot[2] - ray_rot[1]
        den = t[1] - kappa * t[2]
    return num / den


def _search_rows(cands, host, target, intrinsics, pattern, huber_gamma,
                 max_steps=32, min_baseline=1e-9):
    """Vectorized epipolar search for a batch of candidates sharing one
    (host, target) pair: per-candidate step inverse-depths and pattern
    energies along the epipolar segment (padded steps hold +inf)."""
    C = len(cands)
    rel = relative_pose(host.pose, target.pose)
    t = rel.translation
    skip = np.zeros(C, dtype=bool)
    if np.linalg.norm(t) < min_baseline:
        return {"skip": np.ones(C, dtype=bool)}
    px = np.stack([c.pixel for c in cands]).astype(np.float64)
    d_lo = np.array([c.idepth_min for c in cands])
    d_hi = np.array([c.idepth_max for c in cands])
    rn = normalized_ray(px, intrinsics) @ rel.rotation.T       # (C, 3)

    # Clip the inverse depth interval to the in-front region (z linear in d).
    z_lo = rn[:, 2] + d_lo * t[2]
    z_hi = rn[:, 2] + d_hi * t[2]
    skip |= (z_lo <= MIN_PROJECTION_DEPTH) & (z_hi <= MIN_PROJECTION_DEPTH)
    if t[2] != 0.0:
        d_cross = (MIN_PROJECTION_DEPTH - rn[:, 2]) / t[2]
        d_lo = np.where(z_lo <= MIN_PROJECTION_DEPTH,
                        np.minimum(d_cross + 1e-12, d_hi), d_lo)
        d_hi = np.where(z_hi <= MIN_PROJECTION_DEPTH,
                        np.maximum(d_cross - 1e-12, d_lo), d_hi)

    ends, _, _ = warp_points(np.repeat(px[:, None, :], 2, axis=1),
                             np.stack([d_lo, d_hi], axis=1), rel, intrinsics)
    seg = ends[:, 1] - ends[:, 0]
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    skip |= ~np.isfinite(ends).all(axis=(1, 2)) | (seg_len < 0.5)
    if skip.all():
        return {"skip": skip}
    seg = np.where(np.isfinite(seg), seg, 0.0)
    seg_len = np.where(np.isfinite(seg_len), seg_len, 0.0)

    n_steps = np.clip(np.ceil(seg_len).astype(np.int64), 1, max_steps)
    S = int(n_steps.max()) + 1
    ts = np.minimum(np.arange(S)[None, :] / np.maximum(n_steps[:, None], 1), 1.0)
    qs = ends[:, 0][:, None, :] + ts[..., None] * seg[:, None, :]   # (C, S, 2)

    # Invert pixel -> inverse depth along the better-conditioned axis.
    with np.errstate(divide="ignore", invalid="ignore"):
        kx = (qs[..., 0] - intrinsics.cx) / intrinsics.fx
        dx = (kx * rn[:, None, 2] - rn[:, None, 0]) / (t[0] - kx * t[2])
        ky = (qs[..., 1] - intrinsics.cy) / intrinsics.fy
        dy = (ky * rn[:, None, 2] - rn[:, None, 1]) / (t[1] - ky * t[2])
    use_x = (np.abs(seg[:, 0]) >= np.abs(seg[:, 1]))[:, None]
    ds = np.where(use_x, dx, dy)
    lo = np.minimum(d_lo, d_hi)[:, None]
    hi = np.maximum(d_lo, d_hi)[:, None]
    ds = np.clip(np.where(np.isfinite(ds), ds, 0.0), lo, hi)

    offs = pattern.offsets.astype(np.float64)
    K = len(offs)
    hp = px[:, None, None, :] + offs[None, None, :, :]          # (C, 1, K, 2)
    hp = np.broadcast_to(hp, (C, S, K, 2))
    warped, _, valid = warp_points(hp, np.broadcast_to(ds[:, :, None], (C, S, K)),
                                   rel, intrinsics)
    lv = target.image.levels[0]
    vals, ok = sample_image(lv, np.where(valid, warped[..., 0], 0.0),
                            np.where(valid, warped[..., 1], 0.0))
    valid = valid & ok
    s = brightness_transfer(host.image.exposure, AffineBrightness(host.a, host.b),
                            target.image.exposure, AffineBrightness(target.a, target.b))
    host_vals = np.stack([c.host_values for c in cands])
    weight = np.array([c.weight for c in cands])
    r = (vals - target.b) - s * (host_vals[:, None, :] - host.b)
    e = np.where(valid.all(axis=2),
                 (weight[:, None, None] * huber(np.where(valid, r, 0.0),
                                                huber_gamma)).sum(axis=2),
                 np.inf)
    e = np.where(np.arange(S)[None, :] <= n_steps[:, None], e, np.inf)
    return {"skip": skip, "ds": ds, "energies": e, "n_steps": n_steps}


def _apply_search(cand: CandidateTrack, ds, e, n_steps, distinctness):
    """Fold one search row into the candidate's depth estimate."""
    if not np.isfinite(e).any():
        return
    k = int(np.argmin(e))
    last = n_steps  # valid step indices are 0 .. n_steps
    interior = np.arange(1, last)
    if len(interior):
        local = interior[(e[interior] <= e[interior - 1])
                         & (e[interior] <= e[interior + 1])
                         & np.isfinite(e[interior])]
        rivals = local[np.abs(local - k) > 1]
        if len(rivals):
            second = float(e[rivals].min())
            if second > 0 and not (e[k] < distinctness * second):
                cand.status = CANDIDATE_DISCARDED
                return

    # One-pixel disparity uncertainty: neighbours of the best step.
    lo_d = ds[max(k - 1, 0)]
    hi_d = ds[min(k + 1, last)]
    d_lo_new, d_hi_new = min(lo_d, hi_d), max(lo_d, hi_d)
    width = d_hi_new - d_lo_new
    old_width = cand.interval_width()
    if width > old_width:
        # never widen; recenter the old width on the new estimate
        mid = 0.5 * (d_lo_new + d_hi_new)
        d_lo_new, d_hi_new = mid - old_width / 2, mid + old_width / 2
        width = old_width
    # Sub-step refinement: parabola through the best step and its neighbours
    # recovers the fraction of a grid step the energy argmin kept hidden.
    d_best = ds[k]
    if 0 < k < last and np.isfinite(e[k - 1]) and np.isfinite(e[k + 1]):
        denom = e[k - 1] - 2.0 * e[k] + e[k + 1]
        if denom > 0:
            off = float(np.clip(0.5 * (e[k - 1] - e[k + 1]) / denom, -0.5, 0.5))
            d_best += off * ((ds[k + 1] - ds[k]) if off >= 0.0
                             else (ds[k] - ds[k - 1]))
    cand.idepth = float(np.clip(d_best, d_lo_new, d_hi_new))
    cand.idepth_min = float(max(d_lo_new, 1e-6))
    cand.idepth_max = float(max(d_hi_new, cand.idepth_min + 1e-9))
    cand.variance = float((0.5 * max(width, 1e-9)) ** 2)
    cand.observations += 1
    # Convergence must not be decidable by a single lucky (or junk) match:
    # the first search over the full prior range quantizes to a coarse grid,
    # and a bar scaled by the current argmin would let overestimates through
    # more easily than underestimates. Gate on a minimum number of folds and
    # measure precision against the interval midpoint instead.
    mid = 0.5 * (cand.idepth_min + cand.idepth_max)
    cand.converged = (cand.observations >= 4
                      and width < max(0.25 * mid, 0.02))


def track_candidates(cands, host, target, intrinsics,
                     pattern: ResidualPattern = DEFAULT_PATTERN,
                     huber_gamma=9.0, distinctness=0.75, max_steps=32):
    """Epipolar-search a batch of same-host candidates against one target.

    Walks each candidate's epipolar segment (induced by its inverse-depth
    interval) in about one-pixel steps, scores the pattern energy per step,
    and keeps the best. A best minimum not sufficiently distinct from the
    second-best local minimum permanently discards the candidate; a segment
    without usable parallax (or fully out of bounds) leaves it unchanged.
    The search interval never grows.
    """
    live = [c for c in cands if c.status == CANDIDATE_ALIVE]
    if not live:
        return cands
    rows = _search_rows(live, host, target, intrinsics, pattern, huber_gamma,
                        max_steps)
    if rows["skip"].all():
        return cands
    for i, c in enumerate(live):
        if not rows["skip"][i]:
            _apply_search(c, rows["ds"][i], rows["energies"][i],
                          int(rows["n_steps"][i]), distinctness)
    return cands


def track_candidate(cand: CandidateTrack, host, target, intrinsics,
                    pattern: ResidualPattern = DEFAULT_PATTERN,
                    huber_gamma=9.0, distinctness=0.75, max_steps=32):
    """Single-candidate epipolar search step (see track_candidates)."""
    track_candidates([cand], host, target, intrinsics, pattern,
                     huber_gamma, distinctness, max_steps)
    return cand


# ---------------------------------------------------------------------------
# Activation and outlier rejection.
# ---------------------------------------------------------------------------


def _project_into(system, newest, items, get_pixel, get_idepth):
    """Project host-pixel items into the newest frame, batched per host.

    Returns (positions, kept_items); items hosted in the newest frame pass
    through at their own pixel, others must warp validly.
    """
    by_host = {}
    for it in items:
        by_host.setdefault(it.host_id, []).append(it)
    pos, kept = [], []
    for hid, group in by_host.items():
        if hid == newest.id:
            pos.extend(get_pixel(it) for it in group)
            kept.extend(group)
            continue
        rel = relative_pose(system.frame(hid).pose, newest.pose)
        px = np.stack([get_pixel(it) for it in group])
        ds = np.array([get_idepth(it) for it in group])
        w, _, valid = warp_points(px, ds, rel, system.intrinsics)
        for k, it in enumerate(group):
            if valid[k]:
                pos.append(w[k])
                kept.append(it)
    return pos, kept


def activate_candidates(system: WindowedSystem, candidates, newest_id,
                        target_active, clearance_multipliers=(1.0, 2.0, 4.0)):
    """Greedily activate candidates where the newest keyframe is emptiest.

    Every candidate's clearance is its distance to the nearest active-point
    projection in the newest keyframe, divided by its pass multiplier; the
    largest clearance activates first (raster order on ties). Returns the
    activated points.
    """
    newest = system.frame(newest_id)
    existing, _ = _project_into(
        system, newest, system.active_points(),
        lambda p: p.pixel.astype(np.float64),
        lambda p: max(p.idepth, 0.0))
    n_slots = target_active - len(system.active_points())
    if n_slots <= 0:
        return []

    in_window = {f.id for f in system.frames}
    live = [c for c in candidates
            if c.status == CANDIDATE_ALIVE and c.converged
            and c.host_id in in_window]
    if not live:
        return []
    pos, keep = _project_into(system, newest, live,
                              lambda c: c.pixel.astype(np.float64),
                              lambda c: c.idepth)
    if not keep:
        return []
    pos = np.stack(pos)
    mult = np.array([clearance_multipliers[c.pass_label - 1] for c in keep])
    ys = np.array([c.pixel[1] for c in keep])
    xs = np.array([c.pixel[0] for c in keep])
    if existing:
        ex = np.stack(existing)
        dist = np.sqrt(((pos[:, None, :] - ex[None, :, :]) ** 2).sum(-1)).min(axis=1)
    else:
        dist = np.full(len(keep), np.inf)
    clearance = dist / mult

    # Observation validity (full pattern warps in bounds) depends only on
    # poses and candidate depths, none of which change during activation,
    # so it batches per (host, target) up front.
    offs = system.pattern.offsets.astype(np.float64)
    idx_by_host = {}
    for i, c in enumerate(keep):
        idx_by_host.setdefault(c.host_id, []).append(i)
    frame_ids = [f.id for f in system.frames]
    obs_ok = np.zeros((len(keep), len(frame_ids)), dtype=bool)
    for hid, rows in idx_by_host.items():
        rows = np.asarray(rows)
        hp = np.stack([keep[i].pixel for i in rows]).astype(np.float64)
        hp = hp[:, None, :] + offs[None, :, :]
        dsr = np.array([keep[i].idepth for i in rows])[:, None]
        dsr = np.broadcast_to(dsr, hp.shape[:2])
        hpose = system.frame(hid).pose
        for j, f in enumerate(system.frames):
            if f.id == hid:
                continue
            _, _, valid = warp_points(hp, dsr, relative_pose(hpose, f.pose),
                                      system.intrinsics)
            obs_ok[rows, j] = valid.all(axis=1)

    open_mask = np.ones(len(keep), dtype=bool)
    activated = []
    while len(activated) < n_slots and open_mask.any():
        # best clearance; raster order (y, x, index) among exact ties
        avail = np.flatnonzero(open_mask)
        top = clearance[avail].max()
        tied = avail[clearance[avail] == top]
        i = int(tied[np.lexsort((tied, xs[tied], ys[tied]))[0]])
        open_mask[i] = False
        c = keep[i]
        c.status = CANDIDATE_DISCARDED  # consumed
        targets = [fid for j, fid in enumerate(frame_ids)
                   if obs_ok[i, j] and fid != c.host_id]
        if not targets:
            continue
        try:
            p = system.add_point(c.host_id, c.pixel, c.idepth,
                                 variance=c.variance, pass_label=c.pass_label)
        except ValueError:
            continue
        for fid in targets:
            p.obs[fid] = Observation()
        activated.append(p)
        # update clearances against the newly activated projection
        d_new = np.sqrt(((pos - pos[i]) ** 2).sum(-1)) / mult
        clearance = np.minimum(clearance, d_new)
    return activated


def refine_point_depths(system: WindowedSystem, points, iterations=3,
                        max_rel_step=0.5):
    """Depth-only Newton refinement of freshly activated points.

    The epipolar search hands over inverse depths quantized to its final
    interval (several percent of the value). Feeding that noise straight
    into the joint optimization lets it leak into the poses before the
    depths settle, so each new point is first refined alone, all frames
    held fixed, against its full observation set. Points whose total
    pattern energy did not improve are reverted. Anchors are reset to the
    refined value; these points have not entered any prior yet.
    """
    if not points:
        return
    by_host = {}
    for p in points:
        by_host.setdefault(p.host_id, []).append(p)
    start = {p.id: p.idepth for p in points}
    energy0 = {p.id: 0.0 for p in points}
    use_fej = system.use_fej
    system.use_fej = False   # current-state geometry for the 1-D steps
    try:
        for it in range(iterations + 1):
            final = it == iterations
            acc_h = {p.id: 0.0 for p in points}
            acc_g = {p.id: 0.0 for p in points}
            acc_e = {p.id: 0.0 for p in points}
            for hid, plist in by_host.items():
                host = system.frame(hid)
                targets = {}
                for p in plist:
                    for t in p.active_targets():
                        targets.setdefault(t, []).append(p)
                for tid, pts in targets.items():
                    lin = system._pair_linearize(host, system.frame(tid), pts,
                                                 jacobians=not final)
                    ok = lin["pt_valid"]
                    e = lin["energies"]
                    for i, p in enumerate(pts):
                        acc_e[p.id] += float(e[i]) if ok[i] else 0.0
                    if final:
                        continue
                    rows_d = np.einsum("nkc,nc->nk", lin["j_image"],
                                       lin["j_idepth"][:, 0])
                    wr = lin["w"] * rows_d
                    h = (wr * rows_d).sum(axis=1)
                    g = (wr * lin["r"]).sum(axis=1)
                    for i, p in enumerate(pts):
                        if ok[i]:
                            acc_h[p.id] += float(h[i])
                            acc_g[p.id] += float(g[i])
            if it == 0:
                energy0 = dict(acc_e)
            if final:
                for p in points:
                    if acc_e[p.id] > energy0[p.id]:
                        p.idepth = start[p.id]
                    p.idepth0 = p.idepth
                    p.x = 0.0
                break
            for p in points:
                h, g = acc_h[p.id], acc_g[p.id]
                if h <= 1e-12:
                    continue
                step = -g / h
                cap = max_rel_step * max(abs(p.idepth), 1e-3)
                p.idepth = max(p.idepth + float(np.clip(step, -cap, cap)),
                               1e-4)
    finally:
        system.use_fej = use_fej


def remove_outlier_observations(system: WindowedSystem, kappa=3.0):
    """Drop observations whose pattern energy exceeds kappa times the median
    of their target frame; demote starved points.

    A point keeps its active status while it retains at least two active
    observations (one while the window itself has only two frames). Returns
    (observations_removed, points_removed).
    """
    return drop_outlier_observations(system, kappa)
