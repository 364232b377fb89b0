"""Windowed photometric bundle adjustment with first-estimate Jacobians.

State ordering for all dense systems is [frames (8 dof each: 6 pose + a + b)
| intrinsics (4) | points (1 inverse depth each)], frames in window order and
points in insertion order.

Every variable carries a linearization anchor (its first-estimate value) and
an accumulated tangent delta x; the current value is x boxplus anchor.
Geometric and photometric Jacobians are evaluated at the anchors, residuals
and image gradients at the current values. Anchors of variables touched by a
marginalization event are frozen from then on; all other anchors are
re-centered after each accepted update step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import (CameraIntrinsics, SE3Pose, adjoint, boxplus, hat,
                       normalized_ray, relative_pose, se3_exp, se3_log,
                       warp_points, MIN_PROJECTION_DEPTH)
from .photometric import (AffineBrightness, CalibratedImage, DEFAULT_PATTERN,
                          ResidualPattern, brightness_transfer, gradient_weight,
                          huber, huber_weight, sample_image)

# Observation states.
OBS_ACTIVE = "active"
OBS_OOB = "oob"
OBS_OUTLIER = "outlier"

# Point states.
POINT_ACTIVE = "active"
POINT_MARGINALIZED = "marginalized"
POINT_OUTLIER = "outlier"

FRAME_DOF = 8
INTRINSIC_DOF = 4


class FrameState:
    """A keyframe inside the optimization window."""

    def __init__(self, frame_id, image: CalibratedImage, pose: SE3Pose,
                 a=0.0, b=0.0, timestamp=0.0):
        self.id = frame_id
        self.image = image
        self.timestamp = timestamp
        self.pose0 = pose            # linearization anchor
        self.a0 = float(a)
        self.b0 = float(b)
        self.x = np.zeros(FRAME_DOF)  # accumulated tangent delta
        self.pose = pose              # materialized current state
        self.a = float(a)
        self.b = float(b)
        self.locked = False           # anchor frozen by marginalization
        self.fixed = False            # excluded from optimization entirely

    @property
    def exposure(self):
        return self.image.exposure

    def apply_delta(self, delta):
        self.x = self.x + delta
        self._materialize()

    def apply_delta_multiplicative(self, delta):
        """x <- log(exp(delta) * exp(x)) for the pose part, additive for a, b."""
        self.x = np.concatenate([
            se3_log(se3_exp(delta[:6]).compose(se3_exp(self.x[:6]))),
            self.x[6:] + delta[6:]])
        self._materialize()

    def _materialize(self):
        self.pose = boxplus(self.x[:6], self.pose0)
        self.a = self.a0 + self.x[6]
        self.b = self.b0 + self.x[7]

    def recenter(self):
        if self.locked:
            return
        self.pose0 = self.pose
        self.a0 = self.a
        self.b0 = self.b
        self.x = np.zeros(FRAME_DOF)

    def snapshot(self):
        return (self.pose0, self.a0, self.b0, self.x.copy(), self.locked)

    def restore(self, snap):
        self.pose0, self.a0, self.b0, self.x, self.locked = snap
        self.x = self.x.copy()
        self._materialize()


class Observation:
    """State of one point seen in one target frame."""

    __slots__ = ("state", "energy")

    def __init__(self):
        self.state = OBS_ACTIVE
        self.energy = np.nan


class InverseDepthPoint:
    """A sparse point: host pixel plus one shared inverse depth."""

    def __init__(self, point_id, host_id, pixel, idepth, variance=np.inf,
                 pass_label=1):
        self.id = point_id
        self.host_id = host_id
        self.pixel = np.asarray(pixel, dtype=np.int64).reshape(2)
        self.idepth0 = float(idepth)   # linearization anchor
        self.x = 0.0                   # accumulated delta
        self.idepth = float(idepth)
        self.variance = float(variance)
        self.pass_label = int(pass_label)
        self.status = POINT_ACTIVE
        self.locked = False
        self.fixed = False
        self.obs: dict[int, Observation] = {}
        # Filled by the system at activation: pattern intensities in the host
        # image and the center-pixel gradient weight. Host pixels are integer
        # so these never change.
        self.host_values = None
        self.weight = 1.0

    def active_targets(self):
        return [t for t, o in self.obs.items() if o.state == OBS_ACTIVE]

    def apply_delta(self, delta):
        self.x += float(delta)
        self.idepth = self.idepth0 + self.x

    def recenter(self):
        if self.locked:
            return
        self.idepth0 = self.idepth
        self.x = 0.0

    def snapshot(self):
        return (self.idepth0, self.x, self.locked,
                {t: (o.state, o.energy) for t, o in self.obs.items()})

    def restore(self, snap):
        self.idepth0, self.x, self.locked, obs_states = snap
        self.idepth = self.idepth0 + self.x
        for t, (state, energy) in obs_states.items():
            o = self.obs.get(t)
            if o is not None:
                o.state = state
                o.energy = energy


@dataclass
class ResidualJacobian:
    """Linearization of one point-in-frame observation over the pattern.

    Rows compose as J_image (at the current warp) times the geometric blocks
    (at the anchors), alongside the photometric derivatives (at the anchors).
    """

    residuals: np.ndarray      # (K,)
    weights: np.ndarray        # (K,) huber IRLS weight times gradient weight
    mask: np.ndarray           # (K,) per-pixel validity
    j_image: np.ndarray        # (K, 2)
    j_host: np.ndarray         # (K, 2, 6)
    j_target: np.ndarray       # (K, 2, 6)
    j_intrinsics: np.ndarray   # (K, 2, 4)
    j_idepth: np.ndarray       # (K, 2)
    j_photo: np.ndarray        # (K, 4) wrt (a_i, b_i, a_j, b_j)

    @property
    def valid(self):
        return bool(self.mask.all())

    def state_rows(self):
        """(K, 21) rows over [host(8) | target(8) | intrinsics(4) | idepth(1)]."""
        K = len(self.residuals)
        rows = np.zeros((K, 21))
        rows[:, 0:6] = np.einsum("kc,kcd->kd", self.j_image, self.j_host)
        rows[:, 6:8] = self.j_photo[:, 0:2]
        rows[:, 8:14] = np.einsum("kc,kcd->kd", self.j_image, self.j_target)
        rows[:, 14:16] = self.j_photo[:, 2:4]
        rows[:, 16:20] = np.einsum("kc,kcd->kd", self.j_image, self.j_intrinsics)
        rows[:, 20] = np.einsum("kc,kc->k", self.j_image, self.j_idepth)
        return rows


@dataclass
class SolveDiagnostics:
    damped: bool = False
    damping: float = 0.0
    gauge_deficient: bool = False


@dataclass
class OptimizeStats:
    iterations: int = 0
    initial_energy: float = np.nan
    final_energy: float = np.nan
    energy_history: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    rejected: int = 0
    damped_solves: int = 0
    culled_obs: int = 0
    culled_points: int = 0
    frozen_points: int = 0


class QuadraticPrior:
    """Accumulated marginalization term 0.5 x^T H x + g^T x over named blocks.

    Keys are ('frame', id) with 8 dims or ('intrinsics',) with 4; the point
    blocks never survive an event. H stays symmetric positive semidefinite.
    """

    def __init__(self):
        self.keys = []
        self.dims = []
        self.H = np.zeros((0, 0))
        self.g = np.zeros(0)

    def _offsets(self):
        off, o = {}, 0
        for k, d in zip(self.keys, self.dims):
            off[k] = o
            o += d
        return off, o

    def ensure_keys(self, keys, dims):
        off, total = self._offsets()
        new = [(k, d) for k, d in zip(keys, dims) if k not in off]
        if not new:
            return
        add = sum(d for _, d in new)
        H = np.zeros((total + add, total + add))
        g = np.zeros(total + add)
        H[:total, :total] = self.H
        g[:total] = self.g
        self.H, self.g = H, g
        for k, d in new:
            self.keys.append(k)
            self.dims.append(d)

    def indices_for(self, keys):
        off, _ = self._offsets()
        idx = []
        for k, d in zip(keys, [self.dims[self.keys.index(k)] for k in keys]):
            idx.extend(range(off[k], off[k] + d))
        return np.asarray(idx, dtype=np.int64)

    def add_term(self, keys, dims, H_add, g_add):
        self.ensure_keys(keys, dims)
        idx = self.indices_for(keys)
        self.H[np.ix_(idx, idx)] += H_add
        self.g[idx] += g_add
        self.H = 0.5 * (self.H + self.H.T)

    def marginalize_keys(self, kill_keys, rel_damping=1e-10):
        """Schur-eliminate the given blocks. Returns True if damping was needed."""
        kill = [k for k in kill_keys if k in self.keys]
        if not kill:
            return False
        off, total = self._offsets()
        beta = []
        for k in kill:
            d = self.dims[self.keys.index(k)]
            beta.extend(range(off[k], off[k] + d))
        beta = np.asarray(beta, dtype=np.int64)
        alpha = np.setdiff1d(np.arange(total), beta)
        Hbb = self.H[np.ix_(beta, beta)]
        Hab = self.H[np.ix_(alpha, beta)]
        gb = self.g[beta]
        damped = False
        try:
            cf = scipy.linalg.cho_factor(Hbb, check_finite=False)
            X = scipy.linalg.cho_solve(cf, np.column_stack([Hab.T, gb]),
                                       check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            damped = True
            lam = rel_damping * max(float(np.abs(np.diag(Hbb)).max()), 1e-300)
            Hbb_d = Hbb + lam * np.eye(len(beta))
            X = np.linalg.solve(Hbb_d, np.column_stack([Hab.T, gb]))
        self.g = self.g[alpha] - Hab @ X[:, -1]
        self.H = self.H[np.ix_(alpha, alpha)] - Hab @ X[:, :-1]
        self.H = 0.5 * (self.H + self.H.T)
        keep = [i for i, k in enumerate(self.keys) if k not in kill]
        self.keys = [self.keys[i] for i in keep]
        self.dims = [self.dims[i] for i in keep]
        return damped

    def energy(self, x):
        """Stored quadratic in the units of the photometric energy.

        H and g use the Gauss-Newton half convention (H = J^T W J,
        g = J^T W r), so the energy they represent is x H x + 2 g x: its true
        gradient 2(H x + g) is then twice gradient(), exactly as the
        photometric energy's true gradient is twice the accumulated J^T W r.
        Mixing the two conventions makes step acceptance test a different
        function than the solver minimizes.
        """
        if len(self.g) == 0:
            return 0.0
        return float(x @ self.H @ x + 2.0 * (self.g @ x))

    def gradient(self, x):
        return self.H @ x + self.g


class WindowedSystem:
    """All live state of the windowed optimizer."""

    def __init__(self, intrinsics: CameraIntrinsics,
                 pattern: ResidualPattern = DEFAULT_PATTERN,
                 huber_gamma=9.0, gradient_constant=50.0,
                 lambda_a=1.0, lambda_b=1.0,
                 optimize_intrinsics=False, use_fej=True):
        self.intrinsics0 = intrinsics
        self.x_intrinsics = np.zeros(4)
        self.intrinsics = intrinsics
        self.intrinsics_locked = False
        self.optimize_intrinsics = optimize_intrinsics
        self.pattern = pattern
        self.huber_gamma = float(huber_gamma)
        self.gradient_constant = float(gradient_constant)
        self.lambda_a = float(lambda_a)
        self.lambda_b = float(lambda_b)
        self.use_fej = use_fej
        self.frames: list[FrameState] = []
        self.points: dict[int, InverseDepthPoint] = {}
        self.prior = QuadraticPrior()
        self._next_point_id = 0
        # Static per-(host, target, point-set) arrays; entries stay valid for
        # the life of the points they name (pixels and host intensities never
        # mutate), cleared on window changes only to bound memory.
        self._pair_cache = {}
        self.stats = {"dropped_obs": 0, "outlier_obs": 0, "marginalized_points": 0,
                      "dropped_points": 0, "residuals_total": 0, "prior_damped": 0}

    # ---------------------------------------------------------------- frames

    def add_frame(self, frame: FrameState):
        if any(f.id == frame.id for f in self.frames):
            raise ValueError(f"duplicate frame id {frame.id}")
        self.frames.append(frame)
        self._pair_cache.clear()
        return frame

    def frame(self, frame_id) -> FrameState:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"frame {frame_id} not in window")

    def frame_index(self, frame_id):
        for i, f in enumerate(self.frames):
            if f.id == frame_id:
                return i
        raise KeyError(f"frame {frame_id} not in window")

    # ---------------------------------------------------------------- points

    def add_point(self, host_id, pixel, idepth, variance=np.inf, pass_label=1):
        """Activate a point. Host pattern pixels must lie inside the image."""
        host = self.frame(host_id)
        level = host.image.levels[0]
        h, w = level.shape
        px = np.asarray(pixel, dtype=np.int64).reshape(2)
        offs = self.pattern.offsets
        xs, ys = px[0] + offs[:, 0], px[1] + offs[:, 1]
        if xs.min() < 0 or ys.min() < 0 or xs.max() > w - 2 or ys.max() > h - 2:
            raise ValueError(f"point pattern leaves the image at {px}")
        point = InverseDepthPoint(self._next_point_id, host_id, px, idepth,
                                  variance, pass_label)
        self._next_point_id += 1
        point.host_values = level.intensity[ys, xs].copy()
        grad = np.array([level.grad_x[px[1], px[0]], level.grad_y[px[1], px[0]]])
        point.weight = float(gradient_weight(grad, self.gradient_constant))
        self.points[point.id] = point
        return point

    def add_observation(self, point: InverseDepthPoint, target_id, rel=None):
        """Create an active observation if the full pattern warps validly.

        `rel` optionally carries the precomputed host-to-target pose so batch
        callers don't pay for it per point.
        """
        if target_id == point.host_id or target_id in point.obs:
            return point.obs.get(target_id)
        if rel is None:
            host = self.frame(point.host_id)
            target = self.frame(target_id)
            rel = relative_pose(host.pose, target.pose)
        hp = point.pixel[None, :] + self.pattern.offsets
        _, _, valid = warp_points(hp.astype(np.float64),
                                  np.full(len(hp), max(point.idepth, 0.0)),
                                  rel, self.intrinsics)
        if not valid.all():
            return None
        obs = Observation()
        point.obs[target_id] = obs
        return obs

    def active_points(self):
        return [p for p in self.points.values() if p.status == POINT_ACTIVE]

    def points_in_host(self, host_id):
        return [p for p in self.points.values()
                if p.status == POINT_ACTIVE and p.host_id == host_id]

    # ------------------------------------------------------------- orderings

    def cam_dim(self):
        return FRAME_DOF * len(self.frames) + INTRINSIC_DOF

    def point_columns(self):
        pts = [p for p in self.points.values() if p.status == POINT_ACTIVE]
        return pts, {p.id: i for i, p in enumerate(pts)}

    def state_delta_vector(self, point_list=None):
        """Current accumulated deltas in the dense ordering (locked vars only
        hold nonzero entries between recenterings)."""
        if point_list is None:
            point_list, _ = self.point_columns()
        xs = [f.x for f in self.frames] + [self.x_intrinsics]
        xs += [[p.x] for p in point_list]
        return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in xs])

    def active_cam_mask(self):
        """Camera dims free to move: drops fixed frames, frozen intrinsics,
        and affine parameters pinned by an infinite prior weight."""
        m = np.ones(self.cam_dim(), dtype=bool)
        for i, f in enumerate(self.frames):
            if f.fixed:
                m[i * FRAME_DOF:(i + 1) * FRAME_DOF] = False
            if np.isinf(self.lambda_a):
                m[i * FRAME_DOF + 6] = False
            if np.isinf(self.lambda_b):
                m[i * FRAME_DOF + 7] = False
        if not self.optimize_intrinsics:
            m[FRAME_DOF * len(self.frames):] = False
        return m

    # ---------------------------------------------------------- linearization

    def _anchor_states(self, frame: FrameState):
        if self.use_fej:
            return frame.pose0, frame.a0, frame.b0
        return frame.pose, frame.a, frame.b

    def _anchor_intrinsics(self):
        return self.intrinsics0 if self.use_fej else self.intrinsics

    def _pair_arrays(self, host, target, pts):
        key = (host.id, target.id, tuple(p.id for p in pts))
        static = self._pair_cache.get(key)
        if static is None:
            px = np.stack([p.pixel for p in pts]).astype(np.float64)
            host_vals = np.stack([p.host_values for p in pts])
            w_p = np.array([p.weight for p in pts])
            static = self._pair_cache[key] = (px, host_vals, w_p)
        px, host_vals, w_p = static
        d_cur = np.array([p.idepth for p in pts])
        d0 = np.array([p.idepth0 if self.use_fej else p.idepth for p in pts])
        return px, d_cur, d0, host_vals, w_p

    def _pair_linearize(self, host: FrameState, target: FrameState, pts,
                        jacobians=True, per_pixel_geometry=False):
        """Vectorized residuals (and optionally Jacobian blocks) for all
        points hosted in `host` observed in `target`."""
        offsets = self.pattern.offsets.astype(np.float64)
        K = len(offsets)
        px, d_cur, d0, host_vals, w_p = self._pair_arrays(host, target, pts)
        n = len(pts)

        rel = relative_pose(host.pose, target.pose)
        hp = px[:, None, :] + offsets[None, :, :]
        warped, _, valid = warp_points(hp, np.broadcast_to(d_cur[:, None], (n, K)),
                                       rel, self.intrinsics)
        valid = valid & (d_cur >= 0.0)[:, None]
        xs = np.where(valid, warped[..., 0], 0.0)
        ys = np.where(valid, warped[..., 1], 0.0)
        level_t = target.image.levels[0]
        if jacobians:
            tgt_vals, j_image, ok = sample_image(level_t, xs, ys, with_gradient=True)
        else:
            tgt_vals, ok = sample_image(level_t, xs, ys)
            j_image = None
        valid = valid & ok

        s_cur = brightness_transfer(host.exposure, AffineBrightness(host.a, host.b),
                                    target.exposure, AffineBrightness(target.a, target.b))
        r = (tgt_vals - target.b) - s_cur * (host_vals - host.b)
        r = np.where(valid, r, 0.0)
        w = w_p[:, None] * huber_weight(r, self.huber_gamma)
        pt_valid = valid.all(axis=1)
        energies = np.where(pt_valid, (w_p[:, None] * huber(r, self.huber_gamma)).sum(axis=1),
                            np.nan)
        out = {"r": r, "w": w, "valid": valid, "pt_valid": pt_valid,
               "energies": energies, "j_image": j_image}
        if not jacobians:
            return out

        # First-estimate geometry: relative pose, intrinsics and inverse depth
        # at the anchors. The image part above stays at the current state.
        pose_h0, a_h0, b_h0 = self._anchor_states(host)
        pose_t0, a_t0, b_t0 = self._anchor_states(target)
        intr0 = self._anchor_intrinsics()
        rel0 = relative_pose(pose_h0, pose_t0)
        R0, t0 = rel0.rotation, rel0.translation

        if per_pixel_geometry:
            rays0 = normalized_ray(hp, intr0)                      # (n,K,3)
        else:
            rays0 = normalized_ray(px, intr0)[:, None, :]          # (n,1,3)
        u0 = rays0 @ R0.T + d0[:, None, None] * t0
        z0 = u0[..., 2]
        fej_ok = (z0 > MIN_PROJECTION_DEPTH).all(axis=1)
        pt_valid = pt_valid & fej_ok
        z0 = np.where(z0 > MIN_PROJECTION_DEPTH, z0, 1.0)

        fx0, fy0 = intr0.fx, intr0.fy
        zinv = 1.0 / z0
        # Projection Jacobian d(pixel)/d(u) rows, shape (n,K?,2,3).
        jpi = np.zeros(u0.shape[:-1] + (2, 3))
        jpi[..., 0, 0] = fx0 * zinv
        jpi[..., 0, 2] = -fx0 * u0[..., 0] * zinv * zinv
        jpi[..., 1, 1] = fy0 * zinv
        jpi[..., 1, 2] = -fy0 * u0[..., 1] * zinv * zinv

        # Left increment on the relative pose: du/d(rho) = d0 * I,
        # du/d(omega) = -hat(u0) (translations scale with inverse depth).
        hat_u = np.zeros(u0.shape[:-1] + (3, 3))
        ux, uy, uz = u0[..., 0], u0[..., 1], u0[..., 2]
        hat_u[..., 0, 1], hat_u[..., 0, 2] = -uz, uy
        hat_u[..., 1, 0], hat_u[..., 1, 2] = uz, -ux
        hat_u[..., 2, 0], hat_u[..., 2, 1] = -uy, ux
        j_rel = np.concatenate([d0[:, None, None, None] * jpi,
                                -(jpi @ hat_u)], axis=-1)           # (n,K?,2,6)
        adj0 = adjoint(rel0)
        j_host = -(j_rel @ adj0)
        j_idepth = jpi @ t0                                         # (n,K?,2)

        # Intrinsics: direct projection part plus the back-projected ray.
        nrm = rays0
        dndc = np.zeros(nrm.shape[:-1] + (3, 4))
        dndc[..., 0, 0] = -nrm[..., 0] / fx0
        dndc[..., 1, 1] = -nrm[..., 1] / fy0
        dndc[..., 0, 2] = -1.0 / fx0
        dndc[..., 1, 3] = -1.0 / fy0
        j_c = jpi @ (R0 @ dndc)
        j_c[..., 0, 0] += ux * zinv
        j_c[..., 1, 1] += uy * zinv
        j_c[..., 0, 2] += 1.0
        j_c[..., 1, 3] += 1.0

        s0 = brightness_transfer(host.exposure, AffineBrightness(a_h0, b_h0),
                                 target.exposure, AffineBrightness(a_t0, b_t0))
        j_ai = s0 * (host_vals - b_h0)                              # (n,K)
        j_bi = np.full((n, K), s0)
        j_aj = -j_ai
        j_bj = np.full((n, K), -1.0)

        out.update(j_rel=j_rel, j_host=j_host, j_target=j_rel, j_idepth=j_idepth,
                   j_intrinsics=j_c, j_ai=j_ai, j_bi=j_bi, j_aj=j_aj, j_bj=j_bj,
                   pt_valid=pt_valid, s0=s0)
        return out

    # ------------------------------------------------------------- the build

    def _pairs(self):
        """Ordered (host, target, points) triples with active observations."""
        by_pair = {}
        for p in self.points.values():
            if p.status != POINT_ACTIVE:
                continue
            for t in p.active_targets():
                by_pair.setdefault((p.host_id, t), []).append(p)
        order = {f.id: i for i, f in enumerate(self.frames)}
        triples = []
        for (h, t) in sorted(by_pair, key=lambda k: (order[k[0]], order[k[1]])):
            triples.append((self.frame(h), self.frame(t), by_pair[(h, t)]))
        return triples

    def build_blocks(self):
        """Accumulate the Gauss-Newton system in block form.

        Returns (Hcc, Hcp, Hpp, bc, bp, point_list). Warps that left the
        image or fell behind a camera are marked out of bounds as a side
        effect and excluded.
        """
        C = self.cam_dim()
        pts_list, col_of = self.point_columns()
        P = len(pts_list)
        Hcc = np.zeros((C, C))
        Hcp = np.zeros((C, P))
        Hpp = np.zeros(P)
        gc = np.zeros(C)
        gp = np.zeros(P)
        ic = FRAME_DOF * len(self.frames)
        n_residuals = 0
        photometric = 0.0

        for host, target, pts in self._pairs():
            lin = self._pair_linearize(host, target, pts, jacobians=True)
            pv = lin["pt_valid"]
            for p, good, e in zip(pts, pv, lin["energies"]):
                if not good:
                    p.obs[target.id].state = OBS_OOB
                    self.stats["dropped_obs"] += 1
                else:
                    p.obs[target.id].energy = float(e)
                    photometric += float(e)
            if not pv.any():
                continue
            idx = np.flatnonzero(pv)
            r = lin["r"][idx]
            w = lin["w"][idx]
            j_image = lin["j_image"][idx]
            rows_host = np.einsum("nkc,ncd->nkd", j_image, lin["j_host"][idx, 0])
            rows_tgt = np.einsum("nkc,ncd->nkd", j_image, lin["j_target"][idx, 0])
            rows_c = np.einsum("nkc,ncd->nkd", j_image, lin["j_intrinsics"][idx, 0])
            rows_d = np.einsum("nkc,nc->nk", j_image, lin["j_idepth"][idx, 0])
            n, K = r.shape
            A = np.concatenate([
                rows_host, lin["j_ai"][idx, :, None], lin["j_bi"][idx, :, None],
                rows_tgt, lin["j_aj"][idx, :, None], lin["j_bj"][idx, :, None],
                rows_c], axis=2)                                    # (n, K, 20)
            hi = self.frame_index(host.id) * FRAME_DOF
            ti = self.frame_index(target.id) * FRAME_DOF
            gidx = np.concatenate([np.arange(hi, hi + 8), np.arange(ti, ti + 8),
                                   np.arange(ic, ic + 4)])
            wA = w[..., None] * A
            Hcc[np.ix_(gidx, gidx)] += np.einsum("nki,nkj->ij", wA, A)
            cols = np.array([col_of[pts[i].id] for i in idx])
            Hcp[np.ix_(gidx, cols)] += np.einsum("nki,nk->ni", wA, rows_d).T
            Hpp[cols] += np.einsum("nk,nk->n", w * rows_d, rows_d)
            gc[gidx] += np.einsum("nki,nk->i", wA, r)
            gp[cols] += np.einsum("nk,nk->n", w * rows_d, r)
            n_residuals += n * K
        self.stats["residuals_total"] = n_residuals
        # The residual pass just computed every active pattern energy at the
        # current state; keep the total so the optimizer does not need a
        # second evaluation pass over the same state.
        self.last_photometric_energy = photometric

        # Brightness prior on every window frame: energy lambda * a^2, so in
        # the half convention the diagonal gets lambda and the gradient
        # lambda * a.
        for i, f in enumerate(self.frames):
            for j, (lam, v) in enumerate(((self.lambda_a, f.a), (self.lambda_b, f.b))):
                if np.isinf(lam):
                    continue
                Hcc[i * FRAME_DOF + 6 + j, i * FRAME_DOF + 6 + j] += lam
                gc[i * FRAME_DOF + 6 + j] += lam * v

        # Marginalization prior, expressed in the frozen tangent spaces.
        if self.prior.keys:
            pidx, x = self._prior_indices()
            self.prior.H = 0.5 * (self.prior.H + self.prior.H.T)
            Hcc[np.ix_(pidx, pidx)] += self.prior.H
            gc[pidx] += self.prior.gradient(x)

        return Hcc, Hcp, Hpp, gc, gp, pts_list

    def _prior_indices(self):
        """Dense camera indices and current deltas for the prior's keys."""
        idx, xs = [], []
        ic = FRAME_DOF * len(self.frames)
        for k in self.prior.keys:
            if k[0] == "frame":
                fi = self.frame_index(k[1]) * FRAME_DOF
                idx.extend(range(fi, fi + FRAME_DOF))
                xs.append(self.frame(k[1]).x)
            elif k[0] == "intrinsics":
                idx.extend(range(ic, ic + INTRINSIC_DOF))
                xs.append(self.x_intrinsics)
            else:
                raise KeyError(f"unexpected prior key {k}")
        return (np.asarray(idx, dtype=np.int64),
                np.concatenate(xs) if xs else np.zeros(0))

    # --------------------------------------------------------------- energy

    def prior_energy_terms(self):
        """Brightness prior plus marginalization prior at the current state."""
        total = 0.0
        for f in self.frames:
            if not np.isinf(self.lambda_a):
                total += self.lambda_a * f.a * f.a
            if not np.isinf(self.lambda_b):
                total += self.lambda_b * f.b * f.b
        if self.prior.keys:
            _, x = self._prior_indices()
            total += self.prior.energy(x)
        return total

    def evaluate_energy(self, update_cache=True):
        """Total energy: pattern terms + brightness prior + marginalization
        prior. Freshly evaluates every active residual at the current state."""
        total = 0.0
        for host, target, pts in self._pairs():
            lin = self._pair_linearize(host, target, pts, jacobians=False)
            for p, good, e in zip(pts, lin["pt_valid"], lin["energies"]):
                if not good:
                    if update_cache:
                        p.obs[target.id].state = OBS_OOB
                        self.stats["dropped_obs"] += 1
                    continue
                if update_cache:
                    p.obs[target.id].energy = float(e)
                total += float(e)
        return total + self.prior_energy_terms()

    def cached_energy(self):
        """Energy from the per-observation caches (bookkeeping path)."""
        total = 0.0
        for p in self.points.values():
            if p.status != POINT_ACTIVE:
                continue
            for o in p.obs.values():
                if o.state == OBS_ACTIVE and np.isfinite(o.energy):
                    total += o.energy
        for f in self.frames:
            if not np.isinf(self.lambda_a):
                total += self.lambda_a * f.a * f.a
            if not np.isinf(self.lambda_b):
                total += self.lambda_b * f.b * f.b
        if self.prior.keys:
            _, x = self._prior_indices()
            total += self.prior.energy(x)
        return total

    # ------------------------------------------------------------- snapshots

    def snapshot(self):
        return ([f.snapshot() for f in self.frames],
                {pid: p.snapshot() for pid, p in self.points.items()},
                (self.intrinsics0, self.x_intrinsics.copy(), self.intrinsics_locked))

    def restore(self, snap):
        fs, ps, intr = snap
        for f, s in zip(self.frames, fs):
            f.restore(s)
        for pid, s in ps.items():
            if pid in self.points:
                self.points[pid].restore(s)
        self.intrinsics0, self.x_intrinsics, self.intrinsics_locked = intr
        self.x_intrinsics = self.x_intrinsics.copy()
        self._materialize_intrinsics()

    def _materialize_intrinsics(self):
        self.intrinsics = self.intrinsics0.with_parameters(
            self.intrinsics0.as_array() + self.x_intrinsics)

    def apply_step(self, delta, point_list, multiplicative=False):
        C = self.cam_dim()
        for i, f in enumerate(self.frames):
            d = delta[i * FRAME_DOF:(i + 1) * FRAME_DOF]
            if f.fixed:
                continue
            if multiplicative:
                f.apply_delta_multiplicative(d)
            else:
                f.apply_delta(d)
        if self.optimize_intrinsics:
            self.x_intrinsics = self.x_intrinsics + delta[FRAME_DOF * len(self.frames):C]
            self._materialize_intrinsics()
        for p, dp in zip(point_list, delta[C:]):
            if not p.fixed:
                p.apply_delta(dp)

    def recenter_all(self):
        for f in self.frames:
            f.recenter()
        for p in self.points.values():
            if p.status == POINT_ACTIVE:
                p.recenter()
        if not self.intrinsics_locked:
            self.intrinsics0 = self.intrinsics
            self.x_intrinsics = np.zeros(4)


# --------------------------------------------------------------------------
# Spec-level operations.
# --------------------------------------------------------------------------


def linearize_residual(system: WindowedSystem, point: InverseDepthPoint,
                       target_id, per_pixel_geometry=False) -> ResidualJacobian:
    """Linearize one observation: residuals and IRLS weights at the current
    state, geometric/photometric blocks at the first-estimate anchors.

    With per_pixel_geometry the geometric blocks are evaluated separately for
    every pattern pixel; the default shares the center-pixel geometry.
    """
    host = system.frame(point.host_id)
    target = system.frame(target_id)
    lin = system._pair_linearize(host, target, [point], jacobians=True,
                                 per_pixel_geometry=per_pixel_geometry)
    K = len(system.pattern)
    take = (lambda a: a[0] if a.shape[1] == K else np.repeat(a[0], K, axis=0))
    j_photo = np.stack([lin["j_ai"][0], lin["j_bi"][0],
                        lin["j_aj"][0], lin["j_bj"][0]], axis=1)
    return ResidualJacobian(
        residuals=lin["r"][0], weights=lin["w"][0], mask=lin["valid"][0],
        j_image=lin["j_image"][0],
        j_host=take(lin["j_host"]), j_target=take(lin["j_target"]),
        j_intrinsics=take(lin["j_intrinsics"]), j_idepth=take(lin["j_idepth"]),
        j_photo=j_photo)


def build_system(system: WindowedSystem):
    """Dense (H, b) with b = -J^T W r - prior gradients, over the documented
    state ordering."""
    Hcc, Hcp, Hpp, gc, gp, pts = system.build_blocks()
    C = system.cam_dim()
    D = C + len(pts)
    H = np.zeros((D, D))
    H[:C, :C] = Hcc
    H[:C, C:] = Hcp
    H[C:, :C] = Hcp.T
    H[np.arange(C, D), np.arange(C, D)] = Hpp
    b = -np.concatenate([gc, gp])
    return H, b


def solve_schur(Hcc, Hcp, Hpp, bc, bp, active_mask=None, point_mask=None,
                damping_scale=1e-5, residual_tolerance=1e-8):
    """Solve the two-block system by eliminating the point diagonal.

    Falls back to an isotropic damped solve (damping_scale relative to the
    largest diagonal entry) when the reduced camera system is singular, and
    reports that as gauge deficiency. Points with no information move by 0;
    point_mask=False excludes a point from the solve entirely (conditioning
    on it staying put rather than marginalizing it).
    """
    C = len(bc)
    if active_mask is None:
        active_mask = np.ones(C, dtype=bool)
    act = np.flatnonzero(active_mask)
    Hcc_a = Hcc[np.ix_(act, act)]
    Hcp_a = Hcp[act]
    if point_mask is not None:
        Hcp_a = Hcp_a * point_mask
        bp = np.where(point_mask, bp, 0.0)
        Hpp = np.where(point_mask, Hpp, 0.0)
    with np.errstate(divide="ignore"):
        Dinv = np.where(Hpp > 0, 1.0 / np.where(Hpp > 0, Hpp, 1.0), 0.0)
    H_red = Hcc_a - (Hcp_a * Dinv) @ Hcp_a.T
    b_red = bc[act] - (Hcp_a * Dinv) @ bp
    diag = SolveDiagnostics()
    delta_c = None
    if len(act):
        try:
            cf = scipy.linalg.cho_factor(H_red, check_finite=False)
            cand = scipy.linalg.cho_solve(cf, b_red, check_finite=False)
            resid = np.linalg.norm(H_red @ cand - b_red)
            if np.isfinite(cand).all() and resid <= residual_tolerance * max(1.0, np.linalg.norm(b_red)):
                delta_c = cand
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            delta_c = None
        if delta_c is None:
            # Isotropic damping keeps the step orthogonal to any pure gauge
            # nullspace; diagonal-proportional damping would not.
            lam = damping_scale * max(float(np.abs(np.diag(H_red)).max()), 1e-300)
            delta_c = np.linalg.solve(H_red + lam * np.eye(len(act)), b_red)
            diag.damped = True
            diag.gauge_deficient = True
            diag.damping = lam
    else:
        delta_c = np.zeros(0)
    delta_p = Dinv * (bp - Hcp_a.T @ delta_c)
    full_c = np.zeros(C)
    full_c[act] = delta_c
    return full_c, delta_p, diag


def solve_schur_dense(H, b, n_cam):
    """Spec-shaped wrapper: dense symmetric H with a diagonal point block."""
    Hcc = H[:n_cam, :n_cam]
    Hcp = H[:n_cam, n_cam:]
    Hpp = np.diag(H[n_cam:, n_cam:]).copy()
    off = H[n_cam:, n_cam:] - np.diag(Hpp)
    if off.size and np.abs(off).max() > 1e-9 * max(1.0, np.abs(Hpp).max()):
        raise ValueError("point block is not diagonal")
    dc, dp, diag = solve_schur(Hcc, Hcp, Hpp, b[:n_cam], b[n_cam:])
    return np.concatenate([dc, dp]), diag


def _active_obs_energies(system: WindowedSystem):
    """Cached energy of every live observation, keyed by (point, target)."""
    out = {}
    for p in system.active_points():
        for tid, o in p.obs.items():
            if o.state == OBS_ACTIVE and np.isfinite(o.energy):
                out[(p.id, tid)] = o.energy
    return out


def _attrition_penalty(system: WindowedSystem, charged):
    """Sum of last-known energies of charged observations that are no longer
    active. A step must not look better merely because it pushed residuals
    out of the image domain."""
    pen = 0.0
    for (pid, tid), e in charged.items():
        p = system.points.get(pid)
        o = p.obs.get(tid) if p is not None else None
        if o is None or o.state != OBS_ACTIVE:
            pen += e
    return pen


def _newly_dead(system: WindowedSystem, charged):
    """Charged observations that are not active at the current state."""
    dead = []
    for key in charged:
        p = system.points.get(key[0])
        o = p.obs.get(key[1]) if p is not None else None
        if o is None or o.state != OBS_ACTIVE:
            dead.append(key)
    return dead


def drop_outlier_observations(system: WindowedSystem, kappa=3.0):
    """Drop observations whose cached pattern energy exceeds kappa times the
    median of their target frame; demote starved points.

    The threshold keeps an absolute floor of one pattern's worth of energy
    at the robust-cost knee. On clean data the inlier median heads to zero,
    and a purely relative cut would then shave the healthy tail every pass
    until nothing is left; mismatched points sit orders of magnitude above
    the floor, so they are still caught immediately.

    A point keeps its active status while it retains at least two active
    observations (one while the window itself has only two frames). Returns
    (observations_removed, points_removed).
    """
    floor = len(system.pattern) * system.huber_gamma ** 2
    per_target = {}
    for p in system.active_points():
        for t, o in p.obs.items():
            if o.state == OBS_ACTIVE and np.isfinite(o.energy):
                per_target.setdefault(t, []).append((p, o))
    obs_removed = 0
    for t, rows in per_target.items():
        med = float(np.median([o.energy for _, o in rows]))
        thr = max(kappa * med, floor)
        for p, o in rows:
            if o.energy > thr:
                o.state = OBS_OUTLIER
                obs_removed += 1
                system.stats["outlier_obs"] += 1
    min_obs = 2 if len(system.frames) > 2 else 1
    points_removed = 0
    for p in list(system.active_points()):
        if len(p.active_targets()) < min_obs:
            p.status = POINT_OUTLIER
            system.points.pop(p.id, None)
            points_removed += 1
            system.stats["dropped_points"] += 1
    return obs_removed, points_removed


def gauge_directions(system: WindowedSystem, point_list, free_points=None):
    """Analytic gauge directions of the windowed energy at the current state,
    over the solve ordering [frames | intrinsics | points].

    The photometric energy is invariant under a global rigid motion and a
    global rescaling, and under common-mode shifts of a and b when the
    brightness prior is off. First-estimate Jacobians deliberately keep these
    directions out of the marginalization prior, so no amount of accumulated
    prior information ever pins them; what does accumulate along them is
    cross-event linearization noise with arbitrarily bad curvature-to-gradient
    ratios. Callers project solved increments against the returned set.

    A direction with any weight on a frozen dim is pinned by that dim and is
    not returned: a fixed frame kills the six rigid modes (and the affine
    modes), but a fixed frame sitting at the origin leaves the scale mode
    intact, which is exactly the bootstrap configuration. free_points
    overrides the per-point freeness (a solve may condition on weak points
    staying put; their residuals then genuinely pin the scale mode).
    """
    C = system.cam_dim()
    D = C + len(point_list)
    nF = len(system.frames)
    cands = []
    # Rescaling about the world origin: translations stretch, inverse depths
    # shrink by the same factor.
    v = np.zeros(D)
    for i, f in enumerate(system.frames):
        v[i * FRAME_DOF:i * FRAME_DOF + 3] = f.pose.translation
    for j, p in enumerate(point_list):
        v[C + j] = -p.idepth
    cands.append(v)
    # Rigid motion of the whole reconstruction; per frame the left-increment
    # direction is Ad(T_k) g for a world-frame generator g.
    ad = [adjoint(f.pose) for f in system.frames]
    for col in range(6):
        v = np.zeros(D)
        for i in range(nF):
            v[i * FRAME_DOF:i * FRAME_DOF + 6] = ad[i][:, col]
        cands.append(v)
    if system.lambda_a == 0.0:
        v = np.zeros(D)
        v[np.arange(nF) * FRAME_DOF + 6] = 1.0
        cands.append(v)
    if system.lambda_b == 0.0:
        v = np.zeros(D)
        v[np.arange(nF) * FRAME_DOF + 7] = 1.0
        cands.append(v)
    free = np.ones(D, dtype=bool)
    free[:C] = system.active_cam_mask()
    if free_points is not None:
        free[C:] = free_points
    else:
        for j, p in enumerate(point_list):
            free[C + j] = not p.fixed
    out = []
    for v in cands:
        top = np.abs(v).max()
        if top == 0.0:
            continue
        pinned = v[~free]
        if pinned.size and np.abs(pinned).max() > 1e-12 * top:
            continue
        out.append(v)
    return out


def remove_gauge_component(delta, directions):
    """Project an increment onto the orthogonal complement of the gauge span."""
    if not directions:
        return delta
    N = np.stack(directions, axis=1)
    U, s, _ = np.linalg.svd(N, full_matrices=False)
    U = U[:, s > 1e-10 * s[0]]
    return delta - U @ (U.T @ delta)


def gauss_newton_iterate(system: WindowedSystem, max_iterations=6,
                         step_tolerance=1e-5, multiplicative=False,
                         cull_kappa=None):
    """Run one set of Gauss-Newton iterations on the window.

    Breaks early when the step max-norm drops below step_tolerance. Energy
    is guaranteed non-increasing across the set: the best-seen state is
    tracked and restored at the end if later iterations did worse. Within
    the set, a step is only rejected outright (reverted and retried at half
    length a few times) when it raises the energy past a catastrophe gate.
    Small transient increases are accepted deliberately: residuals are
    evaluated at the current state while Jacobians of anchor-locked
    variables stay at their first estimates, so near convergence the solved
    direction disagrees with the true downhill direction by exactly the
    anchor drift, and a strict monotone test would freeze the window in
    that mismatch long before the step tolerance is reached. The normal
    equations are never damped for any of this. Unlocked anchors re-center
    after every accepted step. Solved increments are projected against the
    free gauge directions before being applied, so the window never wanders
    along directions the energy cannot see.

    With cull_kappa set, every accepted step is followed by an outlier pass
    over the fresh residual energies. Mistracked points draw outsized
    increments iteration after iteration (large residual, soft curvature)
    and would otherwise both hold the step norm above the break threshold
    and trip the catastrophe gate; removing them mid-set is what lets the
    healthy dimensions converge. The removed terms also leave the energy
    bookkeeping, so the reference energy is rebased rather than compared
    across different term sets.

    Energy accounting charges observations that fall out of bounds at their
    last valid value, so attrition never counts as progress; points that
    overshoot into invalid depth simply lose their observations at charged
    value and get culled afterwards, which is why one runaway dimension
    does not need damping to be survivable.
    """
    stats = OptimizeStats()
    blocks = system.build_blocks()
    charged = _active_obs_energies(system)
    energy = system.last_photometric_energy + system.prior_energy_terms()
    # The prior's linear term makes the total sign-indefinite, so margins
    # scale off the photometric part, which is a sum of squares.
    photo_scale = max(1.0, system.last_photometric_energy)
    stats.initial_energy = energy
    stats.energy_history.append(energy)
    best = (energy, system.snapshot())
    slack = 1e-10 * photo_scale + 1e-9
    for it in range(max_iterations):
        Hcc, Hcp, Hpp, gc, gp, pts = blocks
        pmask = None
        if pts:
            pmask = np.array([not p.fixed for p in pts])
            # Condition on points whose depth curvature is negligible
            # relative to the window (fresh points before any real
            # baseline). Their Newton increments are pure noise of
            # arbitrary size; they rejoin the solve as soon as parallax
            # gives them real information.
            positive = Hpp[Hpp > 0]
            if positive.size:
                weak = Hpp < 1e-2 * np.median(positive)
                frozen = pmask & weak
                stats.frozen_points = max(stats.frozen_points,
                                          int(frozen.sum()))
                pmask &= ~weak
        dc, dp, diag = solve_schur(Hcc, Hcp, Hpp, -gc, -gp,
                                   active_mask=system.active_cam_mask(),
                                   point_mask=pmask)
        if diag.damped:
            stats.damped_solves += 1
        delta = np.concatenate([dc, dp])
        if not np.isfinite(delta).all():
            break
        delta = remove_gauge_component(
            delta, gauge_directions(system, pts, free_points=pmask))
        before = system.snapshot()
        scale = 1.0
        accepted = False
        gate = energy + slack
        for _ in range(8):
            system.apply_step(delta * scale, pts, multiplicative=multiplicative)
            system.recenter_all()
            new_energy = (system.evaluate_energy()
                          + _attrition_penalty(system, charged))
            if new_energy <= gate:
                accepted = True
                break
            system.restore(before)
            stats.rejected += 1
            scale *= 0.5
        stats.iterations = it + 1
        stats.step_norms.append(float(np.abs(delta).max() * scale)
                                if delta.size else 0.0)
        if not accepted:
            break
        energy = new_energy
        cur = _active_obs_energies(system)
        for key, val in cur.items():
            if key in charged:
                charged[key] = val
        culled_now = 0
        if cull_kappa is not None:
            n_obs, n_pts = drop_outlier_observations(system, cull_kappa)
            stats.culled_obs += n_obs
            stats.culled_points += n_pts
            culled_now = n_obs + n_pts
            if culled_now:
                charged = {k: v for k, v in charged.items()
                           if k[0] in system.points
                           and system.points[k[0]].obs[k[1]].state != OBS_OUTLIER}
        blocks = system.build_blocks()
        energy = (system.last_photometric_energy
                  + system.prior_energy_terms()
                  + _attrition_penalty(system, charged))
        photo_scale = max(1.0, system.last_photometric_energy)
        stats.energy_history.append(energy)
        # A cull changes the term set, so the running best is rebased on it
        # rather than compared across different sums.
        if culled_now or energy < best[0]:
            best = (energy, system.snapshot())
        if delta.size == 0 or np.abs(delta).max() < step_tolerance:
            break
    if energy > best[0] + slack:
        system.restore(best[1])
        energy = best[0]
    stats.final_energy = energy
    return stats


def _event_system(system: WindowedSystem, event_points, dying_frame_id=None):
    """Gauss-Newton system of the energy terms touching the marginalized
    variables, shifted to the anchor reference (Eq-16-style b - H x0)."""
    frames_involved = []
    seen = set()
    for p in event_points:
        ids = [p.host_id] + p.active_targets()
        for fid in ids:
            if fid not in seen:
                seen.add(fid)
                frames_involved.append(fid)
    if dying_frame_id is not None and dying_frame_id not in seen:
        frames_involved.append(dying_frame_id)
        seen.add(dying_frame_id)
    frames_involved.sort(key=system.frame_index)

    keys = [("frame", fid) for fid in frames_involved] + [("intrinsics",)]
    dims = [FRAME_DOF] * len(frames_involved) + [INTRINSIC_DOF]
    fcol = {fid: i * FRAME_DOF for i, fid in enumerate(frames_involved)}
    ic = FRAME_DOF * len(frames_involved)
    C = ic + INTRINSIC_DOF
    P = len(event_points)
    pcol = {p.id: C + i for i, p in enumerate(event_points)}
    D = C + P
    H = np.zeros((D, D))
    g = np.zeros(D)

    by_pair = {}
    for p in event_points:
        for t in p.active_targets():
            by_pair.setdefault((p.host_id, t), []).append(p)
    for (h, t) in sorted(by_pair, key=lambda k: (system.frame_index(k[0]),
                                                 system.frame_index(k[1]))):
        host, target = system.frame(h), system.frame(t)
        pts = by_pair[(h, t)]
        lin = system._pair_linearize(host, target, pts, jacobians=True)
        pv = lin["pt_valid"]
        if not pv.any():
            continue
        idx = np.flatnonzero(pv)
        r = lin["r"][idx]
        w = lin["w"][idx]
        j_image = lin["j_image"][idx]
        rows_host = np.einsum("nkc,ncd->nkd", j_image, lin["j_host"][idx, 0])
        rows_tgt = np.einsum("nkc,ncd->nkd", j_image, lin["j_target"][idx, 0])
        rows_c = np.einsum("nkc,ncd->nkd", j_image, lin["j_intrinsics"][idx, 0])
        rows_d = np.einsum("nkc,nc->nk", j_image, lin["j_idepth"][idx, 0])
        A = np.concatenate([
            rows_host, lin["j_ai"][idx, :, None], lin["j_bi"][idx, :, None],
            rows_tgt, lin["j_aj"][idx, :, None], lin["j_bj"][idx, :, None],
            rows_c], axis=2)
        gidx = np.concatenate([np.arange(fcol[h], fcol[h] + 8),
                               np.arange(fcol[t], fcol[t] + 8),
                               np.arange(ic, ic + 4)])
        wA = w[..., None] * A
        H[np.ix_(gidx, gidx)] += np.einsum("nki,nkj->ij", wA, A)
        cols = np.array([pcol[pts[i].id] for i in idx])
        H[np.ix_(gidx, cols)] += np.einsum("nki,nk->ni", wA, rows_d).T
        H[np.ix_(cols, gidx)] += np.einsum("nki,nk->ni", wA, rows_d)
        H[cols, cols] += np.einsum("nk,nk->n", w * rows_d, rows_d)
        g[gidx] += np.einsum("nki,nk->i", wA, r)
        g[cols] += np.einsum("nk,nk->n", w * rows_d, r)

    # Shift the photometric gradient to the anchor reference.
    x0 = np.zeros(D)
    for fid in frames_involved:
        x0[fcol[fid]:fcol[fid] + FRAME_DOF] = system.frame(fid).x
    x0[ic:ic + 4] = system.x_intrinsics
    for p in event_points:
        x0[pcol[p.id]] = p.x
    g = g - H @ x0

    # The dying frame's brightness prior folds in exactly (it is quadratic in
    # the delta: lambda (x + a0)^2), in the same half convention as the
    # photometric accumulators above.
    if dying_frame_id is not None:
        f = system.frame(dying_frame_id)
        base = fcol[dying_frame_id]
        for j, (lam, v0) in enumerate(((system.lambda_a, f.a0), (system.lambda_b, f.b0))):
            if np.isinf(lam):
                continue
            H[base + 6 + j, base + 6 + j] += lam
            g[base + 6 + j] += lam * v0
    return keys, dims, H, g, pcol


def _schur_eliminate(H, g, beta_idx, rel_damping=1e-10):
    """Generic Schur elimination of the beta block; returns damped flag."""
    D = len(g)
    beta = np.asarray(sorted(beta_idx), dtype=np.int64)
    alpha = np.setdiff1d(np.arange(D), beta)
    Hbb = H[np.ix_(beta, beta)]
    Hab = H[np.ix_(alpha, beta)]
    damped = False
    try:
        cf = scipy.linalg.cho_factor(Hbb, check_finite=False)
        X = scipy.linalg.cho_solve(cf, np.column_stack([Hab.T, g[beta]]),
                                   check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        damped = True
        lam = rel_damping * max(float(np.abs(np.diag(Hbb)).max()), 1e-300)
        X = np.linalg.solve(Hbb + lam * np.eye(len(beta)),
                            np.column_stack([Hab.T, g[beta]]))
    H_out = H[np.ix_(alpha, alpha)] - Hab @ X[:, :-1]
    g_out = g[alpha] - Hab @ X[:, -1]
    return 0.5 * (H_out + H_out.T), g_out, damped


def marginalize_points(system: WindowedSystem, points):
    """Schur-marginalize the given points into the prior and remove them.

    Points without any active observation are simply dropped. All variables
    remaining in the event's energy become marginalization-locked.
    """
    event_points = [p for p in points if p.active_targets()]
    dropped = [p for p in points if not p.active_targets()]
    for p in dropped:
        p.status = POINT_OUTLIER
        system.points.pop(p.id, None)
        system.stats["dropped_points"] += 1
    if not event_points:
        return
    keys, dims, H, g, pcol = _event_system(system, event_points)
    beta = sorted(pcol.values())
    H_a, g_a, damped = _schur_eliminate(H, g, beta)
    if damped:
        system.stats["prior_damped"] += 1
    system.prior.add_term(keys, dims, H_a, g_a)
    for k in keys:
        if k[0] == "frame":
            system.frame(k[1]).locked = True
        else:
            system.intrinsics_locked = True
    for p in event_points:
        p.status = POINT_MARGINALIZED
        system.points.pop(p.id, None)
        system.stats["marginalized_points"] += 1


def marginalize_frame(system: WindowedSystem, frame_id):
    """Remove a keyframe: marginalize its points (and stale points), drop the
    remaining observations into it, then Schur-eliminate its pose block.

    Stale means no active observation in the newest two keyframes (points
    hosted there are exempt).
    """
    frame = system.frame(frame_id)
    newest = {f.id for f in system.frames[-2:]}
    selected = []
    for p in list(system.points.values()):
        if p.status != POINT_ACTIVE:
            continue
        if p.host_id == frame_id:
            selected.append(p)
        elif p.host_id not in newest and not (set(p.active_targets()) & newest):
            selected.append(p)

    event_points = [p for p in selected if p.active_targets()]
    dropped_pts = [p for p in selected if not p.active_targets()]
    for p in dropped_pts:
        p.status = POINT_OUTLIER
        system.points.pop(p.id, None)
        system.stats["dropped_points"] += 1

    keys, dims, H, g, pcol = _event_system(system, event_points,
                                           dying_frame_id=frame_id)
    if pcol:
        H, g, damped = _schur_eliminate(H, g, sorted(pcol.values()))
        if damped:
            system.stats["prior_damped"] += 1
    system.prior.add_term(keys, dims, H, g)
    for k in keys:
        if k[0] == "frame":
            system.frame(k[1]).locked = True
        else:
            system.intrinsics_locked = True
    for p in event_points:
        p.status = POINT_MARGINALIZED
        system.points.pop(p.id, None)
        system.stats["marginalized_points"] += 1

    # Remaining observations targeting the dying frame are dropped, not
    # marginalized.
    for p in system.points.values():
        o = p.obs.pop(frame_id, None)
        if o is not None and o.state == OBS_ACTIVE:
            system.stats["dropped_obs"] += 1

    if system.prior.marginalize_keys([("frame", frame_id)]):
        system.stats["prior_damped"] += 1
    system.frames.remove(frame)


def marginalize_variables(system: WindowedSystem, frame_id=None, points=None):
    """Marginalize a keyframe or an explicit set of points."""
    if (frame_id is None) == (points is None):
        raise ValueError("pass exactly one of frame_id or points")
    if frame_id is not None:
        marginalize_frame(system, frame_id)
    else:
        marginalize_points(system, points)


def full_hessian(system: WindowedSystem, include_brightness_prior=True,
                 include_marginalization_prior=True):
    """Dense windowed Hessian for analysis (no damping)."""
    keep_a, keep_b = system.lambda_a, system.lambda_b
    if not include_brightness_prior:
        system.lambda_a = 0.0
        system.lambda_b = 0.0
    try:
        Hcc, Hcp, Hpp, _, _, pts = system.build_blocks()
    finally:
        system.lambda_a, system.lambda_b = keep_a, keep_b
    if not include_marginalization_prior and system.prior.keys:
        pidx, _ = system._prior_indices()
        Hcc[np.ix_(pidx, pidx)] -= system.prior.H
    C = system.cam_dim()
    D = C + len(pts)
    H = np.zeros((D, D))
    H[:C, :C] = Hcc
    H[:C, C:] = Hcp
    H[C:, :C] = Hcp.T
    H[np.arange(C, D), np.arange(C, D)] = Hpp
    return H, pts


MATRIX_MAGIC = b"SVWMAT01"


def dump_matrix(path, matrix):
    """Write a dense matrix: 16-byte header (magic, rows, cols), float64
    row-major payload."""
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<II", m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def load_matrix(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"bad matrix file magic {magic!r}")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8")
    return data.reshape(rows, cols).copy()
