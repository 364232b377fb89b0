"""End-to-end monocular odometry.

Ties the coarse tracker, candidate machinery, and windowed optimizer into a
frame-by-frame state machine: bootstrap (two-frame depth initialization from
epipolar search alone), running (track, trace candidates, keyframe on demand),
and lost. The scene scale is normalized once at bootstrap so the mean active
inverse depth starts at 1; everything downstream is gauge-fixed by the first
keyframe and the marginalization prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3Pose, relative_pose
from .photometric import CalibratedImage
from .window import (FrameState, WindowedSystem, gauss_newton_iterate,
                     marginalize_frame)
from . import frontend as fe

STATE_BOOTSTRAP = "bootstrap"
STATE_RUNNING = "running"
STATE_LOST = "lost"


@dataclass
class OdometrySettings:
    """Knobs of the full pipeline; defaults match the reference configuration."""

    max_points: int = 2000           # active point budget across the window
    max_keyframes: int = 7           # sliding window size
    gradient_threshold: float = 7.0  # candidate selection, gray levels
    keyframe_threshold: float = 1.0  # weighted flow/brightness score
    huber_gamma: float = 9.0
    gradient_constant: float = 50.0
    outlier_kappa: float = 3.0
    lambda_a: float = 1e4            # affine brightness priors; strong
    lambda_b: float = 1e4            # defaults suit calibrated exposure
    max_gn_iterations: int = 6
    optimize_intrinsics: bool = False
    block_size: float = 3.0          # initial stratification block, adapted
    candidate_hosts: int = 7         # keyframes whose candidates trace each frame
    idepth_range: tuple = (0.05, 5.0)
    tracker_lost_rmse: float = 18.0
    bootstrap_min_converged: float = 0.5
    bootstrap_min_flow: float = 5.0  # px of translation-only flow at promote
    bootstrap_max_frames: int = 40   # restart the initializer after this many
    keyframe_weights: tuple = (1.0, 1.0, 1.0)


@dataclass
class TrajectoryEntry:
    frame_index: int
    timestamp: float
    pose: SE3Pose | None          # world -> camera; None once lost
    is_keyframe: bool = False
    keyframe_id: int | None = None


@dataclass
class FrameReport:
    """What process_frame tells the caller about one frame."""

    frame_index: int
    state: str
    pose: SE3Pose | None
    is_keyframe: bool = False
    rmse: float = np.nan
    n_active_points: int = 0
    marginalized: tuple = ()


class Odometry:
    """Frame-by-frame monocular odometry driver."""

    def __init__(self, intrinsics, settings: OdometrySettings | None = None):
        self.settings = settings or OdometrySettings()
        s = self.settings
        self.intrinsics = intrinsics
        self.system = WindowedSystem(
            intrinsics, huber_gamma=s.huber_gamma,
            gradient_constant=s.gradient_constant,
            lambda_a=s.lambda_a, lambda_b=s.lambda_b,
            optimize_intrinsics=s.optimize_intrinsics)
        self.state = STATE_BOOTSTRAP
        self.block_size = float(s.block_size)
        self.candidates: dict[int, list] = {}   # keyframe id -> candidate list
        self.reference: fe.TrackerReference | None = None
        self.trajectory: list[TrajectoryEntry] = []
        self._kf_entries: dict[int, TrajectoryEntry] = {}
        self._frame_index = -1
        self._prev_rmse = None
        self._pose_prev: SE3Pose | None = None   # last two world->camera poses
        self._pose_pprev: SE3Pose | None = None
        self._boot = None
        self.lost_at = None
        self.n_keyframes = 0

    # ------------------------------------------------------------ bootstrap

    def _start_bootstrap(self, image, raw, timestamp):
        s = self.settings
        pix, labels = fe.select_candidates(raw, d=self.block_size,
                                           gradient_threshold=s.gradient_threshold)
        cands = fe.make_candidates(0, image, pix, labels,
                                   idepth_range=s.idepth_range)
        for c in cands:
            c.idepth = 1.0
        self._boot = {
            "image": image, "timestamp": timestamp, "raw": raw,
            "index": self._frame_index, "cands": cands,
            "entries": [], "frames": 0, "prior": SE3Pose.identity(),
        }

    def _bootstrap_reference(self):
        b = self._boot
        live = [c for c in b["cands"] if c.status == fe.CANDIDATE_ALIVE]
        px = np.stack([c.pixel for c in live]).astype(np.float64)
        d = np.array([c.idepth for c in live])
        return fe.TrackerReference.from_samples(0, b["image"],
                                                SE3Pose.identity(), 0.0, 0.0,
                                                px, d)

    def _bootstrap_frame(self, image, raw, timestamp):
        s = self.settings
        b = self._boot
        b["frames"] += 1
        if b["frames"] > s.bootstrap_max_frames:
            # The pair never produced parallax; start over from this frame.
            self._start_bootstrap(image, raw, timestamp)
            self.trajectory.append(TrajectoryEntry(self._frame_index, timestamp,
                                                   SE3Pose.identity()))
            return FrameReport(self._frame_index, self.state, SE3Pose.identity())
        ref = self._bootstrap_reference()
        res = fe.track_frame(ref, image, b["prior"], self.intrinsics,
                             huber_gamma=s.huber_gamma,
                             gradient_constant=s.gradient_constant,
                             lost_rmse=s.tracker_lost_rmse)
        if res.lost or res.valid_fraction < 0.5:
            self._start_bootstrap(image, raw, timestamp)
            self.trajectory.append(TrajectoryEntry(self._frame_index, timestamp,
                                                   SE3Pose.identity()))
            return FrameReport(self._frame_index, self.state, SE3Pose.identity())
        b["prior"] = res.relative_pose

        host = fe.FrameView(b["image"], SE3Pose.identity())
        target = fe.FrameView(image, res.relative_pose, a=res.alpha, b=res.beta)
        fe.track_candidates(b["cands"], host, target, self.intrinsics,
                            huber_gamma=s.huber_gamma)
        alive = [c for c in b["cands"] if c.status == fe.CANDIDATE_ALIVE]
        conv = [c for c in alive if c.converged]
        entry = TrajectoryEntry(self._frame_index, timestamp, res.relative_pose)
        self.trajectory.append(entry)
        b["entries"].append(entry)

        enough = (len(alive) > 0
                  and len(conv) >= s.bootstrap_min_converged * len(alive)
                  and res.flow_translation >= s.bootstrap_min_flow)
        if enough:
            self._promote(res, image, raw, timestamp)
        return FrameReport(self._frame_index, self.state, entry.pose,
                           is_keyframe=enough, rmse=res.rmse_per_level[-1],
                           n_active_points=len(self.system.active_points()))

    def _promote(self, res, image, raw, timestamp):
        """Scale-normalize the bootstrap pair and seed the window with it."""
        s = self.settings
        b = self._boot
        conv = [c for c in b["cands"]
                if c.status == fe.CANDIDATE_ALIVE and c.converged]
        m = float(np.mean([c.idepth for c in conv]))
        for c in b["cands"]:
            c.idepth /= m
            c.idepth_min /= m
            c.idepth_max /= m
            c.variance /= m * m
        # Inverse depths shrank by m, so the scene grew by m; translations
        # must grow with it to keep the reprojections fixed.
        for e in b["entries"]:
            e.pose = SE3Pose(e.pose.rotation, e.pose.translation * m)
        rel = SE3Pose(res.relative_pose.rotation, res.relative_pose.translation * m)

        kf0 = FrameState(0, b["image"], SE3Pose.identity(),
                         timestamp=b["timestamp"])
        kf0.fixed = True  # pins the six rigid gauge directions pre-prior
        self.system.add_frame(kf0)
        kf1 = FrameState(1, image, rel, a=res.alpha, b=res.beta,
                         timestamp=timestamp)
        self.system.add_frame(kf1)
        self.n_keyframes = 2

        entry0 = TrajectoryEntry(b["index"], b["timestamp"], SE3Pose.identity(),
                                 is_keyframe=True, keyframe_id=0)
        # Rewrite the first frame's plain entry as the keyframe entry.
        for i, e in enumerate(self.trajectory):
            if e.frame_index == b["index"]:
                self.trajectory[i] = entry0
                break
        entry1 = self.trajectory[-1]
        entry1.pose = rel
        entry1.is_keyframe = True
        entry1.keyframe_id = 1
        self._kf_entries = {0: entry0, 1: entry1}

        fe.activate_candidates(self.system, b["cands"], 1, s.max_points)
        gauss_newton_iterate(self.system, s.max_gn_iterations,
                             cull_kappa=s.outlier_kappa)
        fe.remove_outlier_observations(self.system, s.outlier_kappa)
        self._refresh_keyframe_entries()

        self.candidates = {}
        self._select_new_candidates(1, image, raw)
        self.reference = fe.TrackerReference.from_system(self.system, 1)
        self._prev_rmse = None
        self._pose_pprev = SE3Pose.identity()
        self._pose_prev = self.system.frame(1).pose
        self._boot = None
        self.state = STATE_RUNNING

    # -------------------------------------------------------------- running

    def _motion_prior(self):
        """Constant-velocity prediction, as reference->new relative pose."""
        ref_pose = self.system.frame(self.reference.keyframe_id).pose
        if self._pose_prev is None:
            return SE3Pose.identity()
        if self._pose_pprev is None:
            pred = self._pose_prev
        else:
            vel = self._pose_prev.compose(self._pose_pprev.inverse())
            pred = vel.compose(self._pose_prev)
        return pred.compose(ref_pose.inverse())

    def _select_new_candidates(self, frame_id, image, raw):
        s = self.settings
        pix, labels = fe.select_candidates(raw, d=self.block_size,
                                           gradient_threshold=s.gradient_threshold)
        self.block_size = fe.adapt_block_size(self.block_size, len(pix),
                                              s.max_points)
        cands = fe.make_candidates(
            frame_id, image, pix, labels, idepth_range=s.idepth_range)
        self.candidates[frame_id] = cands
        # Newborn candidates trace backward against the older window frames
        # right away, nearest first so the interval narrows before the long
        # baselines are searched. Hosts near the middle of the window are
        # routinely marginalized at age three or four, so folds banked at
        # birth are the only way a candidate reliably reaches convergence.
        host_frame = self.system.frame(frame_id)
        host = fe.FrameView(host_frame.image, host_frame.pose,
                            a=host_frame.a, b=host_frame.b)
        for g in reversed(self.system.frames[:-1]):
            alive = [c for c in cands if c.status == fe.CANDIDATE_ALIVE]
            if not alive:
                break
            fe.track_candidates(alive, host,
                                fe.FrameView(g.image, g.pose, a=g.a, b=g.b),
                                self.intrinsics, huber_gamma=s.huber_gamma)

    def _trace_candidates(self, image, pose, a, b):
        s = self.settings
        hosts = [f.id for f in self.system.frames
                 if f.id in self.candidates][-s.candidate_hosts:]
        target = fe.FrameView(image, pose, a=a, b=b)
        for hid in hosts:
            alive = [c for c in self.candidates[hid]
                     if c.status == fe.CANDIDATE_ALIVE]
            if not alive:
                continue
            host_frame = self.system.frame(hid)
            host = fe.FrameView(host_frame.image, host_frame.pose,
                                a=host_frame.a, b=host_frame.b)
            fe.track_candidates(alive, host, target,
                                self.intrinsics, huber_gamma=s.huber_gamma)

    def _refresh_keyframe_entries(self):
        for f in self.system.frames:
            e = self._kf_entries.get(f.id)
            if e is not None:
                e.pose = f.pose

    def _make_keyframe(self, image, raw, timestamp, pose, a, b):
        s = self.settings
        fid = self.n_keyframes
        self.n_keyframes += 1
        kf = FrameState(fid, image, pose, a=a, b=b, timestamp=timestamp)
        self.system.add_frame(kf)
        rels = {f.id: relative_pose(f.pose, kf.pose) for f in self.system.frames}
        for p in self.system.active_points():
            self.system.add_observation(p, fid, rel=rels[p.host_id])

        all_cands = [c for lst in self.candidates.values() for c in lst]
        fresh = fe.activate_candidates(self.system, all_cands, fid, s.max_points)
        fe.refine_point_depths(self.system, fresh)
        gauss_newton_iterate(self.system, s.max_gn_iterations,
                             cull_kappa=s.outlier_kappa)
        fe.remove_outlier_observations(self.system, s.outlier_kappa)

        marginalized = []
        while True:
            victim = fe.select_marginalization_frame(self.system, s.max_keyframes)
            if victim is None:
                break
            marginalize_frame(self.system, victim)
            self.candidates.pop(victim, None)
            marginalized.append(victim)
        self._refresh_keyframe_entries()

        self._select_new_candidates(fid, image, raw)
        self.reference = fe.TrackerReference.from_system(self.system, fid)
        return fid, tuple(marginalized)

    def _running_frame(self, image, raw, timestamp):
        s = self.settings
        res = fe.track_frame(self.reference, image, self._motion_prior(),
                             self.intrinsics, huber_gamma=s.huber_gamma,
                             gradient_constant=s.gradient_constant,
                             previous_rmse=self._prev_rmse,
                             lost_rmse=s.tracker_lost_rmse)
        if res.lost:
            self.state = STATE_LOST
            self.lost_at = self._frame_index
            self.trajectory.append(TrajectoryEntry(self._frame_index, timestamp,
                                                   None))
            return FrameReport(self._frame_index, self.state, None)

        ref_frame = self.system.frame(self.reference.keyframe_id)
        pose = res.relative_pose.compose(ref_frame.pose)
        a_new = ref_frame.a + res.alpha
        b_new = res.beta
        self._prev_rmse = res.rmse_per_level[-1]

        self._trace_candidates(image, pose, a_new, b_new)

        w_f, w_ft, w_a = s.keyframe_weights
        decision = fe.KeyframeDecision(
            f=res.flow, f_t=res.flow_translation,
            a=res.brightness_change(self.reference.exposure, image.exposure),
            w_f=w_f, w_ft=w_ft, w_a=w_a, threshold=s.keyframe_threshold)
        entry = TrajectoryEntry(self._frame_index, timestamp, pose)
        self.trajectory.append(entry)

        marginalized = ()
        if fe.keyframe_needed(decision):
            fid, marginalized = self._make_keyframe(image, raw, timestamp,
                                                    pose, a_new, b_new)
            kf_frame = self.system.frame(fid)
            entry.pose = kf_frame.pose
            entry.is_keyframe = True
            entry.keyframe_id = fid
            self._kf_entries[fid] = entry

        self._pose_pprev = self._pose_prev
        self._pose_prev = entry.pose
        return FrameReport(self._frame_index, self.state, entry.pose,
                           is_keyframe=entry.is_keyframe,
                           rmse=self._prev_rmse,
                           n_active_points=len(self.system.active_points()),
                           marginalized=marginalized)

    # ----------------------------------------------------------------- API

    def process_frame(self, image: CalibratedImage, timestamp,
                      raw_image=None) -> FrameReport:
        """Feed one photometrically corrected frame (plus the raw intensity
        used for gradient-based candidate selection)."""
        self._frame_index += 1
        raw = image.intensity if raw_image is None else raw_image
        if self.state == STATE_LOST:
            self.trajectory.append(TrajectoryEntry(self._frame_index, timestamp,
                                                   None))
            return FrameReport(self._frame_index, self.state, None)
        if self.state == STATE_BOOTSTRAP:
            if self._boot is None:
                self._start_bootstrap(image, raw, timestamp)
                self.trajectory.append(TrajectoryEntry(self._frame_index,
                                                       timestamp,
                                                       SE3Pose.identity()))
                return FrameReport(self._frame_index, self.state,
                                   SE3Pose.identity())
            return self._bootstrap_frame(image, raw, timestamp)
        return self._running_frame(image, raw, timestamp)


@dataclass
class OdometryResult:
    trajectory: list
    status: str                 # "completed" or "lost-at-frame-K"
    n_keyframes: int
    n_frames: int
    settings: OdometrySettings = field(repr=False, default=None)

    @property
    def completed(self):
        return self.status == "completed"


def run_odometry_frames(frames, intrinsics,
                        settings: OdometrySettings | None = None,
                        progress=None) -> OdometryResult:
    """Run the pipeline over an iterable of (timestamp, CalibratedImage,
    raw_or_None) triples."""
    odo = Odometry(intrinsics, settings)
    n = 0
    for timestamp, image, raw in frames:
        report = odo.process_frame(image, timestamp, raw)
        n += 1
        if progress is not None:
            progress(report)
    status = ("completed" if odo.state != STATE_LOST
              else f"lost-at-frame-{odo.lost_at}")
    return OdometryResult(odo.trajectory, status, odo.n_keyframes, n,
                          odo.settings)
