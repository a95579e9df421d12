"""Per-frame camera tracking: initialization, constant-velocity prediction,
projection matching, pose-only refinement, keyframe decision and
relocalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InitFailure, TooFewMatches, TrackLost, WrongMode
from .features import (
    AdaptiveConfig,
    MatchThresholds,
    adapt_thresholds,
    distance_matrix,
    match_descriptors,
    mutual_nearest,
    row_distances,
)
from .geometry import (
    PARALLAX_MIN,
    CameraIntrinsics,
    PoseSE3,
    RansacConfig,
    estimate_two_view,
    project_many,
    quat_exp,
    triangulate_many,
)
from .mapstore import Frame, MapStore
from .optimization import LMConfig, ReprojectionProblem, optimize_pose_only, solve_lm


class Mode(enum.Enum):
    NOT_INITIALIZED = "not_initialized"
    OK = "ok"
    LOST = "lost"


@dataclass
class TrackerConfig:
    thresholds: MatchThresholds = field(default_factory=lambda: MatchThresholds(1.0, 2.0))
    adaptive: AdaptiveConfig | None = None
    track_min: int = 10
    kf_max_gap: int = 20
    kf_ratio: float = 0.9
    search_radius: float = 15.0
    local_radius: float = 5.0
    fallback_min: int = 20
    reloc_min_inliers: int = 15
    reloc_min_score: float = 0.05
    reloc_max_candidates: int = 5
    init_min_points: int = 30
    init_reproj_max: float = 2.0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_iters=20))


@dataclass
class TrackerState:
    mode: Mode = Mode.NOT_INITIALIZED
    last_pose: PoseSE3 | None = None
    velocity: PoseSE3 | None = None
    thresholds: MatchThresholds = field(default_factory=lambda: MatchThresholds(1.0, 2.0))
    ref_kf: int | None = None
    last_frame: Frame | None = None
    frames_since_kf: int = 0
    ref_pose_seen: PoseSE3 | None = None


@dataclass
class TrackResult:
    frame_id: int
    pose: PoseSE3
    inlier_count: int
    outlier_count: int
    matches: list  # (keypoint index, map point id) for inliers
    outliers: list
    thresholds: MatchThresholds
    last_map_points: int = 0
    unmatched_last: int = 0


def scale_motion(rel: PoseSE3, fraction: float) -> PoseSE3:
    """Fraction of a relative motion along its decoupled tangent."""
    w = rel.log()
    return PoseSE3(quat=quat_exp(w[:3] * fraction), translation=w[3:] * fraction)


class Tracker:
    def __init__(self, store: MapStore, cam: CameraIntrinsics, cfg: TrackerConfig | None = None,
                 vocab=None, db=None):
        self.store = store
        self.cam = cam
        self.cfg = cfg or TrackerConfig()
        self.vocab = vocab
        self.db = db
        self.state = TrackerState(thresholds=self.cfg.thresholds)
        if self.cfg.adaptive is not None:
            # start in the middle of the clamp range until the first frame is tracked
            a = self.cfg.adaptive
            self.state.thresholds = adapt_thresholds(1, 0, a)
        self.trace: list[tuple] = []

    # -- helpers -----------------------------------------------------------

    def _bow(self, features):
        if self.vocab is None:
            return {}
        from .placerec import to_bow

        return to_bow(features, self.vocab)

    def _log(self, frame_id, mode, inliers, outliers, th=None):
        th = th or self.state.thresholds
        self.trace.append((frame_id, mode.value, inliers, outliers, th.th_low, th.th_high))

    # -- initialization ----------------------------------------------------

    def initialize(self, f1: Frame, f2: Frame) -> TrackResult:
        """Two-view map seeding; leaves the tracker untouched on ``InitFailure``."""
        cfg = self.cfg
        if len(f1.features) < 8 or len(f2.features) < 8:
            raise InitFailure("not enough features")
        th = self.state.thresholds
        matches = match_descriptors(f1.features, f2.features, th, strict=False)
        if len(matches) < 8:
            raise InitFailure(f"only {len(matches)} descriptor matches")
        qi = np.array([m[0] for m in matches])
        ti = np.array([m[1] for m in matches])
        p1 = f1.features.keypoints[qi]
        p2 = f2.features.keypoints[ti]
        rel, mask = estimate_two_view(p1, p2, self.cam, cfg.ransac)
        qi, ti, p1, p2 = qi[mask], ti[mask], p1[mask], p2[mask]
        ident = PoseSE3.identity()
        X = triangulate_many(self.cam.normalize(p1), self.cam.normalize(p2), ident, rel)
        good = np.all(np.isfinite(X), axis=1)
        Xs = np.where(good[:, None], X, 0.0)
        u1, z1, ok1 = project_many(Xs, ident, self.cam)
        u2, z2, ok2 = project_many(Xs, rel, self.cam)
        good &= ok1 & ok2
        good &= np.linalg.norm(u1 - p1, axis=1) < cfg.init_reproj_max
        good &= np.linalg.norm(u2 - p2, axis=1) < cfg.init_reproj_max
        a = -Xs
        b = rel.center[None, :] - Xs
        par = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))
        good &= par >= PARALLAX_MIN
        if good.sum() < cfg.init_min_points:
            raise InitFailure(f"only {int(good.sum())} triangulated points")
        X = X[good]
        qi, ti = qi[good], ti[good]
        med = float(np.median(X[:, 2]))
        X = X / med
        pose2 = PoseSE3(rel.R, rel.t / med)

        with self.store.lock:
            f1.pose, f2.pose = ident, pose2
            f1.links[:] = -1
            f2.links[:] = -1
            f1.outliers[:] = False
            f2.outliers[:] = False
            k1 = self.store.insert_keyframe(f1, self._bow(f1.features))
            k2 = self.store.insert_keyframe(f2, self._bow(f2.features))
            pids = [self.store.add_map_point(x, {k1: int(i), k2: int(j)}) for x, i, j in zip(X, qi, ti)]
            # joint refinement of the second view and the points
            prob = ReprojectionProblem(
                self.cam,
                [ident, pose2],
                X,
                np.r_[np.zeros(len(X), int), np.ones(len(X), int)],
                np.r_[np.arange(len(X)), np.arange(len(X))],
                np.vstack([f1.features.keypoints[qi], f2.features.keypoints[ti]]),
                fixed_poses=np.array([True, False]),
            )
            solve_lm(prob, LMConfig(max_iters=20))
            # keep the unit median depth after refinement
            s = float(np.median(prob.points[:, 2]))
            pose2 = PoseSE3(prob.poses[1].R, prob.poses[1].t / s)
            self.store.set_pose(k2, pose2)
            for pid, x in zip(pids, prob.points / s):
                self.store.set_point_position(pid, x)
            self.store.keyframes[k1].tracked_points = len(pids)
            self.store.keyframes[k2].tracked_points = len(pids)
            f2.pose = pose2
            f2.links[ti] = pids

        gap = max(1, f2.id - f1.id)
        st = self.state
        st.mode = Mode.OK
        st.last_pose = pose2
        st.velocity = scale_motion(pose2, 1.0 / gap)
        st.ref_kf = k2
        st.ref_pose_seen = pose2
        st.last_frame = f2
        st.frames_since_kf = 0
        res = TrackResult(f2.id, pose2, len(pids), 0, list(zip(ti.tolist(), pids)), [], st.thresholds, len(pids))
        self._log(f1.id, Mode.OK, len(pids), 0)
        self._log(f2.id, Mode.OK, len(pids), 0)
        return res

    # -- tracking ----------------------------------------------------------

    def predict_pose(self) -> PoseSE3:
        st = self.state
        if st.mode != Mode.OK:
            raise WrongMode(f"prediction needs mode OK, tracker is {st.mode.value}")
        return st.velocity.compose(st.last_pose)

    def _rebase(self):
        """Follow map corrections (BA, loop closure) applied to the reference keyframe."""
        st = self.state
        kf = self.store.keyframes.get(st.ref_kf)
        if kf is None:
            st.ref_kf = self._best_reference(st.last_frame)
            kf = self.store.keyframes.get(st.ref_kf)
            st.ref_pose_seen = None if kf is None else kf.pose
            return
        if st.ref_pose_seen is not None and kf.pose is not st.ref_pose_seen:
            delta = st.ref_pose_seen.inverse().compose(kf.pose)
            st.last_pose = st.last_pose.compose(delta)
            if st.last_frame is not None and st.last_frame.pose is not None:
                st.last_frame.pose = st.last_frame.pose.compose(delta)
        st.ref_pose_seen = kf.pose

    def _best_reference(self, frame):
        counts = {}
        if frame is not None:
            for pid in frame.links[frame.links >= 0]:
                p = self.store.points.get(int(pid))
                if p is None:
                    continue
                for k in p.observations:
                    counts[k] = counts.get(k, 0) + 1
        if counts:
            return max(counts, key=lambda k: (counts[k], k))
        return max(self.store.keyframes) if self.store.keyframes else None

    def search_by_projection(self, frame: Frame, pose: PoseSE3, pids, radius, max_dist, used_kp, tree=None):
        """Greedy one-to-one matches ``{kp: pid}`` of projected points to nearby keypoints."""
        pids = np.asarray([p for p in pids if p in self.store.points], dtype=np.int64)
        F = frame.features
        if len(pids) == 0 or len(F) == 0:
            return {}
        X = self.store.point_positions(pids)
        uv, _, ok = project_many(X, pose, self.cam)
        ok &= self.cam.in_image(uv)
        pids, uv = pids[ok], uv[ok]
        if len(pids) == 0:
            return {}
        tree = tree or cKDTree(F.keypoints)
        cands = tree.query_ball_point(uv, radius)
        lens = np.array([len(c) for c in cands])
        if lens.sum() == 0:
            return {}
        rep = np.repeat(np.arange(len(pids)), lens)
        kps = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands if len(c)])
        pdesc = self.store.point_descriptors(pids)
        d = row_distances(pdesc[rep], F.descriptors[kps], F.variant)
        keep = d <= max_dist
        rep, kps, d = rep[keep], kps[keep], d[keep]
        order = np.lexsort((kps, rep, d))
        out, taken = {}, set()
        for o in order:
            k, p = int(kps[o]), int(pids[rep[o]])
            if k in used_kp or k in out or p in taken:
                continue
            out[k] = p
            taken.add(p)
        return out

    def _match_reference(self, frame: Frame, th: float, used):
        """Descriptor matching of the frame against the reference keyframe's points."""
        kf = self.store.keyframes.get(self.state.ref_kf)
        if kf is None:
            return {}
        pids = np.array(sorted({int(p) for p in kf.point_ids()}), dtype=np.int64)
        if len(pids) == 0 or len(frame.features) == 0:
            return {}
        D = distance_matrix(frame.features.descriptors, self.store.point_descriptors(pids), frame.features.variant)
        qi, ti, _ = mutual_nearest(D, th)
        return {int(q): int(pids[t]) for q, t in zip(qi, ti) if int(q) not in used}

    def _solve(self, frame, pose, matches):
        kps = np.array(sorted(matches), dtype=np.int64)
        pids = np.array([matches[k] for k in kps], dtype=np.int64)
        X = self.store.point_positions(pids)
        uv = frame.features.keypoints[kps]
        pose, inl = optimize_pose_only(pose, X, uv, self.cam, self.cfg.lm)
        return pose, kps, pids, inl

    def _track_once(self, frame: Frame, th: MatchThresholds):
        """One tracking attempt; returns ``(result or None, last_points, unmatched_last)``."""
        st = self.state
        cfg = self.cfg
        last = st.last_frame
        last_pids = set()
        if last is not None:
            ok = (last.links >= 0) & ~last.outliers
            last_pids = {int(p) for p in last.links[ok] if int(p) in self.store.points}
        n_last = len(last_pids)
        F = frame.features
        if len(F) == 0:
            return None, n_last, n_last
        pred = self.predict_pose()
        tree = cKDTree(F.keypoints)
        matches = self.search_by_projection(frame, pred, sorted(last_pids), cfg.search_radius, th.th_high, set(), tree)
        start = pred
        if len(matches) < cfg.fallback_min:
            wide = self.search_by_projection(frame, pred, sorted(last_pids), 2 * cfg.search_radius, th.th_high, set(), tree)
            if len(wide) > len(matches):
                matches = wide
        if len(matches) < cfg.fallback_min:
            extra = self._match_reference(frame, th.th_high, set(matches))
            taken = set(matches.values())
            for k, p in extra.items():
                if p not in taken:
                    matches[k] = p
                    taken.add(p)
            start = st.last_pose
        if len(matches) < 6:
            return None, n_last, n_last
        try:
            pose, kps, pids, inl = self._solve(frame, start, matches)
        except TooFewMatches:
            return None, n_last, n_last
        if inl.sum() < cfg.track_min:
            good = {int(p) for p, i in zip(pids, inl) if i}
            return None, n_last, len(last_pids - good)
        # widen to the reference keyframe's local map
        inliers = {int(k): int(p) for k, p, i in zip(kps, pids, inl) if i}
        if st.ref_kf in self.store.keyframes:
            _, local = self.store.local_neighborhood(st.ref_kf)
            taken = set(inliers.values())
            more = self.search_by_projection(frame, pose, [p for p in local if p not in taken], cfg.local_radius,
                                             th.th_high, set(inliers), tree)
            if more:
                allm = dict(inliers)
                allm.update(more)
                pose, kps, pids, inl = self._solve(frame, pose, allm)
        good = {int(p) for p, i in zip(pids, inl) if i}
        unmatched_last = len(last_pids - good)
        n_in = int(inl.sum())
        if n_in < cfg.track_min:
            return None, n_last, unmatched_last
        res = TrackResult(
            frame.id, pose, n_in, int((~inl).sum()),
            [(int(k), int(p)) for k, p, i in zip(kps, pids, inl) if i],
            [(int(k), int(p)) for k, p, i in zip(kps, pids, inl) if not i],
            th, n_last, unmatched_last,
        )
        return res, n_last, unmatched_last

    def track_frame(self, frame: Frame) -> TrackResult:
        st = self.state
        if st.mode != Mode.OK:
            raise WrongMode(f"tracking needs mode OK, tracker is {st.mode.value}")
        with self.store.lock:
            self._rebase()
            res, n_last, outl = self._track_once(frame, st.thresholds)
            if self.cfg.adaptive is not None:
                new_th = adapt_thresholds(n_last, outl, self.cfg.adaptive)
                if res is None and new_th != st.thresholds:
                    # retry the same frame with the loosened thresholds
                    st.thresholds = new_th
                    res, n_last, outl = self._track_once(frame, st.thresholds)
                    new_th = adapt_thresholds(n_last, outl, self.cfg.adaptive)
                st.thresholds = new_th
            if res is None:
                st.mode = Mode.LOST
                st.velocity = None
                self._log(frame.id, Mode.LOST, 0, outl)
                raise TrackLost(f"frame {frame.id}: fewer than {self.cfg.track_min} inliers")
            self._accept(frame, res)
            self._log(frame.id, Mode.OK, res.inlier_count, res.outlier_count, res.thresholds)
            return res

    def _accept(self, frame: Frame, res: TrackResult):
        st = self.state
        frame.pose = res.pose
        frame.links[:] = -1
        frame.outliers[:] = False
        for k, p in res.matches:
            frame.links[k] = p
            pt = self.store.points.get(p)
            if pt is not None:
                pt.found += 1
        for k, p in res.outliers:
            frame.outliers[k] = True
        st.velocity = res.pose.compose(st.last_pose.inverse())
        st.last_pose = res.pose
        st.last_frame = frame
        st.frames_since_kf += 1

    # -- keyframes ---------------------------------------------------------

    def need_keyframe(self, res: TrackResult) -> bool:
        cfg = self.cfg
        st = self.state
        if st.frames_since_kf >= cfg.kf_max_gap:
            return True
        kf = self.store.keyframes.get(st.ref_kf)
        ref_pts = kf.tracked_points if kf is not None else 0
        return res.inlier_count < cfg.kf_ratio * ref_pts and res.inlier_count > cfg.track_min

    def keyframe_inserted(self, kid: int):
        """Make ``kid`` (built from the last tracked frame) the reference; its
        refined pose and links replace the frame's."""
        st = self.state
        kf = self.store.keyframes[kid]
        st.ref_kf = kid
        st.ref_pose_seen = kf.pose
        st.last_pose = kf.pose
        st.frames_since_kf = 0
        if st.last_frame is not None:
            st.last_frame.pose = kf.pose
            st.last_frame.links[:] = kf.links
            st.last_frame.outliers[:] = False

    # -- relocalization ----------------------------------------------------

    def relocalize(self, frame: Frame) -> TrackResult | None:
        """BoW candidates, strict descriptor matching, pose-only solve; ``None`` if still lost."""
        cfg = self.cfg
        st = self.state
        if st.mode != Mode.LOST:
            raise WrongMode("relocalization needs mode LOST")
        if self.db is None or self.vocab is None or len(self.db) == 0 or len(frame.features) == 0:
            self._log(frame.id, Mode.LOST, 0, 0)
            return None
        with self.store.lock:
            bow = self._bow(frame.features)
            cands = [k for k in self.db.query_relocalization(bow, cfg.reloc_min_score) if k in self.store.keyframes]
            for kid in cands[: cfg.reloc_max_candidates]:
                kf = self.store.keyframes[kid]
                pids = np.array(sorted({int(p) for p in kf.point_ids()}), dtype=np.int64)
                if len(pids) < cfg.reloc_min_inliers:
                    continue
                D = distance_matrix(frame.features.descriptors, self.store.point_descriptors(pids),
                                    frame.features.variant)
                qi, ti, _ = mutual_nearest(D, st.thresholds.th_low)
                if len(qi) < cfg.reloc_min_inliers:
                    continue
                matches = {int(q): int(pids[t]) for q, t in zip(qi, ti)}
                try:
                    pose, kps, mp, inl = self._solve(frame, kf.pose, matches)
                except TooFewMatches:
                    continue
                if inl.sum() < cfg.reloc_min_inliers:
                    continue
                inliers = {int(k): int(p) for k, p, i in zip(kps, mp, inl) if i}
                _, local = self.store.local_neighborhood(kid)
                taken = set(inliers.values())
                more = self.search_by_projection(frame, pose, [p for p in local if p not in taken],
                                                 cfg.local_radius, st.thresholds.th_high, set(inliers))
                if more:
                    inliers.update(more)
                    pose, kps, mp, inl = self._solve(frame, pose, inliers)
                if inl.sum() < cfg.reloc_min_inliers:
                    continue
                res = TrackResult(
                    frame.id, pose, int(inl.sum()), int((~inl).sum()),
                    [(int(k), int(p)) for k, p, i in zip(kps, mp, inl) if i],
                    [(int(k), int(p)) for k, p, i in zip(kps, mp, inl) if not i],
                    st.thresholds,
                )
                st.mode = Mode.OK
                st.last_pose = pose
                st.ref_kf = kid
                st.ref_pose_seen = kf.pose
                st.last_frame = frame
                st.velocity = PoseSE3.identity()
                frame.pose = pose
                frame.links[:] = -1
                frame.outliers[:] = False
                for k, p in res.matches:
                    frame.links[k] = p
                st.frames_since_kf = 0
                self._log(frame.id, Mode.OK, res.inlier_count, res.outlier_count)
                return res
        self._log(frame.id, Mode.LOST, 0, 0)
        return None

    def write_trace(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "mode", "inliers", "outliers", "th_low", "th_high"])
            w.writerows(self.trace)
