"""Run lifecycle: tracking, mapping and loop closing wired per frame.

Tracking and mapping run sequentially on the caller's thread. Loop closing
runs either interleaved after each keyframe (deterministic) or on a worker
thread fed through a keyframe queue; all map mutations go through the
store's lock.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path


from .errors import InitFailure, LoopRejected, TrackLost
from .evaluation import Trajectory, write_tum
from .features import AdaptiveConfig
from .geometry import PoseSE3
from .mapping import MappingConfig, bundle_adjust, fuse_into, process_keyframe
from .mapstore import Frame, MapStore, StoreConfig
from .placerec import KeyFrameDatabase, LoopConfig, Vocabulary, close_loop, detect_loop, to_bow
from .optimization import LMConfig
from .tracking import Mode, Tracker, TrackerConfig

log = logging.getLogger(__name__)

LOOP_MODES = ("off", "interleaved", "threaded")


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    loop_mode: str = "off"
    vocab: Vocabulary | None = None
    vocab_path: str | None = None
    init_window: int = 10  # frames tried against one reference before moving it
    loop_cooldown: int = 5  # keyframes after a closed loop before detecting again
    global_ba: LMConfig = field(default_factory=lambda: LMConfig(max_iters=10))
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loop_mode not in LOOP_MODES:
            raise ValueError(f"loop_mode must be one of {LOOP_MODES}, got {self.loop_mode!r}")
        if self.vocab is None and self.vocab_path is not None:
            self.vocab = Vocabulary.load(self.vocab_path)
        if self.loop_mode != "off" and self.vocab is None:
            raise ValueError("loop closing needs a vocabulary")
        if self.tracker.adaptive is not None and not isinstance(self.tracker.adaptive, AdaptiveConfig):
            raise ValueError("adaptive must be an AdaptiveConfig")
        if self.init_window < 1:
            raise ValueError("init_window must be >= 1")


@dataclass
class RunStats:
    frames: int = 0
    tracked: int = 0
    lost: int = 0
    keyframes: int = 0
    keyframes_created: int = 0
    map_points: int = 0
    loops_closed: int = 0
    loops_rejected: int = 0
    lost_spans: list = field(default_factory=list)
    loop_events: list = field(default_factory=list)
    audit_issues: list = field(default_factory=list)
    initialized_at: int | None = None
    seconds: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class System:
    def __init__(self, camera, cfg: RunConfig | None = None):
        self.cfg = cfg or RunConfig()
        self.cam = camera
        self.store = MapStore(self.cfg.store)
        self.db = KeyFrameDatabase() if self.cfg.vocab is not None else None
        self.tracker = Tracker(self.store, camera, self.cfg.tracker, self.cfg.vocab, self.db)
        self.stats = RunStats()
        self.mapping_reports = []
        self._anchors: dict[int, tuple[int, PoseSE3]] = {}  # frame id -> (ref kf, pose relative to it)
        self._timestamps: dict[int, float] = {}
        self._init_ref: Frame | None = None
        self._last_loop_kf = -(10**9)
        self._queue: queue.Queue | None = None
        self._worker: threading.Thread | None = None
        self._worker_error: BaseException | None = None

    # -- keyframes and loops ------------------------------------------------

    def _bow(self, features):
        return to_bow(features, self.cfg.vocab) if self.cfg.vocab is not None else {}

    def _th(self):
        return self.tracker.state.thresholds

    def _new_keyframe(self, frame: Frame, th):
        """Insert ``frame`` and map it with the thresholds it was tracked under."""
        with self.store.lock:
            kid = self.store.insert_keyframe(frame, self._bow(frame.features))
            self.stats.keyframes_created += 1
            rep = process_keyframe(self.store, kid, self.cam, th.th_low, self.cfg.mapping)
            self.mapping_reports.append(rep)
            if kid in self.store.keyframes:
                kf = self.store.keyframes[kid]
                kf.tracked_points = int((kf.links >= 0).sum())
            if self.db is not None:
                for k in rep.culled:
                    self.db.remove(k)
                if kid in self.store.keyframes:
                    self.db.add(kid, self.store.keyframes[kid].bow)
            self.tracker.keyframe_inserted(kid)
            self._anchors[frame.id] = (kid, PoseSE3.identity())
        return kid

    def _register_initial(self, k1, k2):
        if self.db is not None:
            for k in (k1, k2):
                self.db.add(k, self.store.keyframes[k].bow)

    def _fuse(self, kid, pids):
        return fuse_into(self.store, kid, pids, self.cam, self._th().th_low, self.cfg.loop.fuse_radius)

    def _global_ba(self):
        kfs = self.store.keyframe_ids()
        if len(kfs) < 2:
            return
        bundle_adjust(self.store, self.cam, kfs, fixed_kfs={kfs[0]}, cfg=self.cfg.global_ba,
                      reproj_max=self.cfg.mapping.reproj_max)

    def _loop_step(self, kid):
        with self.store.lock:
            if kid not in self.store.keyframes or kid - self._last_loop_kf < self.cfg.loop_cooldown:
                return
            cand = detect_loop(kid, self.store, self.db, self.cfg.loop)
            if cand is None:
                return
            try:
                res = close_loop(self.store, self.db, cand, self.cam, self._th().th_low, self.cfg.loop,
                                 fuse=self._fuse, bundle_adjust=self._global_ba)
            except LoopRejected as exc:
                self.stats.loops_rejected += 1
                log.debug("loop %d-%d rejected: %s", cand.current, cand.candidate, exc)
                return
            self._last_loop_kf = kid
            self.stats.loops_closed += 1
            issues = self.store.audit()
            self.stats.audit_issues.extend(issues)
            self.stats.loop_events.append({"current": res.current, "candidate": res.candidate,
                                           "inliers": res.inliers, "fused": res.fused,
                                           "scale": float(res.sim3.s), "audit_clean": not issues})

    def _worker_loop(self):
        while True:
            kid = self._queue.get()
            try:
                if kid is None:
                    return
                self._loop_step(kid)
            except BaseException as exc:  # surfaced by finish()
                self._worker_error = exc
            finally:
                self._queue.task_done()

    def _after_keyframe(self, kid):
        mode = self.cfg.loop_mode
        if mode == "interleaved":
            self._loop_step(kid)
        elif mode == "threaded":
            if self._worker is None:
                self._queue = queue.Queue()
                self._worker = threading.Thread(target=self._worker_loop, name="loop-closing", daemon=True)
                self._worker.start()
            self._queue.put(kid)

    # -- per frame ----------------------------------------------------------

    def _try_initialize(self, frame: Frame) -> bool:
        if self._init_ref is None:
            self._init_ref = frame
            return False
        try:
            self.tracker.initialize(self._init_ref, frame)
        except InitFailure as exc:
            log.debug("initialization with frame %d failed: %s", frame.id, exc)
            if frame.id - self._init_ref.id >= self.cfg.init_window:
                self._init_ref = frame
            return False
        f1 = self._init_ref
        k1, k2 = sorted(self.store.keyframes)[:2]
        self._anchors[f1.id] = (k1, PoseSE3.identity())
        self._anchors[frame.id] = (k2, PoseSE3.identity())
        self.stats.keyframes_created += 2
        self._register_initial(k1, k2)
        self.stats.initialized_at = frame.id
        # the reference frame was counted lost while waiting; it now has a pose
        self.stats.lost -= 1
        self.stats.tracked += 1
        self._close_span(f1.id)
        return True

    def _close_span(self, frame_id):
        """Drop ``frame_id`` from the lost spans (it is now tracked)."""
        spans = []
        for a, b in self.stats.lost_spans:
            if a <= frame_id <= b:
                if a < frame_id:
                    spans.append([a, frame_id - 1])
                if frame_id < b:
                    spans.append([frame_id + 1, b])
            else:
                spans.append([a, b])
        self.stats.lost_spans = spans

    def _mark_lost(self, frame_id):
        spans = self.stats.lost_spans
        if spans and spans[-1][1] == frame_id - 1:
            spans[-1][1] = frame_id
        else:
            spans.append([frame_id, frame_id])
        self.stats.lost += 1

    def _anchor(self, frame: Frame):
        ref = self.tracker.state.ref_kf
        kf = self.store.keyframes[ref]
        self._anchors[frame.id] = (ref, frame.pose.compose(kf.pose.inverse()))

    def process(self, index: int, timestamp: float, features) -> bool:
        """Feed one frame; returns whether it received a pose."""
        frame = Frame(index, timestamp, features)
        self._timestamps[index] = timestamp
        self.stats.frames += 1
        tr = self.tracker
        mode = tr.state.mode
        if mode == Mode.NOT_INITIALIZED:
            if self._try_initialize(frame):
                self.stats.tracked += 1
                return True
            self._mark_lost(index)
            return False
        if mode == Mode.OK:
            try:
                res = tr.track_frame(frame)
            except TrackLost as exc:
                log.info("%s", exc)
                self._mark_lost(index)
                return False
        else:
            res = tr.relocalize(frame)
            if res is None:
                self._mark_lost(index)
                return False
        self.stats.tracked += 1
        if self._worker_error is not None:
            raise self._worker_error
        if tr.need_keyframe(res):
            kid = self._new_keyframe(frame, res.thresholds)
            self._after_keyframe(kid)
        else:
            with self.store.lock:
                self._anchor(frame)
        return True

    def finish(self):
        if self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._worker = None
            if self._worker_error is not None:
                raise self._worker_error
        with self.store.lock:
            st = self.store.stats()
            self.stats.keyframes = st["keyframes"]
            self.stats.map_points = st["map_points"]

    # -- trajectory -----------------------------------------------------------

    def keyframe_pose(self, kid) -> PoseSE3:
        """Live keyframe pose, or the pose recovered through culled parents."""
        chain = []
        k = kid
        while k not in self.store.keyframes:
            parent, rel = self.store.culled[k]
            chain.append(rel)
            k = parent
        pose = self.store.keyframes[k].pose
        for rel in reversed(chain):
            pose = rel.compose(pose)
        return pose

    def world_to_camera(self) -> dict[int, PoseSE3]:
        with self.store.lock:
            return {fid: rel.compose(self.keyframe_pose(kid)) for fid, (kid, rel) in sorted(self._anchors.items())}

    def trajectory(self) -> Trajectory:
        poses = self.world_to_camera()
        ids = sorted(poses)
        return Trajectory.from_world_to_camera([self._timestamps[i] for i in ids], [poses[i] for i in ids])


def run(source, provider, cfg: RunConfig | None = None, return_system: bool = False):
    """Process every frame of ``source``; returns ``(Trajectory, RunStats)``.

    Tracking loss is recorded in the stats, not raised; only source or
    provider I/O errors propagate. ``return_system`` appends the
    :class:`System` (map, tracker trace) to the result.
    """
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    system = System(source.camera, cfg)
    try:
        for rec in source.frames:
            system.process(rec.index, rec.timestamp, provider(rec))
    finally:
        system.finish()
    system.stats.seconds = time.perf_counter() - t0
    if return_system:
        return system.trajectory(), system.stats, system
    return system.trajectory(), system.stats


def write_outputs(out_dir, traj: Trajectory, stats: RunStats, system: System | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", traj)
    (out / "stats.json").write_text(stats.to_json() + "\n")
    if system is not None and system.cfg.trace:
        system.tracker.write_trace(out / "trace.csv")
        with open(out / "mapping.csv", "w") as fh:
            fh.write("keyframe,new_points,fused_points,ba_initial_cost,ba_final_cost,culled\n")
            for r in system.mapping_reports:
                culled = " ".join(str(c) for c in r.culled)
                fh.write(f"{r.keyframe},{r.new_points},{r.fused_points},{r.ba_initial_cost!r},{r.ba_final_cost!r},{culled}\n")
    return out
