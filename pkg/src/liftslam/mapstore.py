"""Frames, keyframes, map points and the covisibility graph.

The store keeps raw shared-point counts for every keyframe pair that shares
at least one point; ``neighbors`` only exposes edges whose weight reaches
``covis_min``. All public methods hold the store's re-entrant lock.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DanglingKeyFrame, NoPose, UnknownKeyFrame
from .features import FeatureSet, distance_matrix
from .geometry import PoseSE3


@dataclass
class Frame:
    id: int
    timestamp: float
    features: FeatureSet
    pose: PoseSE3 | None = None
    links: np.ndarray | None = None  # map-point id per keypoint, -1 when unmatched
    outliers: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.features)
        if self.links is None:
            self.links = np.full(n, -1, dtype=np.int64)
        if self.outliers is None:
            self.outliers = np.zeros(n, dtype=bool)
        if len(self.links) != n or len(self.outliers) != n:
            raise ValueError("link arrays must match the keypoint count")


@dataclass
class KeyFrame:
    id: int
    frame_id: int
    timestamp: float
    features: FeatureSet
    pose: PoseSE3
    links: np.ndarray
    bow: dict = field(default_factory=dict)
    parent: int | None = None
    tracked_points: int = 0

    @property
    def center(self):
        return self.pose.center

    def point_ids(self):
        return self.links[self.links >= 0]


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observations: dict  # keyframe id -> keypoint index
    descriptor: np.ndarray
    reference_kf: int
    found: int = 1
    visible: int = 1


@dataclass
class StoreConfig:
    covis_min: int = 15
    redundancy_fraction: float = 0.9
    redundancy_observers: int = 3


class MapStore:
    def __init__(self, cfg: StoreConfig | None = None):
        self.cfg = cfg or StoreConfig()
        self.lock = threading.RLock()
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.covis: dict[int, dict[int, int]] = {}
        # culled keyframe id -> (parent id, pose relative to parent)
        self.culled: dict[int, tuple[int, PoseSE3]] = {}
        self.protected: set[int] = set()
        self.variant = None
        self._next_kf = 0
        self._next_pt = 0

    # -- keyframes ---------------------------------------------------------

    def insert_keyframe(self, frame: Frame, bow: dict | None = None) -> int:
        """Promote ``frame``; its live links become observations."""
        if frame.pose is None:
            raise NoPose(f"frame {frame.id} has no pose")
        with self.lock:
            kid = self._next_kf
            self._next_kf += 1
            links = np.full(len(frame.features), -1, dtype=np.int64)
            kf = KeyFrame(kid, frame.id, frame.timestamp, frame.features, frame.pose, links, dict(bow or {}))
            self.keyframes[kid] = kf
            self.covis[kid] = {}
            if self.variant is None and len(frame.features):
                self.variant = frame.features.variant
            if len(self.protected) < 2:
                self.protected.add(kid)
            for i, pid in enumerate(frame.links):
                pid = int(pid)
                if pid < 0 or frame.outliers[i] or pid not in self.points:
                    continue
                if kid in self.points[pid].observations:
                    continue
                self._link(pid, kid, i)
            for pid in set(kf.point_ids().tolist()):
                self._refresh_descriptor(pid)
            kf.tracked_points = int((kf.links >= 0).sum())
            kf.parent = self._best_parent(kid)
            return kid

    def _best_parent(self, kid):
        best = None
        for nb, w in self.covis[kid].items():
            if best is None or w > best[1] or (w == best[1] and nb < best[0]):
                best = (nb, w)
        if best is not None:
            return best[0]
        earlier = [k for k in self.keyframes if k < kid]
        return max(earlier) if earlier else None

    def remove_keyframe(self, kid: int):
        with self.lock:
            kf = self._kf(kid)
            for i in np.flatnonzero(kf.links >= 0):
                self.erase_observation(int(kf.links[i]), kid)
            for nb in list(self.covis[kid]):
                del self.covis[nb][kid]
            del self.covis[kid]
            parent = kf.parent if kf.parent in self.keyframes and kf.parent != kid else None
            if parent is None:
                others = [k for k in self.keyframes if k != kid]
                parent = min(others, key=lambda k: (abs(k - kid), k)) if others else None
            for other in self.keyframes.values():
                if other.parent == kid:
                    other.parent = parent if parent != other.id else None
            if parent is not None:
                self.culled[kid] = (parent, kf.pose.compose(self.keyframes[parent].pose.inverse()))
            self.protected.discard(kid)
            for p in self.points.values():
                if p.reference_kf == kid:
                    p.reference_kf = min(p.observations)
            del self.keyframes[kid]

    def keyframe_ids(self):
        return sorted(self.keyframes)

    def _kf(self, kid) -> KeyFrame:
        try:
            return self.keyframes[kid]
        except KeyError:
            raise UnknownKeyFrame(f"keyframe {kid} is not alive") from None

    def set_pose(self, kid, pose: PoseSE3):
        with self.lock:
            self._kf(kid).pose = pose

    # -- map points --------------------------------------------------------

    def add_map_point(self, position, observations: dict, descriptor=None) -> int:
        """Create a point observed by ``observations`` (keyframe id -> keypoint index)."""
        if not observations:
            raise ValueError("a map point needs at least one observation")
        with self.lock:
            for kid, idx in observations.items():
                if kid not in self.keyframes:
                    raise DanglingKeyFrame(f"keyframe {kid} is not alive")
                kf = self.keyframes[kid]
                if not 0 <= idx < len(kf.links):
                    raise IndexError(f"keypoint {idx} out of range in keyframe {kid}")
                if kf.links[idx] >= 0:
                    raise ValueError(f"keypoint {idx} of keyframe {kid} already observes point {kf.links[idx]}")
            pid = self._next_pt
            self._next_pt += 1
            first = min(observations)
            d = self.keyframes[first].features.descriptors[observations[first]]
            self.points[pid] = MapPoint(
                pid, np.array(position, dtype=float).reshape(3), {}, np.array(d) if descriptor is None else np.asarray(descriptor),
                reference_kf=first,
            )
            for kid, idx in sorted(observations.items()):
                self._link(pid, kid, int(idx))
            self._refresh_descriptor(pid)
            return pid

    def remove_map_point(self, pid: int):
        with self.lock:
            p = self.points[pid]
            for kid in list(p.observations):
                self._unlink(pid, kid)
            del self.points[pid]

    def add_observation(self, pid: int, kid: int, idx: int):
        with self.lock:
            kf = self._kf(kid)
            if pid not in self.points:
                raise KeyError(f"map point {pid} is not alive")
            if kid in self.points[pid].observations:
                raise ValueError(f"point {pid} already observed by keyframe {kid}")
            if kf.links[idx] >= 0:
                raise ValueError(f"keypoint {idx} of keyframe {kid} already linked")
            self._link(pid, kid, idx)
            self._refresh_descriptor(pid)

    def erase_observation(self, pid: int, kid: int):
        """Drop one observation; a point left without observations is removed."""
        with self.lock:
            self._unlink(pid, kid)
            p = self.points[pid]
            if not p.observations:
                del self.points[pid]
                return
            if p.reference_kf == kid:
                p.reference_kf = min(p.observations)
            self._refresh_descriptor(pid)

    def merge_points(self, keep: int, drop: int):
        """Fold ``drop`` into ``keep``: observations union, ``drop`` removed."""
        if keep == drop:
            return
        with self.lock:
            pk, pd = self.points[keep], self.points[drop]
            pk.found += pd.found
            pk.visible += pd.visible
            for kid, idx in sorted(pd.observations.items()):
                self._unlink(drop, kid)
                if kid not in pk.observations:
                    self._link(keep, kid, idx)
            del self.points[drop]
            self._refresh_descriptor(keep)

    def set_point_position(self, pid, position):
        with self.lock:
            self.points[pid].position = np.array(position, dtype=float).reshape(3)

    def point_positions(self, ids):
        return np.array([self.points[int(i)].position for i in ids]).reshape(-1, 3)

    def point_descriptors(self, ids):
        return np.array([self.points[int(i)].descriptor for i in ids])

    # -- internal link maintenance -----------------------------------------

    def _link(self, pid, kid, idx):
        p = self.points[pid]
        kf = self.keyframes[kid]
        for other in p.observations:
            self._bump(kid, other, +1)
        p.observations[kid] = idx
        kf.links[idx] = pid

    def _unlink(self, pid, kid):
        p = self.points[pid]
        idx = p.observations.pop(kid)
        self.keyframes[kid].links[idx] = -1
        for other in p.observations:
            self._bump(kid, other, -1)

    def _bump(self, a, b, delta):
        for x, y in ((a, b), (b, a)):
            w = self.covis[x].get(y, 0) + delta
            if w > 0:
                self.covis[x][y] = w
            else:
                self.covis[x].pop(y, None)

    def _refresh_descriptor(self, pid):
        """Representative = observation descriptor with the least median distance to the rest."""
        p = self.points[pid]
        descs = np.array([self.keyframes[k].features.descriptors[i] for k, i in sorted(p.observations.items())])
        if len(descs) <= 2:
            p.descriptor = descs[0].copy()
            return
        variant = self.keyframes[p.reference_kf].features.variant
        D = distance_matrix(descs, descs, variant)
        p.descriptor = descs[int(np.argmin(np.median(D, axis=1)))].copy()

    # -- graph queries -----------------------------------------------------

    def weight(self, a, b) -> int:
        return self.covis.get(a, {}).get(b, 0)

    def neighbors(self, kid, min_weight=None):
        """Covisible keyframes (weight >= covis_min), heaviest first, ties by id."""
        mw = self.cfg.covis_min if min_weight is None else min_weight
        with self.lock:
            self._kf(kid)
            items = [(nb, w) for nb, w in self.covis[kid].items() if w >= mw]
        return [nb for nb, _ in sorted(items, key=lambda t: (-t[1], t[0]))]

    def local_neighborhood(self, kid):
        """The keyframe with its covisible neighbours, and every point they observe."""
        with self.lock:
            kfs = sorted({kid, *self.neighbors(kid)})
            pts = set()
            for k in kfs:
                pts.update(int(p) for p in self.keyframes[k].point_ids())
            return kfs, sorted(pts)

    # -- culling -----------------------------------------------------------

    def redundant(self, kid) -> bool:
        kf = self.keyframes[kid]
        pids = kf.point_ids()
        if len(pids) == 0:
            return False
        need = self.cfg.redundancy_observers
        red = sum(1 for pid in pids if len(self.points[int(pid)].observations) - 1 >= need)
        return red >= self.cfg.redundancy_fraction * len(pids)

    def cull_keyframes(self, exclude=()) -> list[int]:
        """Remove redundant keyframes, newest first; the first two are kept."""
        removed = []
        with self.lock:
            if len(self.keyframes) < 3:
                return removed
            for kid in sorted(self.keyframes, reverse=True):
                if kid in self.protected or kid in exclude or len(self.keyframes) <= 2:
                    continue
                if self.redundant(kid):
                    self.remove_keyframe(kid)
                    removed.append(kid)
        return removed

    # -- consistency -------------------------------------------------------

    def audit(self) -> list[str]:
        issues = []
        with self.lock:
            counts: dict[tuple[int, int], int] = {}
            for pid, p in self.points.items():
                if not p.observations:
                    issues.append(f"point {pid} has no observations")
                if p.reference_kf not in p.observations:
                    issues.append(f"point {pid} reference keyframe {p.reference_kf} does not observe it")
                obs = sorted(p.observations)
                for kid in obs:
                    if kid not in self.keyframes:
                        issues.append(f"point {pid} observed by dead keyframe {kid}")
                        continue
                    idx = p.observations[kid]
                    if self.keyframes[kid].links[idx] != pid:
                        issues.append(f"point {pid} -> keyframe {kid}[{idx}] back-link broken")
                for i, a in enumerate(obs):
                    for b in obs[i + 1 :]:
                        counts[(a, b)] = counts.get((a, b), 0) + 1
            for kid, kf in self.keyframes.items():
                for idx in np.flatnonzero(kf.links >= 0):
                    pid = int(kf.links[idx])
                    if pid not in self.points or self.points[pid].observations.get(kid) != idx:
                        issues.append(f"keyframe {kid}[{idx}] -> point {pid} not reciprocated")
            for a, nbs in self.covis.items():
                if a not in self.keyframes:
                    issues.append(f"covisibility row for dead keyframe {a}")
                for b, w in nbs.items():
                    if a == b:
                        issues.append(f"self edge on {a}")
                    if b not in self.keyframes:
                        issues.append(f"edge {a}-{b} to dead keyframe")
                    if self.covis.get(b, {}).get(a) != w:
                        issues.append(f"edge {a}-{b} asymmetric")
                    if a < b and counts.get((a, b), 0) != w:
                        issues.append(f"edge {a}-{b} weight {w} != {counts.get((a, b), 0)}")
            for (a, b), c in counts.items():
                if self.covis.get(a, {}).get(b) != c:
                    issues.append(f"missing edge {a}-{b} (count {c})")
            for kid in self.keyframes:
                if kid not in self.covis:
                    issues.append(f"keyframe {kid} missing from covisibility")
        return issues

    # -- export ------------------------------------------------------------

    def export_text(self) -> str:
        with self.lock:
            lines = ["MAP v1"]
            for kid in sorted(self.keyframes):
                kf = self.keyframes[kid]
                M = np.hstack([kf.pose.R, kf.pose.t[:, None]]).ravel()
                lines.append(f"KF {kid} {kf.timestamp!r} " + " ".join(repr(float(v)) for v in M))
            for pid in sorted(self.points):
                p = self.points[pid]
                obs = " ".join(f"{k} {i}" for k, i in sorted(p.observations.items()))
                lines.append(f"MP {pid} " + " ".join(repr(float(v)) for v in p.position) + f" {obs}")
            return "\n".join(lines) + "\n"

    def stats(self):
        with self.lock:
            return {"keyframes": len(self.keyframes), "map_points": len(self.points)}
