"""Keyframe-triggered map growth: triangulation against covisible keyframes,
duplicate fusion, local bundle adjustment and keyframe culling.

Runs synchronously on the tracking thread with the store lock held.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import distance_matrix, mutual_nearest, row_distances
from .geometry import (
    PARALLAX_MIN,
    CameraIntrinsics,
    fundamental_from_poses,
    project_many,
    sampson_sq,
    triangulate_many,
)
from .mapstore import MapStore
from .optimization import LMConfig, ReprojectionProblem, reprojection_errors, solve_lm


@dataclass
class MappingConfig:
    reproj_max: float = 2.0
    fuse_radius: float = 3.0
    max_neighbors: int = 10
    parallax_min: float = PARALLAX_MIN
    epipolar_px: float = 2.0  # Sampson distance gate for new matches
    min_baseline_ratio: float = 0.01  # baseline / median scene depth
    ba: LMConfig = field(default_factory=lambda: LMConfig(max_iters=10))
    local_ba: bool = True
    cull: bool = True


@dataclass
class MappingReport:
    keyframe: int
    new_points: int = 0
    fused_points: int = 0
    ba_initial_cost: float = 0.0
    ba_final_cost: float = 0.0
    culled: list = field(default_factory=list)
    pruned_observations: int = 0


def triangulation_neighbors(store: MapStore, kid: int, limit: int = 10):
    """Keyframes sharing at least one point with ``kid``, heaviest first."""
    return store.neighbors(kid, min_weight=1)[:limit]


def _median_depth(store: MapStore, kid: int):
    kf = store.keyframes[kid]
    pids = kf.point_ids()
    if len(pids) == 0:
        return None
    X = store.point_positions(pids)
    z = X @ kf.pose.R[2] + kf.pose.t[2]
    z = z[z > 0]
    return float(np.median(z)) if len(z) else None


def triangulate_new_points(store: MapStore, kid: int, neighbors, cam: CameraIntrinsics, th_low: float,
                           cfg: MappingConfig | None = None) -> list[int]:
    """Create points from unassociated features matched between ``kid`` and each neighbour."""
    cfg = cfg or MappingConfig()
    created = []
    with store.lock:
        kf = store.keyframes[kid]
        depth = _median_depth(store, kid)
        for nb in neighbors:
            if nb not in store.keyframes or nb == kid:
                continue
            other = store.keyframes[nb]
            baseline = np.linalg.norm(kf.center - other.center)
            if baseline == 0 or (depth is not None and baseline / depth < cfg.min_baseline_ratio):
                continue
            ia = np.flatnonzero(kf.links < 0)
            ib = np.flatnonzero(other.links < 0)
            if len(ia) == 0 or len(ib) == 0:
                continue
            D = distance_matrix(kf.features.descriptors[ia], other.features.descriptors[ib], kf.features.variant)
            qa, qb, _ = mutual_nearest(D, th_low)
            if len(qa) == 0:
                continue
            ia, ib = ia[qa], ib[qb]
            p1 = kf.features.keypoints[ia]
            p2 = other.features.keypoints[ib]
            F = fundamental_from_poses(kf.pose, other.pose, cam)
            ok = sampson_sq(F, p1, p2) < cfg.epipolar_px**2
            ia, ib, p1, p2 = ia[ok], ib[ok], p1[ok], p2[ok]
            if len(ia) == 0:
                continue
            X = triangulate_many(cam.normalize(p1), cam.normalize(p2), kf.pose, other.pose)
            good = np.all(np.isfinite(X), axis=1)
            Xs = np.where(good[:, None], X, 0.0)
            u1, _, ok1 = project_many(Xs, kf.pose, cam)
            u2, _, ok2 = project_many(Xs, other.pose, cam)
            good &= ok1 & ok2
            good &= np.linalg.norm(u1 - p1, axis=1) < cfg.reproj_max
            good &= np.linalg.norm(u2 - p2, axis=1) < cfg.reproj_max
            a = kf.center[None, :] - Xs
            b = other.center[None, :] - Xs
            par = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))
            good &= par >= cfg.parallax_min
            for x, i, j in zip(X[good], ia[good], ib[good]):
                created.append(store.add_map_point(x, {kid: int(i), nb: int(j)}))
    return created


def fuse_into(store: MapStore, kid: int, pids, cam: CameraIntrinsics, th_low: float, radius: float = 3.0) -> int:
    """Project ``pids`` into keyframe ``kid`` and attach or merge them.

    A projected point takes the nearest-descriptor keypoint within ``radius``
    px if the distance is below ``th_low``. A free keypoint gains the
    observation; a keypoint already linked to another point triggers a merge
    that keeps the point with more observations. Returns the number of fused
    points.
    """
    with store.lock:
        kf = store.keyframes.get(kid)
        if kf is None or len(kf.features) == 0:
            return 0
        pids = np.array([int(p) for p in pids if int(p) in store.points and kid not in store.points[int(p)].observations],
                        dtype=np.int64)
        if len(pids) == 0:
            return 0
        uv, _, ok = project_many(store.point_positions(pids), kf.pose, cam)
        ok &= cam.in_image(uv)
        pids, uv = pids[ok], uv[ok]
        if len(pids) == 0:
            return 0
        tree = cKDTree(kf.features.keypoints)
        cands = tree.query_ball_point(uv, radius)
        lens = np.array([len(c) for c in cands])
        if lens.sum() == 0:
            return 0
        rep = np.repeat(np.arange(len(pids)), lens)
        kps = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands if len(c)])
        d = row_distances(store.point_descriptors(pids)[rep], kf.features.descriptors[kps], kf.features.variant)
        keep = d < th_low
        rep, kps, d = rep[keep], kps[keep], d[keep]
        order = np.lexsort((kps, rep, d))
        fused, seen_pid, seen_kp = 0, set(), set()
        for o in order:
            pid, k = int(pids[rep[o]]), int(kps[o])
            if pid in seen_pid or k in seen_kp:
                continue
            seen_pid.add(pid)
            seen_kp.add(k)
            if pid not in store.points or kid in store.points[pid].observations:
                continue
            cur = int(kf.links[k])
            if cur < 0:
                store.add_observation(pid, kid, k)
            elif cur != pid and cur in store.points:
                a, b = store.points[pid], store.points[cur]
                if len(a.observations) > len(b.observations) or (len(a.observations) == len(b.observations) and pid < cur):
                    store.merge_points(keep=pid, drop=cur)
                else:
                    store.merge_points(keep=cur, drop=pid)
            else:
                continue
            fused += 1
        return fused


def fuse_duplicates(store: MapStore, kid: int, neighbors, cam: CameraIntrinsics, th_low: float,
                    radius: float = 3.0) -> int:
    """Fuse in both directions between ``kid`` and its neighbours."""
    with store.lock:
        if kid not in store.keyframes:
            return 0
        fused = 0
        own = [int(p) for p in store.keyframes[kid].point_ids()]
        for nb in neighbors:
            if nb in store.keyframes:
                fused += fuse_into(store, nb, own, cam, th_low, radius)
                own = [int(p) for p in store.keyframes[kid].point_ids()]
        theirs = sorted({int(p) for nb in neighbors if nb in store.keyframes for p in store.keyframes[nb].point_ids()})
        fused += fuse_into(store, kid, theirs, cam, th_low, radius)
        return fused


def bundle_adjust(store: MapStore, cam: CameraIntrinsics, free_kfs, point_ids=None, fixed_kfs=None,
                  cfg: LMConfig | None = None, reproj_max: float | None = None):
    """Refine ``free_kfs`` and the given points; other observers stay fixed.

    With ``reproj_max`` set, observations that still exceed it afterwards are
    erased. Returns ``(initial_cost, final_cost, pruned)``.
    """
    cfg = cfg or LMConfig(max_iters=10)
    with store.lock:
        free = sorted(k for k in free_kfs if k in store.keyframes)
        if point_ids is None:
            point_ids = sorted({int(p) for k in free for p in store.keyframes[k].point_ids()})
        pids = [int(p) for p in point_ids if int(p) in store.points]
        if not free or not pids:
            return 0.0, 0.0, 0
        kf_ids = list(free)
        fixed = set(fixed_kfs or ())
        for pid in pids:
            for k in store.points[pid].observations:
                if k not in free and k not in fixed:
                    fixed.add(k)
        kf_ids += sorted(fixed - set(free))
        if not fixed:
            # keep the gauge: the oldest keyframe does not move
            fixed.add(min(free))
        cidx = {k: i for i, k in enumerate(kf_ids)}
        ci, pi, uv = [], [], []
        for j, pid in enumerate(pids):
            for k, idx in store.points[pid].observations.items():
                if k in cidx:
                    ci.append(cidx[k])
                    pi.append(j)
                    uv.append(store.keyframes[k].features.keypoints[idx])
        prob = ReprojectionProblem(
            cam,
            [store.keyframes[k].pose for k in kf_ids],
            store.point_positions(pids),
            np.array(ci, dtype=np.int64),
            np.array(pi, dtype=np.int64),
            np.array(uv).reshape(-1, 2),
            fixed_poses=np.array([k in fixed for k in kf_ids]),
        )
        res = solve_lm(prob, cfg)
        for k, pose in zip(kf_ids, prob.poses):
            if k not in fixed:
                store.set_pose(k, pose)
        for pid, x in zip(pids, prob.points):
            store.set_point_position(pid, x)
        pruned = 0
        if reproj_max is not None:
            err = reprojection_errors(prob)
            for o in np.flatnonzero(~(err < reproj_max)):
                pid, k = pids[pi[o]], kf_ids[ci[o]]
                if pid in store.points and k in store.points[pid].observations:
                    store.erase_observation(pid, k)
                    pruned += 1
        return res.initial_cost, res.final_cost, pruned


def process_keyframe(store: MapStore, kid: int, cam: CameraIntrinsics, th_low: float,
                     cfg: MappingConfig | None = None) -> MappingReport:
    """Triangulate, fuse, run local BA and cull, in that order."""
    cfg = cfg or MappingConfig()
    rep = MappingReport(kid)
    with store.lock:
        nbs = triangulation_neighbors(store, kid, cfg.max_neighbors)
        rep.new_points = len(triangulate_new_points(store, kid, nbs, cam, th_low, cfg))
        nbs = triangulation_neighbors(store, kid, cfg.max_neighbors)
        rep.fused_points = fuse_duplicates(store, kid, nbs, cam, th_low, cfg.fuse_radius)
        if cfg.local_ba:
            kfs, pts = store.local_neighborhood(kid)
            rep.ba_initial_cost, rep.ba_final_cost, rep.pruned_observations = bundle_adjust(
                store, cam, kfs, pts, cfg=cfg.ba, reproj_max=cfg.reproj_max)
        if cfg.cull:
            rep.culled = store.cull_keyframes(exclude={kid})
    return rep
