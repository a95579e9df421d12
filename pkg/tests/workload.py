"""Randomized map-store workload shared by the unit and acceptance tests."""

import numpy as np

from liftslam.features import FeatureSet
from liftslam.geometry import PoseSE3
from liftslam.mapstore import Frame, MapStore, StoreConfig

N_KP = 40


def make_frame(rng, fid, n=N_KP, links=None):
    fs = FeatureSet(rng.uniform(0, 640, (n, 2)), rng.normal(size=(n, 8)))
    f = Frame(fid, float(fid), fs, PoseSE3(translation=rng.normal(size=3)))
    if links is not None:
        f.links[:] = links
    return f


def free_slot(rng, kf):
    free = np.flatnonzero(kf.links < 0)
    return int(rng.choice(free)) if len(free) else None


def random_workload(n_ops, seed=0, check_every=0):
    """Apply ``n_ops`` random mutations; returns the store and per-op counts.

    With ``check_every`` > 0 the audit runs periodically and the first
    violation raises AssertionError with the op number.
    """
    rng = np.random.default_rng(seed)
    store = MapStore(StoreConfig(covis_min=3))
    counts = {}
    fid = 0
    for step in range(n_ops):
        kfs = list(store.keyframes)
        pts = list(store.points)
        r = rng.random()
        if r < 0.10 or len(kfs) < 3:
            op = "insert_keyframe"
            links = np.full(N_KP, -1)
            # a new keyframe inherits some tracked points
            for j, pid in enumerate(rng.permutation(pts)[: rng.integers(0, 15)] if pts else []):
                links[j] = pid
            store.insert_keyframe(make_frame(rng, fid, links=links))
            fid += 1
        elif r < 0.40:
            op = "add_map_point"
            chosen = rng.choice(kfs, size=min(len(kfs), rng.integers(1, 4)), replace=False)
            obs = {}
            for k in chosen:
                s = free_slot(rng, store.keyframes[int(k)])
                if s is not None:
                    obs[int(k)] = s
            if not obs:
                continue
            store.add_map_point(rng.normal(size=3), obs)
        elif r < 0.55 and pts:
            op = "add_observation"
            pid = int(rng.choice(pts))
            k = int(rng.choice(kfs))
            s = free_slot(rng, store.keyframes[k])
            if s is None or k in store.points[pid].observations:
                continue
            store.add_observation(pid, k, s)
        elif r < 0.68 and pts:
            op = "erase_observation"
            pid = int(rng.choice(pts))
            store.erase_observation(pid, int(rng.choice(list(store.points[pid].observations))))
        elif r < 0.78 and len(pts) >= 2:
            op = "merge_points"
            a, b = rng.choice(pts, 2, replace=False)
            store.merge_points(int(a), int(b))
        elif r < 0.86 and pts:
            op = "remove_map_point"
            store.remove_map_point(int(rng.choice(pts)))
        elif r < 0.89:
            op = "remove_keyframe"
            store.remove_keyframe(int(rng.choice(kfs)))
        else:
            op = "cull_keyframes"
            store.cull_keyframes()
        counts[op] = counts.get(op, 0) + 1
        if check_every and step % check_every == 0:
            issues = store.audit()
            if issues:
                raise AssertionError(f"op {step} ({op}): {issues[:3]}")
    return store, counts
