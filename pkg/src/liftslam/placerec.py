"""Bag-of-words place recognition: vocabulary tree, BoW vectors, keyframe
database, loop detection and loop correction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import LoopRejected, MalformedFile, TooFewDescriptors, VariantMismatch
from .features import BINARY, FLOAT, FeatureSet, distance_matrix, mutual_nearest
from .geometry import CameraIntrinsics, PoseSE3, Sim3, project_many
from .optimization import PoseGraphEdge, optimize_pose_graph, solve_sim3


# ---------------------------------------------------------------------------
# vocabulary


def _hamming_kmeans(X, k, rng, iters=10):
    """Lloyd iterations with Hamming distance and bitwise-majority centroids."""
    n = len(X)
    first = int(rng.integers(n))
    centers = [X[first]]
    d = distance_matrix(X, X[first : first + 1], BINARY)[:, 0]
    for _ in range(1, k):
        p = d**2
        if p.sum() == 0:
            break
        c = int(rng.choice(n, p=p / p.sum()))
        centers.append(X[c])
        d = np.minimum(d, distance_matrix(X, X[c : c + 1], BINARY)[:, 0])
    C = np.array(centers)
    bits = np.unpackbits(X, axis=1)
    labels = np.argmin(distance_matrix(X, C, BINARY), axis=1)
    for _ in range(iters):
        newC = []
        for j in range(len(C)):
            m = labels == j
            newC.append(np.packbits(bits[m].mean(axis=0) >= 0.5) if m.any() else C[j])
        C = np.array(newC, dtype=np.uint8)
        new_labels = np.argmin(distance_matrix(X, C, BINARY), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return C, labels


def _float_kmeans(X, k, rng, iters=10):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        C, labels = kmeans2(X, k, iter=iters, minit="++", seed=rng)
    return C, labels


@dataclass
class Vocabulary:
    levels: int
    branching: int
    variant: str
    desc_len: int
    centers: np.ndarray  # (nodes, D); row 0 is the root
    parent: np.ndarray  # (nodes,)
    weights: np.ndarray  # idf per node, 0 for internal nodes
    children: list = field(default_factory=list)  # node -> array of child ids

    def __post_init__(self):
        if not self.children:
            self.children = [[] for _ in range(len(self.parent))]
            for nid in range(1, len(self.parent)):
                self.children[int(self.parent[nid])].append(nid)
        self.children = [np.asarray(c, dtype=np.int64) for c in self.children]

    @property
    def leaves(self):
        return np.array([i for i, c in enumerate(self.children) if len(c) == 0 and i != 0], dtype=np.int64)

    def __len__(self):
        return len(self.leaves)

    @classmethod
    def build(cls, descriptors, levels=6, branching=10, variant=FLOAT, seed=0, groups=None, kmeans_iters=10):
        """Hierarchical k-means with k-means++ seeding.

        ``groups`` optionally assigns each descriptor to a document (e.g. an
        image) for the idf statistics; by default each descriptor counts as
        its own document.
        """
        X = np.asarray(descriptors, dtype=np.uint8 if variant == BINARY else np.float64)
        if X.ndim != 2 or len(X) < branching:
            raise TooFewDescriptors(f"need at least {branching} training descriptors, got {len(X)}")
        if levels < 1 or branching < 2:
            raise ValueError("levels must be >= 1 and branching >= 2")
        rng = np.random.default_rng(seed)
        centers = [np.zeros(X.shape[1], dtype=X.dtype)]
        parent = [-1]
        members = {0: np.arange(len(X))}
        frontier = [(0, 0)]
        while frontier:
            nxt = []
            for nid, depth in frontier:
                idx = members.pop(nid)
                if depth >= levels or len(idx) == 0:
                    continue
                sub = X[idx]
                uniq, inv = np.unique(sub, axis=0, return_inverse=True)
                inv = inv.ravel()
                if len(uniq) <= branching:
                    C, labels = uniq, inv
                    split = False
                else:
                    kmeans = _hamming_kmeans if variant == BINARY else _float_kmeans
                    C, labels = kmeans(sub, branching, rng, kmeans_iters)
                    split = True
                for j in range(len(C)):
                    m = labels == j
                    if not m.any():
                        continue
                    cid = len(parent)
                    parent.append(nid)
                    centers.append(np.asarray(C[j], dtype=X.dtype))
                    members[cid] = idx[m]
                    if split:
                        nxt.append((cid, depth + 1))
            frontier = nxt
        vocab = cls(levels, branching, variant, X.shape[1], np.array(centers), np.array(parent), np.zeros(len(parent)))
        # idf from the training set
        words = vocab.transform(X)
        docs = np.arange(len(X)) if groups is None else np.asarray(groups)
        n_docs = len(np.unique(docs))
        pairs = np.unique(np.stack([words, docs], axis=1), axis=0)
        n_i = np.bincount(pairs[:, 0], minlength=len(parent))
        w = np.zeros(len(parent))
        used = n_i > 0
        w[used] = np.log(n_docs / n_i[used])
        vocab.weights = w
        return vocab

    def transform(self, descriptors) -> np.ndarray:
        """Leaf word id of each descriptor, descending greedily through the tree."""
        X = np.asarray(descriptors)
        if len(X) == 0:
            return np.zeros(0, dtype=np.int64)
        if X.shape[1] != self.desc_len:
            raise VariantMismatch(f"descriptor length {X.shape[1]} vs vocabulary {self.desc_len}")
        node = np.zeros(len(X), dtype=np.int64)
        has_children = np.array([len(c) > 0 for c in self.children])
        while True:
            rows = np.flatnonzero(has_children[node])
            if len(rows) == 0:
                return node
            # group the active rows by current node with one sort per level
            rows = rows[np.argsort(node[rows], kind="stable")]
            nids, starts = np.unique(node[rows], return_index=True)
            for nid, grp in zip(nids, np.split(rows, starts[1:])):
                ch = self.children[nid]
                D = distance_matrix(X[grp], self.centers[ch], self.variant)
                node[grp] = ch[np.argmin(D, axis=1)]

    def save(self, path):
        lines = [f"VOCAB v1 {self.levels} {self.branching} {self.variant} {self.desc_len}"]
        for nid in range(len(self.parent)):
            if self.variant == BINARY:
                payload = " ".join(f"{int(v):02x}" for v in self.centers[nid])
            else:
                payload = " ".join(f"{float(v):.17g}" for v in self.centers[nid])
            lines.append(f"{nid} {int(self.parent[nid])} {float(self.weights[nid]):.17g} {payload}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        lines = path.read_text().splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 6 or head[:2] != ["VOCAB", "v1"] or head[4] not in (FLOAT, BINARY):
            raise MalformedFile(f"{path}:1: bad vocabulary header")
        levels, branching, variant, dlen = int(head[2]), int(head[3]), head[4], int(head[5])
        dtype = np.uint8 if variant == BINARY else np.float64
        body = [ln for ln in lines[1:] if ln.strip()]
        centers = np.zeros((len(body), dlen), dtype=dtype)
        parent = np.zeros(len(body), dtype=np.int64)
        weights = np.zeros(len(body))
        for i, ln in enumerate(body):
            tok = ln.split()
            if len(tok) != 3 + dlen or int(tok[0]) != i:
                raise MalformedFile(f"{path}:{i + 2}: bad node record")
            parent[i] = int(tok[1])
            weights[i] = float(tok[2])
            centers[i] = [int(t, 16) for t in tok[3:]] if variant == BINARY else [float(t) for t in tok[3:]]
        return cls(levels, branching, variant, dlen, centers, parent, weights)


def to_bow(features, vocab: Vocabulary) -> dict:
    """tf-idf word histogram, L1-normalized; ``{}`` for an empty frame."""
    if isinstance(features, FeatureSet):
        if len(features) and features.variant != vocab.variant:
            raise VariantMismatch(f"features are {features.variant}, vocabulary is {vocab.variant}")
        X = features.descriptors
    else:
        X = np.asarray(features)
    if len(X) == 0:
        return {}
    words = vocab.transform(X)
    ids, counts = np.unique(words, return_counts=True)
    tf = counts / len(words)
    w = tf * vocab.weights[ids]
    if w.sum() <= 0:
        w = tf  # every word is uninformative; fall back to term frequency
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return {int(i): float(v) for i, v in zip(ids[keep], w)}


def l2_score(a: dict, b: dict) -> float:
    if not a or not b:
        return 0.0
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    d2 = 0.0
    for k in a.keys() | b.keys():
        d = a.get(k, 0.0) / na - b.get(k, 0.0) / nb
        d2 += d * d
    return min(1.0, max(0.0, 1.0 - 0.5 * math.sqrt(d2)))


class KeyFrameDatabase:
    """Inverted index from word id to the keyframes containing it."""

    def __init__(self):
        self.index: dict[int, list[int]] = {}
        self.bows: dict[int, dict] = {}

    def __len__(self):
        return len(self.bows)

    def add(self, kid: int, bow: dict):
        if kid in self.bows:
            self.remove(kid)
        self.bows[kid] = dict(bow)
        for w in bow:
            lst = self.index.setdefault(w, [])
            pos = int(np.searchsorted(lst, kid))
            if pos == len(lst) or lst[pos] != kid:
                lst.insert(pos, kid)

    def remove(self, kid: int):
        bow = self.bows.pop(kid, None)
        if bow is None:
            return
        for w in bow:
            lst = self.index.get(w, [])
            if kid in lst:
                lst.remove(kid)
            if not lst:
                self.index.pop(w, None)

    def candidates(self, bow: dict) -> set:
        out = set()
        for w in bow:
            out.update(self.index.get(w, ()))
        return out

    def query(self, bow: dict, min_score: float = 0.05, exclude=()):
        """``[(kid, score)]`` sharing a word with ``bow``, best first, ties by id."""
        exclude = set(exclude)
        scored = [(k, l2_score(bow, self.bows[k])) for k in self.candidates(bow) if k not in exclude]
        scored = [(k, s) for k, s in scored if s >= min_score]
        return sorted(scored, key=lambda t: (-t[1], t[0]))

    def query_relocalization(self, bow: dict, min_score: float = 0.05):
        return [k for k, _ in self.query(bow, min_score)]


# ---------------------------------------------------------------------------
# loop detection


@dataclass
class LoopConfig:
    reloc_min_score: float = 0.05
    min_group: int = 3
    temporal_gap: int = 10  # ignore the most recent keyframes
    sim3_min_inliers: int = 20
    ransac_iters: int = 200
    reproj_px: float = 3.0
    fuse_radius: float = 3.0
    strong_covis: int = 100
    seed: int = 0
    global_ba: bool = True


@dataclass
class LoopCandidate:
    current: int
    candidate: int
    score: float
    group: list


def detect_loop(kid: int, store, db: KeyFrameDatabase, cfg: LoopConfig | None = None) -> LoopCandidate | None:
    """Accept a candidate only when it belongs to a clique of mutually covisible candidates."""
    cfg = cfg or LoopConfig()
    with store.lock:
        kf = store.keyframes[kid]
        bow = kf.bow
        if not bow:
            return None
        neighbors = store.neighbors(kid)
        linked = set(store.covis.get(kid, {}))
        recent = set(sorted(k for k in store.keyframes if k < kid)[-cfg.temporal_gap :]) if cfg.temporal_gap else set()
        baseline = min((l2_score(bow, store.keyframes[n].bow) for n in neighbors), default=0.0)
        exclude = {kid} | set(neighbors) | linked | recent | {k for k in db.bows if k > kid}
        scored = [(k, s) for k, s in db.query(bow, cfg.reloc_min_score, exclude) if s > baseline and k in store.keyframes]
        if len(scored) < cfg.min_group:
            return None
        adj = {k: set(store.neighbors(k)) for k, _ in scored}
        score_of = dict(scored)
        for seed_kf, _ in scored:
            group = [seed_kf]
            for other, _ in scored:
                if other != seed_kf and all(other in adj[g] for g in group):
                    group.append(other)
            if len(group) >= cfg.min_group:
                best = max(group, key=lambda g: (score_of[g], -g))
                return LoopCandidate(kid, best, score_of[best], sorted(group))
        return None


# ---------------------------------------------------------------------------
# loop correction


def _sim3_of(pose: PoseSE3) -> Sim3:
    return Sim3.from_se3(pose)


def _two_way_inliers(S: Sim3, A, B, uv_a, uv_b, pose_a, pose_b, cam, thr):
    """Pairs consistent when ``A`` is mapped by ``S`` into ``b``'s camera and vice versa."""
    ua, _, oka = project_many(S.act(A), pose_b, cam)
    ub, _, okb = project_many(S.inverse().act(B), pose_a, cam)
    e1 = np.sum((ua - uv_b) ** 2, axis=1)
    e2 = np.sum((ub - uv_a) ** 2, axis=1)
    return oka & okb & (e1 < thr * thr) & (e2 < thr * thr)


@dataclass
class LoopResult:
    current: int
    candidate: int
    sim3: Sim3
    inliers: int
    fused: int
    corrected: list


def compute_loop_sim3(store, cand: LoopCandidate, cam: CameraIntrinsics, th_low: float, cfg: LoopConfig):
    """Geometric validation without touching the map; raises ``LoopRejected``."""
    cur = store.keyframes[cand.current]
    loop = store.keyframes[cand.candidate]
    ia = np.flatnonzero(cur.links >= 0)
    ib = np.flatnonzero(loop.links >= 0)
    if len(ia) < 3 or len(ib) < 3:
        raise LoopRejected("not enough map points to match")
    pa = cur.links[ia]
    pb = loop.links[ib]
    variant = cur.features.variant
    D = distance_matrix(store.point_descriptors(pa), store.point_descriptors(pb), variant)
    qa, qb, _ = mutual_nearest(D, th_low)
    if len(qa) < 3:
        raise LoopRejected(f"only {len(qa)} point matches")
    A = store.point_positions(pa[qa])
    B = store.point_positions(pb[qb])
    uv_a = cur.features.keypoints[ia[qa]]
    uv_b = loop.features.keypoints[ib[qb]]
    rng = np.random.default_rng(cfg.seed)
    best, best_mask = None, None
    n = len(qa)
    for _ in range(cfg.ransac_iters):
        tri = rng.choice(n, 3, replace=False)
        try:
            S = solve_sim3(A[tri], B[tri])
        except Exception:
            continue
        mask = _two_way_inliers(S, A, B, uv_a, uv_b, cur.pose, loop.pose, cam, cfg.reproj_px)
        if best_mask is None or mask.sum() > best_mask.sum():
            best, best_mask = S, mask
            if mask.all():
                break
    if best is None or best_mask.sum() < max(cfg.sim3_min_inliers, 3):
        got = 0 if best_mask is None else int(best_mask.sum())
        raise LoopRejected(f"{got} Sim3 inliers, need {cfg.sim3_min_inliers}")
    for _ in range(2):
        S = solve_sim3(A[best_mask], B[best_mask])
        mask = _two_way_inliers(S, A, B, uv_a, uv_b, cur.pose, loop.pose, cam, cfg.reproj_px)
        if mask.sum() < cfg.sim3_min_inliers:
            break
        best, best_mask = S, mask
    if best_mask.sum() < cfg.sim3_min_inliers:
        raise LoopRejected("too few inliers after refinement")
    pairs = list(zip(pa[qa][best_mask].tolist(), pb[qb][best_mask].tolist()))
    return best, pairs


def close_loop(store, db: KeyFrameDatabase, cand: LoopCandidate, cam: CameraIntrinsics, th_low: float,
               cfg: LoopConfig | None = None, fuse=None, bundle_adjust=None) -> LoopResult:
    """Validate ``cand`` and, if it holds, correct the map.

    ``S`` maps the current (drifted) world frame onto the loop's frame. On
    rejection ``LoopRejected`` propagates and the store is untouched.
    ``fuse(kid, point_ids)`` merges projected duplicates into a keyframe and
    ``bundle_adjust()`` optionally refines the whole map afterwards.
    """
    cfg = cfg or LoopConfig()
    with store.lock:
        S, pairs = compute_loop_sim3(store, cand, cam, th_low, cfg)

        before = {k: _sim3_of(kf.pose) for k, kf in store.keyframes.items()}
        cur_T = before[cand.current]
        corrected_cur = cur_T.compose(S.inverse())
        hood = sorted({cand.current, *store.neighbors(cand.current)})
        loop_group = sorted({cand.candidate, *store.neighbors(cand.candidate)} - set(hood))
        initial = dict(before)
        for k in hood:
            rel = before[k].compose(cur_T.inverse())
            initial[k] = rel.compose(corrected_cur)
        # strong and spanning edges measured with the drifted (locally consistent) poses
        edges = []
        seen = set()
        for k, kf in store.keyframes.items():
            if kf.parent is not None and kf.parent in store.keyframes:
                key = (min(k, kf.parent), max(k, kf.parent))
                if key not in seen:
                    seen.add(key)
                    edges.append(PoseGraphEdge(key[0], key[1], before[key[1]].compose(before[key[0]].inverse())))
            for nb, w in store.covis[k].items():
                key = (min(k, nb), max(k, nb))
                if w >= cfg.strong_covis and key not in seen:
                    seen.add(key)
                    edges.append(PoseGraphEdge(key[0], key[1], before[key[1]].compose(before[key[0]].inverse())))

        # move neighbourhood keyframes and the points they anchor into the loop frame
        moved_points = set()
        for k in hood:
            store.set_pose(k, initial[k].to_se3())
        for k in hood:
            for pid in store.keyframes[k].point_ids():
                pid = int(pid)
                p = store.points.get(pid)
                if p is None or pid in moved_points or p.reference_kf not in hood:
                    continue
                ref = p.reference_kf
                X = initial[ref].inverse().act(before[ref].act(p.position[None]))[0]
                store.set_point_position(pid, X)
                moved_points.add(pid)

        fused = 0
        for a, b in pairs:
            if a in store.points and b in store.points and a != b:
                store.merge_points(keep=b, drop=a)
                fused += 1
        if fuse is not None:
            group_points = sorted({int(p) for k in loop_group + [cand.candidate] if k in store.keyframes
                                   for p in store.keyframes[k].point_ids()})
            for k in hood:
                fused += fuse(k, group_points)

        for i in hood:
            for j in loop_group:
                if i in store.keyframes and j in store.keyframes:
                    key = (min(i, j), max(i, j))
                    if key not in seen:
                        seen.add(key)
                        edges.append(PoseGraphEdge(key[0], key[1], initial[key[1]].compose(initial[key[0]].inverse()), 1.0))

        live = {k: initial[k] for k in store.keyframes}
        edges = [e for e in edges if e.i in live and e.j in live]
        optimized = optimize_pose_graph(live, edges, fixed={min(live)})
        for k, Sk in optimized.items():
            store.set_pose(k, Sk.to_se3())
        for pid, p in store.points.items():
            ref = p.reference_kf
            X = optimized[ref].inverse().act(initial[ref].act(p.position[None]))[0]
            store.set_point_position(pid, X)
        if bundle_adjust is not None and cfg.global_ba:
            bundle_adjust()
        return LoopResult(cand.current, cand.candidate, S, len(pairs), fused, hood)
