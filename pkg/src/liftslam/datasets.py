"""Sequence sources: KITTI-odometry and EuRoC layouts, image decoding, and the
synthetic world used for ground-truth experiments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .errors import MalformedCalib, MalformedFile, MissingImages
from .evaluation import Trajectory, read_kitti
from .features import SyntheticFeatureProvider
from .geometry import CameraIntrinsics, PoseSE3, load_camera, project_many

IMAGE_SUFFIXES = (".png", ".pgm")


def read_image(path) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]; color is converted by luminance."""
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise MissingImages(f"cannot read image {path}")
    if img.ndim == 3:
        code = cv2.COLOR_BGRA2GRAY if img.shape[2] == 4 else cv2.COLOR_BGR2GRAY
        img = cv2.cvtColor(img, code)
    if img.dtype != np.uint8:
        raise MalformedFile(f"{path}: only 8-bit images are supported, got {img.dtype}")
    return img.astype(float) / 255.0


def write_image(path, img):
    import cv2

    q = np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write image {path}")


@dataclass
class FrameRecord:
    index: int
    name: str
    timestamp: float
    path: Path | None = None

    def load_image(self):
        if self.path is None:
            raise MissingImages(f"frame {self.name} has no image")
        return read_image(self.path)


@dataclass
class SequenceSource:
    frames: list
    camera: CameraIntrinsics
    ground_truth: Trajectory | None = None
    name: str = ""

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise MalformedFile(f"{self.name}: frame timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


# ---------------------------------------------------------------------------
# KITTI odometry


def _kitti_calib(path: Path, image_size) -> CameraIntrinsics:
    if not path.exists():
        raise MalformedCalib(f"{path}: calibration file missing")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.startswith("P0:"):
            try:
                P = np.array([float(v) for v in line.split()[1:]]).reshape(3, 4)
            except ValueError:
                raise MalformedCalib(f"{path}:{lineno}: P0 needs 12 numbers") from None
            w, h = image_size
            try:
                return CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], w, h)
            except ValueError as exc:
                raise MalformedCalib(f"{path}:{lineno}: {exc}") from None
    raise MalformedCalib(f"{path}: no P0 line")


def open_kitti(directory, poses=None) -> SequenceSource:
    """``image_0/`` (or ``images/``), ``calib.txt``, optional ``times.txt`` and poses."""
    d = Path(directory)
    img_dir = next((d / n for n in ("image_0", "images") if (d / n).is_dir()), None)
    if img_dir is None:
        raise MissingImages(f"{d}: no image_0/ or images/ directory")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise MissingImages(f"{img_dir}: no images")
    first = read_image(images[0])
    cam = _kitti_calib(d / "calib.txt", (first.shape[1], first.shape[0]))
    times_file = d / "times.txt"
    if times_file.exists():
        ts = []
        for lineno, line in enumerate(times_file.read_text().splitlines(), 1):
            if line.strip():
                try:
                    ts.append(float(line))
                except ValueError:
                    raise MalformedFile(f"{times_file}:{lineno}: bad timestamp {line!r}") from None
        if len(ts) != len(images):
            raise MalformedFile(f"{times_file}: {len(ts)} timestamps for {len(images)} images")
    else:
        ts = [0.1 * i for i in range(len(images))]
    frames = [FrameRecord(i, p.stem, t, p) for i, (p, t) in enumerate(zip(images, ts))]
    gt = None
    pose_file = Path(poses) if poses else next((d / n for n in ("poses.txt", "groundtruth.txt") if (d / n).exists()), None)
    if pose_file is not None:
        gt = read_kitti(pose_file, ts)
    return SequenceSource(frames, cam, gt, d.name)


# ---------------------------------------------------------------------------
# EuRoC


def _euroc_calib(path: Path, size_hint=None) -> CameraIntrinsics:
    if not path.exists():
        raise MalformedCalib(f"{path}: sensor.yaml missing")
    try:
        doc = yaml.safe_load(path.read_text().replace("%YAML:1.0", ""))
        fx, fy, cx, cy = (float(v) for v in doc["intrinsics"])
        w, h = (int(v) for v in doc["resolution"])
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise MalformedCalib(f"{path}: {exc}") from None


def open_euroc(directory) -> SequenceSource:
    d = Path(directory)
    cam_dir = d / "mav0" / "cam0"
    if not cam_dir.is_dir():
        cam_dir = d / "cam0"
    data_csv = cam_dir / "data.csv"
    if not data_csv.exists():
        raise MissingImages(f"{data_csv} missing")
    cam = _euroc_calib(cam_dir / "sensor.yaml")
    frames = []
    prev = None
    with open(data_csv, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise MalformedFile(f"{data_csv}:{lineno}: expected timestamp,filename")
            try:
                ns = int(row[0])
            except ValueError:
                raise MalformedFile(f"{data_csv}:{lineno}: bad timestamp {row[0]!r}") from None
            if prev is not None and ns <= prev:
                raise MalformedFile(f"{data_csv}:{lineno}: timestamp {ns} does not increase (previous {prev})")
            prev = ns
            p = cam_dir / "data" / row[1].strip()
            if not p.exists():
                raise MissingImages(f"{data_csv}:{lineno}: image {p} missing")
            frames.append(FrameRecord(len(frames), p.stem, ns * 1e-9, p))
    if not frames:
        raise MissingImages(f"{data_csv}: no frames")
    gt = None
    gt_csv = next((p for p in (d / "mav0" / "state_groundtruth_estimate0" / "data.csv",
                               d / "state_groundtruth_estimate0" / "data.csv") if p.exists()), None)
    if gt_csv is not None:
        gt = _euroc_groundtruth(gt_csv)
    return SequenceSource(frames, cam, gt, d.name)


def _euroc_groundtruth(path: Path) -> Trajectory:
    ts, poses = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                v = [float(x) for x in row[:8]]
            except ValueError:
                raise MalformedFile(f"{path}:{lineno}: non-numeric field") from None
            if len(v) < 8:
                raise MalformedFile(f"{path}:{lineno}: expected 8 fields")
            q = np.array(v[4:8])  # w x y z
            n = np.linalg.norm(q)
            if abs(n - 1.0) > 1e-3:
                raise MalformedFile(f"{path}:{lineno}: quaternion norm {n:.6f} deviates from 1")
            if ts and v[0] * 1e-9 <= ts[-1]:
                raise MalformedFile(f"{path}:{lineno}: timestamp does not increase")
            ts.append(v[0] * 1e-9)
            poses.append(PoseSE3(quat=q, translation=v[1:4]))
    return Trajectory(ts, poses)


def open_sequence(kind: str, directory) -> SequenceSource:
    if kind == "kitti":
        return open_kitti(directory)
    if kind == "euroc":
        return open_euroc(directory)
    if kind == "synth":
        return open_synthetic_dir(directory)
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# synthetic world


def look_outward_pose(theta: float, radius: float, height: float = 0.0) -> PoseSE3:
    """World-to-camera pose on a circle in the xy plane, looking radially outward."""
    c, s = math.cos(theta), math.sin(theta)
    z = np.array([c, s, 0.0])
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, z)
    R_wc = np.stack([x, y, z], axis=1)
    C = np.array([radius * c, radius * s, height])
    return PoseSE3(R_wc.T, -R_wc.T @ C)


@dataclass
class SyntheticSpec:
    n_frames: int = 200
    path: str = "circle"  # circle | line | figure8
    radius: float = 5.0
    turns: float = 1.15
    n_landmarks: int = 2000
    wall_inner: float = 8.0
    wall_outer: float = 11.0
    wall_height: float = 2.0
    camera: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480))
    min_visible: int = 30
    dt: float = 0.1
    seed: int = 0


@dataclass
class SyntheticWorld:
    landmarks: np.ndarray  # (N, 3); landmark id = row index
    poses: list  # world-to-camera ground truth per frame
    spec: SyntheticSpec

    @property
    def ids(self):
        return np.arange(len(self.landmarks))

    def trajectory(self) -> Trajectory:
        ts = self.spec.dt * np.arange(len(self.poses))
        return Trajectory.from_world_to_camera(ts, self.poses)

    def step_length(self) -> float:
        c = np.array([p.center for p in self.poses])
        return float(np.linalg.norm(np.diff(c, axis=0), axis=1).mean())

    def provider(self, **kwargs) -> SyntheticFeatureProvider:
        return SyntheticFeatureProvider(self.landmarks, self.spec.camera, self.poses, seed=self.spec.seed, **kwargs)

    def visible_counts(self):
        out = []
        for p in self.poses:
            uv, z, ok = project_many(self.landmarks, p, self.spec.camera)
            out.append(int((ok & self.spec.camera.in_image(uv, 1.0)).sum()))
        return np.array(out)


def _path_poses(spec: SyntheticSpec):
    n = spec.n_frames
    if spec.path == "circle":
        th = 2 * math.pi * spec.turns * np.arange(n) / n
        return [look_outward_pose(t, spec.radius) for t in th]
    if spec.path == "line":
        poses = []
        for k in range(n):
            C = np.array([0.0, 0.1 * k, 0.0])
            R_wc = np.stack([np.cross([0, 0, -1.0], [1.0, 0, 0]), [0, 0, -1.0], [1.0, 0, 0]], axis=1)
            poses.append(PoseSE3(R_wc.T, -R_wc.T @ C))
        return poses
    if spec.path == "figure8":
        poses = []
        for k in range(n):
            a = 2 * math.pi * spec.turns * k / n
            C = np.array([spec.radius * math.sin(a), spec.radius * math.sin(a) * math.cos(a), 0.0])
            heading = a  # keep looking outward-ish while sweeping
            c, s = math.cos(heading), math.sin(heading)
            z = np.array([c, s, 0.0])
            y = np.array([0.0, 0.0, -1.0])
            R_wc = np.stack([np.cross(y, z), y, z], axis=1)
            poses.append(PoseSE3(R_wc.T, -R_wc.T @ C))
        return poses
    raise ValueError(f"unknown path {spec.path!r}")


def _landmarks(spec: SyntheticSpec, rng):
    n = spec.n_landmarks
    if spec.path == "line":
        # a wall in front of the corridor
        return np.column_stack([rng.uniform(6, 9, n), rng.uniform(-5, 0.1 * spec.n_frames + 5, n),
                                rng.uniform(-spec.wall_height, spec.wall_height, n)])
    phi = rng.uniform(0, 2 * math.pi, n)
    r = rng.uniform(spec.wall_inner, spec.wall_outer, n)
    z = rng.uniform(-spec.wall_height, spec.wall_height, n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def generate_synthetic(spec: SyntheticSpec | None = None):
    """Deterministic world and trajectory; returns ``(source, world)``."""
    spec = spec or SyntheticSpec()
    if spec.n_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(spec.seed)
    world = SyntheticWorld(_landmarks(spec, rng), _path_poses(spec), spec)
    counts = world.visible_counts()
    if counts.min() < spec.min_visible:
        raise ValueError(f"frame {int(counts.argmin())} sees only {counts.min()} landmarks (< {spec.min_visible})")
    frames = [FrameRecord(k, f"{k:06d}", spec.dt * k) for k in range(spec.n_frames)]
    return SequenceSource(frames, spec.camera, world.trajectory(), f"synthetic-{spec.path}"), world


def write_synthetic_dir(directory, world: SyntheticWorld, provider=None):
    """Dump a synthetic sequence: camera.txt, groundtruth.tum, features/*.feat, landmarks.txt."""
    from .evaluation import write_tum
    from .features import write_features
    from .geometry import save_camera

    d = Path(directory)
    (d / "features").mkdir(parents=True, exist_ok=True)
    save_camera(world.spec.camera, d / "camera.txt")
    write_tum(d / "groundtruth.tum", world.trajectory())
    provider = provider or world.provider()
    for k in range(len(world.poses)):
        write_features(d / "features" / f"{k:06d}.feat", provider(k))
    np.savetxt(d / "landmarks.txt", world.landmarks, fmt="%.17g")
    return d


def open_synthetic_dir(directory) -> SequenceSource:
    from .evaluation import read_tum

    d = Path(directory)
    cam = load_camera(d / "camera.txt")
    gt = read_tum(d / "groundtruth.tum") if (d / "groundtruth.tum").exists() else None
    feats = sorted((d / "features").glob("*.feat"))
    if not feats:
        raise MissingImages(f"{d}/features: no feature files")
    ts = gt.timestamps if gt is not None and len(gt) == len(feats) else 0.1 * np.arange(len(feats))
    frames = [FrameRecord(i, p.stem, float(t)) for i, (p, t) in enumerate(zip(feats, ts))]
    return SequenceSource(frames, cam, gt, d.name)
