"""Command-line entry point.

Exit codes: 0 on success, 1 on a modeled failure (bad data, tracking never
initialized, ...), 2 on a usage error. Every subcommand that writes to a
directory also leaves a ``manifest.json`` with its flags and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import LiftSlamError

log = logging.getLogger("liftslam")


class UsageError(Exception):
    pass


def _write_manifest(out, command, args, extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "version": __version__, "flags": flags, "seed": getattr(args, "seed", None)}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run


def _synthetic_provider(source, data_dir, args):
    from .datasets import SyntheticSpec, SyntheticWorld

    lm_file = Path(data_dir) / "landmarks.txt"
    if not lm_file.exists() or source.ground_truth is None:
        raise UsageError("--features synthetic needs a synthetic dataset (landmarks.txt and groundtruth.tum)")
    landmarks = np.loadtxt(lm_file, ndmin=2)
    poses = [p.inverse() for p in source.ground_truth.poses]
    spec = SyntheticSpec(n_frames=len(poses), camera=source.camera, seed=args.seed)
    world = SyntheticWorld(landmarks, poses, spec)
    kw = {"noise_sigma": args.noise_sigma}
    if args.drift is not None:
        kw["drift"] = np.array(args.drift)
    return world.provider(**kw)


def _make_provider(spec, source, args):
    from .features import provider_from_files, provider_native

    if spec == "native":
        return provider_native()
    if spec == "synthetic":
        return _synthetic_provider(source, args.data, args)
    if spec.startswith("files:"):
        return provider_from_files(spec[len("files:"):])
    raise UsageError(f"--features must be native, synthetic or files:<dir>, got {spec!r}")


def cmd_run(args):
    from .datasets import open_sequence
    from .evaluation import emit_report, evaluate, paired
    from .features import AdaptiveConfig, MatchThresholds
    from .system import RunConfig, run, write_outputs
    from .tracking import TrackerConfig

    if args.loop_closing != "off" and not args.vocab:
        raise UsageError("--loop-closing needs --vocab")
    try:
        th = MatchThresholds(args.th_low, args.th_high)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    adaptive = AdaptiveConfig(args.th_min, args.th_max) if args.adaptive else None
    cfg = RunConfig(
        tracker=TrackerConfig(thresholds=th, adaptive=adaptive),
        loop_mode=args.loop_closing,
        vocab_path=args.vocab,
        seed=args.seed,
        trace=args.trace,
    )
    source = open_sequence(args.dataset, args.data)
    features = args.features or ("files:" + str(Path(args.data) / "features") if args.dataset == "synth" else "native")
    provider = _make_provider(features, source, args)
    traj, stats, system = run(source, provider, cfg, return_system=True)
    out = Path(args.out)
    _write_manifest(out, "run", args, {"features_resolved": features})
    if len(traj) == 0:
        (out / "stats.json").write_text(stats.to_json() + "\n")
        print("tracking never initialized", file=sys.stderr)
        return 1
    write_outputs(out, traj, stats, system)
    if system.cfg.trace:
        from .plotting import plot_thresholds

        tr = np.array([(r[0], r[4], r[5], r[2]) for r in system.tracker.trace], dtype=float)
        if len(tr):
            plot_thresholds(tr[:, 0], tr[:, 1], tr[:, 2], out / "thresholds.png", tr[:, 3])
    summary = {"frames": stats.frames, "tracked": stats.tracked, "lost": stats.lost,
               "keyframes": stats.keyframes, "loops_closed": stats.loops_closed}
    if source.ground_truth is not None and len(traj) >= 3:
        rep = evaluate(traj, source.ground_truth)
        emit_report(rep, *paired(traj, source.ground_truth), out)
        summary["ate_rmse"] = rep.ate_rmse
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# vocab-build


def _iter_feature_files(paths):
    for p in paths:
        p = Path(p)
        if p.is_dir():
            yield from sorted(p.glob("*.feat"))
        elif p.exists():
            yield p
        else:
            raise FileNotFoundError(f"{p} does not exist")


def cmd_vocab_build(args):
    from .features import read_features
    from .placerec import Vocabulary

    descs, groups, variant = [], [], None
    for g, f in enumerate(_iter_feature_files(args.inputs)):
        fs = read_features(f)
        if len(fs) == 0:
            continue
        if variant is None:
            variant = fs.variant
        elif fs.variant != variant:
            raise UsageError(f"{f}: mixes {fs.variant} with {variant} descriptors")
        descs.append(fs.descriptors)
        groups.append(np.full(len(fs), g))
    if not descs:
        raise UsageError("no descriptors found in the inputs")
    X = np.vstack(descs)
    vocab = Vocabulary.build(X, args.levels, args.branching, variant, args.seed, np.concatenate(groups))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _write_manifest(out.parent, "vocab-build", args, {"descriptors": int(len(X)), "words": len(vocab)})
    print(json.dumps({"descriptors": int(len(X)), "words": len(vocab), "variant": variant}))
    return 0


# ---------------------------------------------------------------------------
# distort


def _distortion(args):
    from .distortions import DistortionSpec

    given = [(k, v) for k, v in (("gamma", args.gamma), ("q", args.quantile), ("saltpepper", args.salt_pepper),
                                  ("skip", args.skip)) if v is not None]
    if len(given) != 1:
        raise UsageError("give exactly one of --gamma, --quantile, --salt-pepper, --skip")
    kind, value = given[0]
    if kind == "q":
        return DistortionSpec(value.lower(), 0.0, args.seed)
    if kind == "skip" and value < 1:
        raise UsageError("--skip must be >= 1")
    if kind == "gamma" and value <= 0:
        raise UsageError("--gamma must be positive")
    if kind == "saltpepper" and not 0 <= value <= 1:
        raise UsageError("--salt-pepper must lie in [0, 1]")
    return DistortionSpec(kind, float(value), args.seed)


def _keep_indices(n, spec):
    step = int(spec.value) if spec.kind == "skip" else 1
    return list(range(0, n, step))


def _distort_kitti(src: Path, dst: Path, spec):
    from .datasets import open_kitti, read_image, write_image

    seq = open_kitti(src)
    keep = _keep_indices(len(seq), spec)
    img_out = dst / "image_0"
    img_out.mkdir(parents=True, exist_ok=True)
    for i in keep:
        rec = seq.frames[i]
        write_image(img_out / (rec.path.stem + ".png"), spec.apply(read_image(rec.path), i))
    shutil.copy(src / "calib.txt", dst / "calib.txt")
    if (src / "times.txt").exists():
        lines = [ln for ln in (src / "times.txt").read_text().splitlines() if ln.strip()]
        (dst / "times.txt").write_text("\n".join(lines[i] for i in keep) + "\n")
    for name in ("poses.txt", "groundtruth.txt"):
        if (src / name).exists():
            lines = [ln for ln in (src / name).read_text().splitlines() if ln.strip()]
            (dst / name).write_text("\n".join(lines[i] for i in keep) + "\n")
    return len(keep)


def _distort_euroc(src: Path, dst: Path, spec):
    from .datasets import open_euroc, read_image, write_image

    seq = open_euroc(src)
    keep = _keep_indices(len(seq), spec)
    rel = Path("mav0") / "cam0" if (src / "mav0").is_dir() else Path("cam0")
    cam_out = dst / rel
    (cam_out / "data").mkdir(parents=True, exist_ok=True)
    shutil.copy(src / rel / "sensor.yaml", cam_out / "sensor.yaml")
    # reuse the original nanosecond stamps; a float round trip loses digits at EuRoC magnitudes
    stamps = [ln.split(",")[0].strip() for ln in (src / rel / "data.csv").read_text().splitlines()
              if ln.strip() and not ln.startswith("#")]
    rows = ["#timestamp [ns],filename"]
    for i in keep:
        rec = seq.frames[i]
        name = rec.path.stem + ".png"
        write_image(cam_out / "data" / name, spec.apply(read_image(rec.path), i))
        rows.append(f"{stamps[i]},{name}")
    (cam_out / "data.csv").write_text("\n".join(rows) + "\n")
    gt_rel = rel.parent / "state_groundtruth_estimate0"
    if (src / gt_rel).is_dir():
        shutil.copytree(src / gt_rel, dst / gt_rel, dirs_exist_ok=True)
    return len(keep)


def cmd_distort(args):
    spec = _distortion(args)
    src, dst = Path(args.data), Path(args.out)
    if src.resolve() == dst.resolve():
        raise UsageError("--out must differ from --data")
    dst.mkdir(parents=True, exist_ok=True)
    n = (_distort_kitti if args.dataset == "kitti" else _distort_euroc)(src, dst, spec)
    _write_manifest(dst, "distort", args, {"distortion": {"kind": spec.kind, "value": spec.value, "seed": spec.seed},
                                           "frames_written": n})
    print(json.dumps({"frames": n, "kind": spec.kind, "value": spec.value}))
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args):
    from .evaluation import FixedDelta, LengthBased, emit_report, evaluate, paired, read_trajectory

    est, gt = read_trajectory(args.est), read_trajectory(args.gt)
    mode = FixedDelta(args.delta) if args.delta else LengthBased()
    rep = evaluate(est, gt, args.alignment, mode, args.max_dt)
    if args.out:
        emit_report(rep, *paired(est, gt, args.max_dt), args.out, plot=not args.no_plot)
        _write_manifest(args.out, "evaluate", args)
    print(f"ATE {rep.ate_rmse:.6g}")
    print(f"RPE_trans {rep.rpe_trans:.6g} %")
    print(f"RPE_rot {rep.rpe_rot:.6g} deg/m")
    print(f"pairs {rep.n_pairs}")
    return 0


# ---------------------------------------------------------------------------
# losses


def cmd_losses(args):
    from . import losses as L

    cfg = L.DetectorLossConfig(gamma_balance=args.gamma_balance, margin_c=args.margin_c)
    data = np.load(args.input)
    out = {}
    if "d_k" in data and "d_l" in data:
        rel = data["relation"] if "relation" in data else np.ones(1)
        dk, dl = np.atleast_2d(data["d_k"]), np.atleast_2d(data["d_l"])
        rel = np.broadcast_to(np.asarray(rel).ravel(), (len(dk),))
        out["desc"] = [L.loss_desc(L.DescriptorPair(a, b, L.POSITIVE if r > 0 else L.NEGATIVE), cfg.margin_c)
                       for a, b, r in zip(dk, dl, rel)]
    if "ori_1" in data and "ori_2" in data:
        out["ori"] = L.loss_ori(data["ori_1"], data["ori_2"])
    if "pair_1" in data and "pair_2" in data:
        out["pair"] = L.loss_pair(data["pair_1"], data["pair_2"])
    if "score_maps" in data:
        maps = list(data["score_maps"])
        out["class"] = L.loss_class(maps, cfg)
        out["softargmax"] = [list(L.softargmax(s, cfg.beta_softargmax)) for s in maps]
        if "pair_1" in data and "pair_2" in data:
            out["det"] = L.loss_det(maps, data["pair_1"], data["pair_2"], cfg)
    if not out:
        raise UsageError("input holds none of d_k/d_l, ori_1/ori_2, pair_1/pair_2, score_maps")
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    from .datasets import SyntheticSpec, generate_synthetic, write_synthetic_dir

    spec = SyntheticSpec(n_frames=args.frames, path=args.path, n_landmarks=args.landmarks, turns=args.turns,
                         seed=args.seed)
    _, world = generate_synthetic(spec)
    kw = {"noise_sigma": args.noise_sigma}
    if args.drift is not None:
        kw["drift"] = np.array(args.drift)
    write_synthetic_dir(args.out, world, world.provider(**kw))
    _write_manifest(args.out, "synth", args)
    print(json.dumps({"frames": args.frames, "landmarks": args.landmarks, "out": str(args.out)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="liftslam", description="Monocular keyframe visual SLAM toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run SLAM on a dataset directory")
    r.add_argument("--dataset", choices=("kitti", "euroc", "synth"), required=True)
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--features", help="native | synthetic | files:<dir> (synth default: files:<data>/features)")
    r.add_argument("--vocab")
    r.add_argument("--adaptive", action="store_true")
    r.add_argument("--th-low", type=float, default=1.0)
    r.add_argument("--th-high", type=float, default=2.0)
    r.add_argument("--th-min", type=float, default=1.0)
    r.add_argument("--th-max", type=float, default=4.0)
    r.add_argument("--loop-closing", choices=("off", "interleaved", "threaded"), default="off")
    r.add_argument("--noise-sigma", type=float, default=0.0, help="synthetic features only")
    r.add_argument("--drift", type=float, nargs=3, help="synthetic features only: per-frame drift vector")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", action="store_true")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("vocab-build", help="train a vocabulary from .feat files")
    v.add_argument("inputs", nargs="+", help=".feat files or directories of them")
    v.add_argument("--levels", type=int, default=6)
    v.add_argument("--branching", type=int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True, help="vocabulary file to write")
    v.set_defaults(func=cmd_vocab_build)

    d = sub.add_parser("distort", help="write a distorted copy of an image sequence")
    d.add_argument("--dataset", choices=("kitti", "euroc"), required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--gamma", type=float)
    d.add_argument("--quantile", choices=("Q1", "Q3", "q1", "q3"))
    d.add_argument("--salt-pepper", type=float)
    d.add_argument("--skip", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_distort)

    e = sub.add_parser("evaluate", help="ATE and RPE between two trajectory files")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--alignment", choices=("sim3", "se3", "none"), default="sim3")
    e.add_argument("--delta", type=int, help="fixed frame delta for RPE (default: KITTI path lengths)")
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--out", help="directory for metrics.csv, trajectory.svg and figures")
    e.add_argument("--no-plot", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    lo = sub.add_parser("losses", help="evaluate the training losses on arrays from an .npz file")
    lo.add_argument("input")
    lo.add_argument("--margin-c", type=float, default=4.0)
    lo.add_argument("--gamma-balance", type=float, default=1.0)
    lo.set_defaults(func=cmd_losses)

    s = sub.add_parser("synth", help="generate a synthetic sequence on disk")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--landmarks", type=int, default=2000)
    s.add_argument("--path", choices=("circle", "line", "figure8"), default="circle")
    s.add_argument("--turns", type=float, default=1.15)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--drift", type=float, nargs=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"liftslam: error: {exc}", file=sys.stderr)
        return 2
    except (LiftSlamError, OSError, ValueError) as exc:
        print(f"liftslam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
