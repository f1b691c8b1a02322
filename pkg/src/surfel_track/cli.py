"""``surfel-track`` command line: synth, track, eval, check-jacobians, ambiguity.

Exit codes: 0 success, 2 usage or input error, 3 tracking lost, 4 diagnostic
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DatasetError, SurfelTrackError, UnknownPreset
from .geometry import Pose, SurfelState

EXIT_OK, EXIT_USAGE, EXIT_LOST, EXIT_DIAGNOSTIC = 0, 2, 3, 4
THREADS_ENV = "SURFEL_TRACK_THREADS"
FAULT_ENV = "SURFEL_TRACK_FAULT"
MANIFEST = "manifest.json"

log = logging.getLogger("surfel_track")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if value is None:
        return os.cpu_count() or 1
    if value < 1:
        raise UsageError("--threads must be >= 1")
    return value


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _number(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    return v


class Run:
    """Collects provenance and writes the run manifest."""

    def __init__(self, command: str, argv, out_dir: Path):
        self.command = command
        self.argv = list(argv)
        self.out_dir = Path(out_dir)
        self.timings = {}
        self.info = {}
        self._t0 = time.perf_counter()

    def timed(self, name):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 6)

        return _T()

    def write(self, status: int, outputs=()):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        digests = {}
        for name in sorted(outputs):
            p = self.out_dir / name
            if p.is_file():
                digests[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "exit_code": status,
            "outputs": digests,
            "timings_s": self.timings,
            **self.info,
        }
        (self.out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    from .dataset import write_dataset
    from .synth import make_scene, select_anchors

    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    threads = resolve_threads(args.threads)
    overrides = {k: _number(v) for k, v in parse_overrides(args.set).items()}
    if "missing" in overrides:
        overrides["missing"] = tuple(int(x) for x in str(overrides["missing"]).split(",") if x != "")
    run = Run("synth", argv, args.out)
    with run.timed("scene"):
        scene = make_scene(args.preset, args.seed, n_frames=args.frames, **overrides)
        pixels, anchors = select_anchors(scene, spacing=args.spacing, half_extent=args.half_extent)
    with run.timed("render"):
        files = write_dataset(scene, args.out, pixels, anchors, threads=threads)
    run.info.update(seed=args.seed, preset=args.preset, dataset=None, output=str(args.out),
                    config={"frames": args.frames, "spacing": args.spacing, "half_extent": args.half_extent,
                            "overrides": overrides})
    run.write(EXIT_OK, files)
    print(f"wrote {len(scene.frame_indices())} frames and {len(anchors)} anchors to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def auto_anchors(image, depth, spacing: int, half_extent: int, margin: int = 8, min_std: float = 0.01):
    """Grid pixels whose surfel window has valid depth and some texture."""
    h, w = image.shape
    r = half_extent + 2
    out = []
    for y in range(r + margin, h - r - margin, spacing):
        for x in range(r + margin, w - r - margin, spacing):
            win = (slice(y - r, y + r + 1), slice(x - r, x + r + 1))
            if depth is not None and not depth.valid[win].all():
                continue
            if np.std(image[win]) < min_std:
                continue
            out.append((len(out), float(x), float(y)))
    return out


def track_config(dataset, args):
    from .tracker import TrackConfig

    values = dict(dataset.track_config)
    if args.config:
        from .dataset import read_kv
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} not found")
        values.update(read_kv(args.config))
    values.update(parse_overrides(args.set))
    values["threads"] = str(resolve_threads(args.threads))
    extra = {k: values.pop(k) for k in list(values) if k in ("default_depth", "anchor_spacing")}
    try:
        return TrackConfig.from_mapping(values), extra
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def cmd_track(args, argv) -> int:
    from .dataset import load_dataset, write_results
    from .errors import TrackingLost
    from .imaging import DepthMap, build_pyramid
    from .joint import track_deformable
    from .tracker import FrameResult, SurfelResult, prepare_surfels, track_static

    try:
        ds = load_dataset(args.dataset)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    cfg, extra = track_config(ds, args)
    out = Path(args.out)
    run = Run("track", argv, out)
    run.info.update(dataset=str(ds.root), output=str(out), mode=args.mode, seed=ds.config.get("seed"),
                    config=cfg.as_dict())
    frames = ds.frames if args.frames is None else ds.frames[:args.frames]
    with run.timed("setup"):
        ref = ds.image(frames[0])
        depth = ds.depth
        if depth is None:
            if "default_depth" not in extra:
                raise UsageError("dataset has no depth image; set default_depth")
            depth = DepthMap(np.full(ref.shape, float(extra["default_depth"])))
        anchors = ds.anchors or auto_anchors(ref, depth, int(extra.get("anchor_spacing", 56)), cfg.half_extent)
        surfels = prepare_surfels(build_pyramid(ref, cfg.levels), depth, ds.intrinsics,
                                  [(x, y) for _, x, y in anchors], cfg.half_extent,
                                  ids=[i for i, _, _ in anchors])
    if not surfels:
        raise UsageError("no usable surfels in the reference frame")
    reference = FrameResult(frames[0], Pose.identity(),
                            [SurfelResult(s.id, SurfelState.identity(), 1.0, True, 0.0) for s in surfels])
    stream = ds.pyramids(cfg.levels, frames[1:])
    status, lost = EXIT_OK, None
    with run.timed("track"):
        try:
            if args.mode == "static":
                results = track_static(stream, surfels, ds.intrinsics, cfg)
            else:
                results = track_deformable(stream, surfels, ds.intrinsics, cfg, mode=args.mode)
        except TrackingLost as exc:
            results, status, lost = exc.results or [], EXIT_LOST, str(exc)
    results = [reference] + results
    files = write_results(out, results, surfels)
    resid = np.array([fr.residual_rms() for fr in results[1:]])
    summary = {
        "frames_processed": len(results),
        "frames_total": len(frames),
        "surfels": len(surfels),
        "mean_inlier_ratio": float(np.mean([fr.inlier_ratio() for fr in results[1:]])) if len(results) > 1 else 1.0,
        "residual_rms": float(np.sqrt(np.nanmean(resid**2))) if resid.size else 0.0,
        "lost": lost,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append("summary.json")
    run.info["summary"] = summary
    run.write(status, files)
    print(f"processed {summary['frames_processed']}/{summary['frames_total']} frames, "
          f"{summary['surfels']} surfels, inlier ratio {summary['mean_inlier_ratio']:.3f}, "
          f"residual RMS {summary['residual_rms']:.5f}")
    if lost:
        print(f"tracking lost: {lost}", file=sys.stderr)
    return status


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args, argv) -> int:
    from .dataset import read_ground_truth, read_results
    from .evaluation import evaluate

    try:
        arr = read_results(args.results)
        root = Path(args.gt)
        gt = read_ground_truth(root / "gt_trajectory.csv", root / "gt_surfels.csv")
    except (DatasetError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    if not set(arr.frames) & set(gt.frames):
        raise UsageError("results and ground truth share no frames")
    out = Path(args.out) if args.out else Path(args.results) / "eval"
    run = Run("eval", argv, out)
    thresholds = None
    if args.roc_steps:
        thresholds = np.linspace(-1.0, 1.0, args.roc_steps)
    with run.timed("evaluate"):
        m = evaluate(arr, gt, args.error_threshold, thresholds)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "rmse"])
        for sid, v in m["rmse_per_surfel"].items():
            w.writerow([sid, repr(v)])
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpr"])
        for row in m["roc"]:
            w.writerow([repr(v) for v in row])
    metrics = {k: v for k, v in m.items() if k not in ("roc", "rmse_per_surfel")}
    metrics = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in metrics.items()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    run.info.update(dataset=str(args.gt), output=str(out), results=str(args.results),
                    config={"error_threshold": m["error_threshold"], "roc_steps": args.roc_steps})
    run.write(EXIT_OK, ["rmse.csv", "roc.csv", "metrics.json"])
    print(f"frames {m['frames_processed']}  mean RMSE {m['rmse_mean']:.6g} ({100 * m['rmse_mean_relative']:.3f}% of depth)  "
          f"ATE {m['ate']:.6g}  inliers {m['inlier_ratio']:.3f}  ROC AUC {m['roc_auc']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def cmd_check_jacobians(args, argv) -> int:
    from .diagnostics import BLOCKS, check_jacobians

    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    fault = args.inject_fault or os.environ.get(FAULT_ENV) or None
    if fault is not None and fault not in BLOCKS:
        raise UsageError(f"unknown block {fault!r} for fault injection")
    run = Run("check-jacobians", argv, args.out)
    with run.timed("check"):
        report = check_jacobians(args.seed, args.trials, fault)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "jacobians.csv").write_text(report.to_csv())
    for c in report.checks.values():
        print(f"{c.block:22s} max rel err {c.max_error:.3e}  tol {c.tolerance:.0e}  {'ok' if c.passed else 'FAIL'}")
    status = EXIT_OK if report.passed else EXIT_DIAGNOSTIC
    run.info.update(seed=args.seed, output=str(args.out), config={"trials": args.trials, "fault": fault})
    run.write(status, ["jacobians.csv"])
    print("all blocks within tolerance" if report.passed else "Jacobian check FAILED")
    return status


def cmd_ambiguity(args, argv) -> int:
    from .diagnostics import floating_ambiguity, floating_passed, growing_ambiguity

    out = Path(args.out)
    run = Run("ambiguity", argv, out)
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "growing":
        mus = tuple(args.mu) if args.mu else (0.5, 2.0, 10.0)
        if any(m <= 0 for m in mus):
            raise UsageError("--mu must be positive")
        with run.timed("growing"):
            rep = growing_ambiguity(args.seed, args.surfels, mus)
        ok = rep.passed
        print(f"mu {list(mus)}: max reprojection displacement {rep.max_displacement:.3e} px")
        print(f"general F: sigma_min/sigma_max {rep.ratio_general:.3e}; hard isometry {rep.ratio_isometry:.3e} "
              f"(improvement {rep.improvement:.3e})")
        print("near-null direction:", np.array2string(rep.null_vector, precision=4))
        print("mu direction:       ", np.array2string(rep.mu_direction * np.sign(rep.null_vector @ rep.mu_direction),
                                                        precision=4))
        print(f"cosine {rep.null_cosine:.6f}")
        data = {"mus": list(mus), "max_displacement_px": rep.max_displacement, "ratio_general": rep.ratio_general,
                "ratio_isometry": rep.ratio_isometry, "improvement": rep.improvement,
                "null_cosine": rep.null_cosine, "null_vector": rep.null_vector.tolist(), "passed": ok}
    else:
        omegas = tuple(args.omega_e) if args.omega_e else (0.0, 1.0)
        if any(w < 0 for w in omegas):
            raise UsageError("--omega-e must be non-negative")
        with run.timed("floating"):
            reps = floating_ambiguity(args.seed, omegas, args.surfels)
        ok = floating_passed(reps)
        data = {"reports": []}
        for r in reps:
            sv = r.singular_values / r.singular_values[0]
            verdict = f"{r.near_null} near-zero singular values" if r.near_null else "full rank"
            print(f"omega_E={r.omega_E:g}: {verdict}; sigma_min/sigma_max {r.ratio:.3e}")
            print("  smallest normalized singular values:", np.array2string(sv[-8:], precision=3))
            data["reports"].append({"omega_E": r.omega_E, "near_null": r.near_null, "ratio": r.ratio,
                                    "singular_values": r.singular_values.tolist()})
        data["passed"] = ok
    (out / f"ambiguity_{args.which}.json").write_text(json.dumps(data, indent=2) + "\n")
    status = EXIT_OK if ok else EXIT_DIAGNOSTIC
    run.info.update(seed=args.seed, output=str(out), config={"which": args.which, "surfels": args.surfels})
    run.write(status, [f"ambiguity_{args.which}.json"])
    print("invariants hold" if ok else "invariants VIOLATED")
    return status


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .synth import PRESETS

    p = _Parser(prog="surfel-track", description="Direct sparse deformable surfel tracking.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${THREADS_ENV} or all cores)")

    s = sub.add_parser("synth", help="render a synthetic dataset with ground truth")
    s.add_argument("preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--spacing", type=int, default=80, help="anchor grid spacing in pixels")
    s.add_argument("--half-extent", type=int, default=11)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="preset override, e.g. speed=6")
    threads(s)

    t = sub.add_parser("track", help="track surfels through a dataset")
    t.add_argument("dataset")
    t.add_argument("--mode", choices=("static", "deform", "rigid_map"), default="deform")
    t.add_argument("--out", required=True, help="results directory")
    t.add_argument("--config", help="key=value file applied after the dataset's track.cfg")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="configuration override (last wins), e.g. omega_E=0.1 or lm.max_iters=20")
    t.add_argument("--frames", type=int, default=None, help="process only the first N frames")
    threads(t)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("results", help="results directory or results.ndjson")
    e.add_argument("gt", help="dataset directory with gt_trajectory.csv and gt_surfels.csv")
    e.add_argument("--out", default=None, help="metrics directory (default: RESULTS/eval)")
    e.add_argument("--error-threshold", type=float, default=None,
                   help="3D error separating ROC positives from negatives (default: 1%% of mean depth)")
    e.add_argument("--roc-steps", type=int, default=None, help="uniform ZNCC thresholds in [-1, 1]")

    c = sub.add_parser("check-jacobians", help="analytic Jacobians against finite differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=200)
    c.add_argument("--out", default="diagnostics")
    c.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    a = sub.add_parser("ambiguity", help="demonstrate the growing- and floating-map ambiguities")
    a.add_argument("which", choices=("growing", "floating"))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--mu", type=float, action="append", help="scale factor (repeatable)")
    a.add_argument("--omega-e", type=float, action="append", help="equilibrium weight (repeatable)")
    a.add_argument("--surfels", type=int, default=None, help="number of surfels")
    a.add_argument("--out", default="diagnostics")
    return p


COMMANDS = {"synth": cmd_synth, "track": cmd_track, "eval": cmd_eval,
            "check-jacobians": cmd_check_jacobians, "ambiguity": cmd_ambiguity}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ambiguity" and args.surfels is None:
        args.surfels = 100 if args.which == "growing" else 12
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"surfel-track {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnknownPreset, DatasetError, OSError) as exc:
        print(f"surfel-track {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SurfelTrackError as exc:
        print(f"surfel-track {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
