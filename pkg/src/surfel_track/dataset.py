"""Dataset directories and result files.

A dataset directory holds ``frame_%05d.pgm`` images, an optional
``depth_00000.pgm`` for the reference frame, ``intrinsics.cfg`` (flat
``key = value``) and optionally ``anchors.csv``, ``gt_trajectory.csv`` and
``gt_surfels.csv``.  Trajectories are stored camera-to-world as
``frame, tx, ty, tz, qw, qx, qy, qz``.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DatasetError
from .evaluation import TrackArrays
from .geometry import Pose
from .imaging import DepthMap, Intrinsics, build_pyramid, load_depth, load_gray, save_depth, save_gray

CONFIG_FILE = "intrinsics.cfg"
TRACK_CONFIG_FILE = "track.cfg"
DEPTH_FILE = "depth_00000.pgm"
FRAME_RE = re.compile(r"^frame_(\d{5,})\.pgm$")
TRAJ_HEADER = ["frame", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
GT_SURFEL_HEADER = ["frame", "id", "x", "y", "z", "j11", "j12", "j21", "j22", "j31", "j32", "visible"]


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------

def read_kv(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def pose_to_row(pose: Pose) -> list:
    """World-to-camera pose to ``tx..qz`` of the camera-to-world transform."""
    inv = pose.inverse()
    qx, qy, qz, qw = Rotation.from_matrix(inv.rotation).as_quat()
    if qw < 0:
        qx, qy, qz, qw = -qx, -qy, -qz, -qw
    return [*map(float, inv.translation), float(qw), float(qx), float(qy), float(qz)]


def row_to_pose(row) -> Pose:
    tx, ty, tz, qw, qx, qy, qz = map(float, row)
    R = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
    return Pose(R, np.array([tx, ty, tz])).inverse()


def write_trajectory(path, frames, poses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_HEADER)
        for f, p in zip(frames, poses):
            w.writerow([int(f)] + [repr(v) for v in pose_to_row(p)])


def read_trajectory(path) -> tuple[list, list]:
    frames, poses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frames.append(int(row["frame"]))
            poses.append(row_to_pose([row[k] for k in TRAJ_HEADER[1:]]))
    return frames, poses


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class GroundTruthTable:
    """Ground truth read back from disk; mirrors :class:`surfel_track.synth.GroundTruth`."""

    frames: list
    poses: list
    anchor_ids: list
    positions: np.ndarray
    jacobians: np.ndarray
    visible: np.ndarray


@dataclass
class Dataset:
    root: Path
    intrinsics: Intrinsics
    size: tuple
    config: dict
    frames: list
    depth: DepthMap | None = None
    anchors: list | None = None  # (id, x, y)
    track_config: dict = field(default_factory=dict)

    def frame_path(self, frame: int) -> Path:
        return self.root / f"frame_{frame:05d}.pgm"

    def image(self, frame: int) -> np.ndarray:
        return load_gray(self.frame_path(frame))

    def pyramids(self, levels: int, frames=None):
        for f in self.frames if frames is None else frames:
            yield f, build_pyramid(self.image(f), levels)

    def ground_truth(self) -> GroundTruthTable | None:
        tp, sp = self.root / "gt_trajectory.csv", self.root / "gt_surfels.csv"
        if not (tp.exists() and sp.exists()):
            return None
        return read_ground_truth(tp, sp)


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    cfg_path = root / CONFIG_FILE
    if not cfg_path.exists():
        raise DatasetError(f"{root}: missing {CONFIG_FILE}")
    cfg = read_kv(cfg_path)
    try:
        K = Intrinsics(float(cfg["fx"]), float(cfg["fy"]), float(cfg["cx"]), float(cfg["cy"]))
    except KeyError as exc:
        raise DatasetError(f"{cfg_path}: missing key {exc.args[0]}") from None
    frames = sorted(int(m.group(1)) for p in root.iterdir() if (m := FRAME_RE.match(p.name)))
    if not frames:
        raise DatasetError(f"{root}: no frame_*.pgm images")
    first = load_gray(root / f"frame_{frames[0]:05d}.pgm")
    size = (first.shape[1], first.shape[0])
    depth = None
    if (root / DEPTH_FILE).exists():
        if "depth_scale" not in cfg:
            raise DatasetError(f"{cfg_path}: depth image present but depth_scale missing")
        depth = load_depth(root / DEPTH_FILE, float(cfg["depth_scale"]))
    anchors = None
    if (root / "anchors.csv").exists():
        with open(root / "anchors.csv", newline="") as fh:
            anchors = [(int(r["id"]), float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)]
    tcfg = read_kv(root / TRACK_CONFIG_FILE) if (root / TRACK_CONFIG_FILE).exists() else {}
    return Dataset(root, K, size, cfg, frames, depth, anchors, tcfg)


def read_ground_truth(traj_path, surfel_path) -> GroundTruthTable:
    frames, poses = read_trajectory(traj_path)
    rows = {}
    with open(surfel_path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows[(int(r["frame"]), int(r["id"]))] = r
    ids = sorted({k[1] for k in rows})
    F, N = len(frames), len(ids)
    pos = np.full((F, N, 3), np.nan)
    jac = np.full((F, N, 3, 2), np.nan)
    vis = np.zeros((F, N), dtype=bool)
    for i, f in enumerate(frames):
        for j, sid in enumerate(ids):
            r = rows.get((f, sid))
            if r is None:
                continue
            pos[i, j] = [float(r[k]) for k in ("x", "y", "z")]
            jac[i, j] = np.array([float(r[k]) for k in GT_SURFEL_HEADER[5:11]]).reshape(3, 2)
            vis[i, j] = r["visible"] == "1"
    return GroundTruthTable(frames, poses, ids, pos, jac, vis)


def write_dataset(scene, out_dir, pixels, anchors, frames=None, threads: int = 1, extra: dict | None = None) -> list:
    """Render ``scene`` into ``out_dir``; returns the list of files written."""
    from .synth import gt_surfel_track, render_frame, render_sequence

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = scene.frame_indices() if frames is None else list(frames)
    written = []
    _, depth = render_frame(scene, 0.0)
    dmax = float(np.max(depth.depths[depth.valid])) if depth.valid.any() else 1.0
    scale = float(np.float32(dmax * 1.001 / 65535.0))
    save_depth(out / DEPTH_FILE, depth, scale)
    written.append(DEPTH_FILE)
    for f, img, _ in render_sequence(scene, frames, threads):
        name = f"frame_{f:05d}.pgm"
        save_gray(out / name, img)
        written.append(name)
    K = scene.intrinsics
    cfg = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": scene.size[0], "height": scene.size[1],
           "depth_scale": scale, "preset": scene.name, "seed": scene.seed, "n_frames": scene.n_frames,
           "missing": ",".join(str(m) for m in scene.missing)}
    cfg.update(extra or {})
    write_kv(out / CONFIG_FILE, cfg)
    written.append(CONFIG_FILE)
    with open(out / "anchors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for a, px in zip(anchors, pixels):
            w.writerow([a.id, repr(float(px[0])), repr(float(px[1]))])
    written.append("anchors.csv")
    all_frames = list(range(scene.n_frames))
    gt = gt_surfel_track(scene, anchors, all_frames)
    write_trajectory(out / "gt_trajectory.csv", gt.frames, gt.poses)
    with open(out / "gt_surfels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_SURFEL_HEADER)
        for i, f in enumerate(gt.frames):
            for j, sid in enumerate(gt.anchor_ids):
                vals = [*gt.positions[i, j], *gt.jacobians[i, j].ravel()]
                w.writerow([f, sid] + [repr(float(v)) for v in vals] + [int(gt.visible[i, j])])
    written += ["gt_trajectory.csv", "gt_surfels.csv"]
    return written


# ---------------------------------------------------------------------------
# tracking results
# ---------------------------------------------------------------------------

def _state_json(state, rest) -> dict:
    return {
        "translation": state.translation.tolist(),
        "rotation": state.rotation.ravel().tolist(),
        "deform": state.deform.ravel().tolist(),
        "gain": float(state.gain),
        "bias": float(state.bias),
        "position": (rest + state.translation).tolist(),
    }


def frame_record(fr, rest: dict) -> dict:
    surfels = []
    for s in fr.surfels:
        d = {"id": s.id, **_state_json(s.state, rest[s.id])}
        solved = s.solved_state if s.solved_state is not None else s.state
        d["solved_position"] = (rest[s.id] + solved.translation).tolist()
        d.update(zncc=float(s.zncc), inlier=bool(s.inlier),
                 residual_rms=float(s.residual_rms) if np.isfinite(s.residual_rms) else None)
        surfels.append(d)
    return {"frame": fr.frame, "pose": fr.pose.matrix34().ravel().tolist(), "lost": fr.lost,
            "residual_rms": _finite(fr.residual_rms()), "inlier_ratio": fr.inlier_ratio(), "surfels": surfels}


def _finite(v):
    return float(v) if np.isfinite(v) else None


def write_results(out_dir, results, surfels) -> list:
    """``results.ndjson`` plus ``trajectory.csv``; returns file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rest = {s.id: s.rest_position for s in surfels}
    with open(out / "results.ndjson", "w") as fh:
        for fr in results:
            fh.write(json.dumps(frame_record(fr, rest), sort_keys=True) + "\n")
    write_trajectory(out / "trajectory.csv", [fr.frame for fr in results], [fr.pose for fr in results])
    return ["results.ndjson", "trajectory.csv"]


def read_results(path) -> TrackArrays:
    """Load ``results.ndjson`` (file or directory containing it)."""
    p = Path(path)
    if p.is_dir():
        p = p / "results.ndjson"
    if not p.exists():
        raise DatasetError(f"{p}: not found")
    recs = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
    ids = sorted({s["id"] for r in recs for s in r["surfels"]})
    col = {sid: j for j, sid in enumerate(ids)}
    F, N = len(recs), len(ids)
    pos = np.full((F, N, 3), np.nan)
    sol = np.full((F, N, 3), np.nan)
    inl = np.zeros((F, N), dtype=bool)
    zn = np.zeros((F, N))
    rms = np.full((F, N), np.nan)
    poses = np.zeros((F, 3, 4))
    for i, r in enumerate(recs):
        poses[i] = np.reshape(r["pose"], (3, 4))
        for s in r["surfels"]:
            j = col[s["id"]]
            pos[i, j] = s["position"]
            sol[i, j] = s.get("solved_position", s["position"])
            inl[i, j] = s["inlier"]
            zn[i, j] = s["zncc"]
            rms[i, j] = np.nan if s.get("residual_rms") is None else s["residual_rms"]
    return TrackArrays([r["frame"] for r in recs], ids, pos, sol, inl, zn, rms, poses)
