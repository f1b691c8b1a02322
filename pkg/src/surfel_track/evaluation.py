"""Accuracy metrics: per-surfel RMSE, trajectory ATE and the ZNCC ROC sweep."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrackArrays:
    """Tracking output flattened into per-frame arrays.

    ``position`` holds the accepted surfel centres (outliers carry their last
    accepted value) and ``solved_position`` the optimizer output before the
    ZNCC test.  ``poses`` are world-to-camera 3x4 matrices.
    """

    frames: list
    ids: list
    position: np.ndarray  # (F, N, 3)
    solved_position: np.ndarray  # (F, N, 3)
    inlier: np.ndarray  # (F, N) bool
    zncc: np.ndarray  # (F, N)
    residual_rms: np.ndarray  # (F, N)
    poses: np.ndarray  # (F, 3, 4)
    extra: dict = field(default_factory=dict)


def collect(results, surfels) -> TrackArrays:
    """Convert in-memory :class:`~surfel_track.tracker.FrameResult` lists."""
    rest = {s.id: s.rest_position for s in surfels}
    ids = sorted(rest)
    F, N = len(results), len(ids)
    pos = np.full((F, N, 3), np.nan)
    sol = np.full((F, N, 3), np.nan)
    inl = np.zeros((F, N), dtype=bool)
    zn = np.zeros((F, N))
    rms = np.full((F, N), np.nan)
    col = {sid: j for j, sid in enumerate(ids)}
    for f, fr in enumerate(results):
        for s in fr.surfels:
            j = col[s.id]
            pos[f, j] = rest[s.id] + s.state.translation
            solved = s.solved_state if s.solved_state is not None else s.state
            sol[f, j] = rest[s.id] + solved.translation
            inl[f, j] = s.inlier
            zn[f, j] = s.zncc
            rms[f, j] = s.residual_rms
    poses = np.array([fr.pose.matrix34() for fr in results]).reshape(F, 3, 4)
    return TrackArrays([fr.frame for fr in results], ids, pos, sol, inl, zn, rms, poses)


def _camera_centers(poses) -> np.ndarray:
    P = np.asarray(poses, dtype=float)
    R, t = P[:, :, :3], P[:, :, 3]
    return -np.einsum("fji,fj->fi", R, t)


def traveled_distance(poses) -> float:
    c = _camera_centers(poses)
    return float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1))) if len(c) > 1 else 0.0


def trajectory_ate(est_poses, gt_poses) -> float:
    """RMS distance between estimated and true camera centres (no alignment).

    Both trajectories share the world frame fixed by the first camera, so no
    similarity alignment is applied.
    """
    ce, cg = _camera_centers(est_poses), _camera_centers(gt_poses)
    if len(ce) == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum((ce - cg) ** 2, axis=1))))


def _match(arr: TrackArrays, gt_frames, gt_ids):
    """Row/column indices of the frames and surfels present in both."""
    fpos = {f: i for i, f in enumerate(gt_frames)}
    ipos = {s: j for j, s in enumerate(gt_ids)}
    rows = [(i, fpos[f]) for i, f in enumerate(arr.frames) if f in fpos]
    cols = [(j, ipos[s]) for j, s in enumerate(arr.ids) if s in ipos]
    return rows, cols


def surfel_rmse(arr: TrackArrays, gt_frames, gt_ids, gt_positions, gt_visible=None,
                inliers_only: bool = True) -> dict:
    """3D RMSE of each surfel centre over the frames where it counts.

    A frame counts when the surfel is an inlier (if ``inliers_only``) and
    visible in the ground truth.  Surfels with no counted frame get NaN.
    """
    rows, cols = _match(arr, gt_frames, gt_ids)
    out = {}
    for j, gj in cols:
        errs = []
        for i, gi in rows:
            if inliers_only and not arr.inlier[i, j]:
                continue
            if gt_visible is not None and not gt_visible[gi, gj]:
                continue
            errs.append(np.sum((arr.position[i, j] - gt_positions[gi, gj]) ** 2))
        out[arr.ids[j]] = float(np.sqrt(np.mean(errs))) if errs else float("nan")
    return out


def roc_sweep(scores, labels, thresholds=None) -> list:
    """``(threshold, TPR, FPR)`` rows for the rule ``score >= threshold``.

    ``labels`` are True for positives (well-tracked observations).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if thresholds is None:
        thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    P = max(int(labels.sum()), 1)
    N = max(int((~labels).sum()), 1)
    rows = []
    for th in np.sort(np.asarray(thresholds, dtype=float))[::-1]:
        pred = scores >= th
        rows.append((float(th), float((pred & labels).sum() / P), float((pred & ~labels).sum() / N)))
    return rows


def roc_auc(rows) -> float:
    """Trapezoidal area under a ROC given as ``(threshold, TPR, FPR)`` rows."""
    pts = sorted({(fpr, tpr) for _, tpr, fpr in rows} | {(0.0, 0.0), (1.0, 1.0)})
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    # for equal FPR keep the best TPR reached (sorted ascending already)
    return float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))


def roc_observations(arr: TrackArrays, gt_frames, gt_ids, gt_positions, error_threshold: float,
                     gt_visible=None):
    """Per-(frame, surfel) ZNCC scores and RMSE-defined labels.

    An observation is positive when the optimizer's solution lies within
    ``error_threshold`` of the truth.
    """
    rows, cols = _match(arr, gt_frames, gt_ids)
    scores, labels = [], []
    for i, gi in rows:
        for j, gj in cols:
            if not np.all(np.isfinite(arr.solved_position[i, j])):
                continue
            err = np.linalg.norm(arr.solved_position[i, j] - gt_positions[gi, gj])
            ok = err < error_threshold
            if gt_visible is not None:
                ok = ok and bool(gt_visible[gi, gj])
            scores.append(arr.zncc[i, j])
            labels.append(ok)
    return np.array(scores), np.array(labels, dtype=bool)


def evaluate(arr: TrackArrays, gt, error_threshold: float | None = None, thresholds=None) -> dict:
    """All metrics against a ground truth object with ``frames``, ``anchor_ids``,
    ``positions``, ``visible`` and ``poses`` (world-to-camera 3x4 or Pose)."""
    gt_poses = np.array([p.matrix34() if hasattr(p, "matrix34") else p for p in gt.poses])
    rows, cols = _match(arr, gt.frames, gt.anchor_ids)
    mean_depth = float(np.nanmean(gt.positions[..., 2]))
    if error_threshold is None:
        error_threshold = 0.01 * mean_depth
    rmse = surfel_rmse(arr, gt.frames, gt.anchor_ids, gt.positions, gt.visible)
    vals = np.array([v for v in rmse.values() if np.isfinite(v)])
    est = arr.poses[[i for i, _ in rows]]
    ref = gt_poses[[gi for _, gi in rows]]
    scores, labels = roc_observations(arr, gt.frames, gt.anchor_ids, gt.positions, error_threshold, gt.visible)
    roc = roc_sweep(scores, labels, thresholds)
    return {
        "frames_processed": len(arr.frames),
        "surfels": len(arr.ids),
        "mean_depth": mean_depth,
        "rmse_per_surfel": rmse,
        "rmse_mean": float(vals.mean()) if vals.size else float("nan"),
        "rmse_mean_relative": float(vals.mean() / mean_depth) if vals.size else float("nan"),
        "inlier_ratio": float(arr.inlier.mean()) if arr.inlier.size else 0.0,
        "ate": trajectory_ate(est, ref),
        "traveled": traveled_distance(ref),
        "residual_rms": float(np.sqrt(np.nanmean(arr.residual_rms**2))) if arr.residual_rms.size else float("nan"),
        "roc": roc,
        "roc_auc": roc_auc(roc) if labels.size and labels.any() and (~labels).any() else float("nan"),
        "roc_positives": int(labels.sum()),
        "roc_negatives": int((~labels).sum()),
        "error_threshold": error_threshold,
    }
