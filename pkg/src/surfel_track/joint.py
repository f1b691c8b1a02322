"""Joint camera-pose and surfel tracking.

The parameter vector stacks every active surfel's blocks followed by the six
camera parameters, so the normal matrix has an arrow shape: block-diagonal
surfel part, dense camera border.  :meth:`JointProblem.solve_normal`
eliminates the surfel blocks and solves the 6x6 Schur complement.

Equilibrium anchors pull each surfel centre towards a rest point and remove
the gauge freedom shared by the camera and a common motion of all surfels.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import LinearSolveFailure, Singular, TrackingLost
from .geometry import Pose, Surfel, SurfelState, deform_params, materialize_deform, so3_exp, update_pose
from .imaging import Intrinsics
from .optimizer import NlsProblem, lm_solve
from .photometric import BLOCK_SIZES, photometric_residuals
from .tracker import (
    EquilibriumAnchor,
    FrameResult,
    SurfelResult,
    TrackConfig,
    _map,
    deformation_energy_residual,
    equilibrium_residual,
    refresh_gain_bias,
    score_surfel,
    solve_surfel_multiscale,
    surfel_blocks,
)

log = logging.getLogger(__name__)


def default_anchors(surfels: Sequence[Surfel], cfg: TrackConfig) -> dict:
    """Isotropic anchors at the rest positions."""
    return {s.id: EquilibriumAnchor.isotropic(s.rest_position, cfg.sigma) for s in surfels}


def anchors_from_trajectories(ids: Sequence[int], trajectories, floor: float = 1e-6) -> dict:
    """Anchors at the mean of known trajectories with their (floored) covariance.

    ``trajectories`` has shape ``(frames, surfels, 3)``.
    """
    traj = np.asarray(trajectories, dtype=float)
    out = {}
    for j, sid in enumerate(ids):
        pts = traj[:, j]
        cov = np.cov(pts.T, bias=True) if len(pts) > 1 else np.zeros((3, 3))
        out[sid] = EquilibriumAnchor(pts.mean(axis=0), np.linalg.inv(cov + floor * np.eye(3)))
    return out


def _block_width(name: str, cfg: TrackConfig) -> int:
    return cfg.model.n_params if name == "deform" else BLOCK_SIZES[name]


def apply_blocks(state: SurfelState, dx, blocks: Sequence[str], cfg: TrackConfig) -> SurfelState:
    """Apply a surfel increment laid out as ``blocks``."""
    t, R, F, gain, bias = state.translation, state.rotation, state.deform, state.gain, state.bias
    k = 0
    for name in blocks:
        w = _block_width(name, cfg)
        d = dx[k:k + w]
        k += w
        if name == "translation":
            t = t + d
        elif name == "rotation":
            R = R @ so3_exp(d)
        elif name == "deform":
            F = materialize_deform(cfg.model, deform_params(cfg.model, F) + d, cfg.area_preserving)
        elif name == "gain_bias":
            gain, bias = gain + d[0], bias + d[1]
    return SurfelState(t, R, F, gain, bias)


class JointProblem(NlsProblem):
    """All active surfels plus the camera on one pyramid level.

    The iterate is ``(states, pose)``.  With ``rigid=True`` the surfel
    geometry is frozen and only the camera (plus per-surfel gain/bias when
    optimized) is estimated.
    """

    def __init__(self, surfels: Sequence[Surfel], image, K: Intrinsics, level: int, cfg: TrackConfig,
                 anchors: dict | None = None, rigid: bool = False):
        self.surfels = list(surfels)
        self.image, self.K, self.level, self.cfg = image, K, level, cfg
        self.anchors = anchors or {}
        self.rigid = rigid
        if rigid:
            self.blocks = ["gain_bias"] if cfg.gain_bias == "optimize" else []
        else:
            self.blocks = surfel_blocks(cfg)
        self.ns = sum(_block_width(b, cfg) for b in self.blocks)
        self.n_surfels = len(self.surfels)
        self.n_params = self.n_surfels * self.ns + 6

    # -- residual assembly ----------------------------------------------------
    def _terms(self, i, state: SurfelState, pose: Pose, with_jac: bool):
        """Residuals of surfel ``i`` and (optionally) its surfel/camera Jacobian blocks."""
        cfg, s = self.cfg, self.surfels[i]
        active = self.blocks + ["pose"] if with_jac else None
        rb = photometric_residuals(s, state, pose, self.image, self.K, self.level, cfg.cap,
                                   active, cfg.model, cfg.area_preserving)
        rs = [rb.residuals]
        if with_jac:
            Js, Jc = [rb.jacobian[:, :self.ns]], [rb.jacobian[:, self.ns:]]
        if not self.rigid and cfg.model.n_params and cfg.omega_I > 0:
            r, J = deformation_energy_residual(state, cfg.model, cfg.omega_I, cfg.area_preserving)
            rs.append(r)
            if with_jac:
                row = np.zeros((3, self.ns))
                row[:, 6:6 + cfg.model.n_params] = J
                Js.append(row)
                Jc.append(np.zeros((3, 6)))
        anchor = self.anchors.get(s.id)
        if not self.rigid and anchor is not None and cfg.omega_E > 0:
            r, Jt, _ = equilibrium_residual(state, s, anchor, cfg.omega_E)
            rs.append(r)
            if with_jac:
                row = np.zeros((3, self.ns))
                row[:, :3] = Jt
                Js.append(row)
                Jc.append(np.zeros((3, 6)))
        r = np.concatenate(rs)
        if not with_jac:
            return r
        return r, np.vstack(Js), np.vstack(Jc)

    def _all_terms(self, x, with_jac):
        states, pose = x
        return _map(lambda i: self._terms(i, states[i], pose, with_jac), list(range(self.n_surfels)),
                    self.cfg.threads)

    def residuals(self, x):
        try:
            parts = self._all_terms(x, False)
        except Singular:
            return np.full(1, np.inf)
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, x):
        r = self.residuals(x)
        return float(r @ r) if np.all(np.isfinite(r)) else float("inf")

    def linearize(self, x):
        parts = self._all_terms(x, True)
        rows = sum(p[0].size for p in parts)
        J = np.zeros((rows, self.n_params))
        k = 0
        for i, (r, Js, Jc) in enumerate(parts):
            m = r.size
            J[k:k + m, i * self.ns:(i + 1) * self.ns] = Js
            J[k:k + m, -6:] = Jc
            k += m
        return np.concatenate([p[0] for p in parts]), J

    def normal_equations(self, x):
        parts = self._all_terms(x, True)
        n, ns = self.n_params, self.ns
        H = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        c = slice(n - 6, n)
        for i, (r, Js, Jc) in enumerate(parts):
            s = slice(i * ns, (i + 1) * ns)
            cost += float(r @ r)
            H[s, s] = Js.T @ Js
            H[s, c] = Js.T @ Jc
            H[c, s] = H[s, c].T
            H[c, c] += Jc.T @ Jc
            g[s] = Js.T @ r
            g[c] += Jc.T @ r
        return cost, H, g

    def solve_normal(self, M, b):
        """Arrow elimination: surfel blocks first, then the camera Schur complement."""
        ns, n = self.ns, self.n_params
        c = slice(n - 6, n)
        S = M[c, c].copy()
        rhs = b[c].copy()
        saved = []
        for i in range(self.n_surfels):
            if not ns:
                break
            s = slice(i * ns, (i + 1) * ns)
            f = scipy.linalg.cho_factor(M[s, s], check_finite=False)
            Y = scipy.linalg.cho_solve(f, M[s, c], check_finite=False)
            y = scipy.linalg.cho_solve(f, b[s], check_finite=False)
            S -= M[c, s] @ Y
            rhs -= M[c, s] @ y
            saved.append((s, Y, y))
        dc = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S, check_finite=False), rhs, check_finite=False)
        dx = np.empty(n)
        dx[c] = dc
        for s, Y, y in saved:
            dx[s] = y - Y @ dc
        return dx

    def apply_increment(self, x, dx):
        states, pose = x
        ns = self.ns
        try:
            new_states = tuple(apply_blocks(st, dx[i * ns:(i + 1) * ns], self.blocks, self.cfg)
                               for i, st in enumerate(states))
        except Singular:
            new_states = tuple(st.replace(translation=np.full(3, np.nan)) for st in states)
        return new_states, update_pose(pose, dx[-6:])


def solve_joint_multiscale(surfels, states, pose: Pose, pyramid, K: Intrinsics, cfg: TrackConfig,
                           anchors: dict | None = None, rigid: bool = False):
    """Coarse-to-fine joint solve; returns ``(states, pose, reports)``."""
    states = list(states)
    if cfg.gain_bias == "off":
        states = [st.replace(gain=1.0, bias=0.0) for st in states]
    levels = min(cfg.levels, len(pyramid))
    reports = []
    for level in reversed(range(levels)):
        image = pyramid.image(level)
        if cfg.gain_bias == "per_level" or (cfg.gain_bias == "frozen" and level == levels - 1):
            states = [refresh_gain_bias(s, st, pose, image, K, level) for s, st in zip(surfels, states)]
        problem = JointProblem(surfels, image, K, level, cfg, anchors, rigid)
        (states, pose), rep = lm_solve(problem, (tuple(states), pose), cfg.lm)
        states = list(states)
        reports.append(rep)
    return states, pose, reports


def track_deformable(frames, surfels: Sequence[Surfel], K: Intrinsics, config: TrackConfig | None = None,
                     pose0: Pose | None = None, anchors: dict | None = None, mode: str = "deform") -> list:
    """Track camera and surfels jointly (``mode="deform"``) or the camera only (``"rigid_map"``).

    ``frames`` yields ``(frame_index, ImagePyramid)`` pairs.  In deform mode
    outliers are left out of the joint solve; with ``reaccept`` they are
    re-aligned against the new pose (anchored) and re-admitted when their
    ZNCC recovers.  Raises :class:`TrackingLost` (carrying the results so far)
    when fewer than ``min_inliers`` surfels remain or the solve breaks down.
    """
    if mode not in ("deform", "rigid_map"):
        raise ValueError(f"unknown joint mode {mode!r}")
    cfg = config or TrackConfig()
    rigid = mode == "rigid_map"
    pose = pose0 or Pose.identity()
    surfels = sorted(surfels, key=lambda s: s.id)
    anchors = anchors if anchors is not None else default_anchors(surfels, cfg)
    current = {s.id: SurfelResult(s.id, SurfelState.identity(), 1.0, True, 0.0) for s in surfels}
    results = []
    for frame_index, pyramid in frames:
        active = surfels if rigid else [s for s in surfels if current[s.id].inlier]
        if len(active) < cfg.min_inliers:
            raise TrackingLost(f"frame {frame_index}: only {len(active)} inlier surfels", len(results), results)
        try:
            states, new_pose, reports = solve_joint_multiscale(
                active, [current[s.id].state for s in active], pose, pyramid, K, cfg, anchors, rigid)
        except LinearSolveFailure as exc:
            raise TrackingLost(f"frame {frame_index}: {exc}", len(results), results) from exc
        if not (np.all(np.isfinite(new_pose.matrix())) and np.isfinite(reports[-1].final_cost)):
            raise TrackingLost(f"frame {frame_index}: pose diverged", len(results), results)
        pose = new_pose
        image0 = pyramid.image(0)
        new = {}
        for s, st in zip(active, states):
            score, rms = score_surfel(s, st, pose, image0, K, cfg)
            inlier = score is not None and score >= cfg.zncc_threshold
            keep = st if (inlier or rigid) else current[s.id].state
            new[s.id] = SurfelResult(s.id, keep, score or 0.0, inlier, rms, st)
        for s in surfels:
            if s.id in new:
                continue
            prev = current[s.id]
            if cfg.reaccept:
                st, reps = solve_surfel_multiscale(s, prev.state, pose, pyramid, K, cfg, anchors.get(s.id))
            else:
                st, reps = prev.state, []
            score, rms = score_surfel(s, st, pose, image0, K, cfg)
            inlier = cfg.reaccept and score is not None and score >= cfg.zncc_threshold
            new[s.id] = SurfelResult(s.id, st if inlier else prev.state, score or 0.0, inlier, rms, st, reps)
        current = new
        results.append(FrameResult(frame_index, pose, [current[s.id] for s in surfels], reports))
    return results


def track_rigid_map(frames, surfels, K, config=None, pose0=None) -> list:
    """Pose-only tracking against the frozen rest-state map."""
    return track_deformable(frames, surfels, K, config, pose0, anchors={}, mode="rigid_map")
