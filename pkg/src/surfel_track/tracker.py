"""Static-camera surfel tracking, shared configuration and result types."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidDepth, OutOfImage, Singular
from .geometry import (
    DeformationModel,
    Pose,
    Surfel,
    SurfelState,
    deform_param_derivatives,
    deform_params,
    make_surfel,
    materialize_deform,
    so3_exp,
)
from .imaging import Intrinsics
from .optimizer import LmConfig, NlsProblem, lm_solve
from .photometric import (
    DEFAULT_CAP,
    DEFAULT_HALF_EXTENT,
    estimate_gain_bias,
    extract_texture_pyramid,
    photometric_residuals,
    reprojected_intensities,
    texture_at,
    zncc,
)

log = logging.getLogger(__name__)

GAIN_BIAS_MODES = ("frozen", "per_level", "optimize", "off")
# looser than the solver defaults: per-level solves are warm-started and cheap to repeat
TRACKING_LM = dict(max_iters=100, step_tol=1e-7, cost_tol=1e-6, lambda_down=0.25, lambda_up=4.0)


@dataclass
class TrackConfig:
    """Tracking parameters."""

    model: DeformationModel = DeformationModel.ISOMETRY
    omega_I: float = 1.0
    omega_E: float = 1.0
    sigma: float = 0.05  # equilibrium standard deviation, scene units
    levels: int = 3
    half_extent: int = DEFAULT_HALF_EXTENT
    zncc_threshold: float = 0.95
    cap: float = DEFAULT_CAP
    gain_bias: str = "optimize"
    reaccept: bool = True
    min_valid_fraction: float = 0.5
    min_inliers: int = 4
    area_preserving: bool = False
    threads: int = 1
    lm: LmConfig = field(default_factory=lambda: LmConfig(**TRACKING_LM))

    def __post_init__(self):
        self.model = DeformationModel.parse(self.model)
        if self.omega_I < 0 or self.omega_E < 0:
            raise ValueError("weights must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.gain_bias not in GAIN_BIAS_MODES:
            raise ValueError(f"gain_bias must be one of {GAIN_BIAS_MODES}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrackConfig":
        """Build from flat string key/values; ``lm.<name>`` keys go to :class:`LmConfig`."""
        kw, lm_kw = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        lm_types = {f.name: f.type for f in fields(LmConfig)}
        for key, raw in values.items():
            if key.startswith("lm."):
                name = key[3:]
                if name not in lm_types:
                    raise KeyError(f"unknown LM option {name!r}")
                lm_kw[name] = _coerce(raw, lm_types[name])
            elif key in types and key != "lm":
                kw[key] = _coerce(raw, types[key])
        return cls(lm=LmConfig(**{**TRACKING_LM, **lm_kw}), **kw)

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "lm"}
        d["model"] = self.model.value
        d.update({f"lm.{f.name}": getattr(self.lm, f.name) for f in fields(LmConfig)})
        return d


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    t = str(typ)
    if "bool" in t:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if "int" in t and "float" not in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw.strip()


@dataclass(frozen=True)
class EquilibriumAnchor:
    position: np.ndarray
    information: np.ndarray  # inverse covariance

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        info = np.asarray(self.information, dtype=float).reshape(3, 3)
        object.__setattr__(self, "information", 0.5 * (info + info.T))

    @classmethod
    def isotropic(cls, position, sigma: float) -> "EquilibriumAnchor":
        return cls(position, np.eye(3) / sigma**2)

    def sqrt_information(self) -> np.ndarray:
        """Upper-triangular ``L`` with ``L.T @ L == information``."""
        return np.linalg.cholesky(self.information).T


@dataclass
class SurfelResult:
    id: int
    state: SurfelState
    zncc: float
    inlier: bool
    residual_rms: float
    solved_state: SurfelState | None = None
    reports: list = field(default_factory=list)


@dataclass
class FrameResult:
    frame: int
    pose: Pose
    surfels: list
    reports: list = field(default_factory=list)
    lost: bool = False

    def by_id(self) -> dict:
        return {s.id: s for s in self.surfels}

    def inlier_ratio(self) -> float:
        return float(np.mean([s.inlier for s in self.surfels])) if self.surfels else 0.0

    def residual_rms(self) -> float:
        """Root mean square of the per-surfel photometric RMS values (finest level)."""
        v = np.array([s.residual_rms for s in self.surfels], dtype=float)
        v = v[np.isfinite(v)]
        return float(np.sqrt(np.mean(v**2))) if v.size else float("nan")


# ---------------------------------------------------------------------------
# Residual terms shared by both pipelines
# ---------------------------------------------------------------------------

def deformation_energy_residual(state: SurfelState, model, weight: float, area_preserving=False):
    """``sqrt(w) * (F11 - 1, F12, F22 - 1)`` and its Jacobian in model parameters."""
    model = DeformationModel.parse(model)
    F = state.deform
    s = np.sqrt(weight)
    r = s * np.array([F[0, 0] - 1.0, F[0, 1], F[1, 1] - 1.0])
    dF = deform_param_derivatives(model, deform_params(model, F), area_preserving)
    J = s * np.stack([[d[0, 0], d[0, 1], d[1, 1]] for d in dF], axis=1) if len(dF) else np.zeros((3, 0))
    return r, J


def equilibrium_residual(state: SurfelState, surfel: Surfel, anchor: EquilibriumAnchor, omega_E: float):
    """``sqrt(w) L (X0 + t - Xe)`` with Jacobians w.r.t. translation and rotation.

    The centre does not depend on the surfel rotation, so that block is zero.
    """
    L = np.sqrt(omega_E) * anchor.sqrt_information()
    r = L @ (surfel.rest_position + state.translation - anchor.position)
    return r, L.copy(), np.zeros((3, 3))


# ---------------------------------------------------------------------------
# Per-surfel problem (camera fixed)
# ---------------------------------------------------------------------------

def surfel_blocks(cfg: TrackConfig) -> list:
    blocks = ["translation", "rotation"]
    if cfg.model.n_params:
        blocks.append("deform")
    if cfg.gain_bias == "optimize":
        blocks.append("gain_bias")
    return blocks


def apply_surfel_increment(state: SurfelState, dx, cfg: TrackConfig) -> SurfelState:
    """Translation adds, rotation right-composes, deformation parameters add."""
    k = cfg.model.n_params
    t = state.translation + dx[:3]
    R = state.rotation @ so3_exp(dx[3:6])
    F = state.deform
    if k:
        p = deform_params(cfg.model, F) + dx[6:6 + k]
        F = materialize_deform(cfg.model, p, cfg.area_preserving)
    gain, bias = state.gain, state.bias
    if cfg.gain_bias == "optimize":
        gain += dx[6 + k]
        bias += dx[7 + k]
    return SurfelState(t, R, F, gain, bias)


class SurfelProblem(NlsProblem):
    """Align one surfel against one pyramid level with the camera fixed.

    Optional extras: the deformation energy (non-isometric models) and an
    equilibrium anchor (used when re-testing outliers in joint tracking).
    """

    def __init__(self, surfel: Surfel, pose: Pose, image, K: Intrinsics, level: int,
                 cfg: TrackConfig, anchor: EquilibriumAnchor | None = None):
        self.surfel, self.pose, self.image, self.K, self.level = surfel, pose, image, K, level
        self.cfg = cfg
        self.anchor = anchor
        self.blocks = surfel_blocks(cfg)
        self.n_params = 6 + cfg.model.n_params + (2 if cfg.gain_bias == "optimize" else 0)

    def _stack(self, state, with_jac):
        cfg = self.cfg
        active = self.blocks if with_jac else None
        rb = photometric_residuals(self.surfel, state, self.pose, self.image, self.K, self.level,
                                   cfg.cap, active, cfg.model, cfg.area_preserving)
        rs, Js = [rb.residuals], [rb.jacobian]
        if cfg.model.n_params and cfg.omega_I > 0:
            r, J = deformation_energy_residual(state, cfg.model, cfg.omega_I, cfg.area_preserving)
            rs.append(r)
            if with_jac:
                row = np.zeros((3, self.n_params))
                row[:, 6:6 + cfg.model.n_params] = J
                Js.append(row)
        if self.anchor is not None and cfg.omega_E > 0:
            r, Jt, _ = equilibrium_residual(state, self.surfel, self.anchor, cfg.omega_E)
            rs.append(r)
            if with_jac:
                row = np.zeros((3, self.n_params))
                row[:, :3] = Jt
                Js.append(row)
        r = np.concatenate(rs)
        return (r, np.vstack(Js)) if with_jac else r

    def residuals(self, state):
        try:
            return self._stack(state, False)
        except Singular:
            return np.full(1, np.inf)

    def linearize(self, state):
        return self._stack(state, True)

    def apply_increment(self, state, dx):
        try:
            return apply_surfel_increment(state, dx, self.cfg)
        except Singular:
            return state.replace(translation=np.full(3, np.nan))

    def cost(self, state):
        r = self.residuals(state)
        return float(r @ r) if np.all(np.isfinite(r)) else float("inf")


# ---------------------------------------------------------------------------
# Surfel preparation and scoring
# ---------------------------------------------------------------------------

def prepare_surfels(ref_pyramid, depth, K: Intrinsics, pixels: Iterable, half_extent: int = DEFAULT_HALF_EXTENT,
                    pose: Pose | None = None, ids: Sequence[int] | None = None) -> list:
    """Initialise textured surfels at reference pixels; rejects unusable ones.

    Surfels are built in the camera frame of the reference image and moved to
    the world frame with ``pose`` (camera-from-world) when given.
    """
    pose = pose or Pose.identity()
    inv = pose.inverse()
    out = []
    pixels = list(pixels)
    ids = list(ids) if ids is not None else list(range(len(pixels)))
    for sid, px in zip(ids, pixels):
        try:
            s = make_surfel(sid, depth, K, px)
        except InvalidDepth as exc:
            log.info("surfel %d rejected: %s", sid, exc)
            continue
        s = Surfel(s.id, inv.apply(s.rest_position), inv.rotation @ s.rest_jacobian, s.anchor_pixel)
        try:
            tex = extract_texture_pyramid(s, ref_pyramid, pose, K, half_extent)
        except OutOfImage as exc:
            log.info("surfel %d rejected: %s", sid, exc)
            continue
        out.append(s.with_texture(tex))
    return out


def score_surfel(surfel: Surfel, state: SurfelState, pose: Pose, image, K: Intrinsics, cfg: TrackConfig):
    """ZNCC at level 0 and the residual RMS; ``None`` score if too few samples are valid."""
    I, valid = reprojected_intensities(surfel, state, pose, image, K, 0)
    tex = texture_at(surfel, 0)
    if valid.mean() < cfg.min_valid_fraction:
        return None, float("nan")
    rb = photometric_residuals(surfel, state, pose, image, K, 0, cfg.cap)
    return zncc(tex, I, valid), rb.rms()


def refresh_gain_bias(surfel: Surfel, state: SurfelState, pose: Pose, image, K: Intrinsics,
                      level: int) -> SurfelState:
    I, valid = reprojected_intensities(surfel, state, pose, image, K, level)
    if valid.sum() < 2:
        return state
    g, b = estimate_gain_bias(texture_at(surfel, level), I, valid)
    if not (np.isfinite(g) and g > 0):
        return state
    return state.replace(gain=g, bias=b)


def classify_outliers(frame_result: FrameResult, threshold: float) -> FrameResult:
    """Re-flag surfels by ``zncc >= threshold`` (scores already computed)."""
    surfels = [replace(s, inlier=bool(s.zncc >= threshold)) for s in frame_result.surfels]
    return replace(frame_result, surfels=surfels)


def solve_surfel_multiscale(surfel: Surfel, init: SurfelState, pose: Pose, pyramid, K: Intrinsics,
                            cfg: TrackConfig, anchor: EquilibriumAnchor | None = None):
    """Coarse-to-fine alignment of one surfel; returns ``(state, reports)``."""
    state = init
    if cfg.gain_bias == "off":
        state = state.replace(gain=1.0, bias=0.0)
    levels = min(cfg.levels, len(pyramid))
    reports = []
    for level in reversed(range(levels)):
        image = pyramid.image(level)
        if cfg.gain_bias == "per_level" or (cfg.gain_bias == "frozen" and level == levels - 1):
            state = refresh_gain_bias(surfel, state, pose, image, K, level)
        problem = SurfelProblem(surfel, pose, image, K, level, cfg, anchor)
        state, rep = lm_solve(problem, state, cfg.lm)
        reports.append(rep)
    return state, reports


# ---------------------------------------------------------------------------
# Static-camera pipeline
# ---------------------------------------------------------------------------

def _worker_count(threads: int | None) -> int:
    if threads:
        return max(1, int(threads))
    env = os.environ.get("SURFEL_TRACK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, items, threads):
    n = _worker_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _static_step(surfel, prev: SurfelResult, pyramid, K, cfg, pose):
    if not prev.inlier and not cfg.reaccept:
        return replace(prev, reports=[])
    solved, reports = solve_surfel_multiscale(surfel, prev.state, pose, pyramid, K, cfg)
    score, rms = score_surfel(surfel, solved, pose, pyramid.image(0), K, cfg)
    if score is None:
        return SurfelResult(surfel.id, prev.state, 0.0, False, rms, solved, reports)
    inlier = score >= cfg.zncc_threshold
    return SurfelResult(surfel.id, solved if inlier else prev.state, score, inlier, rms, solved, reports)


def track_static(frames, surfels: Sequence[Surfel], K: Intrinsics, config: TrackConfig | None = None,
                 pose: Pose | None = None) -> list:
    """Track every surfel independently with a fixed camera.

    ``frames`` yields ``(frame_index, ImagePyramid)`` pairs.  Each surfel starts
    from its previous solution; outliers keep their last accepted state.
    """
    cfg = config or TrackConfig()
    pose = pose or Pose.identity()
    surfels = sorted(surfels, key=lambda s: s.id)
    current = [SurfelResult(s.id, SurfelState.identity(), 1.0, True, 0.0) for s in surfels]
    results = []
    for frame_index, pyramid in frames:
        items = list(zip(surfels, current))
        current = _map(lambda it: _static_step(it[0], it[1], pyramid, K, cfg, pose), items, cfg.threads)
        results.append(FrameResult(frame_index, pose, list(current)))
    return results
