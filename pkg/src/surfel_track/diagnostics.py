"""Self-checks: analytic Jacobians against finite differences, and the two
gauge ambiguities of the surfel parametrization.

All checks run on :class:`~surfel_track.imaging.AnalyticImage` so that the
finite differences see exactly the derivative the chain rule uses.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DeformationModel,
    Pose,
    Surfel,
    SurfelState,
    deform_params,
    materialize_deform,
    scale_surfel,
    so3_exp,
    surfel_point,
    update_pose,
)
from .imaging import AnalyticImage, Intrinsics, project, project_points, projection_jacobian
from .optimizer import hessian_spectrum
from .photometric import TexturePatch, extract_texture, photometric_residuals, texture_grid
from .tracker import EquilibriumAnchor, TrackConfig, deformation_energy_residual, equilibrium_residual

JACOBIAN_TOL = 1e-4
GRADIENT_TOL = 1e-6
STEP_GEOMETRY = 1e-5
STEP_PHOTOMETRIC = 1e-6
BLOCKS = ("translation", "rotation", "deform", "pose", "gain_bias", "equilibrium",
          "equilibrium_gradient", "deformation_energy", "projection")
DEFAULT_K = Intrinsics(500.0, 500.0, 319.5, 239.5)
SIZE = (640, 480)


def rel_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.linalg.norm(n)
    diff = np.linalg.norm(a - n)
    return float(diff / scale) if scale > 1e-12 else float(diff)


# ---------------------------------------------------------------------------
# random configurations
# ---------------------------------------------------------------------------

def _tangent_basis(rng, Xc, K: Intrinsics, max_tilt=0.7):
    """Per-pixel tangent basis (3x2) of a plane through ``Xc`` tilted from the view ray."""
    ray = Xc / np.linalg.norm(Xc)
    tilt = so3_exp(rng.uniform(-max_tilt, max_tilt, 3) * np.array([1.0, 1.0, 0.0]))
    n = tilt @ (-ray)
    e1 = np.cross(n, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return Xc[2] / K.fx * np.column_stack([e1, e2])


def random_pose(rng, rot=0.1, trans=0.05) -> Pose:
    return Pose(so3_exp(rng.uniform(-rot, rot, 3)), rng.uniform(-trans, trans, 3))


def random_surfel(rng, pose: Pose, K: Intrinsics = DEFAULT_K, surfel_id: int = 0,
                  margin: int = 120, depth=(0.8, 1.5)) -> Surfel:
    w, h = SIZE
    px = rng.uniform([margin, margin], [w - margin, h - margin])
    z = rng.uniform(*depth)
    Xc = z * np.array([(px[0] - K.cx) / K.fx, (px[1] - K.cy) / K.fy, 1.0])
    inv = pose.inverse()
    J = inv.rotation @ _tangent_basis(rng, Xc, K)
    return Surfel(surfel_id, inv.apply(Xc), J, tuple(px))


def random_state(rng, model: DeformationModel, area_preserving=False) -> SurfelState:
    k = model.n_params
    if model is DeformationModel.GENERAL:
        p = np.array([1.0, 0.0, 1.0]) + rng.uniform(-0.1, 0.1, 3)
    elif model is DeformationModel.EQUIREAL:
        p = np.array([1.0, 0.0]) + rng.uniform(-0.1, 0.1, 2)
    elif model is DeformationModel.CONFORMAL:
        p = np.array([1.0 + rng.uniform(-0.1, 0.1)])
    else:
        p = np.zeros(0)
    F = materialize_deform(model, p, area_preserving) if k else np.eye(2)
    return SurfelState(rng.uniform(-0.005, 0.005, 3), so3_exp(rng.uniform(-0.05, 0.05, 3)), F,
                       1.0 + rng.uniform(-0.2, 0.2), rng.uniform(-0.05, 0.05))


def _textured(rng, surfel, state, pose, image, K, level, half_extent, noise=0.02):
    """Attach a texture equal to the current warped intensities plus noise."""
    local = texture_grid(half_extent)
    K_l = K.at_level(level) if level else K
    S = surfel_point(surfel, state, local)
    px, _ = project_points(K_l, pose.apply(S))
    val, _ = image.sample(px[:, 0], px[:, 1])
    vals = state.gain * val + state.bias + rng.normal(0.0, noise, val.size)
    return surfel.with_texture(TexturePatch(half_extent, local, vals))


# ---------------------------------------------------------------------------
# Jacobian suite
# ---------------------------------------------------------------------------

@dataclass
class BlockCheck:
    block: str
    tolerance: float
    trials: int = 0
    max_error: float = 0.0
    worst_trial: int = -1

    def add(self, trial, err):
        self.trials += 1
        if not np.isfinite(err) or err > self.max_error:
            self.max_error = float(err) if np.isfinite(err) else float("inf")
            self.worst_trial = trial

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.max_error < self.tolerance


@dataclass
class JacobianReport:
    checks: dict = field(default_factory=dict)
    seed: int = 0
    trials: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "trials", "max_rel_error", "tolerance", "worst_trial", "passed"])
        for c in self.checks.values():
            w.writerow([c.block, c.trials, repr(c.max_error), repr(c.tolerance), c.worst_trial, int(c.passed)])
        return buf.getvalue()


def _perturbers(model, area_preserving):
    def deform(st, e):
        p = deform_params(model, st.deform) + e
        return st.replace(deform=materialize_deform(model, p, area_preserving))

    return {
        "translation": (3, lambda st, pose, e: (st.replace(translation=st.translation + e), pose)),
        "rotation": (3, lambda st, pose, e: (st.replace(rotation=st.rotation @ so3_exp(e)), pose)),
        "deform": (model.n_params, lambda st, pose, e: (deform(st, e), pose)),
        "pose": (6, lambda st, pose, e: (st, update_pose(pose, e))),
        "gain_bias": (2, lambda st, pose, e: (st.replace(gain=st.gain + e[0], bias=st.bias + e[1]), pose)),
    }


def _photometric_trial(rng, image, K, model, area_preserving, fault):
    """Relative error per photometric block for one random configuration."""
    pose = random_pose(rng)
    level = int(rng.integers(0, 2))
    surfel = random_surfel(rng, pose, K)
    state = random_state(rng, model, area_preserving)
    surfel = _textured(rng, surfel, state, pose, image, K, level, int(rng.integers(4, 12)))
    active = ["translation", "rotation", "deform", "pose", "gain_bias"]
    if not model.n_params:
        active.remove("deform")
    kw = dict(level=level, model=model, area_preserving=area_preserving)
    base = photometric_residuals(surfel, state, pose, image, K, active=active, **kw)
    use = base.valid_mask & ~base.saturated
    pert = _perturbers(model, area_preserving)
    errors = {}
    col = 0
    for name in active:
        width, fn = pert[name]
        h = STEP_PHOTOMETRIC if name == "gain_bias" else STEP_GEOMETRY
        Ja = base.jacobian[:, col:col + width].copy()
        if fault == name:
            Ja[:, 0] = -Ja[:, 0]
        col += width
        Jn = np.zeros_like(Ja)
        ok = use.copy()
        for k in range(width):
            e = np.zeros(width)
            e[k] = h
            plus = photometric_residuals(surfel, *fn(state, pose, e), image, K, **kw)
            minus = photometric_residuals(surfel, *fn(state, pose, -e), image, K, **kw)
            ok &= plus.valid_mask & ~plus.saturated & minus.valid_mask & ~minus.saturated
            Jn[:, k] = (plus.residuals - minus.residuals) / (2 * h)
        errors[name] = rel_error(Ja[ok], Jn[ok]) if ok.any() else float("nan")
    return errors


def _equilibrium_trial(rng, fault):
    pose = Pose.identity()
    surfel = random_surfel(rng, pose)
    state = random_state(rng, DeformationModel.ISOMETRY)
    A = rng.normal(size=(3, 3))
    anchor = EquilibriumAnchor(surfel.rest_position + rng.normal(0, 0.02, 3), (A @ A.T + 0.1 * np.eye(3)) * 400)
    w = float(rng.uniform(0.1, 2.0))
    r0, Jt, Jr = equilibrium_residual(state, surfel, anchor, w)
    if fault == "equilibrium":
        Jt = Jt.copy()
        Jt[:, 0] = -Jt[:, 0]
    h = STEP_GEOMETRY
    Jn_t = np.zeros((3, 3))
    Jn_r = np.zeros((3, 3))
    gn = np.zeros(3)

    def cost(st):
        r = equilibrium_residual(st, surfel, anchor, w)[0]
        return float(r @ r)

    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        sp, sm = state.replace(translation=state.translation + e), state.replace(translation=state.translation - e)
        Jn_t[:, k] = (equilibrium_residual(sp, surfel, anchor, w)[0] - equilibrium_residual(sm, surfel, anchor, w)[0]) / (2 * h)
        gn[k] = (cost(sp) - cost(sm)) / (2 * h)
        rp = state.replace(rotation=state.rotation @ so3_exp(e))
        rm = state.replace(rotation=state.rotation @ so3_exp(-e))
        Jn_r[:, k] = (equilibrium_residual(rp, surfel, anchor, w)[0] - equilibrium_residual(rm, surfel, anchor, w)[0]) / (2 * h)
    err = max(rel_error(Jt, Jn_t), float(np.linalg.norm(Jr - Jn_r)))
    # gradient of w (X - Xe)^T Sigma^-1 (X - Xe) in closed form
    X = surfel.rest_position + state.translation
    g = 2.0 * w * anchor.information @ (X - anchor.position)
    if fault == "equilibrium_gradient":
        g = -g
    return err, rel_error(g, gn)


def _energy_trial(rng, fault):
    worst = 0.0
    for model, ap in ((DeformationModel.CONFORMAL, False), (DeformationModel.EQUIREAL, False),
                      (DeformationModel.EQUIREAL, True), (DeformationModel.GENERAL, False)):
        state = random_state(rng, model, ap)
        w = float(rng.uniform(0.1, 2.0))
        r0, J = deformation_energy_residual(state, model, w, ap)
        if fault == "deformation_energy":
            J = J.copy()
            J[:, 0] = -J[:, 0]
        p0 = deform_params(model, state.deform)
        Jn = np.zeros_like(J)
        for k in range(p0.size):
            e = np.zeros(p0.size)
            e[k] = STEP_GEOMETRY
            sp = state.replace(deform=materialize_deform(model, p0 + e, ap))
            sm = state.replace(deform=materialize_deform(model, p0 - e, ap))
            Jn[:, k] = (deformation_energy_residual(sp, model, w, ap)[0]
                        - deformation_energy_residual(sm, model, w, ap)[0]) / (2 * STEP_GEOMETRY)
        worst = max(worst, rel_error(J, Jn))
    return worst


def _projection_trial(rng, K, fault):
    Xc = np.array([*rng.uniform(-0.5, 0.5, 2), rng.uniform(0.5, 3.0)])
    Ja = projection_jacobian(K, Xc)
    if fault == "projection":
        Ja = Ja.copy()
        Ja[:, 0] = -Ja[:, 0]
    Jn = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = STEP_GEOMETRY
        Jn[:, k] = (np.asarray(project(K, Xc + e)) - np.asarray(project(K, Xc - e))) / (2 * STEP_GEOMETRY)
    return rel_error(Ja, Jn)


def check_jacobians(seed: int = 0, trials: int = 200, fault: str | None = None,
                    tolerance: float = JACOBIAN_TOL) -> JacobianReport:
    """Compare every analytic Jacobian block with central differences.

    ``fault`` names a block whose first analytic column is negated before the
    comparison; it exists to prove the suite can fail.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if fault is not None and fault not in BLOCKS:
        raise ValueError(f"unknown block {fault!r}")
    rng = np.random.default_rng(seed)
    K = DEFAULT_K
    images = [AnalyticImage(*SIZE, seed=seed * 7 + i) for i in range(4)]
    models = [DeformationModel.GENERAL, DeformationModel.EQUIREAL, DeformationModel.CONFORMAL]
    report = JacobianReport(seed=seed, trials=trials)
    for name in BLOCKS:
        tol = GRADIENT_TOL if name == "equilibrium_gradient" else tolerance
        report.checks[name] = BlockCheck(name, tol)
    for t in range(trials):
        model = models[t % len(models)]
        ap = model is DeformationModel.EQUIREAL and bool(rng.integers(0, 2))
        errs = _photometric_trial(rng, images[t % len(images)], K, model, ap, fault)
        for name, e in errs.items():
            report.checks[name].add(t, e)
        e_eq, e_grad = _equilibrium_trial(rng, fault)
        report.checks["equilibrium"].add(t, e_eq)
        report.checks["equilibrium_gradient"].add(t, e_grad)
        report.checks["deformation_energy"].add(t, _energy_trial(rng, fault))
        report.checks["projection"].add(t, _projection_trial(rng, K, fault))
    return report


# ---------------------------------------------------------------------------
# growing-map ambiguity
# ---------------------------------------------------------------------------

@dataclass
class GrowingReport:
    mus: tuple
    max_displacement: float
    ratio_general: float
    ratio_isometry: float
    null_cosine: float
    null_vector: np.ndarray
    mu_direction: np.ndarray
    displacement_tol: float = 1e-9
    ratio_tol: float = 1e-6
    cosine_tol: float = 0.99
    improvement_tol: float = 1e3

    @property
    def improvement(self) -> float:
        return self.ratio_isometry / max(self.ratio_general, 1e-300)

    @property
    def passed(self) -> bool:
        return (self.max_displacement < self.displacement_tol and self.ratio_general < self.ratio_tol
                and self.null_cosine > self.cosine_tol and self.improvement >= self.improvement_tol)


def _surfel_at_solution(rng, image, K, surfel_id=0, half_extent=11, pose=None):
    pose = pose or Pose.identity()
    s = random_surfel(rng, pose, K, surfel_id)
    return s.with_texture(extract_texture(s, image, pose, K, half_extent))


def growing_ambiguity(seed: int = 0, n_surfels: int = 100, mus=(0.5, 2.0, 10.0),
                      n_hessian: int = 10) -> GrowingReport:
    """Scale invariance of projections and the resulting Hessian null direction.

    Displacements use ``n_surfels`` random surfels and states; the Hessian
    figures are the worst over ``n_hessian`` surfels at an exact solution.
    """
    rng = np.random.default_rng(seed)
    K = DEFAULT_K
    pose = Pose.identity()
    grid = texture_grid(11)
    disp = 0.0
    for i in range(n_surfels):
        s = random_surfel(rng, pose, K, i)
        st = random_state(rng, DeformationModel.GENERAL)
        p0, _ = project_points(K, surfel_point(s, st, grid))
        for mu in mus:
            p1, _ = project_points(K, surfel_point(s, scale_surfel(s, st, mu), grid))
            disp = max(disp, float(np.max(np.abs(p1 - p0))))
    image = AnalyticImage(*SIZE, seed=seed)
    worst_gen, worst_iso, worst_cos = 0.0, np.inf, 1.0
    null_vec = mu_dir = None
    for i in range(n_hessian):
        s = _surfel_at_solution(rng, image, K, i)
        st = SurfelState.identity()
        Jg = photometric_residuals(s, st, pose, image, K, active=["translation", "rotation", "deform"],
                                   model=DeformationModel.GENERAL).jacobian
        Ji = photometric_residuals(s, st, pose, image, K, active=["translation", "rotation"],
                                   model=DeformationModel.ISOMETRY).jacobian
        sg, Vt = hessian_spectrum(Jg, return_vectors=True)
        si = hessian_spectrum(Ji)
        v = Vt[-1]
        m = np.concatenate([s.rest_position + st.translation, np.zeros(3),
                            deform_params(DeformationModel.GENERAL, st.deform)])
        cos = abs(float(v @ m)) / np.linalg.norm(m)
        if sg[-1] / sg[0] >= worst_gen:
            worst_gen, null_vec, mu_dir = sg[-1] / sg[0], v, m / np.linalg.norm(m)
        worst_iso = min(worst_iso, si[-1] / si[0])
        worst_cos = min(worst_cos, cos)
    return GrowingReport(tuple(mus), disp, float(worst_gen), float(worst_iso), float(worst_cos),
                         null_vec, mu_dir)


# ---------------------------------------------------------------------------
# floating-map ambiguity
# ---------------------------------------------------------------------------

@dataclass
class FloatingReport:
    omega_E: float
    singular_values: np.ndarray
    threshold: float = 1e-8

    @property
    def ratio(self) -> float:
        return float(self.singular_values[-1] / self.singular_values[0])

    @property
    def near_null(self) -> int:
        return int(np.sum(self.singular_values < self.threshold * self.singular_values[0]))


def joint_hessian_spectrum(seed: int = 0, omega_E: float = 1.0, n_surfels: int = 12,
                           config: TrackConfig | None = None, scaled: bool = True) -> np.ndarray:
    """Singular values of the joint (surfels + camera) Hessian at a solution.

    With ``scaled`` the Hessian is first given a unit diagonal, as the
    preconditioned solver sees it.  Diagonal scaling keeps exact null
    directions null but stops unit choices (radians against scene units)
    from masquerading as rank loss.
    """
    from .joint import JointProblem, default_anchors

    rng = np.random.default_rng(seed)
    K = DEFAULT_K
    image = AnalyticImage(*SIZE, seed=seed + 1)
    cfg = config or TrackConfig()
    cfg = TrackConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "omega_E": omega_E})
    surfels = [_surfel_at_solution(rng, image, K, i) for i in range(n_surfels)]
    problem = JointProblem(surfels, image, K, 0, cfg, default_anchors(surfels, cfg))
    states = tuple(SurfelState.identity() for _ in surfels)
    _, J = problem.linearize((states, Pose.identity()))
    if scaled:
        J = J / np.sqrt(np.maximum(np.sum(J * J, axis=0), 1e-300))
    return hessian_spectrum(J)


def floating_ambiguity(seed: int = 0, omegas=(0.0, 1.0), n_surfels: int = 12, scaled: bool = True) -> list:
    return [FloatingReport(w, joint_hessian_spectrum(seed, w, n_surfels, scaled=scaled)) for w in omegas]


def floating_passed(reports) -> bool:
    """Gauge present without the regularizer, removed with it."""
    ok = True
    for r in reports:
        ok &= r.near_null >= 6 if r.omega_E == 0 else r.ratio > r.threshold
    return bool(ok)
