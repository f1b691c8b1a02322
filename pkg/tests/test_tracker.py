import random

import numpy as np
import pytest

from surfel_track.diagnostics import _surfel_at_solution, random_state
from surfel_track.errors import TrackingLost
from surfel_track.evaluation import collect
from surfel_track.geometry import DeformationModel, Pose, SurfelState, so3_exp
from surfel_track.imaging import AnalyticImage, Intrinsics
from surfel_track.joint import JointProblem, anchors_from_trajectories, default_anchors, track_deformable
from surfel_track.optimizer import damped_system, fd_jacobian
from surfel_track.pipeline import run_scene, scene_pyramids, setup_scene
from surfel_track.synth import make_scene
from surfel_track.tracker import (
    EquilibriumAnchor,
    FrameResult,
    SurfelResult,
    TrackConfig,
    classify_outliers,
    deformation_energy_residual,
    equilibrium_residual,
    track_static,
)

K = Intrinsics(500.0, 500.0, 319.5, 239.5)


@pytest.fixture(scope="module")
def still_scene():
    """A static plane: every frame equals the reference."""
    scene = make_scene("rigid_plane", 0, n_frames=3, static_camera=True)
    return setup_scene(scene, spacing=120, margin=100)


@pytest.fixture(scope="module")
def sliding_plane():
    scene = make_scene("rigid_plane", 0, n_frames=6, static_camera=True, body_speed=2.0)
    setup = setup_scene(scene, spacing=120, margin=100)
    results, metrics = run_scene(setup, "static", TrackConfig())
    return setup, results, metrics


# --- residual terms ----------------------------------------------------------------

def _surfel(rng):
    image = AnalyticImage(640, 480, seed=1)
    return _surfel_at_solution(rng, image, K)


def test_equilibrium_zero_at_anchor(rng):
    s = _surfel(rng)
    anchor = EquilibriumAnchor.isotropic(s.rest_position + [0.01, 0, 0], 0.05)
    r, _, _ = equilibrium_residual(SurfelState(translation=[0.01, 0, 0]), s, anchor, 3.0)
    assert np.allclose(r, 0.0)


def test_equilibrium_unit_case(rng):
    s = _surfel(rng)
    anchor = EquilibriumAnchor(s.rest_position, np.eye(3))
    r, _, _ = equilibrium_residual(SurfelState(translation=[1.0, 0, 0]), s, anchor, 1.0)
    assert r @ r == pytest.approx(1.0)


def test_equilibrium_matches_quadratic_form(rng):
    s = _surfel(rng)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        info = np.linalg.inv(A @ A.T + 0.1 * np.eye(3))
        anchor = EquilibriumAnchor(s.rest_position + rng.normal(size=3) * 0.01, info)
        state = SurfelState(translation=rng.normal(size=3) * 0.02, rotation=so3_exp(rng.normal(size=3) * 0.1))
        w = rng.uniform(0.1, 5)
        d = s.rest_position + state.translation - anchor.position
        r, _, _ = equilibrium_residual(state, s, anchor, w)
        assert r @ r == pytest.approx(w * d @ info @ d, rel=1e-12)


def test_equilibrium_gradient_matches_finite_differences(rng):
    s = _surfel(rng)
    A = rng.normal(size=(3, 3))
    anchor = EquilibriumAnchor(s.rest_position, np.linalg.inv(A @ A.T + np.eye(3)))
    state = SurfelState(translation=rng.normal(size=3) * 0.02, rotation=so3_exp(rng.normal(size=3) * 0.2))

    def cost(st):
        r, _, _ = equilibrium_residual(st, s, anchor, 2.0)
        return r @ r

    r, Jt, Jr = equilibrium_residual(state, s, anchor, 2.0)
    h = 1e-6
    g_t = [(cost(state.replace(translation=state.translation + e))
            - cost(state.replace(translation=state.translation - e))) / (2 * h) for e in np.eye(3) * h]
    g_r = [(cost(state.replace(rotation=state.rotation @ so3_exp(e)))
            - cost(state.replace(rotation=state.rotation @ so3_exp(-e)))) / (2 * h) for e in np.eye(3) * h]
    assert np.linalg.norm(2 * Jt.T @ r - g_t) / np.linalg.norm(g_t) < 1e-6
    assert np.allclose(2 * Jr.T @ r, g_r, atol=1e-9)


@pytest.mark.parametrize("model", ["conformal", "equireal", "general"])
def test_deformation_energy(model, rng):
    m = DeformationModel.parse(model)
    state = random_state(rng, m)
    r, J = deformation_energy_residual(state, m, 2.5)
    F = state.deform
    assert r @ r == pytest.approx(2.5 * ((F[0, 0] - 1) ** 2 + F[0, 1] ** 2 + (F[1, 1] - 1) ** 2))
    assert J.shape == (3, m.n_params)


def test_anchors_from_trajectories():
    traj = np.zeros((4, 2, 3))
    traj[:, 0, 0] = [0.0, 1.0, 2.0, 3.0]
    traj[:, 1] = [1.0, 2.0, 3.0]
    a = anchors_from_trajectories([7, 9], traj)
    assert np.allclose(a[7].position, [1.5, 0, 0]) and np.allclose(a[9].position, [1, 2, 3])
    assert a[9].information[0, 0] == pytest.approx(1e6)


# --- outlier classification -----------------------------------------------------

def _frame(scores):
    return FrameResult(0, Pose.identity(),
                       [SurfelResult(i, SurfelState(), z, True, 0.0) for i, z in enumerate(scores)])


def test_classify_threshold_zero_accepts_all():
    fr = classify_outliers(_frame([0.0, 0.3, 0.99]), 0.0)
    assert all(s.inlier for s in fr.surfels)


def test_classify_above_one_rejects_all():
    fr = classify_outliers(_frame([0.5, 1.0]), 1.0 + 1e-9)
    assert not any(s.inlier for s in fr.surfels)


# --- configuration ----------------------------------------------------------------

def test_config_from_mapping():
    cfg = TrackConfig.from_mapping({"model": "general", "omega_E": "0.5", "levels": "2",
                                    "reaccept": "false", "lm.max_iters": "7"})
    assert cfg.model is DeformationModel.GENERAL and cfg.omega_E == 0.5 and cfg.levels == 2
    assert cfg.reaccept is False and cfg.lm.max_iters == 7
    again = TrackConfig.from_mapping({k: str(v) for k, v in cfg.as_dict().items()})
    assert again.as_dict() == cfg.as_dict()


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrackConfig(omega_E=-1)
    with pytest.raises(ValueError):
        TrackConfig(gain_bias="sometimes")
    with pytest.raises(KeyError):
        TrackConfig.from_mapping({"lm.nonsense": "1"})


# --- static pipeline --------------------------------------------------------------

def test_identical_frames_keep_identity(still_scene):
    frames = scene_pyramids(still_scene.scene, [1, 2], 3)
    results = track_static(frames, still_scene.surfels, K, TrackConfig())
    for fr in results:
        for s in fr.surfels:
            assert np.allclose(s.state.translation, 0.0, atol=1e-12)
            assert np.allclose(s.state.rotation, np.eye(3), atol=1e-12)
            assert s.zncc == pytest.approx(1.0, abs=1e-12) and s.inlier


def test_translated_plane_recovered(sliding_plane):
    """Per-frame error stays below 1% of the per-frame motion across the line of
    sight; along the ray it is bounded relative to depth (see ledger)."""
    setup, results, _ = sliding_plane
    arr = collect(results, setup.surfels)
    truth = setup.gt.positions[1:]
    step = np.linalg.norm(setup.gt.positions[1] - setup.gt.positions[0], axis=1).min()
    d = arr.position - truth
    ray = truth / np.linalg.norm(truth, axis=2, keepdims=True)
    along = np.sum(d * ray, axis=2)
    across = np.linalg.norm(d - along[..., None] * ray, axis=2)
    assert across.max() < 0.01 * step
    assert (np.abs(along) / np.linalg.norm(truth, axis=2)).max() < 0.005
    assert arr.inlier.all()


def test_hard_isometry_never_alters_F(sliding_plane):
    _, results, _ = sliding_plane
    for fr in results:
        for s in fr.surfels:
            assert np.array_equal(s.state.deform, np.eye(2))
            assert np.array_equal(s.solved_state.deform, np.eye(2))


def test_accepted_costs_monotone(sliding_plane):
    _, results, _ = sliding_plane
    for fr in results:
        for s in fr.surfels:
            for rep in s.reports:
                assert np.all(np.diff(rep.accepted_costs()) <= 0)


def test_pyramid_bridges_dropped_frames():
    # frames 3 and 4 are missing, so the image jumps about 6 px between frames 2 and 5
    scene = make_scene("missing_frames", 0, n_frames=50, missing=(3, 4), texture_sigmas=(0.8, 1.6))
    setup = setup_scene(scene, spacing=80, margin=100)
    frames = [1, 2, 5, 6, 7]
    assert [f for f in setup.frames if f <= 7] == frames
    converged = {}
    for levels in (3, 1):
        results, _ = run_scene(setup, "static", TrackConfig(levels=levels), frames=frames)
        zncc = collect(results, setup.surfels).zncc
        assert (zncc[:2] >= 0.95).all()  # before the gap both settings track every surfel
        converged[levels] = float(np.mean(zncc[-1] >= 0.95))
    assert converged[3] >= 0.7 and converged[1] <= 0.4


def test_occluded_surfel_score_drops():
    setup = setup_scene(make_scene("occlusion", 0, n_frames=50), spacing=80)
    vis = setup.gt.visible
    j = next(j for j in range(vis.shape[1]) if not vis[:, j].all())
    onset = setup.gt.frames[int(np.flatnonzero(~vis[:, j])[0])]
    results, _ = run_scene(setup, "static", TrackConfig(), frames=[f for f in setup.frames if f <= onset + 2])
    arr = collect(results, setup.surfels)
    col = arr.ids.index(setup.gt.anchor_ids[j])
    assert arr.zncc[-1, col] < 0.85
    others = np.delete(arr.zncc, col, axis=1)
    assert others.min() >= 0.95


def test_surfel_order_does_not_matter(still_scene):
    scene = make_scene("rigid_plane", 0, n_frames=3, static_camera=True, body_speed=2.0)
    cfg = TrackConfig(model="general")
    a = track_static(scene_pyramids(scene, [1, 2], 3), still_scene.surfels, K, cfg)
    shuffled = list(still_scene.surfels)
    random.Random(0).shuffle(shuffled)
    b = track_static(scene_pyramids(scene, [1, 2], 3), shuffled, K, cfg)
    for fa, fb in zip(a, b):
        for sa, sb in zip(sorted(fa.surfels, key=lambda s: s.id), sorted(fb.surfels, key=lambda s: s.id)):
            assert np.array_equal(sa.state.translation, sb.state.translation)
            assert np.array_equal(sa.state.deform, sb.state.deform)
            assert sa.zncc == sb.zncc


def test_threads_give_identical_results(still_scene):
    scene = make_scene("rigid_plane", 0, n_frames=2, static_camera=True, body_speed=2.0)
    one = track_static(scene_pyramids(scene, [1], 3), still_scene.surfels, K, TrackConfig(threads=1))
    four = track_static(scene_pyramids(scene, [1], 3), still_scene.surfels, K, TrackConfig(threads=4))
    for sa, sb in zip(one[0].surfels, four[0].surfels):
        assert np.array_equal(sa.state.translation, sb.state.translation)


def test_soft_isometry_lets_F_move(still_scene):
    scene = make_scene("bending_sheet", 0, n_frames=3)
    setup = setup_scene(scene, spacing=160, margin=100)
    results = track_static(scene_pyramids(scene, [2], 3), setup.surfels, K,
                           TrackConfig(model="general", omega_I=1e-3))
    assert any(not np.array_equal(s.solved_state.deform, np.eye(2)) for s in results[0].surfels)


# --- joint pipeline -----------------------------------------------------------------

def test_joint_static_frames_keep_pose(still_scene):
    cfg = TrackConfig()
    results = track_deformable(scene_pyramids(still_scene.scene, [1, 2], 3), still_scene.surfels, K, cfg)
    anchors = default_anchors(still_scene.surfels, cfg)
    by_id = {s.id: s for s in still_scene.surfels}
    for fr in results:
        assert np.allclose(fr.pose.matrix(), np.eye(4), atol=1e-12)
        for s in fr.surfels:
            r, _, _ = equilibrium_residual(s.state, by_id[s.id], anchors[s.id], cfg.omega_E)
            assert np.allclose(r, 0.0, atol=1e-10)


def test_joint_needs_four_surfels(still_scene):
    with pytest.raises(TrackingLost) as exc:
        track_deformable(scene_pyramids(still_scene.scene, [1], 3), still_scene.surfels[:3], K, TrackConfig())
    assert exc.value.frames_processed == 0


def _joint_problem(rng, cfg, n=5):
    image = AnalyticImage(640, 480, seed=4)
    surfels = [_surfel_at_solution(rng, image, K, i) for i in range(n)]
    prob = JointProblem(surfels, image, K, 0, cfg, default_anchors(surfels, cfg))
    states = tuple(random_state(rng, cfg.model).replace(gain=1.0, bias=0.0) for _ in surfels)
    pose = Pose(so3_exp(rng.normal(size=3) * 0.01), rng.normal(size=3) * 0.005)
    return prob, (states, pose)


@pytest.mark.parametrize("model", ["isometry", "general"])
def test_joint_jacobian_matches_finite_differences(model, rng):
    cfg = TrackConfig(model=model, cap=10.0, omega_E=2.0)
    prob, x = _joint_problem(rng, cfg)
    _, J = prob.linearize(x)
    fd = fd_jacobian(prob, x, 1e-6)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-4


def test_schur_solve_matches_dense(rng):
    cfg = TrackConfig(model="general", cap=10.0)
    prob, x = _joint_problem(rng, cfg)
    _, H, g = prob.normal_equations(x)
    _, J = prob.linearize(x)
    assert np.allclose(H, J.T @ J)
    M, b, _ = damped_system(H, g, 0.3)
    assert np.allclose(prob.solve_normal(M, b), np.linalg.solve(M, b), rtol=1e-8, atol=1e-12)
