from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surfel_track.errors import BadArity, InvalidDepth, Singular
from surfel_track.geometry import (
    DeformationModel,
    Pose,
    Surfel,
    SurfelState,
    deform_param_derivatives,
    deform_params,
    init_surfel,
    make_surfel,
    materialize_deform,
    pose_apply,
    pose_compose,
    scale_surfel,
    se3_exp,
    skew,
    so3_exp,
    so3_log,
    surfel_point,
    update_pose,
)
from surfel_track.imaging import DepthMap, Intrinsics, project_points
from surfel_track.photometric import texture_grid

vec3 = arrays(np.float64, 3, elements=st.floats(-3, 3))


def _surfel(rng=None):
    rng = rng or np.random.default_rng(0)
    X0 = np.array([0.1, -0.05, 1.2]) + rng.uniform(-0.05, 0.05, 3)
    J0 = np.array([[0.0024, 0.0001], [0.0, 0.0025], [0.0005, -0.0003]])
    return Surfel(0, X0, J0)


def _random_state(rng):
    F = np.array([[1.1, 0.05], [0.05, 0.9]]) + rng.uniform(-0.05, 0.05, (2, 2))
    return SurfelState(rng.uniform(-0.1, 0.1, 3), so3_exp(rng.uniform(-0.5, 0.5, 3)), F)


# --- Lie group helpers ------------------------------------------------------

@given(vec3, vec3)
def test_skew_is_cross_product(x, y):
    assert np.allclose(skew(x) @ y, np.cross(x, y), atol=1e-12)


def test_so3_exp_zero_is_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_so3_exp_quarter_turn_about_z():
    R = so3_exp([0.0, 0.0, np.pi / 2])
    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


@given(vec3)
def test_so3_exp_is_orthonormal(w):
    R = so3_exp(w)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-1.5, 1.5)))
def test_so3_log_inverts_exp(w):
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_small_angle_branch_is_continuous():
    w = np.array([3e-9, -2e-9, 1e-9])
    taylor = so3_exp(w)
    w2 = w * 10  # just above the branch point
    assert np.allclose(taylor, np.eye(3) + skew(w), atol=1e-16)
    assert np.allclose(so3_exp(w2), np.eye(3) + skew(w2), atol=1e-15)


@given(arrays(np.float64, 6, elements=st.floats(-2, 2)))
def test_se3_exp_inverse_twist(zeta):
    P = se3_exp(zeta).compose(se3_exp(-zeta))
    assert np.allclose(P.matrix(), np.eye(4), atol=1e-10)


def test_se3_exp_pure_translation():
    P = se3_exp([0.1, -0.2, 0.3, 0, 0, 0])
    assert np.allclose(P.rotation, np.eye(3))
    assert np.allclose(P.translation, [0.1, -0.2, 0.3])


def test_se3_exp_matches_matrix_exponential():
    from scipy.linalg import expm

    zeta = np.array([0.3, -0.1, 0.2, 0.4, -0.7, 0.25])
    A = np.zeros((4, 4))
    A[:3, :3] = skew(zeta[3:])
    A[:3, 3] = zeta[:3]
    assert np.allclose(se3_exp(zeta).matrix(), expm(A), atol=1e-12)


def test_pose_compose_associative_and_inverse(rng):
    a, b, c = (se3_exp(rng.normal(size=6)) for _ in range(3))
    left = pose_compose(pose_compose(a, b), c).matrix()
    right = pose_compose(a, pose_compose(b, c)).matrix()
    assert np.allclose(left, right, atol=1e-12)
    assert np.allclose(a.compose(a.inverse()).matrix(), np.eye(4), atol=1e-12)
    x = rng.normal(size=3)
    assert np.allclose(pose_apply(a.compose(b), x), a.apply(b.apply(x)))


def test_pose_center_and_matrix34():
    P = se3_exp([0.2, 0.1, -0.3, 0.1, 0.2, 0.3])
    assert np.allclose(P.apply(P.center()), 0.0, atol=1e-12)
    assert np.allclose(Pose.from_matrix(P.matrix()).matrix34(), P.matrix34())


def test_update_pose_is_left_multiplicative(rng):
    P = se3_exp(rng.normal(size=6))
    z = rng.normal(size=6) * 0.1
    assert np.allclose(update_pose(P, z).matrix(), se3_exp(z).matrix() @ P.matrix(), atol=1e-12)


def test_orthonormality_after_many_compositions(rng):
    R = np.eye(3)
    for w in rng.normal(scale=0.3, size=(10_000, 3)):
        R = R @ so3_exp(w)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6


# --- deformation tensors ------------------------------------------------------

def test_isometry_tensor():
    assert np.array_equal(materialize_deform("isometry", []), np.eye(2))


def test_conformal_tensor():
    assert np.array_equal(materialize_deform(DeformationModel.CONFORMAL, [2.0]), 2 * np.eye(2))


def test_general_identity_parameters():
    assert np.array_equal(materialize_deform("general", [1.0, 0.0, 1.0]), np.eye(2))


def test_equireal_tensor_as_printed():
    F = materialize_deform("equireal", [2.0, 0.5])
    assert np.allclose(F, [[2.0, 0.5], [0.5, 0.75]])
    # determinant follows the printed entries, not det = 1
    assert np.linalg.det(F) == pytest.approx(2.0 * 1.5 / 2.0 - 0.25)


def test_equireal_area_preserving_variant():
    F = materialize_deform("equireal", [1.7, -0.4], area_preserving=True)
    assert np.linalg.det(F) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("model,params", [("isometry", [1.0]), ("conformal", []), ("equireal", [1.0]),
                                          ("general", [1.0, 0.0])])
def test_bad_arity(model, params):
    with pytest.raises(BadArity):
        materialize_deform(model, params)


def test_equireal_zero_alpha_is_singular():
    with pytest.raises(Singular):
        materialize_deform("equireal", [0.0, 0.3])


@given(st.sampled_from(list(DeformationModel)),
       arrays(np.float64, 3, elements=st.floats(0.2, 3.0)), st.booleans())
def test_materialize_is_symmetric_and_round_trips(model, raw, ap):
    p = raw[:model.n_params]
    F = materialize_deform(model, p, ap)
    assert np.array_equal(F, F.T)
    assert np.allclose(deform_params(model, F), p)


@pytest.mark.parametrize("model", ["conformal", "equireal", "general"])
@pytest.mark.parametrize("ap", [False, True])
def test_deform_derivatives_match_finite_differences(model, ap):
    m = DeformationModel.parse(model)
    p = np.array([1.3, 0.2, 0.8])[:m.n_params]
    dF = deform_param_derivatives(m, p, ap)
    h = 1e-6
    for k in range(m.n_params):
        e = np.zeros_like(p)
        e[k] = h
        fd = (materialize_deform(m, p + e, ap) - materialize_deform(m, p - e, ap)) / (2 * h)
        assert np.allclose(dF[k], fd, atol=1e-8)


def test_state_deform_is_symmetrized():
    st_ = SurfelState(deform=[[1.0, 0.2], [0.0, 1.0]])
    assert np.array_equal(st_.deform, st_.deform.T)


# --- surfel geometry ------------------------------------------------------------

def test_surfel_point_identity_origin():
    s = _surfel()
    assert np.array_equal(surfel_point(s, SurfelState.identity(), (0.0, 0.0)), s.rest_position)


def test_surfel_point_identity_local():
    s = _surfel()
    uv = np.array([3.0, -2.0])
    assert np.allclose(surfel_point(s, SurfelState.identity(), uv), s.rest_position + s.rest_jacobian @ uv)


def test_surfel_point_matches_extended_precision(rng):
    getcontext().prec = 40
    s = _surfel(rng)
    state = _random_state(rng)
    uv = np.array([7.0, -4.0])

    def D(a):
        return [[Decimal(float(v)) for v in row] for row in np.atleast_2d(a)]

    def mm(A, B):
        return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))] for i in range(len(A))]

    lin = mm(mm(mm(D(state.rotation), D(s.rest_jacobian)), D(state.deform)), D(uv.reshape(2, 1)))
    ref = [Decimal(float(s.rest_position[i])) + Decimal(float(state.translation[i])) + lin[i][0] for i in range(3)]
    got = surfel_point(s, state, uv)
    assert np.allclose(got, [float(v) for v in ref], rtol=0, atol=1e-15)


def test_surfel_point_is_affine_in_local(rng):
    s = _surfel(rng)
    state = _random_state(rng)
    p0, p1 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    mid = surfel_point(s, state, 0.3 * p0 + 0.7 * p1)
    assert np.allclose(mid, 0.3 * surfel_point(s, state, p0) + 0.7 * surfel_point(s, state, p1), atol=1e-14)
    A = state.rotation @ s.rest_jacobian @ state.deform
    assert np.allclose(surfel_point(s, state, p1) - surfel_point(s, state, p0), A @ (p1 - p0))


def test_surfel_rejects_degenerate_basis():
    with pytest.raises(ValueError):
        Surfel(0, np.zeros(3), np.array([[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]]))


# --- initialisation from depth ------------------------------------------------------

KD = Intrinsics(100.0, 120.0, 16.0, 12.0)


def _depth_from(fn, shape=(25, 33)):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    return DepthMap(fn((xs - KD.cx) / KD.fx, (ys - KD.cy) / KD.fy))


def test_init_fronto_parallel():
    d = 1.7
    X0, J0 = init_surfel(_depth_from(lambda x, y: np.full_like(x, d)), KD, (20, 9))
    xh, yh = (20 - KD.cx) / KD.fx, (9 - KD.cy) / KD.fy
    assert np.allclose(X0, d * np.array([xh, yh, 1.0]))
    assert np.allclose(J0, [[d, 0.0], [0.0, d], [0.0, 0.0]])


def test_init_slanted_plane():
    a, b = 1.5, 0.8
    X0, J0 = init_surfel(_depth_from(lambda x, y: a + b * x), KD, (21, 7))
    xh, yh = (21 - KD.cx) / KD.fx, (7 - KD.cy) / KD.fy
    assert np.allclose(J0[:, 0], [a + b * xh + xh * b, yh * b, b], atol=1e-12)
    assert np.allclose(J0[:, 1], [0.0, a + b * xh, 0.0], atol=1e-12)


def test_init_cylinder_tangent_plane():
    # cylinder x^2 + (z - c)^2 = r^2 seen from inside-out: z = c - sqrt(r^2 - x^2)
    c, r = 3.0, 2.5
    K = Intrinsics(500.0, 500.0, 320.0, 240.0)
    ys, xs = np.mgrid[0:480, 0:640].astype(float)
    xh = (xs - K.cx) / K.fx
    # ray z*(xh, yh, 1) hits the cylinder where (z*xh)^2 + (z - c)^2 = r^2 (near root)
    A = xh**2 + 1
    z = (c - np.sqrt(c**2 - A * (c**2 - r**2))) / A
    depth = DepthMap(z)
    for px in [(300, 200), (360, 260), (250, 240)]:
        X0, J0 = init_surfel(depth, K, px)
        normal = np.array([X0[0], 0.0, X0[2] - c])
        normal /= np.linalg.norm(normal)
        n_est = np.cross(J0[:, 0], J0[:, 1])
        n_est /= np.linalg.norm(n_est)
        angle = np.arccos(min(1.0, abs(n_est @ normal)))
        assert angle < 1e-3


def test_init_invalid_neighbourhood():
    z = np.full((10, 10), 2.0)
    z[4, 5] = 0.0
    with pytest.raises(InvalidDepth):
        init_surfel(DepthMap(z), KD, (5, 5))
    with pytest.raises(InvalidDepth):
        init_surfel(DepthMap(np.full((10, 10), 2.0)), KD, (0, 5))


def test_make_surfel_uses_pixel_units():
    s = make_surfel(3, _depth_from(lambda x, y: np.full_like(x, 2.0)), KD, (10, 10))
    assert np.allclose(s.rest_jacobian, [[2.0 / KD.fx, 0], [0, 2.0 / KD.fy], [0, 0]])


# --- scale ambiguity ------------------------------------------------------------

def test_scale_by_one_is_identity(rng):
    s, state = _surfel(rng), _random_state(rng)
    out = scale_surfel(s, state, 1.0)
    assert np.allclose(out.translation, state.translation)
    assert np.allclose(out.deform, state.deform)


@pytest.mark.parametrize("mu", [0.5, 2.0, 10.0])
def test_scale_preserves_projection(rng, mu):
    K = Intrinsics(500.0, 500.0, 319.5, 239.5)
    s, state = _surfel(rng), _random_state(rng)
    grid = texture_grid(11)
    p0, _ = project_points(K, surfel_point(s, state, grid))
    p1, _ = project_points(K, surfel_point(s, scale_surfel(s, state, mu), grid))
    assert np.abs(p1 - p0).max() < 1e-9


def test_half_scale_halves_depth_and_extent(rng):
    s, state = _surfel(rng), _random_state(rng)
    half = scale_surfel(s, state, 0.5)
    grid = texture_grid(11)
    a, b = surfel_point(s, state, grid), surfel_point(s, half, grid)
    assert half.center(s)[2] == pytest.approx(0.5 * state.center(s)[2])
    assert np.ptp(b, axis=0) == pytest.approx(0.5 * np.ptp(a, axis=0))


def test_scale_requires_positive_mu():
    with pytest.raises(ValueError):
        scale_surfel(_surfel(), SurfelState.identity(), 0.0)


@settings(max_examples=30)
@given(st.floats(0.1, 20.0))
def test_scale_is_multiplicative(mu):
    s = _surfel()
    state = _random_state(np.random.default_rng(1))
    grid = texture_grid(2)
    assert np.allclose(surfel_point(s, scale_surfel(s, state, mu), grid), mu * surfel_point(s, state, grid),
                       rtol=1e-12, atol=1e-13)
