"""Surfel parametrization, deformation tensors and rigid-motion utilities.

A surfel is a textured planar patch anchored at a rest position ``X0`` with a
tangent basis ``J0`` (3x2).  Its deformed geometry at a later frame is::

    S(u, v) = (X0 + t) + R @ J0 @ F @ [u, v]

with ``t`` a translation, ``R`` a rotation and ``F`` a symmetric 2x2
deformation tensor.  Local coordinates ``(u, v)`` are grid units where one
unit spans one pixel at the anchor in the reference image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import BadArity, InvalidDepth, Singular

SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# Lie group helpers
# ---------------------------------------------------------------------------

def skew(x) -> np.ndarray:
    """Cross-product matrix: ``skew(x) @ y == np.cross(x, y)``."""
    x0, x1, x2 = np.asarray(x, dtype=float)
    return np.array([[0.0, -x2, x1], [x2, 0.0, -x0], [-x1, x0, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula, with a second-order Taylor branch near zero."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp` for rotations away from angle pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * v


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping world points into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def matrix34(self) -> np.ndarray:
        return self.matrix()[:3]

    def apply(self, x) -> np.ndarray:
        """Transform a point (3,) or an array of points (N, 3)."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_apply(p: Pose, x) -> np.ndarray:
    return p.apply(x)


def se3_exp(zeta) -> Pose:
    """Exponential map of a twist ``(v, w)``: translation part first."""
    zeta = np.asarray(zeta, dtype=float)
    v, w = zeta[:3], zeta[3:]
    theta = np.linalg.norm(w)
    W = skew(w)
    R = so3_exp(w)
    if theta < SMALL_ANGLE:
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        V = (np.eye(3)
             + (1.0 - np.cos(theta)) / theta**2 * W
             + (theta - np.sin(theta)) / theta**3 * W @ W)
    return Pose(R, V @ v)


def update_pose(pose: Pose, zeta) -> Pose:
    """Left-multiplicative update ``exp(zeta) * pose``."""
    return se3_exp(zeta).compose(pose)


# ---------------------------------------------------------------------------
# Deformation tensors
# ---------------------------------------------------------------------------

class DeformationModel(enum.Enum):
    ISOMETRY = "isometry"
    CONFORMAL = "conformal"
    EQUIREAL = "equireal"
    GENERAL = "general"

    @property
    def n_params(self) -> int:
        return {"isometry": 0, "conformal": 1, "equireal": 2, "general": 3}[self.value]

    @classmethod
    def parse(cls, value) -> "DeformationModel":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


def _check_arity(model: DeformationModel, params) -> np.ndarray:
    params = np.atleast_1d(np.asarray(params, dtype=float)) if len(params) else np.zeros(0)
    if params.shape != (model.n_params,):
        raise BadArity(f"{model.value} expects {model.n_params} parameters, got {params.size}")
    return params


def materialize_deform(model, params: Sequence[float] = (), area_preserving: bool = False) -> np.ndarray:
    """Build the 2x2 deformation tensor for ``model``.

    ``area_preserving`` swaps the equireal ``(1 + b) / a`` entry for
    ``(1 + b**2) / a`` so that the determinant is exactly one.
    """
    model = DeformationModel.parse(model)
    p = _check_arity(model, params)
    if model is DeformationModel.ISOMETRY:
        return np.eye(2)
    if model is DeformationModel.CONFORMAL:
        return p[0] * np.eye(2)
    if model is DeformationModel.EQUIREAL:
        a, b = p
        if a == 0.0:
            raise Singular("equireal tensor undefined for alpha = 0")
        d = (1.0 + b * b) / a if area_preserving else (1.0 + b) / a
        return np.array([[a, b], [b, d]])
    a, b, c = p
    return np.array([[a, b], [b, c]])


def deform_param_derivatives(model, params: Sequence[float] = (), area_preserving: bool = False) -> np.ndarray:
    """Derivatives of F with respect to each model parameter, shape (k, 2, 2)."""
    model = DeformationModel.parse(model)
    p = _check_arity(model, params)
    if model is DeformationModel.ISOMETRY:
        return np.zeros((0, 2, 2))
    if model is DeformationModel.CONFORMAL:
        return np.eye(2)[None]
    if model is DeformationModel.EQUIREAL:
        a, b = p
        if a == 0.0:
            raise Singular("equireal tensor undefined for alpha = 0")
        num = 1.0 + b * b if area_preserving else 1.0 + b
        dnum = 2.0 * b if area_preserving else 1.0
        dF_da = np.array([[1.0, 0.0], [0.0, -num / a**2]])
        dF_db = np.array([[0.0, 1.0], [1.0, dnum / a]])
        return np.stack([dF_da, dF_db])
    return np.array([
        [[1.0, 0.0], [0.0, 0.0]],
        [[0.0, 1.0], [1.0, 0.0]],
        [[0.0, 0.0], [0.0, 1.0]],
    ])


def deform_params(model, F) -> np.ndarray:
    """Recover model parameters from a tensor produced by :func:`materialize_deform`."""
    model = DeformationModel.parse(model)
    F = np.asarray(F, dtype=float)
    if model is DeformationModel.ISOMETRY:
        return np.zeros(0)
    if model is DeformationModel.CONFORMAL:
        return np.array([F[0, 0]])
    if model is DeformationModel.EQUIREAL:
        return np.array([F[0, 0], F[0, 1]])
    return np.array([F[0, 0], F[0, 1], F[1, 1]])


# ---------------------------------------------------------------------------
# Surfels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Surfel:
    """Rest geometry of a surfel.

    ``rest_jacobian`` is expressed per local grid unit (one reference pixel),
    not per normalized-retina unit.
    """

    id: int
    rest_position: np.ndarray
    rest_jacobian: np.ndarray
    anchor_pixel: tuple[float, float] = (0.0, 0.0)
    texture: object = None

    def __post_init__(self):
        object.__setattr__(self, "rest_position", np.asarray(self.rest_position, dtype=float).reshape(3))
        J = np.asarray(self.rest_jacobian, dtype=float).reshape(3, 2)
        if np.linalg.matrix_rank(J) < 2:
            raise ValueError("rest_jacobian must have rank 2")
        object.__setattr__(self, "rest_jacobian", J)

    def with_texture(self, texture) -> "Surfel":
        return replace(self, texture=texture)


@dataclass(frozen=True)
class SurfelState:
    """Per-frame unknowns of a surfel."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    deform: np.ndarray = field(default_factory=lambda: np.eye(2))
    gain: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        F = np.asarray(self.deform, dtype=float).reshape(2, 2)
        object.__setattr__(self, "deform", 0.5 * (F + F.T))
        object.__setattr__(self, "gain", float(self.gain))
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def identity(cls) -> "SurfelState":
        return cls()

    def center(self, surfel: Surfel) -> np.ndarray:
        return surfel.rest_position + self.translation

    def replace(self, **changes) -> "SurfelState":
        return replace(self, **changes)


def surfel_point(surfel: Surfel, state: SurfelState, local) -> np.ndarray:
    """World coordinates of local grid point(s); ``local`` is (2,) or (N, 2)."""
    local = np.asarray(local, dtype=float)
    A = state.rotation @ surfel.rest_jacobian @ state.deform
    return surfel.rest_position + state.translation + local @ A.T


def init_surfel(depth, intrinsics, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Rest position and normalized-retina tangent basis from a depth map.

    Returns ``(X0, J0)`` where the columns of ``J0`` are derivatives of the
    back-projected surface with respect to the normalized coordinates.
    Depth derivatives are central differences over one pixel.
    """
    z_map = depth.depths if hasattr(depth, "depths") else np.asarray(depth, dtype=float)
    mask = depth.valid if hasattr(depth, "valid") else None
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    h, w = z_map.shape
    if not (1 <= x < w - 1 and 1 <= y < h - 1):
        raise InvalidDepth(f"pixel ({x}, {y}) lacks a 3x3 neighbourhood")
    patch = z_map[y - 1:y + 2, x - 1:x + 2]
    ok = np.isfinite(patch) & (patch > 0)
    if mask is not None:
        ok &= mask[y - 1:y + 2, x - 1:x + 2]
    if not ok.all():
        raise InvalidDepth(f"invalid depth around pixel ({x}, {y})")
    fx, fy = intrinsics.fx, intrinsics.fy
    xh = (x - intrinsics.cx) / fx
    yh = (y - intrinsics.cy) / fy
    z = patch[1, 1]
    dz_dx = (patch[1, 2] - patch[1, 0]) / (2.0 / fx)
    dz_dy = (patch[2, 1] - patch[0, 1]) / (2.0 / fy)
    X0 = z * np.array([xh, yh, 1.0])
    J0 = np.array([
        [z + xh * dz_dx, xh * dz_dy],
        [yh * dz_dx, z + yh * dz_dy],
        [dz_dx, dz_dy],
    ])
    return X0, J0


def make_surfel(surfel_id: int, depth, intrinsics, pixel, texture=None) -> Surfel:
    """Initialise a surfel at ``pixel``; local units become reference pixels."""
    X0, J0 = init_surfel(depth, intrinsics, pixel)
    J_px = J0 @ np.diag([1.0 / intrinsics.fx, 1.0 / intrinsics.fy])
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    anchor = ((x - intrinsics.cx) / intrinsics.fx, (y - intrinsics.cy) / intrinsics.fy)
    return Surfel(surfel_id, X0, J_px, anchor, texture)


def scale_surfel(surfel: Surfel, state: SurfelState, mu: float) -> SurfelState:
    """Scale a surfel about the origin by ``mu`` (the depth/size ambiguity).

    The centre becomes ``mu * (X0 + t)`` and the tensor ``mu * F``, so every
    surfel point is multiplied by ``mu`` and projects to the same pixel for
    a camera at the origin.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    center = mu * (surfel.rest_position + state.translation)
    return state.replace(translation=center - surfel.rest_position, deform=mu * state.deform)
