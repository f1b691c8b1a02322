"""Surfel textures, photometric residuals with gain/bias, ZNCC and Jacobians.

Residual for grid sample ``p``::

    r_p = clamp(gain * I(pi(T_cw S(u_p, v_p))) + bias - T(u_p, v_p), +-cap)

Samples that leave the image (or the one-pixel gradient margin) are marked
invalid and contribute nothing; saturated samples keep the clamped value but
get a zero Jacobian row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import OutOfImage
from .geometry import DeformationModel, Pose, Surfel, SurfelState, deform_param_derivatives, deform_params
from .imaging import Intrinsics, _projection_jacobian, project_points

DEFAULT_CAP = 0.24
DEFAULT_HALF_EXTENT = 11

# canonical column order of the parameter blocks
BLOCK_SIZES = {"translation": 3, "rotation": 3, "deform": None, "pose": 6, "gain_bias": 2}


@dataclass(frozen=True)
class TexturePatch:
    half_extent: int
    local: np.ndarray  # (N, 2) grid coordinates (u, v)
    values: np.ndarray  # (N,) reference intensities

    @property
    def size(self) -> int:
        return self.values.shape[0]


def texture_grid(half_extent: int) -> np.ndarray:
    """Symmetric uniform grid, row-major in v then u."""
    r = np.arange(-half_extent, half_extent + 1, dtype=float)
    v, u = np.meshgrid(r, r, indexing="ij")
    return np.column_stack([u.ravel(), v.ravel()])


def texture_at(surfel: Surfel, level: int = 0) -> TexturePatch:
    tex = surfel.texture
    if isinstance(tex, TexturePatch):
        return tex
    return tex[level]


def extract_texture(surfel: Surfel, ref_image, ref_pose: Pose, K: Intrinsics,
                    half_extent: int = DEFAULT_HALF_EXTENT) -> TexturePatch:
    """Sample the reference image over the rest-state surfel grid.

    ``ref_image`` is any sampler (e.g. :class:`~surfel_track.imaging.BilinearImage`)
    and ``K`` the intrinsics of that image.
    """
    local = texture_grid(half_extent)
    S0 = surfel.rest_position + local @ surfel.rest_jacobian.T
    px, front = project_points(K, ref_pose.apply(S0))
    values, valid = ref_image.sample(px[:, 0], px[:, 1])
    if not (front.all() and valid.all()):
        raise OutOfImage(f"surfel {surfel.id}: texture grid leaves the reference image")
    return TexturePatch(half_extent, local, values)


def extract_texture_pyramid(surfel: Surfel, ref_pyramid, ref_pose: Pose, K: Intrinsics,
                            half_extent: int = DEFAULT_HALF_EXTENT) -> tuple:
    """One texture per pyramid level, all on the same local grid."""
    return tuple(
        extract_texture(surfel, ref_pyramid.image(k), ref_pose, K.at_level(k), half_extent)
        for k in range(len(ref_pyramid))
    )


@dataclass
class ResidualBlock:
    residuals: np.ndarray
    jacobian: np.ndarray | None
    valid_mask: np.ndarray
    saturated: np.ndarray
    saturation_cap: float
    columns: tuple = ()

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def cost(self) -> float:
        return float(self.residuals @ self.residuals)

    def rms(self) -> float:
        n = self.n_valid
        return float(np.sqrt(self.cost() / n)) if n else float("nan")


def _block_width(name: str, model: DeformationModel) -> int:
    if name == "deform":
        return model.n_params
    return BLOCK_SIZES[name]


def column_names(active: Sequence[str], model=DeformationModel.GENERAL) -> tuple:
    model = DeformationModel.parse(model)
    names = []
    for blk in active:
        names += [f"{blk}[{i}]" for i in range(_block_width(blk, model))]
    return tuple(names)


def photometric_residuals(surfel: Surfel, state: SurfelState, pose: Pose, image, K: Intrinsics,
                          level: int = 0, cap: float = DEFAULT_CAP,
                          active: Sequence[str] | None = None,
                          model=DeformationModel.GENERAL,
                          area_preserving: bool = False) -> ResidualBlock:
    """Photometric residuals of one surfel against a pyramid level.

    ``K`` is the level-0 intrinsics; ``image`` samples level ``level``.  When
    ``active`` is given the Jacobian columns for those parameter blocks are
    filled, in the order listed.
    """
    model = DeformationModel.parse(model)
    tex = texture_at(surfel, level)
    K_l = K.at_level(level) if level else K
    local = tex.local
    a = local @ (surfel.rest_jacobian @ state.deform).T  # J0 F uv, surfel frame
    S = surfel.rest_position + state.translation + a @ state.rotation.T
    Sc = S @ pose.rotation.T + pose.translation
    px, front = project_points(K_l, Sc)
    val, gx, gy, inside = image.sample_with_gradient(px[:, 0], px[:, 1])
    valid = front & inside
    raw = state.gain * val + state.bias - tex.values
    saturated = valid & (np.abs(raw) > cap)
    r = np.where(valid, np.clip(raw, -cap, cap), 0.0)

    jac = None
    if active is not None:
        use = valid & ~saturated
        g = state.gain * np.column_stack([gx, gy])
        Jp = _projection_jacobian(K_l, np.where(front[:, None], Sc, 1.0))
        dr_dSc = np.einsum("ni,nij->nj", g, Jp)
        dr_dSc[~use] = 0.0
        blocks = []
        dr_dS = None
        for name in active:
            if name in ("translation", "rotation", "deform") and dr_dS is None:
                dr_dS = dr_dSc @ pose.rotation
            if name == "translation":
                blocks.append(dr_dS)
            elif name == "rotation":
                # right update R <- R exp(w): dS = R (w x a)
                q = dr_dS @ state.rotation
                blocks.append(np.cross(a, q))
            elif name == "deform":
                if model.n_params:
                    m = dr_dS @ state.rotation @ surfel.rest_jacobian
                    dF = deform_param_derivatives(model, deform_params(model, state.deform), area_preserving)
                    blocks.append(np.column_stack([np.einsum("ni,ni->n", m, local @ dFk.T) for dFk in dF]))
            elif name == "pose":
                # left update T <- exp(zeta) T: dSc = v + w x Sc
                blocks.append(np.column_stack([dr_dSc, np.cross(Sc, dr_dSc)]))
            elif name == "gain_bias":
                gb = np.column_stack([val, np.ones_like(val)])
                gb[~use] = 0.0
                blocks.append(gb)
            else:
                raise KeyError(f"unknown parameter block {name!r}")
        jac = np.hstack(blocks) if blocks else np.zeros((r.size, 0))
    return ResidualBlock(r, jac, valid, saturated, cap,
                         column_names(active, model) if active is not None else ())


def residual_jacobian(surfel: Surfel, state: SurfelState, pose: Pose, image, K: Intrinsics,
                      active: Sequence[str], level: int = 0, cap: float = DEFAULT_CAP,
                      model=DeformationModel.GENERAL, area_preserving: bool = False) -> np.ndarray:
    return photometric_residuals(surfel, state, pose, image, K, level, cap, active,
                                 model, area_preserving).jacobian


def reprojected_intensities(surfel: Surfel, state: SurfelState, pose: Pose, image, K: Intrinsics,
                            level: int = 0):
    """Raw image intensities under the surfel grid (no gain/bias), with validity."""
    tex = texture_at(surfel, level)
    K_l = K.at_level(level) if level else K
    a = tex.local @ (surfel.rest_jacobian @ state.deform).T
    S = surfel.rest_position + state.translation + a @ state.rotation.T
    px, front = project_points(K_l, pose.apply(S))
    val, _, _, inside = image.sample_with_gradient(px[:, 0], px[:, 1])
    return val, front & inside


def estimate_gain_bias(texture, intensities, valid=None) -> tuple[float, float]:
    """Least-squares ``gain * I + bias ~= T``.

    Falls back to ``(1, mean(T - I))`` when the intensities have (almost) no
    variance.
    """
    T = np.asarray(getattr(texture, "values", texture), dtype=float)
    I = np.asarray(intensities, dtype=float)
    if valid is not None:
        T, I = T[valid], I[valid]
    if I.size < 2:
        return 1.0, float(np.mean(T - I)) if I.size else 0.0
    dI = I - I.mean()
    var = float(dI @ dI) / I.size
    if var < 1e-12:
        return 1.0, float(np.mean(T - I))
    gain = float(dI @ (T - T.mean())) / (var * I.size)
    return gain, float(T.mean() - gain * I.mean())


def zncc(texture, intensities, valid=None) -> float:
    """Zero-mean normalized cross-correlation; 0 for degenerate signals."""
    T = np.asarray(getattr(texture, "values", texture), dtype=float)
    I = np.asarray(intensities, dtype=float)
    if valid is not None:
        T, I = T[valid], I[valid]
    if T.size < 2:
        return 0.0
    a = T - T.mean()
    b = I - I.mean()
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
