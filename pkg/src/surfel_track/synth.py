"""Synthetic deformable scenes with exact ground truth.

Bodies are analytic textured surfaces (plane, cylindrically bent sheet,
sphere cap) carried by time-dependent rigid motions.  Images are rendered by
casting one ray per pixel and intersecting every body in closed form, so the
renderer and the ground-truth trajectories evaluate the very same surface.

Surface coordinates ``(a, b)`` are arc-length coordinates for the plane and the
bent sheet (the bend is isometric) and azimuthal-equidistant coordinates on
the sphere cap.  Time ``t`` is measured in frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import AnchorOffSurface, UnknownPreset
from .geometry import Pose, so3_exp
from .imaging import DepthMap, Intrinsics, _bilinear

BACKGROUND = 0.5
DEFAULT_SIZE = (640, 480)
DEFAULT_INTRINSICS = Intrinsics(500.0, 500.0, 319.5, 239.5)
PRESETS = ("rigid_plane", "bending_sheet", "two_bodies_sliding",
           "illumination_drift", "occlusion", "missing_frames")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Motion:
    """Body-to-world (or camera-to-world) rigid motion as a function of time."""

    position: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    rotvec: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    period: float = 0.0
    spin: tuple = (0.0, 0.0, 0.0)  # body-frame angular velocity

    def pose(self, t: float) -> Pose:
        p = np.asarray(self.position) + t * np.asarray(self.velocity)
        if self.period:
            p = p + np.asarray(self.amplitude) * np.sin(2 * np.pi * t / self.period)
        R = so3_exp(np.asarray(self.rotvec) + t * np.asarray(self.angular_velocity))
        if any(self.spin):
            R = R @ so3_exp(t * np.asarray(self.spin))
        return Pose(R, p)

    def is_static(self) -> bool:
        return (not any(self.velocity) and not any(self.angular_velocity) and not any(self.spin)
                and not (self.period and any(self.amplitude)))


@dataclass(frozen=True)
class Bend:
    """Signed curvature schedule ``kappa0 + amplitude * sin(2 pi t / period)``."""

    kappa0: float = 0.0
    amplitude: float = 0.0
    period: float = 0.0

    def kappa(self, t: float) -> float:
        if self.period and self.amplitude:
            return self.kappa0 + self.amplitude * np.sin(2 * np.pi * t / self.period)
        return self.kappa0

    def is_constant(self) -> bool:
        return not (self.period and self.amplitude)


@dataclass(frozen=True)
class Illumination:
    """Global gain/bias ramping linearly to their maxima over ``ramp`` frames."""

    gain_max: float = 1.0
    bias_max: float = 0.0
    ramp: float = 1.0
    wobble: float = 0.0
    wobble_period: float = 17.0

    def _s(self, t):
        return min(1.0, max(0.0, t / self.ramp)) if self.ramp > 0 else 1.0

    def gain(self, t: float) -> float:
        g = 1.0 + (self.gain_max - 1.0) * self._s(t)
        if self.wobble:
            g += self.wobble * np.sin(2 * np.pi * t / self.wobble_period) * self._s(t)
        return g

    def bias(self, t: float) -> float:
        return self.bias_max * self._s(t)


# ---------------------------------------------------------------------------
# Textures and bodies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    """Raster of band-limited value noise addressed by surface coordinates."""

    raster: np.ndarray
    texel: float
    origin: tuple  # surface coordinates of raster[0, 0]

    def sample(self, a, b):
        h, w = self.raster.shape
        x = np.clip((a - self.origin[0]) / self.texel, 0, w - 1)
        y = np.clip((b - self.origin[1]) / self.texel, 0, h - 1)
        return _bilinear(self.raster, x, y)


TEXTURE_SIGMAS = (2.5, 5.0, 10.0)  # octave widths in texels


def make_texture(rng, extent, texel, sigmas=TEXTURE_SIGMAS, weights=(0.45, 0.35, 0.3),
                 mean=0.4, contrast=0.06) -> Texture:
    """Multi-octave smoothed noise; ``contrast`` is the intensity standard deviation.

    Values are clipped to ``mean +- 3 * contrast``.
    """
    w = int(np.ceil(extent[0] / texel)) + 8
    h = int(np.ceil(extent[1] / texel)) + 8
    field_ = np.zeros((h, w))
    for s, wt in zip(sigmas, weights):
        n = ndimage.gaussian_filter(rng.standard_normal((h, w)), s, mode="wrap")
        field_ += wt * n / n.std()
    field_ /= field_.std()
    raster = np.clip(mean + contrast * field_, mean - 3 * contrast, mean + 3 * contrast)
    origin = (-extent[0] / 2 - 4 * texel, -extent[1] / 2 - 4 * texel)
    return Texture(raster, texel, origin)


@dataclass(frozen=True)
class Body:
    """Textured analytic surface.

    ``kind`` is ``plane``, ``bent`` (sheet bent about the body y axis with
    curvature from ``bend``) or ``sphere`` (cap of radius ``radius`` whose apex
    sits at the body origin, bulging towards -z).
    """

    kind: str
    texture: Texture
    extent: tuple = (1.0, 1.0)  # plane/bent: full width/height; sphere: (cap arc radius, -)
    motion: Motion = field(default_factory=Motion)
    bend: Bend = field(default_factory=Bend)
    radius: float = 1.0
    occluder: bool = False

    # -- surface evaluation in the body frame --------------------------------
    def local_point(self, a, b, t):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "plane" or (self.kind == "bent" and abs(self.bend.kappa(t)) < 1e-12):
            return np.stack([a, b, np.zeros_like(a)], axis=-1)
        if self.kind == "bent":
            k = self.bend.kappa(t)
            return np.stack([np.sin(k * a) / k, b, (1 - np.cos(k * a)) / k], axis=-1)
        rho = self.radius
        r = np.hypot(a, b)
        th = r / rho
        s = np.where(r > 1e-12, rho * np.sin(th) / np.where(r > 1e-12, r, 1.0), 1.0)
        return np.stack([s * a, s * b, rho * (1 - np.cos(th))], axis=-1)

    def local_tangents(self, a, b, t):
        """Derivatives of :meth:`local_point` w.r.t. a and b, each (..., 3)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        one, zero = np.ones_like(a), np.zeros_like(a)
        if self.kind == "plane" or (self.kind == "bent" and abs(self.bend.kappa(t)) < 1e-12):
            return np.stack([one, zero, zero], -1), np.stack([zero, one, zero], -1)
        if self.kind == "bent":
            k = self.bend.kappa(t)
            return np.stack([np.cos(k * a), zero, np.sin(k * a)], -1), np.stack([zero, one, zero], -1)
        rho = self.radius
        r = np.hypot(a, b)
        safe = np.where(r > 1e-9, r, 1.0)
        th = r / rho
        s = np.where(r > 1e-9, rho * np.sin(th) / safe, 1.0)
        ds = np.where(r > 1e-9, (np.cos(th) * r - rho * np.sin(th)) / safe**2, 0.0)
        dz = np.where(r > 1e-9, np.sin(th) / safe, 1.0 / rho * 0.0 + 0.0)
        ua = np.stack([s + ds * a * a / safe, ds * a * b / safe, dz * a], -1)
        ub = np.stack([ds * a * b / safe, s + ds * b * b / safe, dz * b], -1)
        return ua, ub

    def point(self, a, b, t):
        return self.motion.pose(t).apply(self.local_point(a, b, t))

    def tangents(self, a, b, t):
        R = self.motion.pose(t).rotation
        ua, ub = self.local_tangents(a, b, t)
        return ua @ R.T, ub @ R.T

    def contains(self, a, b):
        if self.kind == "sphere":
            return np.hypot(a, b) <= self.extent[0]
        return (np.abs(a) <= self.extent[0] / 2) & (np.abs(b) <= self.extent[1] / 2)

    # -- ray intersection (body frame) ---------------------------------------
    def intersect(self, o, d, t):
        """Nearest valid hit of rays ``o + s d`` (body frame).

        Returns ``(s, a, b)`` with ``s = inf`` where the ray misses.
        """
        n = d.shape[0]
        s_best = np.full(n, np.inf)
        a_best = np.zeros(n)
        b_best = np.zeros(n)
        k = self.bend.kappa(t) if self.kind == "bent" else 0.0
        if self.kind == "plane" or (self.kind == "bent" and abs(k) < 1e-12):
            with np.errstate(divide="ignore", invalid="ignore"):
                s = -o[2] / d[:, 2]
            p = o + s[:, None] * d
            ok = np.isfinite(s) & (s > 1e-9) & self.contains(p[:, 0], p[:, 1])
            return np.where(ok, s, np.inf), p[:, 0], p[:, 1]
        if self.kind == "bent":
            # cylinder x^2 + (z - 1/k)^2 = 1/k^2, axis parallel to y
            c = 1.0 / k
            oz = o[2] - c
            A = d[:, 0] ** 2 + d[:, 2] ** 2
            B = 2 * (o[0] * d[:, 0] + oz * d[:, 2])
            C = o[0] ** 2 + oz**2 - c * c
        else:
            rho = self.radius
            oc = o - np.array([0.0, 0.0, rho])
            A = np.einsum("ij,ij->i", d, d)
            B = 2 * d @ oc
            C = oc @ oc - rho * rho
        disc = B * B - 4 * A * C
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        for sign in (-1.0, 1.0):
            s = (-B + sign * sq) / (2 * A)
            p = o + s[:, None] * d
            if self.kind == "bent":
                phi = np.arctan2(k * p[:, 0], 1 - k * p[:, 2])
                a = phi / k
                b = p[:, 1]
            else:
                rho = self.radius
                rr = np.hypot(p[:, 0], p[:, 1])
                th = np.arctan2(rr, rho - p[:, 2])
                scale = np.where(rr > 1e-12, rho * th / np.where(rr > 1e-12, rr, 1.0), 1.0)
                a = scale * p[:, 0]
                b = scale * p[:, 1]
            ok = hit & (s > 1e-9) & (s < s_best) & self.contains(a, b)
            if self.kind == "bent":
                ok &= np.abs(phi) < np.pi * 0.999
            else:
                ok &= th < np.pi / 2
            s_best = np.where(ok, s, s_best)
            a_best = np.where(ok, a, a_best)
            b_best = np.where(ok, b, b_best)
        return s_best, a_best, b_best


@dataclass(frozen=True)
class Scene:
    bodies: tuple
    camera: Motion = field(default_factory=Motion)  # camera-to-world
    illumination: Illumination = field(default_factory=Illumination)
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    size: tuple = DEFAULT_SIZE
    n_frames: int = 50
    missing: tuple = ()
    name: str = ""
    seed: int = 0

    def camera_pose(self, t: float) -> Pose:
        """World-to-camera transform at time ``t``."""
        return self.camera.pose(t).inverse()

    def frame_indices(self, n_frames: int | None = None) -> list:
        n = self.n_frames if n_frames is None else n_frames
        skip = set(self.missing)
        return [i for i in range(n) if i not in skip]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def cast_rays(scene: Scene, t: float, pose: Pose, K: Intrinsics, pixels):
    """Intersect camera rays through ``pixels`` (N, 2) with all bodies.

    Returns ``(depth, body_index, a, b)``; ``body_index`` is -1 on misses and
    ``depth`` is the camera-frame Z of the hit.
    """
    pixels = np.asarray(pixels, dtype=float)
    n = pixels.shape[0]
    dc = np.column_stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(n)])
    Rwc = pose.rotation.T
    origin_w = pose.center()
    dw = dc @ Rwc.T
    depth = np.full(n, np.inf)
    idx = np.full(n, -1)
    a_out = np.zeros(n)
    b_out = np.zeros(n)
    for i, body in enumerate(scene.bodies):
        bp = body.motion.pose(t)
        o_b = bp.rotation.T @ (origin_w - bp.translation)
        d_b = dw @ bp.rotation
        s, a, b = body.intersect(o_b, d_b, t)
        closer = s < depth
        depth = np.where(closer, s, depth)
        idx = np.where(closer, i, idx)
        a_out = np.where(closer, a, a_out)
        b_out = np.where(closer, b, b_out)
    return depth, idx, a_out, b_out


def _pixel_grid(size):
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.column_stack([xs.ravel(), ys.ravel()])


def render_frame(scene: Scene, t: float, pose: Pose | None = None, K: Intrinsics | None = None,
                 size: tuple | None = None, return_ids: bool = False):
    """Render intensity and depth at time ``t``.

    Background pixels are ``0.5`` with invalid depth; the illumination schedule
    is applied to surfaces as ``clamp(gain * I + bias, 0, 1)``.
    """
    pose = scene.camera_pose(t) if pose is None else pose
    K = K or scene.intrinsics
    w, h = size or scene.size
    depth, idx, a, b = cast_rays(scene, t, pose, K, _pixel_grid((w, h)))
    img = np.full(w * h, BACKGROUND)
    for i, body in enumerate(scene.bodies):
        m = idx == i
        if m.any():
            img[m] = body.texture.sample(a[m], b[m])
    hit = idx >= 0
    g, c = scene.illumination.gain(t), scene.illumination.bias(t)
    img[hit] = np.clip(g * img[hit] + c, 0.0, 1.0)
    dmap = np.where(hit, depth, 0.0).reshape(h, w)
    out = (img.reshape(h, w), DepthMap(dmap, hit.reshape(h, w)))
    if return_ids:
        return out + (idx.reshape(h, w),)
    return out


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Anchor:
    id: int
    body: int
    a: float
    b: float


@dataclass
class GroundTruth:
    frames: list
    poses: list  # world-to-camera per frame
    positions: np.ndarray  # (F, N, 3)
    jacobians: np.ndarray  # (F, N, 3, 2)
    visible: np.ndarray  # (F, N)
    anchor_ids: list

    def trajectory(self, surfel_id: int) -> np.ndarray:
        return self.positions[:, self.anchor_ids.index(surfel_id)]


def locate_anchor(scene: Scene, point, anchor_id: int = 0, tol: float = 1e-6) -> Anchor:
    """Find the body and surface coordinates of a world point at ``t = 0``."""
    point = np.asarray(point, dtype=float)
    for i, body in enumerate(scene.bodies):
        bp = body.motion.pose(0.0)
        o = bp.rotation.T @ (np.zeros(3) - bp.translation)
        q = bp.rotation.T @ (point - bp.translation)
        d = (q - o)[None]
        s, a, b = body.intersect(o, d / np.linalg.norm(d), 0.0)
        if np.isfinite(s[0]):
            p = body.point(a[0], b[0], 0.0)
            if np.linalg.norm(p - point) < tol:
                return Anchor(anchor_id, i, float(a[0]), float(b[0]))
    raise AnchorOffSurface(f"anchor {anchor_id} at {point} is not on any body")


def gt_surfel_track(scene: Scene, anchors, frames=None) -> GroundTruth:
    """Exact anchor positions, tangent bases and visibility over ``frames``.

    ``anchors`` are :class:`Anchor` objects or world points on a body at t=0.
    """
    anchors = [a if isinstance(a, Anchor) else locate_anchor(scene, a, i) for i, a in enumerate(anchors)]
    for an in anchors:
        if not scene.bodies[an.body].contains(an.a, an.b):
            raise AnchorOffSurface(f"anchor {an.id} outside body {an.body}")
    frames = scene.frame_indices() if frames is None else list(frames)
    K = scene.intrinsics
    w, h = scene.size
    F, N = len(frames), len(anchors)
    pos = np.zeros((F, N, 3))
    jac = np.zeros((F, N, 3, 2))
    vis = np.zeros((F, N), dtype=bool)
    poses = []
    for fi, t in enumerate(frames):
        pose = scene.camera_pose(t)
        poses.append(pose)
        for j, an in enumerate(anchors):
            body = scene.bodies[an.body]
            pos[fi, j] = body.point(an.a, an.b, t)
            ua, ub = body.tangents(an.a, an.b, t)
            jac[fi, j] = np.column_stack([ua, ub])
        Xc = pose.apply(pos[fi])
        front = Xc[:, 2] > 1e-6
        px = np.column_stack([K.fx * Xc[:, 0] / np.where(front, Xc[:, 2], 1) + K.cx,
                              K.fy * Xc[:, 1] / np.where(front, Xc[:, 2], 1) + K.cy])
        inside = front & (px[:, 0] >= 0) & (px[:, 0] <= w - 1) & (px[:, 1] >= 0) & (px[:, 1] <= h - 1)
        depth, idx, _, _ = cast_rays(scene, t, pose, K, px)
        own = np.array([an.body for an in anchors])
        vis[fi] = inside & (idx == own) & (np.abs(depth - Xc[:, 2]) < 1e-6 * (1 + np.abs(Xc[:, 2])))
    return GroundTruth(frames, poses, pos, jac, vis, [an.id for an in anchors])


def select_anchors(scene: Scene, spacing: int = 56, margin: int = 40, half_extent: int = 11,
                   max_count: int | None = None, exclude_occluders: bool = True):
    """Grid of reference pixels whose whole surfel window lies on one body at t=0.

    Returns ``(pixels, anchors)``.
    """
    K = scene.intrinsics
    w, h = scene.size
    _, depth, ids = render_frame(scene, 0.0, return_ids=True)
    r = half_extent + 3
    pixels, anchors = [], []
    for y in range(margin, h - margin + 1, spacing):
        for x in range(margin, w - margin + 1, spacing):
            win = ids[y - r:y + r + 1, x - r:x + r + 1]
            body = ids[y, x]
            if body < 0 or not (win == body).all():
                continue
            if exclude_occluders and scene.bodies[body].occluder:
                continue
            d, idx, a, b = cast_rays(scene, 0.0, scene.camera_pose(0.0), K, np.array([[x, y]], float))
            anchors.append(Anchor(len(anchors), int(idx[0]), float(a[0]), float(b[0])))
            pixels.append((x, y))
            if max_count and len(pixels) >= max_count:
                return pixels, anchors
    return pixels, anchors


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _speed(px_per_frame, depth, f=500.0):
    return px_per_frame * depth / f


def _sigmas(overrides):
    """Octave widths from the ``texture_sigmas`` override, scaled by ``texture_scale``."""
    base = overrides.get("texture_sigmas", TEXTURE_SIGMAS)
    return tuple(overrides.get("texture_scale", 1.0) * s for s in base)


def _bending_sheet(rng, n_frames, **kw):
    depth = kw.get("depth", 1.0)
    tex = make_texture(rng, (1.6, 1.3), depth / 500.0, _sigmas(kw))
    sheet = Body(
        "bent", tex, extent=(1.5, 1.2),
        motion=Motion(position=(0.0, 0.0, depth), velocity=(_speed(kw.get("speed", 0.8), depth), 0.0, 0.0),
                      rotvec=(0.0, 0.0, 0.0), angular_velocity=(0.0015, 0.0, 0.0)),
        bend=Bend(0.0, kw.get("bend", 0.9), kw.get("bend_period", 2.0 * n_frames)),
    )
    return Scene((sheet,), n_frames=n_frames)


def make_scene(preset: str, seed: int = 0, n_frames: int = 50, **overrides) -> Scene:
    """Deterministic scene for ``(preset, seed)``.

    Keyword overrides tune a preset (e.g. ``speed`` in pixels per frame,
    ``depth``, ``missing``).
    """
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    rng = np.random.default_rng(seed)
    if preset == "rigid_plane":
        depth = overrides.get("depth", 1.2)
        tex = make_texture(rng, (2.4, 2.0), depth / 500.0, _sigmas(overrides))
        plane = Body("plane", tex, extent=(2.2, 1.8),
                     motion=Motion(position=(0.0, 0.0, depth), rotvec=(0.1, -0.35, 0.0),
                                   velocity=(_speed(overrides.get("body_speed", 0.0), depth), 0.0, 0.0)))
        cam_speed = _speed(overrides.get("speed", 1.5), depth)
        camera = Motion(velocity=(cam_speed, 0.3 * cam_speed, 0.2 * cam_speed),
                        angular_velocity=(0.0, 0.001, 0.0005))
        if overrides.get("static_camera", False):
            camera = Motion()
        scene = Scene((plane,), camera=camera, n_frames=n_frames)
    elif preset == "bending_sheet":
        scene = _bending_sheet(rng, n_frames, **overrides)
    elif preset == "illumination_drift":
        scene = _bending_sheet(rng, n_frames, **overrides)
        if overrides.get("drift", True):
            scene = replace(scene, illumination=Illumination(
                gain_max=overrides.get("gain_max", 1.5), bias_max=overrides.get("bias_max", 0.1),
                ramp=overrides.get("ramp", 0.3 * n_frames)))
    elif preset == "two_bodies_sliding":
        # two convex lobes spinning in opposite senses about their own axes; the
        # front lobe slides over the back one along their (static) overlap
        w = overrides.get("spin", 0.004)
        rho, arc = 0.6, 0.45
        lobe_a = Body("sphere", make_texture(rng, (1.0, 1.0), 1.0 / 500.0), extent=(arc,), radius=rho,
                      motion=Motion(position=(-0.22, -0.02, 0.95), rotvec=(0.05, -0.08, 0.0), spin=(0.0, 0.0, w)))
        lobe_b = Body("sphere", make_texture(rng, (1.0, 1.0), 1.1 / 500.0), extent=(arc,), radius=rho,
                      motion=Motion(position=(0.26, 0.03, 1.08), rotvec=(-0.04, 0.1, 0.0), spin=(0.0, 0.0, -w)))
        scene = Scene((lobe_a, lobe_b), n_frames=n_frames)
    elif preset == "occlusion":
        depth = 1.0
        tex = make_texture(rng, (1.6, 1.3), depth / 500.0)
        wall = Body("plane", tex, extent=(1.5, 1.2),
                    motion=Motion(position=(0.0, 0.0, depth), rotvec=(0.0, 0.2, 0.0),
                                  velocity=(_speed(overrides.get("speed", 0.6), depth), 0.0, 0.0)))
        occ_tex = make_texture(rng, (0.1, 0.1), 0.7 / 500.0, mean=0.45, contrast=0.08)
        occ_speed = _speed(overrides.get("occluder_speed", 8.0), 0.7)
        occluder = Body("plane", occ_tex, extent=(0.09, 0.09), occluder=True,
                        motion=Motion(position=(-0.5, overrides.get("occluder_y", -0.055), 0.7),
                                      velocity=(occ_speed, 0.0, 0.0)))
        scene = Scene((wall, occluder), n_frames=n_frames)
    else:  # missing_frames
        scene = _bending_sheet(rng, n_frames, speed=overrides.get("speed", 2.0), **{
            k: v for k, v in overrides.items() if k not in ("speed", "missing")})
        missing = overrides.get("missing", tuple(int(round(i * n_frames / 200)) for i in (70, 120, 130, 150)))
        scene = replace(scene, missing=tuple(sorted(set(missing))))
    return replace(scene, name=preset, seed=seed)


def render_sequence(scene: Scene, frames=None, threads: int = 1):
    """Render ``[(t, image, depth), ...]`` for the scene's delivered frames."""
    frames = scene.frame_indices() if frames is None else list(frames)

    def one(t):
        img, dep = render_frame(scene, t)
        return t, img, dep

    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, frames))
    return [one(t) for t in frames]
