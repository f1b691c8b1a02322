"""Grayscale images, bilinear sampling, pyramids and the pinhole camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, OutOfBounds, TooSmall

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def at_level(self, level: int) -> "Intrinsics":
        """Intrinsics of pyramid level ``level`` (2x2 box downsampling).

        Pixel centres are kept aligned: level-k pixel ``i`` covers level-0
        pixels ``2**k * i ... 2**k * (i + 1) - 1``.
        """
        s = 2.0 ** -level
        return Intrinsics(self.fx * s, self.fy * s,
                          (self.cx + 0.5) * s - 0.5, (self.cy + 0.5) * s - 0.5)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DepthMap:
    depths: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        object.__setattr__(self, "depths", d)
        if self.valid is None:
            object.__setattr__(self, "valid", np.isfinite(d) & (d > 0))
        else:
            object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool) & np.isfinite(d) & (d > 0))

    @property
    def shape(self):
        return self.depths.shape


def as_gray(img) -> np.ndarray:
    """Validate a grayscale image: 2-D, finite, intensities in [0, 1]."""
    a = np.asarray(img, dtype=float)
    if a.ndim != 2:
        raise ValueError("grayscale image must be 2-D")
    if not np.isfinite(a).all():
        raise ValueError("image contains non-finite samples")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("intensities must be normalized to [0, 1]")
    return a


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _bilinear(data: np.ndarray, x, y):
    """Vectorized bilinear interpolation; caller guarantees x, y in range."""
    h, w = data.shape
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    ax = x - x0
    ay = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = (1.0 - ax) * data[y0, x0] + ax * data[y0, x1]
    bot = (1.0 - ax) * data[y1, x0] + ax * data[y1, x1]
    return (1.0 - ay) * top + ay * bot


def bilinear_sample(img, x, y):
    """Intensity at sub-pixel location(s) ``(x, y)``.

    Raises :class:`OutOfBounds` outside ``[0, w-1] x [0, h-1]``.
    """
    data = img.data if isinstance(img, BilinearImage) else np.asarray(img, dtype=float)
    h, w = data.shape
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if np.any(~((xa >= 0) & (xa <= w - 1) & (ya >= 0) & (ya <= h - 1))):
        raise OutOfBounds(f"sample outside image of size {w}x{h}")
    out = _bilinear(data, xa, ya)
    return float(out) if out.ndim == 0 else out


def central_gradients(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel [-1 0 1]/2 derivatives; border rows/columns are zero."""
    gx = np.zeros_like(data)
    gy = np.zeros_like(data)
    gx[:, 1:-1] = 0.5 * (data[:, 2:] - data[:, :-2])
    gy[1:-1, :] = 0.5 * (data[2:, :] - data[:-2, :])
    return gx, gy


def image_gradient(img, x, y):
    """Central-difference gradient ``(g_x, g_y)`` at sub-pixel ``(x, y)``.

    Equivalent to ``(I(x+1, y) - I(x-1, y)) / 2`` with bilinear ``I``; needs a
    one-pixel margin.
    """
    data = img.data if isinstance(img, BilinearImage) else np.asarray(img, dtype=float)
    h, w = data.shape
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if np.any(~((xa >= 1) & (xa <= w - 2) & (ya >= 1) & (ya <= h - 2))):
        raise OutOfBounds("gradient needs a one-pixel margin")
    gx = 0.5 * (_bilinear(data, xa + 1, ya) - _bilinear(data, xa - 1, ya))
    gy = 0.5 * (_bilinear(data, xa, ya + 1) - _bilinear(data, xa, ya - 1))
    if gx.ndim == 0:
        return float(gx), float(gy)
    return gx, gy


class BilinearImage:
    """An image ready for repeated sampling of values and gradients.

    Gradient images are precomputed; bilinear interpolation of them is
    identical to differencing bilinear samples one pixel apart.
    """

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=float)
        self.gx, self.gy = central_gradients(self.data)

    @property
    def shape(self):
        return self.data.shape

    def sample(self, x, y):
        """Values and validity mask; invalid samples return 0."""
        h, w = self.data.shape
        valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        xs = np.where(valid, x, 0.0)
        ys = np.where(valid, y, 0.0)
        return np.where(valid, _bilinear(self.data, xs, ys), 0.0), valid

    def sample_with_gradient(self, x, y):
        """Values, gradients and validity mask (one-pixel margin required)."""
        h, w = self.data.shape
        valid = (x >= 1) & (x <= w - 2) & (y >= 1) & (y <= h - 2)
        xs = np.where(valid, x, 1.0)
        ys = np.where(valid, y, 1.0)
        val = _bilinear(self.data, xs, ys)
        gx = _bilinear(self.gx, xs, ys)
        gy = _bilinear(self.gy, xs, ys)
        z = np.zeros_like(val)
        return (np.where(valid, val, z), np.where(valid, gx, z),
                np.where(valid, gy, z), valid)


class AnalyticImage:
    """Smooth procedural image with exact gradients.

    A sum of oriented sinusoids around mid-gray.  Used where finite
    differences must see the same derivative the chain rule uses, which a
    bilinear interpolant cannot offer.
    """

    def __init__(self, width: int, height: int, seed: int = 0, n_waves: int = 6,
                 min_period: float = 12.0, max_period: float = 60.0, contrast: float = 0.3):
        rng = np.random.default_rng(seed)
        self.width, self.height = int(width), int(height)
        angles = rng.uniform(0, np.pi, n_waves)
        periods = rng.uniform(min_period, max_period, n_waves)
        k = 2 * np.pi / periods
        self.kx = k * np.cos(angles)
        self.ky = k * np.sin(angles)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = np.full(n_waves, contrast / n_waves)

    @property
    def shape(self):
        return (self.height, self.width)

    def _inside(self, x, y):
        return (x >= 1) & (x <= self.width - 2) & (y >= 1) & (y <= self.height - 2)

    def sample(self, x, y):
        valid = self._inside(x, y)
        arg = np.multiply.outer(x, self.kx) + np.multiply.outer(y, self.ky) + self.phase
        return np.where(valid, 0.5 + np.sin(arg) @ self.amp, 0.0), valid

    def sample_with_gradient(self, x, y):
        valid = self._inside(x, y)
        arg = np.multiply.outer(x, self.kx) + np.multiply.outer(y, self.ky) + self.phase
        c = np.cos(arg)
        val = 0.5 + np.sin(arg) @ self.amp
        gx = c @ (self.amp * self.kx)
        gy = c @ (self.amp * self.ky)
        z = np.zeros_like(val)
        return (np.where(valid, val, z), np.where(valid, gx, z), np.where(valid, gy, z), valid)

    def raster(self) -> np.ndarray:
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(float)
        arg = np.multiply.outer(xs, self.kx) + np.multiply.outer(ys, self.ky) + self.phase
        return 0.5 + np.sin(arg) @ self.amp


# ---------------------------------------------------------------------------
# Pyramids
# ---------------------------------------------------------------------------

def downsample(data: np.ndarray) -> np.ndarray:
    """2x2 box filter; odd sizes replicate the last row/column."""
    h, w = data.shape
    if h % 2:
        data = np.vstack([data, data[-1:]])
    if w % 2:
        data = np.hstack([data, data[:, -1:]])
    return 0.25 * (data[0::2, 0::2] + data[1::2, 0::2] + data[0::2, 1::2] + data[1::2, 1::2])


@dataclass
class ImagePyramid:
    """Level 0 is the finest image; each level halves the resolution."""

    levels: list
    scale: float = 2.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.levels)

    def image(self, level: int) -> BilinearImage:
        if level not in self._cache:
            self._cache[level] = BilinearImage(self.levels[level])
        return self._cache[level]


def build_pyramid(img, levels: int) -> ImagePyramid:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    data = np.asarray(img, dtype=float)
    h, w = data.shape
    need = 2 ** (levels - 1)
    if h <= need or w <= need:
        raise TooSmall(f"{w}x{h} image too small for {levels} levels")
    out = [data]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return ImagePyramid(out)


# ---------------------------------------------------------------------------
# Pinhole camera
# ---------------------------------------------------------------------------

def project_points(K: Intrinsics, Xc):
    """Vectorized projection; returns pixels (N, 2) and an in-front mask."""
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    Z = Xc[:, 2]
    front = Z > EPS_DEPTH
    Zs = np.where(front, Z, 1.0)
    px = np.empty((Xc.shape[0], 2))
    px[:, 0] = K.fx * Xc[:, 0] / Zs + K.cx
    px[:, 1] = K.fy * Xc[:, 1] / Zs + K.cy
    return px, front


def project(K: Intrinsics, Xc):
    """Pixel coordinates of camera-frame point(s)."""
    Xc = np.asarray(Xc, dtype=float)
    px, front = project_points(K, Xc)
    if not front.all():
        raise BehindCamera("point at or behind the camera")
    return px[0] if Xc.ndim == 1 else px


def normalized(K: Intrinsics, pixel):
    """Normalized retina coordinates of pixel(s)."""
    p = np.asarray(pixel, dtype=float)
    return np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy], axis=-1)


def unproject(K: Intrinsics, pixel, depth):
    """Camera-frame point at ``depth`` along the ray through ``pixel``."""
    n = normalized(K, pixel)
    d = np.asarray(depth, dtype=float)
    ones = np.ones(n.shape[:-1])
    return np.stack([n[..., 0], n[..., 1], ones], axis=-1) * d[..., None]


def projection_jacobian(K: Intrinsics, Xc):
    """d(pixel)/d(Xc): (2, 3) for one point, (N, 2, 3) for many."""
    Xc = np.asarray(Xc, dtype=float)
    pts = np.atleast_2d(Xc)
    if np.any(pts[:, 2] <= EPS_DEPTH):
        raise BehindCamera("point at or behind the camera")
    J = _projection_jacobian(K, pts)
    return J[0] if Xc.ndim == 1 else J


def _projection_jacobian(K: Intrinsics, pts):
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    inv_z = 1.0 / Z
    J = np.zeros((pts.shape[0], 2, 3))
    J[:, 0, 0] = K.fx * inv_z
    J[:, 0, 2] = -K.fx * X * inv_z**2
    J[:, 1, 1] = K.fy * inv_z
    J[:, 1, 2] = -K.fy * Y * inv_z**2
    return J


# ---------------------------------------------------------------------------
# PGM input/output
# ---------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int, pos: int = 0):
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a P2 or P5 PGM; returns raw integer samples and ``maxval``."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    elif magic == b"P2":
        data = np.array(buf[pos:].split()[: w * h], dtype=np.int64)
    else:
        raise ValueError(f"{path}: not a PGM file")
    return data.reshape(h, w).astype(np.int64), maxval


def write_pgm(path, data, maxval: int = 255) -> None:
    """Write integer samples as binary P5."""
    data = np.asarray(data)
    h, w = data.shape
    if data.min() < 0 or data.max() > maxval:
        raise ValueError("samples exceed maxval")
    dtype = ">u2" if maxval > 255 else np.uint8
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + data.astype(dtype).tobytes())


def load_gray(path) -> np.ndarray:
    """Load a PGM and normalize intensities to [0, 1]."""
    raw, maxval = read_pgm(path)
    return raw.astype(float) / maxval


def save_gray(path, img, bits: int = 16) -> None:
    maxval = 2**bits - 1
    q = np.rint(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * maxval).astype(np.int64)
    write_pgm(path, q, maxval)


def load_depth(path, scale: float) -> DepthMap:
    """16-bit depth PGM where 0 marks missing samples."""
    raw, _ = read_pgm(path)
    return DepthMap(raw.astype(float) * scale, raw > 0)


def save_depth(path, depth, scale: float) -> None:
    d = depth.depths if isinstance(depth, DepthMap) else np.asarray(depth, dtype=float)
    ok = np.isfinite(d) & (d > 0)
    q = np.where(ok, np.rint(np.where(ok, d, 0.0) / scale), 0).astype(np.int64)
    if q.max(initial=0) > 65535:
        raise ValueError("depth exceeds 16-bit range for this scale")
    write_pgm(path, q, 65535)


def pyramid_levels_for(shape, requested: int) -> int:
    """Largest level count not exceeding ``requested`` valid for ``shape``."""
    h, w = shape
    limit = int(math.floor(math.log2(min(h, w) - 1))) + 1 if min(h, w) > 1 else 1
    return max(1, min(requested, limit))
