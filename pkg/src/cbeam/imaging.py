"""Sector B-mode display: log compression, scan conversion and image files."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class EmptyImageError(ValueError):
    pass


@dataclass(frozen=True)
class PolarImage:
    """Beam-by-range amplitudes; ``lines[b, i]`` sits at range ``i * radial_step``."""

    lines: np.ndarray
    angles: np.ndarray
    radial_step: float

    def __post_init__(self):
        lines = np.atleast_2d(np.asarray(self.lines, dtype=float))
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        if lines.shape[0] != angles.size or min(lines.shape) < 1:
            raise ValueError("need one angle per line and at least one sample per line")
        if not np.all(np.isfinite(lines)) or np.any(lines < 0):
            raise ValueError("polar image values must be finite and non-negative")
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "angles", angles)

    @property
    def n_range(self):
        return self.lines.shape[1]


@dataclass(frozen=True)
class RenderParams:
    dynamic_range_db: float = 40.0
    width: int = 512
    height: int = 512
    background: float = 0.0

    def __post_init__(self):
        if not self.dynamic_range_db > 0:
            raise ValueError("dynamic_range_db must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("output size must be at least 1x1")


@dataclass(frozen=True)
class CartesianImage:
    """Pixels on a regular ``(z, x)`` grid; ``mask`` flags pixels inside the sector."""

    pixels: np.ndarray
    x: np.ndarray
    z: np.ndarray
    mask: np.ndarray


def log_compress(img, dynamic_range_db=40.0):
    """Map amplitudes to ``[0, 1]`` on a decibel scale spanning ``dynamic_range_db``."""
    if not dynamic_range_db > 0:
        raise ValueError("dynamic_range_db must be positive")
    vmax = img.lines.max()
    if vmax <= 0:
        raise EmptyImageError("empty image: nothing to compress")
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(img.lines / vmax)
    out = np.clip(1 + db / dynamic_range_db, 0.0, 1.0)
    return replace(img, lines=out)


def _beam_coordinate(theta, angles):
    """Fractional beam index of ``theta``; NaN outside the sector."""
    if angles.size == 1:
        half = np.deg2rad(0.5)
        return np.where(np.abs(theta - angles[0]) <= half, 0.0, np.nan)
    lo, hi = angles[0], angles[-1]
    idx = np.interp(theta, angles, np.arange(angles.size))
    return np.where((theta >= lo) & (theta <= hi), idx, np.nan)


def scan_convert(img, params=RenderParams()):
    """Bilinear resampling of a polar image onto a Cartesian ``(z, x)`` grid.

    Depth ``z = r cos(theta)`` runs down the rows and lateral position
    ``x = r sin(theta)`` across the columns.  Pixels outside the sector get
    ``params.background``.
    """
    r_max = (img.n_range - 1) * img.radial_step
    half_width = r_max * max(np.abs(np.sin(img.angles)).max(), 1e-3)
    x = np.linspace(-half_width, half_width, params.width)
    z = np.linspace(0.0, r_max, params.height)
    X, Z = np.meshgrid(x, z)
    R = np.hypot(X, Z)
    TH = np.arctan2(X, Z)
    bi = _beam_coordinate(TH, img.angles)
    ri = R / img.radial_step
    mask = np.isfinite(bi) & (ri <= img.n_range - 1)
    out = np.full(R.shape, params.background, dtype=float)
    b = bi[mask]
    r = ri[mask]
    b0 = np.minimum(np.floor(b).astype(int), max(img.angles.size - 2, 0))
    r0 = np.minimum(np.floor(r).astype(int), max(img.n_range - 2, 0))
    fb = b - b0 if img.angles.size > 1 else np.zeros_like(b)
    fr = r - r0 if img.n_range > 1 else np.zeros_like(r)
    b1 = np.minimum(b0 + 1, img.angles.size - 1)
    r1 = np.minimum(r0 + 1, img.n_range - 1)
    L = img.lines
    out[mask] = (
        (1 - fb) * (1 - fr) * L[b0, r0]
        + (1 - fb) * fr * L[b0, r1]
        + fb * (1 - fr) * L[b1, r0]
        + fb * fr * L[b1, r1]
    )
    return CartesianImage(out, x, z, mask)


def quantize(pixels):
    return np.floor(np.clip(np.asarray(pixels, dtype=float), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def write_image(img, path, fmt=None):
    """Write an 8-bit grayscale image; ``fmt`` is ``"pgm"`` or ``"png"`` (default from suffix)."""
    pixels = img.pixels if isinstance(img, CartesianImage) else np.asarray(img)
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    data = quantize(pixels)
    if fmt == "pgm":
        h, w = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(data).save(path)
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def read_pgm(path):
    """Read a binary 8-bit PGM written by :func:`write_image`; returns uint8 pixels."""
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
