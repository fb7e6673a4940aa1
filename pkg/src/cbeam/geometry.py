"""Array geometry, round-trip delays and the dynamic-focusing time warp.

Angles follow the delay law used throughout the package::

    tau_m(t) = t + sqrt((t cos(theta))**2 + (gamma_m - t sin(theta))**2)

so ``sin(theta)`` is the component along the array axis.  Broadside is
``theta = 0`` and ``theta = +-pi/2`` points along the array.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SOUND_SPEED = 1540.0


@dataclass(frozen=True)
class MediumParams:
    sound_speed: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        if not self.sound_speed > 0:
            raise ValueError(f"sound_speed must be positive, got {self.sound_speed}")


@dataclass(frozen=True)
class ScanGeometry:
    """Linear receive array described by signed element offsets.

    Parameters
    ----------
    element_offsets : array-like of float
        Distance of each element from the origin in meters, strictly
        increasing.
    reference_index : int
        Index of the element sitting exactly at the origin.
    medium : MediumParams
    """

    element_offsets: np.ndarray
    reference_index: int
    medium: MediumParams = field(default_factory=MediumParams)

    def __post_init__(self):
        offsets = np.asarray(self.element_offsets, dtype=float)
        if offsets.ndim != 1 or offsets.size < 1:
            raise ValueError("element_offsets must be a non-empty 1-D sequence")
        if offsets.size > 1 and not np.all(np.diff(offsets) > 0):
            raise ValueError("element_offsets must be strictly increasing")
        if not 0 <= self.reference_index < offsets.size:
            raise ValueError(f"reference_index {self.reference_index} out of range")
        if offsets[self.reference_index] != 0.0:
            raise ValueError("the reference element must sit exactly at the origin")
        offsets.setflags(write=False)
        object.__setattr__(self, "element_offsets", offsets)

    @classmethod
    def uniform(cls, n_elements=64, pitch=0.308e-3, sound_speed=DEFAULT_SOUND_SPEED):
        """Uniform linear array with element ``n_elements // 2`` at the origin."""
        m0 = n_elements // 2
        offsets = (np.arange(n_elements) - m0) * pitch
        return cls(offsets, m0, MediumParams(sound_speed))

    @property
    def n_elements(self):
        return self.element_offsets.size

    @property
    def sound_speed(self):
        return self.medium.sound_speed

    @property
    def gammas(self):
        """Per-element offsets expressed in seconds."""
        return self.element_offsets / self.medium.sound_speed

    def fingerprint(self):
        """CRC-32 of the offsets and sound speed, used to tag stored data."""
        payload = np.concatenate([self.element_offsets, [self.medium.sound_speed]])
        return zlib.crc32(payload.astype("<f8").tobytes()) & 0xFFFFFFFF


@dataclass(frozen=True)
class AcquisitionWindow:
    duration: float = 207e-6
    sample_rate: float = 50e6

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_samples < 1:
            raise ValueError("acquisition window holds no samples")

    @property
    def n_samples(self):
        # guard against T*fs landing a hair under an integer
        return int(np.floor(self.duration * self.sample_rate + 1e-9))

    @property
    def times(self):
        return np.arange(self.n_samples) / self.sample_rate


def sector_angles(n_beams, sector_deg=60.0):
    """Beam angles (radians) spread evenly over a sector centered on broadside."""
    if n_beams < 1:
        raise ValueError("n_beams must be at least 1")
    half = np.deg2rad(sector_deg) / 2
    if n_beams == 1:
        return np.zeros(1)
    return np.linspace(-half, half, n_beams)


def gamma(geom, m):
    """Element offset of element ``m`` in seconds."""
    if not 0 <= m < geom.n_elements:
        raise IndexError(f"element index {m} out of range for {geom.n_elements} elements")
    return geom.element_offsets[m] / geom.medium.sound_speed


def round_trip_delay(t, theta, gamma_m):
    """Arrival time at an element of an echo from depth-time ``t`` on beam ``theta``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("round_trip_delay requires t >= 0")
    out = t + np.hypot(t * np.cos(theta), gamma_m - t * np.sin(theta))
    return out if out.ndim else float(out)


def warp_time(t, theta, gamma_m):
    """Time at which a channel must be read to align it with the reference element.

    Satisfies ``warp_time(2 t) == round_trip_delay(t)``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("warp_time requires t >= 0")
    s, c = np.sin(theta), np.cos(theta)
    # the discriminant is a sum of squares, so hypot never sees a negative
    out = 0.5 * (t + np.hypot(t - 2 * gamma_m * s, 2 * gamma_m * c))
    return out if out.ndim else float(out)


def channel_window_end(theta, gamma_m, T):
    """Upper limit of the channel support that maps into the beamformed window."""
    if not T > 0:
        raise ValueError("T must be positive")
    return min(warp_time(T, theta, gamma_m), T)
