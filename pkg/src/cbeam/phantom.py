"""Synthetic channel data from point-scatterer phantoms, and its on-disk container.

Container layout (little-endian)::

    b"SNBF0001"                      magic, 8 bytes
    u32 B, u32 M, u32 S              beams, elements, samples per trace
    f64 T, f64 fs, f64 sound_speed
    u32 geometry_hash
    f32[B * M * S]                   payload, (beam, element, sample) order
    u32 crc32(payload)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AcquisitionWindow, round_trip_delay
from .pulse import FRIChannelParams, pulse_value

MAGIC = b"SNBF0001"
_HEADER = struct.Struct("<8sIIIdddI")

# RNG stream purposes; combined with the seed (and beam) into a SeedSequence
_SPECKLE_STREAM = 1
_NOISE_STREAM = 2


class RawFormatError(ValueError):
    """Base class for problems reading a raw-data container."""


class BadMagicError(RawFormatError):
    pass


class MalformedHeaderError(RawFormatError):
    pass


class TruncatedPayloadError(RawFormatError):
    pass


class ChecksumMismatchError(RawFormatError):
    pass


@dataclass(frozen=True)
class Phantom:
    """Point scatterers plus optional speckle and white noise.

    Parameters
    ----------
    scatterers : array-like, shape (n, 3)
        Rows of ``(range_m, angle_rad, reflectivity)``.
    speckle_density : float
        Mean number of weak random scatterers per cm^2 of the scanned sector.
    speckle_amplitude_sigma : float
        Standard deviation of the speckle reflectivities.
    noise_sigma : float
        Standard deviation of the additive per-sample Gaussian noise.
    spreading : bool
        Scale echoes by ``r_ref / r`` (``r_ref`` = 1 cm).
    """

    scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    speckle_density: float = 0.0
    speckle_amplitude_sigma: float = 0.05
    noise_sigma: float = 0.0
    spreading: bool = False

    def __post_init__(self):
        s = np.asarray(self.scatterers, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "scatterers", s)
        if self.speckle_density < 0:
            raise ValueError("speckle_density must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def validate(self, sound_speed, T, sector):
        """Check every scatterer lies inside the window and the angular sector."""
        problems = []
        r_max = sound_speed * T / 2
        lo, hi = sector
        for i, (r, ang, _) in enumerate(self.scatterers):
            if not 0 < r <= r_max:
                problems.append(f"scatterer {i}: range {r:.4g} m outside (0, {r_max:.4g}]")
            if not lo - 1e-12 <= ang <= hi + 1e-12:
                problems.append(f"scatterer {i}: angle {ang:.4g} rad outside the scan sector")
        return problems


def load_phantom_file(path):
    """Read ``range_m angle_deg reflectivity`` rows (``#`` starts a comment)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'range_m angle_deg reflectivity'")
        r, ang, refl = map(float, parts)
        rows.append((r, np.deg2rad(ang), refl))
    return np.array(rows, dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class RawChannelData:
    """Nyquist-rate channel traces, shape ``(beams, elements, samples)``.

    Samples are float32 (the on-disk precision) unless given as float64.
    """

    samples: np.ndarray
    window: AcquisitionWindow
    sound_speed: float
    geometry_hash: int = 0

    def __post_init__(self):
        x = np.asarray(self.samples)
        x = x.astype(np.float64 if x.dtype == np.float64 else np.float32, copy=False)
        if x.ndim != 3:
            raise ValueError("samples must have shape (beams, elements, samples)")
        if x.shape[2] != self.window.n_samples:
            raise ValueError(
                f"trace length {x.shape[2]} does not match floor(T*fs) = {self.window.n_samples}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("raw data contains non-finite samples")
        object.__setattr__(self, "samples", x)

    @property
    def n_beams(self):
        return self.samples.shape[0]

    @property
    def n_elements(self):
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RawChannelData):
            return NotImplemented
        return (
            self.window == other.window
            and self.sound_speed == other.sound_speed
            and self.geometry_hash == other.geometry_hash
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def scan_fingerprint(geom, beams, window):
    """Hash tying stored data to its geometry, beam set and window."""
    payload = np.concatenate(
        [geom.element_offsets, [geom.sound_speed, window.duration, window.sample_rate], np.asarray(beams, float)]
    )
    return zlib.crc32(payload.astype("<f8").tobytes()) & 0xFFFFFFFF


def _lateral_weight(angle, theta, profile_sigma):
    return np.exp(-((angle - theta) ** 2) / (2 * profile_sigma**2))


def _arrivals(scat, theta, geom, profile_sigma, spreading):
    """Arrival times (n, M) and amplitudes (n, M) for scatterer rows ``scat``."""
    r, ang, refl = scat[:, 0], scat[:, 1], scat[:, 2]
    t0 = r / geom.sound_speed
    g = geom.gammas
    times = t0[:, None] + np.hypot(
        (t0 * np.cos(ang))[:, None], g[None, :] - (t0 * np.sin(ang))[:, None]
    )
    amp = refl * _lateral_weight(ang, theta, profile_sigma)
    if spreading:
        amp = amp * np.minimum(1.0, 0.01 / r)
    return times, np.broadcast_to(amp[:, None], times.shape)


def scatterer_arrivals(scatterer, theta, geom, profile_sigma, T=np.inf, spreading=False):
    """Per-element arrivals of one scatterer's echo on beam ``theta``.

    Returns a list of :class:`FRIChannelParams`, one per element, each with
    zero or one arrival (arrivals at or beyond ``T`` are dropped).
    """
    r, ang, refl = scatterer
    t0 = r / geom.sound_speed
    out = []
    amp = refl * _lateral_weight(ang, theta, profile_sigma)
    if spreading:
        amp *= min(1.0, 0.01 / r)
    for g in geom.gammas:
        tm = round_trip_delay(t0, ang, g)
        if tm < T:
            out.append(FRIChannelParams([tm], [amp]))
        else:
            out.append(FRIChannelParams([], []))
    return out


def _accumulate(out, times, amps, pulse, window):
    """Add pulses at ``times`` (n, M) with ``amps`` (n, M) into ``out`` (M, S)."""
    fs = window.sample_rate
    S = window.n_samples
    half = int(np.ceil(pulse.support * fs))
    offs = np.arange(-half, half + 1)
    padded = np.zeros((out.shape[0], S + 2 * half + 1))
    rows = np.arange(out.shape[0])[:, None]
    T = window.duration
    for tl, al in zip(times, amps):
        keep = tl < T
        if not np.any(keep):
            continue
        n0 = np.rint(tl * fs).astype(np.int64)
        n0 = np.clip(n0, -half - 1, S + half)
        idx = n0[:, None] + offs[None, :]
        vals = np.where(keep[:, None], al[:, None] * pulse_value(pulse, idx / fs - tl[:, None]), 0.0)
        valid = (idx >= 0) & (idx < S)
        padded[rows, np.clip(idx, -half, S + half) + half] += np.where(valid, vals, 0.0)
    out += padded[:, half : half + S]
    return out


def draw_speckle(phantom, sound_speed, T, sector, seed):
    """Random weak scatterers covering the sector, drawn once per phantom."""
    if phantom.speckle_density <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng([seed, _SPECKLE_STREAM])
    r_max = sound_speed * T / 2
    lo, hi = sector
    area_cm2 = 0.5 * (hi - lo) * (r_max * 100) ** 2
    n = rng.poisson(phantom.speckle_density * area_cm2)
    r = r_max * np.sqrt(rng.random(n))
    r = np.maximum(r, 1e-4)
    ang = lo + (hi - lo) * rng.random(n)
    amp = rng.normal(0.0, phantom.speckle_amplitude_sigma, n)
    return np.column_stack([r, ang, amp])


def generate_raw_data(
    phantom, geom, beams, window, pulse, seed=0, profile_sigma=None, threads=1, dtype=np.float32
):
    """Simulate ``(B, M, S)`` channel data for every beam in ``beams``.

    Each beam's noise comes from its own ``(seed, beam)`` stream, so the
    output does not depend on evaluation order.  ``dtype`` defaults to the
    float32 precision of the raw container.
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    beams = np.atleast_1d(np.asarray(beams, dtype=float))
    if beams.size == 0:
        raise ValueError("beam list is empty")
    if profile_sigma is None:
        spacing = np.min(np.diff(beams)) if beams.size > 1 else np.deg2rad(1.0)
        profile_sigma = spacing / 2
    sector = (beams.min(), beams.max())
    scat = np.vstack([phantom.scatterers, draw_speckle(phantom, geom.sound_speed, window.duration, sector, seed)])
    M, S = geom.n_elements, window.n_samples

    def one_beam(b):
        theta = beams[b]
        trace = np.zeros((M, S))
        if scat.shape[0]:
            # beyond 6 sigma the lateral weight is below 1.6e-8
            near = np.abs(scat[:, 1] - theta) <= 6 * profile_sigma
            if np.any(near):
                times, amps = _arrivals(scat[near], theta, geom, profile_sigma, phantom.spreading)
                _accumulate(trace, times, amps, pulse, window)
        if phantom.noise_sigma > 0:
            rng = np.random.default_rng([seed, _NOISE_STREAM, b])
            trace += rng.normal(0.0, phantom.noise_sigma, trace.shape)
        return trace.astype(dtype)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            lines = list(ex.map(one_beam, range(beams.size)))
    else:
        lines = [one_beam(b) for b in range(beams.size)]
    return RawChannelData(
        np.stack(lines), window, geom.sound_speed, scan_fingerprint(geom, beams, window)
    )


def noise_sigma_for_snr(snr_db, peak_amplitude=1.0):
    """Noise level giving ``20 log10(peak / sigma) = snr_db`` on a single channel."""
    return peak_amplitude / 10 ** (snr_db / 20)


def save_raw(data, path):
    B, M, S = data.samples.shape
    payload = np.ascontiguousarray(data.samples, dtype="<f4").tobytes()
    header = _HEADER.pack(
        MAGIC, B, M, S, data.window.duration, data.window.sample_rate, data.sound_speed, data.geometry_hash
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_raw(path):
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a raw channel-data file")
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: header truncated")
    _, B, M, S, T, fs, c, ghash = _HEADER.unpack_from(blob)
    if not (T > 0 and fs > 0 and c > 0) or min(B, M, S) == 0:
        raise MalformedHeaderError(f"{path}: invalid header values")
    try:
        window = AcquisitionWindow(T, fs)
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from None
    if window.n_samples != S:
        raise MalformedHeaderError(f"{path}: S={S} inconsistent with T*fs")
    n_bytes = 4 * B * M * S
    end = _HEADER.size + n_bytes
    if len(blob) < end + 4:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(blob)} of {end + 4} bytes)")
    payload = blob[_HEADER.size : end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatchError(f"{path}: payload checksum mismatch")
    samples = np.frombuffer(payload, dtype="<f4").reshape(B, M, S).astype(np.float32)
    return RawChannelData(samples, window, c, ghash)
