"""Pulse shape, its spectrum, and FRI parameter sets.

The transmitted pulse is a Gaussian-modulated cosine, which has a closed
form continuous-time Fourier transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BandViolationError(ValueError):
    """A Fourier index falls where the pulse spectrum is (nearly) zero."""


@dataclass(frozen=True)
class PulseSpec:
    """Gaussian-modulated cosine ``A exp(-t^2 / 2 sigma^2) cos(2 pi f_c t)``."""

    center_frequency: float = 3.4e6
    envelope_sigma: float = np.sqrt(2 * np.log(2)) / (2 * np.pi * 1e6)
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.center_frequency > 0:
            raise ValueError("center_frequency must be positive")
        if not self.envelope_sigma > 0:
            raise ValueError("envelope_sigma must be positive")
        if not np.isfinite(self.amplitude) or self.amplitude == 0:
            raise ValueError("amplitude must be finite and non-zero")

    @classmethod
    def from_bandwidth(cls, center_frequency=3.4e6, bandwidth_6db=2e6, amplitude=1.0):
        """Pulse whose spectrum drops by 6 dB at ``center_frequency +- bandwidth_6db / 2``."""
        sigma = np.sqrt(2 * np.log(2)) / (np.pi * bandwidth_6db)
        return cls(center_frequency, sigma, amplitude)

    @property
    def support(self):
        """Half-width beyond which the pulse is numerically zero."""
        return 8.0 * self.envelope_sigma

    @property
    def energy(self):
        s, w = self.envelope_sigma, 2 * np.pi * self.center_frequency
        return self.amplitude**2 * s * np.sqrt(np.pi) / 2 * (1 + np.exp(-(s * w) ** 2))


def pulse_value(p, t):
    t = np.asarray(t, dtype=float)
    s = p.envelope_sigma
    return p.amplitude * np.exp(-(t * t) / (2 * s * s)) * np.cos(2 * np.pi * p.center_frequency * t)


def pulse_ctft(p, omega):
    """Closed-form CTFT ``H(omega)`` of the pulse (real, since the pulse is even)."""
    omega = np.asarray(omega, dtype=float)
    s, wc = p.envelope_sigma, 2 * np.pi * p.center_frequency
    scale = p.amplitude * s * np.sqrt(2 * np.pi) / 2
    return scale * (np.exp(-(s * (omega - wc)) ** 2 / 2) + np.exp(-(s * (omega + wc)) ** 2 / 2))


def pulse_envelope(p, t):
    """Gaussian envelope of the pulse (magnitude of its analytic signal)."""
    t = np.asarray(t, dtype=float)
    return abs(p.amplitude) * np.exp(-(t * t) / (2 * p.envelope_sigma**2))


@dataclass(frozen=True)
class FourierIndexSet:
    """Sorted set of distinct Fourier indices ``k_j`` used for recovery."""

    indices: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.indices)
        if k.ndim != 1 or k.size == 0:
            raise ValueError("a Fourier index set needs at least one index")
        if not np.issubdtype(k.dtype, np.integer):
            if not np.all(k == np.round(k)):
                raise ValueError("Fourier indices must be integers")
        k = k.astype(np.int64)
        if np.any(np.diff(k) <= 0):
            raise ValueError("Fourier indices must be sorted and distinct")
        k.setflags(write=False)
        object.__setattr__(self, "indices", k)

    def __len__(self):
        return self.indices.size

    @classmethod
    def centered(cls, K, pulse, T, h_min_rel=1e-3):
        """``K`` consecutive indices centered on the pulse band, i.e. ``round(f_c T)``."""
        if K < 1:
            raise ValueError("K must be at least 1")
        k0 = int(round(pulse.center_frequency * T))
        out = cls(np.arange(k0 - K // 2, k0 - K // 2 + K))
        out.check_band(pulse, T, h_min_rel)
        return out

    def check_band(self, pulse, T, h_min_rel=1e-3):
        """Raise :class:`BandViolationError` if any index sits outside the pulse band."""
        H = np.abs(pulse_ctft(pulse, 2 * np.pi * self.indices / T))
        h_min = h_min_rel * abs(pulse_ctft(pulse, 2 * np.pi * pulse.center_frequency))
        bad = self.indices[H < h_min]
        if bad.size:
            raise BandViolationError(
                f"band violation: |H| < {h_min:.3g} at indices {bad[:8].tolist()}"
                + ("..." if bad.size > 8 else "")
            )

    def check_sparsity(self, L):
        if len(self) < 2 * L:
            raise ValueError(f"K = {len(self)} is smaller than 2L = {2 * L}")


def _as_indices(kappa):
    return kappa.indices if isinstance(kappa, FourierIndexSet) else np.asarray(kappa, dtype=np.int64)


@dataclass(frozen=True)
class FRIChannelParams:
    """Arrivals ``(t_l, a_l)`` of pulses at a single element, sorted by time."""

    times: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        if t.shape != a.shape or t.ndim != 1:
            raise ValueError("times and amplitudes must be 1-D and of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("arrival times must be sorted with no duplicates")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "amplitudes", a)

    @classmethod
    def from_unsorted(cls, times, amplitudes):
        t = np.asarray(times, dtype=float)
        a = np.asarray(amplitudes, dtype=float)
        order = np.argsort(t, kind="stable")
        return cls(t[order], a[order])

    def __len__(self):
        return self.times.size

    def check_window(self, T):
        if np.any((self.times < 0) | (self.times >= T)):
            raise ValueError("arrival times must lie in [0, T)")


@dataclass(frozen=True)
class BeamformedFRIParams:
    """On-grid echoes ``t_l = q_l * grid_step`` of the beamformed signal."""

    grid_indices: np.ndarray
    amplitudes: np.ndarray
    grid_step: float
    grid_size: int

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.grid_indices)).astype(np.int64)
        b = np.atleast_1d(np.asarray(self.amplitudes))
        if q.shape != b.shape or q.ndim != 1:
            raise ValueError("grid_indices and amplitudes must be 1-D and of equal length")
        if np.any((q < 0) | (q >= self.grid_size)):
            raise ValueError("grid indices must lie in [0, grid_size)")
        if np.unique(q).size != q.size:
            raise ValueError("grid indices must be distinct")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")
        object.__setattr__(self, "grid_indices", q)
        object.__setattr__(self, "amplitudes", b)

    @property
    def times(self):
        return self.grid_indices * self.grid_step


def synthesize_channel(params, pulse, window):
    """Sample ``sum_l a_l h(t - t_l)`` at ``t = n / f_s`` over the window."""
    t = window.times
    out = np.zeros(t.size)
    fs = window.sample_rate
    half = int(np.ceil(pulse.support * fs))
    for tl, al in zip(params.times, params.amplitudes):
        n0 = int(round(tl * fs))
        lo, hi = max(n0 - half, 0), min(n0 + half + 1, t.size)
        if lo < hi:
            out[lo:hi] += al * pulse_value(pulse, t[lo:hi] - tl)
    return out


def channel_fourier_coefficients(waveform, window, indices):
    """Rectangle-rule Fourier series coefficients ``phi[k]`` of stored samples.

    ``waveform`` may be batched along leading axes; the last axis is time.
    """
    x = np.asarray(waveform)
    S = x.shape[-1]
    k = np.asarray(indices, dtype=np.int64)
    if np.any(np.abs(k) > S // 2):
        raise ValueError(f"Fourier index beyond the Nyquist limit of the stored data (|k| <= {S // 2})")
    if np.iscomplexobj(x):
        return (np.fft.fft(x, axis=-1) / S)[..., k % S]
    # real data: read negative indices as conjugates so the symmetry is exact
    half = np.fft.rfft(x, axis=-1) / S
    out = half[..., np.abs(k)]
    return np.where(k < 0, np.conj(out), out)


def beamformed_coefficient_model(params, pulse, kappa, T):
    """Fourier coefficients of an on-grid beamformed FRI line, in closed form."""
    k = _as_indices(kappa)
    H = pulse_ctft(pulse, 2 * np.pi * k / T)
    if len(params.grid_indices) == 0:
        return np.zeros(k.size, dtype=complex)
    phase = np.exp(-2j * np.pi / T * params.grid_step * np.outer(k, params.grid_indices))
    return H / T * (phase @ params.amplitudes)
