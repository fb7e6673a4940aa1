"""Nyquist-rate dynamic-focusing beamformer used as the reference path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import firwin, hilbert

from .geometry import warp_time

DEFAULT_LINE_SAMPLES = 1662
DEFAULT_PASSBAND = 4e6


def dynamic_focus_channel(waveform, theta, gamma_m, window):
    """Resample one channel at the warped times ``warp_time(n / f_s)``.

    Linear interpolation; reads past the last stored sample give zero.
    """
    x = np.asarray(waveform, dtype=float)
    if x.shape[-1] != window.n_samples:
        raise ValueError(f"waveform length {x.shape[-1]} != floor(T*fs) = {window.n_samples}")
    t = window.times
    u = warp_time(t, theta, gamma_m)
    return np.interp(u, t, x, left=0.0, right=0.0)


def focus_all(traces, theta, gammas, window):
    """Dynamic focusing of an ``(M, S)`` block of channels."""
    return np.stack([dynamic_focus_channel(tr, theta, g, window) for tr, g in zip(traces, gammas)])


def beamform(channels):
    """Average of the aligned channels."""
    channels = np.asarray(channels)
    if channels.ndim < 1 or channels.shape[0] == 0:
        raise ValueError("beamform needs at least one channel")
    return channels.mean(axis=0)


def envelope(line, window=None, center_frequency=None):
    """Magnitude of the analytic signal of ``line``."""
    line = np.asarray(line, dtype=float)
    if not np.any(line):
        return np.zeros_like(line)
    return np.abs(hilbert(line))


def downsample_line(line, window, center_frequency, n_real=DEFAULT_LINE_SAMPLES, passband=DEFAULT_PASSBAND, numtaps=201):
    """Complex-baseband decimation to ``n_real`` real numbers (interleaved I/Q).

    The line is mixed down by ``center_frequency``, low-passed with a
    windowed-sinc filter of two-sided bandwidth ``passband``, and resampled
    at ``n_real // 2`` evenly spaced instants by linear interpolation.
    """
    if n_real % 2:
        raise ValueError("n_real must be even (I/Q pairs)")
    t = window.times
    base = np.asarray(line, dtype=float) * np.exp(-2j * np.pi * center_frequency * t)
    taps = firwin(numtaps, passband / 2, fs=window.sample_rate)
    # odd symmetric taps with mode="same" give a zero-phase filter
    filt = 2 * np.convolve(base, taps, mode="same")
    n_cplx = n_real // 2
    ts = np.arange(n_cplx) * window.duration / n_cplx
    iq = np.interp(ts, t, filt.real) + 1j * np.interp(ts, t, filt.imag)
    out = np.empty(n_real)
    out[0::2], out[1::2] = iq.real, iq.imag
    return out


@dataclass
class ReferenceLine:
    beamformed: np.ndarray
    envelope: np.ndarray
    downsampled: np.ndarray

    def on_grid(self, window, n_grid):
        """Envelope resampled onto the ``n_grid``-point radial grid ``q T / n_grid``."""
        ts = np.arange(n_grid) * window.duration / n_grid
        return np.interp(ts, window.times, self.envelope)


def reference_line(raw, beam, geom, theta, center_frequency, n_real=DEFAULT_LINE_SAMPLES, passband=DEFAULT_PASSBAND):
    """Focus, beamform, detect and decimate one beam of ``raw``."""
    if not 0 <= beam < raw.n_beams:
        raise IndexError(f"beam index {beam} out of range for {raw.n_beams} beams")
    if raw.n_elements != geom.n_elements:
        raise ValueError("raw data and geometry disagree on the number of elements")
    focused = focus_all(raw.samples[beam].astype(float), theta, geom.gammas, raw.window)
    line = beamform(focused)
    return ReferenceLine(
        beamformed=line,
        envelope=envelope(line),
        downsampled=downsample_line(line, raw.window, center_frequency, n_real, passband),
    )
