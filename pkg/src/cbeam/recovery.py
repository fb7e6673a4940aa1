"""Partial-Fourier measurement model and orthogonal matching pursuit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pulse import BandViolationError, _as_indices, pulse_ctft, pulse_envelope


class DegenerateSupportError(np.linalg.LinAlgError):
    """The columns picked by OMP are (numerically) linearly dependent."""


@dataclass(frozen=True)
class MeasurementModel:
    """``c = (1/T) H A x`` with ``A[j, q] = exp(-2j pi k_j q dt / T)``."""

    kappa: np.ndarray
    grid_step: float
    grid_size: int
    T: float
    h_diag: np.ndarray
    composite: np.ndarray

    @property
    def shape(self):
        return self.composite.shape

    def apply(self, x):
        x = np.asarray(x)
        if x.shape[0] != self.grid_size:
            raise ValueError(f"x has length {x.shape[0]}, model expects {self.grid_size}")
        return self.composite @ x


def build_measurement_model(kappa, pulse, T, grid_size=1662, grid_step=None, h_min_rel=1e-3):
    """Measurement matrix for recovering on-grid echoes from Fourier coefficients.

    Parameters
    ----------
    kappa : FourierIndexSet or array-like of int
    pulse : PulseSpec
    T : float
        Window length in seconds.
    grid_size : int
        Number of grid cells ``N``.
    grid_step : float, optional
        Grid step; defaults to ``T / grid_size``.
    """
    k = _as_indices(kappa)
    if grid_step is None:
        grid_step = T / grid_size
    H = pulse_ctft(pulse, 2 * np.pi * k / T).astype(complex)
    h_min = h_min_rel * abs(pulse_ctft(pulse, 2 * np.pi * pulse.center_frequency))
    bad = k[np.abs(H) < h_min]
    if bad.size:
        raise BandViolationError(f"band violation: |H| below {h_min:.3g} at indices {bad[:8].tolist()}")
    A = np.exp(-2j * np.pi / T * grid_step * np.outer(k, np.arange(grid_size)))
    composite = (H / T)[:, None] * A
    return MeasurementModel(k, float(grid_step), int(grid_size), float(T), H, composite)


@dataclass(frozen=True)
class SparseVector:
    support: np.ndarray
    values: np.ndarray
    size: int

    def __post_init__(self):
        q = np.asarray(self.support, dtype=np.int64)
        v = np.asarray(self.values, dtype=complex)
        if q.shape != v.shape:
            raise ValueError("support and values must have equal length")
        if np.unique(q).size != q.size or np.any((q < 0) | (q >= self.size)):
            raise ValueError("support indices must be distinct and inside [0, size)")
        object.__setattr__(self, "support", q)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.support.size

    def dense(self):
        x = np.zeros(self.size, dtype=complex)
        x[self.support] = self.values
        return x


def omp_recover(c, model, n_nonzero=25, residual_tol=1e-6, real_amplitudes=False, noise_level=0.0, refine_radius=0):
    """Orthogonal matching pursuit on the measurement model.

    Stops after ``n_nonzero`` atoms or once ``||r|| <= residual_tol * ||c||``
    or ``||r|| <= noise_level``.
    Correlations are normalized by column norm; ties go to the lowest grid
    index.  Amplitudes are complex by default, so an echo falling between
    grid cells lands on the nearest cell with its phase absorbed.  With
    ``real_amplitudes`` they are constrained to be real (the real and
    imaginary parts of the measurements are stacked); the carrier phase then
    separates close on-grid echoes better, but off-grid echoes alias onto
    neighbouring carrier cycles.  The returned support is sorted.

    With ``refine_radius > 0`` the greedy support is then polished by local
    search: each atom may move up to ``refine_radius`` cells whenever that
    lowers the least-squares residual.  Greedy picks are easily pulled a
    cell or two off by the sidelobes of other echoes; the polish undoes that.

    Raises
    ------
    DegenerateSupportError
        If the selected columns are rank deficient.
    """
    c = np.asarray(c, dtype=complex)
    D = model.composite if isinstance(model, MeasurementModel) else np.asarray(model)
    K, N = D.shape
    if c.shape != (K,):
        raise ValueError(f"expected {K} measurements, got shape {c.shape}")
    if n_nonzero > K // 2:
        raise ValueError(f"n_nonzero={n_nonzero} exceeds K/2={K // 2}")
    if real_amplitudes:
        D = np.vstack([D.real, D.imag])
        y = np.concatenate([c.real, c.imag])
    else:
        y = c
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if refine_radius < 0:
        raise ValueError("refine_radius must be non-negative")
    support, coef = _omp(D, y, n_nonzero, residual_tol, noise_level)
    if refine_radius and support:
        support, coef = _refine(D, y, support, int(refine_radius))
    order = np.argsort(support)
    return SparseVector(np.asarray(support, dtype=np.int64)[order], coef[order], N)


def _omp(D, y, n_nonzero, residual_tol, noise_level=0.0):
    norms = np.linalg.norm(D, axis=0)
    norms[norms == 0] = np.inf
    stop = max(residual_tol * np.linalg.norm(y), noise_level)
    support = []
    coef = np.zeros(0, dtype=D.dtype)
    r = y.copy()
    Q = np.zeros((D.shape[0], 0), dtype=D.dtype)
    while len(support) < n_nonzero and np.linalg.norm(r) > stop:
        corr = np.abs(D.conj().T @ r) / norms
        corr[support] = -1.0
        q = int(np.argmax(corr))
        # incremental Gram-Schmidt (applied twice) on the selected columns
        a = D[:, q]
        v = a - Q @ (Q.conj().T @ a)
        v -= Q @ (Q.conj().T @ v)
        nv = np.linalg.norm(v)
        if nv <= 1e-10 * np.linalg.norm(a):
            raise DegenerateSupportError(f"column {q} is dependent on the current support {support}")
        Q = np.column_stack([Q, v / nv])
        support.append(q)
        r = y - Q @ (Q.conj().T @ y)
    if support:
        coef, *_ = np.linalg.lstsq(D[:, support], y, rcond=None)
    return support, coef


def _refine(D, y, support, radius, max_sweeps=50):
    """Coordinate-wise local search on the support, minimizing the LS residual."""

    def fit(S):
        coef, *_ = np.linalg.lstsq(D[:, S], y, rcond=None)
        return coef, np.linalg.norm(y - D[:, S] @ coef)

    S = list(support)
    coef, best = fit(S)
    N = D.shape[1]
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(S)):
            for d in range(-radius, radius + 1):
                q = S[i] + d
                if d == 0 or not 0 <= q < N or q in S:
                    continue
                trial = S[:i] + [q] + S[i + 1 :]
                c_t, r_t = fit(trial)
                if r_t < best * (1 - 1e-12):
                    S, coef, best, moved = trial, c_t, r_t, True
        if not moved:
            break
    return S, coef


def reconstruct_line(x, grid_size=None, pulse=None, grid_step=None):
    """Radial amplitude line with stems ``|b_l|`` at ``q_l``.

    With ``pulse`` and ``grid_step`` the stems are convolved with the pulse
    envelope (peak-normalized) for display.
    """
    N = x.size if grid_size is None else grid_size
    line = np.zeros(N)
    line[x.support] = np.abs(x.values)
    if pulse is None or grid_step is None or not len(x):
        return line
    half = int(np.ceil(4 * pulse.envelope_sigma / grid_step))
    kernel = pulse_envelope(pulse, np.arange(-half, half + 1) * grid_step) / abs(pulse.amplitude)
    return np.convolve(line, kernel, mode="same")
