"""scikit-learn style wrappers around the beamforming and recovery stages.

The stages chain: channel data ``(B, M, S)`` goes through
:class:`CompressedBeamformer` to Fourier coefficients ``(B, K)``, which
:class:`SparseLineRecovery` turns into radial amplitude lines ``(B, N)``::

    pipe = make_pipeline(CompressedBeamformer(beams=angles), SparseLineRecovery())
    lines = pipe.fit_transform(raw.samples)
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_channel_data, check_coefficients, check_fraction, check_positive_int
from .geometry import AcquisitionWindow, ScanGeometry, sector_angles
from .pulse import FourierIndexSet, PulseSpec, channel_fourier_coefficients
from .recovery import build_measurement_model, omp_recover, reconstruct_line
from .reference import DEFAULT_LINE_SAMPLES, beamform, envelope, focus_all
from .xampling import (
    aggregate_coefficients,
    approx_noise_gain,
    element_operators,
    exact_beam_coefficients,
    exact_noise_gain,
)


def _beam_map(fn, n, n_jobs):
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(b) for b in range(n)]


class _SetupMixin:
    def _resolve_setup(self):
        self.geometry_ = self.geometry if self.geometry is not None else ScanGeometry.uniform()
        self.window_ = self.window if self.window is not None else AcquisitionWindow()
        self.pulse_ = self.pulse if self.pulse is not None else PulseSpec()
        beams = self.beams if self.beams is not None else sector_angles(120)
        self.beams_ = np.atleast_1d(np.asarray(beams, dtype=float))
        if self.beams_.size == 0:
            raise ValueError("beams must not be empty")


class ReferenceBeamformer(_SetupMixin, TransformerMixin, BaseEstimator):
    """Nyquist-rate dynamic focusing followed by envelope detection.

    ``transform`` maps channel data ``(B, M, S)`` to envelope lines sampled
    on the ``n_grid``-point radial grid, shape ``(B, n_grid)``.
    """

    def __init__(self, geometry=None, beams=None, window=None, pulse=None, n_grid=DEFAULT_LINE_SAMPLES, n_jobs=1):
        self.geometry = geometry
        self.beams = beams
        self.window = window
        self.pulse = pulse
        self.n_grid = n_grid
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self._resolve_setup()
        check_positive_int(self.n_grid, "n_grid")
        if X is not None:
            check_channel_data(X, self.geometry_.n_elements, self.window_.n_samples, self.beams_.size)
        return self

    def beamformed_lines(self, X):
        """Time-domain beamformed RF lines, shape ``(B, S)``."""
        check_is_fitted(self, "beams_")
        X = check_channel_data(X, self.geometry_.n_elements, self.window_.n_samples, self.beams_.size)
        g = self.geometry_.gammas

        def one(b):
            return beamform(focus_all(X[b].astype(float), self.beams_[b], g, self.window_))

        return np.stack(_beam_map(one, X.shape[0], self.n_jobs))

    def transform(self, X):
        lines = self.beamformed_lines(X)
        ts = np.arange(self.n_grid) * self.window_.duration / self.n_grid
        t = self.window_.times
        return np.stack([np.interp(ts, t, envelope(line)) for line in lines])


class CompressedBeamformer(_SetupMixin, TransformerMixin, BaseEstimator):
    """Beamformed Fourier coefficients computed directly from channel data.

    Parameters
    ----------
    geometry, beams, window, pulse
        Imaging setup; ``None`` selects the package defaults.
    n_fourier : int
        Number ``K`` of consecutive Fourier indices, centered on the pulse band.
    mode : {"approx", "exact"}
        ``"exact"`` integrates the analog kernels against Nyquist-rate data.
        ``"approx"`` uses only each element's Fourier coefficients on its
        index set ``kappa_m``.
    rho : float
        Energy fraction kept when truncating the kernel Fourier series.
    n_max, oversample : int
        Support and sampling density of the computed kernel spectra.
    precompute : bool
        Build every element operator in :meth:`fit`.  Otherwise operators are
        rebuilt beam by beam during :meth:`transform` and then dropped, which
        bounds memory at full scale.
    n_jobs : int
        Beams processed concurrently.

    Attributes
    ----------
    kappa_ : FourierIndexSet
    operators_ : list of list of ApproxOperator or None
    channel_set_sizes_ : ndarray of shape (B, M) or None
        ``K_m`` per beam and element; filled by ``fit`` (precompute) or by the
        latest ``transform``.
    noise_gain_ : ndarray of shape (B,)
        Expected norm of the output coefficients per unit std of white
        channel noise, from the latest ``transform``.
    """

    def __init__(
        self,
        geometry=None,
        beams=None,
        window=None,
        pulse=None,
        n_fourier=100,
        mode="approx",
        rho=0.95,
        n_max=256,
        oversample=8,
        precompute=True,
        n_jobs=1,
    ):
        self.geometry = geometry
        self.beams = beams
        self.window = window
        self.pulse = pulse
        self.n_fourier = n_fourier
        self.mode = mode
        self.rho = rho
        self.n_max = n_max
        self.oversample = oversample
        self.precompute = precompute
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        """Choose ``kappa`` and, in approx mode, build the element operators."""
        if self.mode not in ("approx", "exact"):
            raise ValueError(f"mode must be 'approx' or 'exact', got {self.mode!r}")
        check_positive_int(self.n_fourier, "n_fourier")
        check_fraction(self.rho, "rho")
        self._resolve_setup()
        self.kappa_ = FourierIndexSet.centered(self.n_fourier, self.pulse_, self.window_.duration)
        self.operators_ = None
        self.channel_set_sizes_ = None
        if self.mode == "approx" and self.precompute:
            self.operators_ = _beam_map(self._beam_operators, self.beams_.size, self.n_jobs)
            self.channel_set_sizes_ = np.array([[op.kappa_m.size for op in ops] for ops in self.operators_])
        if X is not None:
            check_channel_data(X, self.geometry_.n_elements, self.window_.n_samples, self.beams_.size)
        return self

    def _beam_operators(self, b):
        return element_operators(
            self.kappa_,
            self.geometry_.gammas,
            self.beams_[b],
            self.window_.duration,
            self.rho,
            self.n_max,
            self.oversample,
        )

    def element_coefficients(self, X, b, with_noise_gain=False):
        """Per-element coefficients ``(M, K)`` of beam ``b``; also returns the ``K_m`` sizes.

        With ``with_noise_gain`` a third value gives the expected norm of the
        aggregated coefficients per unit channel noise std.
        """
        traces = np.asarray(X[b], dtype=float)
        S = self.window_.n_samples
        if self.mode == "exact":
            g = self.geometry_.gammas
            cm = exact_beam_coefficients(traces, self.kappa_, g, self.beams_[b], self.window_)
            out = (cm, np.full(traces.shape[0], len(self.kappa_)))
            gain = exact_noise_gain(len(self.kappa_), g, self.beams_[b], self.window_) if with_noise_gain else None
        else:
            ops = self.operators_[b] if self.operators_ is not None else self._beam_operators(b)
            spec = np.fft.fft(traces, axis=-1) / S
            cm = np.stack([op.matrix @ spec[m, op.kappa_m % S] for m, op in enumerate(ops)])
            out = (cm, np.array([op.kappa_m.size for op in ops]))
            gain = approx_noise_gain(ops, S) if with_noise_gain else None
        return out + (gain,) if with_noise_gain else out

    def transform(self, X):
        """Beamformed Fourier coefficients ``(B, K)``."""
        check_is_fitted(self, "kappa_")
        X = check_channel_data(X, self.geometry_.n_elements, self.window_.n_samples, self.beams_.size)

        def one(b):
            cm, sizes, gain = self.element_coefficients(X, b, with_noise_gain=True)
            return aggregate_coefficients(cm), sizes, gain

        out = _beam_map(one, X.shape[0], self.n_jobs)
        if self.mode == "approx":
            self.channel_set_sizes_ = np.stack([o[1] for o in out])
        self.noise_gain_ = np.array([o[2] for o in out])
        return np.stack([o[0] for o in out])


class FourierCoefficients(_SetupMixin, TransformerMixin, BaseEstimator):
    """Plain Fourier series coefficients of time-domain lines ``(B, S)`` on ``kappa``.

    Applied to reference beamformed lines this gives the coefficients the
    compressed path is meant to reproduce.
    """

    def __init__(self, window=None, pulse=None, n_fourier=100):
        self.window = window
        self.pulse = pulse
        self.n_fourier = n_fourier

    def fit(self, X=None, y=None):
        self.window_ = self.window if self.window is not None else AcquisitionWindow()
        self.pulse_ = self.pulse if self.pulse is not None else PulseSpec()
        self.kappa_ = FourierIndexSet.centered(self.n_fourier, self.pulse_, self.window_.duration)
        return self

    def transform(self, X):
        check_is_fitted(self, "kappa_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return channel_fourier_coefficients(X, self.window_, self.kappa_.indices)


class SparseLineRecovery(TransformerMixin, BaseEstimator):
    """OMP recovery of on-grid echoes from beamformed Fourier coefficients.

    ``transform`` maps coefficients ``(B, K)`` to radial amplitude lines
    ``(B, n_grid)`` holding ``|b_l|`` at the recovered grid cells (optionally
    smoothed by the pulse envelope for display).

    ``noise_level`` (scalar or one value per beam) is an absolute residual
    norm at which OMP stops early, e.g. a multiple of the expected noise
    norm of the coefficients.  ``refine_radius`` sets the local support
    search that follows the greedy selection (0 disables it).
    """

    def __init__(
        self,
        pulse=None,
        duration=207e-6,
        n_fourier=100,
        n_grid=DEFAULT_LINE_SAMPLES,
        n_nonzero=25,
        residual_tol=1e-6,
        real_amplitudes=False,
        smooth=False,
        noise_level=None,
        refine_radius=2,
        n_jobs=1,
    ):
        self.pulse = pulse
        self.duration = duration
        self.n_fourier = n_fourier
        self.n_grid = n_grid
        self.n_nonzero = n_nonzero
        self.residual_tol = residual_tol
        self.real_amplitudes = real_amplitudes
        self.smooth = smooth
        self.noise_level = noise_level
        self.refine_radius = refine_radius
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self.pulse_ = self.pulse if self.pulse is not None else PulseSpec()
        self.kappa_ = FourierIndexSet.centered(self.n_fourier, self.pulse_, self.duration)
        self.kappa_.check_sparsity(self.n_nonzero)
        self.model_ = build_measurement_model(self.kappa_, self.pulse_, self.duration, self.n_grid)
        if X is not None:
            check_coefficients(X, self.n_fourier)
        return self

    def recover(self, X):
        """One :class:`SparseVector` per beam."""
        check_is_fitted(self, "model_")
        C = check_coefficients(X, self.n_fourier)
        floor = np.zeros(C.shape[0]) if self.noise_level is None else np.broadcast_to(self.noise_level, C.shape[:1])
        return _beam_map(
            lambda b: omp_recover(
                C[b],
                self.model_,
                self.n_nonzero,
                self.residual_tol,
                self.real_amplitudes,
                noise_level=floor[b],
                refine_radius=self.refine_radius,
            ),
            C.shape[0],
            self.n_jobs,
        )

    def transform(self, X):
        vectors = self.recover(X)
        if self.smooth:
            step = self.model_.grid_step
            return np.stack([reconstruct_line(x, self.n_grid, self.pulse_, step) for x in vectors])
        return np.stack([reconstruct_line(x, self.n_grid) for x in vectors])
