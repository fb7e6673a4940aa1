"""Input checks shared by the estimators."""

import numpy as np

from .phantom import RawChannelData


def check_channel_data(X, n_elements=None, n_samples=None, n_beams=None):
    """Return channel data as a float ``(B, M, S)`` array.

    Accepts :class:`RawChannelData` or any array-like; a single ``(M, S)``
    beam is promoted to ``(1, M, S)``.
    """
    if isinstance(X, RawChannelData):
        X = X.samples
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"channel data must be (beams, elements, samples), got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.number) or np.iscomplexobj(X):
        raise ValueError("channel data must be real-valued")
    if not np.all(np.isfinite(X)):
        raise ValueError("channel data contains NaN or infinity")
    for axis, want, name in ((0, n_beams, "beams"), (1, n_elements, "elements"), (2, n_samples, "samples")):
        if want is not None and X.shape[axis] != want:
            raise ValueError(f"channel data has {X.shape[axis]} {name}, expected {want}")
    return X


def check_coefficients(C, n_fourier=None):
    """Return beamformed Fourier coefficients as a complex ``(B, K)`` array."""
    C = np.asarray(C)
    if C.ndim == 1:
        C = C[None]
    if C.ndim != 2:
        raise ValueError(f"coefficients must be (beams, K), got shape {C.shape}")
    C = C.astype(complex)
    if not np.all(np.isfinite(C)):
        raise ValueError("coefficients contain NaN or infinity")
    if n_fourier is not None and C.shape[1] != n_fourier:
        raise ValueError(f"coefficients have {C.shape[1]} columns, expected K = {n_fourier}")
    return C


def check_fraction(value, name):
    if not 0 < value < 1:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
    return float(value)


def check_positive_int(value, name):
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)
