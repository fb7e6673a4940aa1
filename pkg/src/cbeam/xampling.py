"""Compressed beamforming: beamformed Fourier coefficients from channel data.

For a beam ``theta`` and element offset ``gamma`` (seconds), the ``k``-th
Fourier coefficient of the dynamically focused channel equals a projection
of the *raw* channel onto the kernel::

    g(t) = q(t) exp(-2j pi k t / T)
    q(t) = 1[|gamma|, T_m)(t) * J(t) * exp(2j pi k psi(t) / T)
    J(t) = 1 + gamma^2 cos^2(theta) / (t - gamma sin(theta))^2
    psi(t) = gamma (gamma - t sin(theta)) / (t - gamma sin(theta))

Two routes are provided.  The exact route integrates the kernel against
Nyquist-rate samples.  The approximate route expands ``q`` in a Fourier
series, keeps the shortest window of terms holding a fraction ``rho`` of
its energy, and so needs only the channel Fourier coefficients in a small
per-element index set ``kappa_m``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import channel_window_end
from .pulse import FourierIndexSet, _as_indices

__all__ = [
    "FourierIndexSet",
    "KernelSpectrum",
    "ChannelIndexSet",
    "ApproxOperator",
    "kernel_time_function",
    "exact_channel_projection",
    "exact_beam_coefficients",
    "exact_noise_gain",
    "approx_noise_gain",
    "kernel_spectrum",
    "kernel_spectra",
    "select_truncation_window",
    "select_truncation_windows",
    "build_channel_index_set",
    "build_approx_operator",
    "approx_channel_coefficients",
    "aggregate_coefficients",
    "element_operators",
    "save_operator_cache",
    "load_operator_cache",
]

DEFAULT_N_MAX = 256
DEFAULT_OVERSAMPLE = 8
DEFAULT_RHO = 0.95


def _kernel_parts(t, theta, gamma_m, T):
    """Jacobian ``J(t)`` and unwarped time ``t - psi(t)`` on the kernel support.

    Outside ``[|gamma|, T_m)`` (and at the single point where the Jacobian
    is singular) ``J`` is zero.
    """
    t = np.asarray(t, dtype=float)
    s, c = np.sin(theta), np.cos(theta)
    t_end = channel_window_end(theta, gamma_m, T)
    d = t - gamma_m * s
    if gamma_m == 0:
        # plain Fourier kernel, no singular point
        inside = t < t_end
        return inside.astype(float), np.where(inside, t, 0.0)
    inside = (t >= abs(gamma_m)) & (t < t_end) & (d != 0)
    d_safe = np.where(inside, d, 1.0)
    jac = np.where(inside, 1.0 + (gamma_m * c / d_safe) ** 2, 0.0)
    # t - psi(t) == (t^2 - gamma^2) / (t - gamma sin(theta)), the inverse warp
    unwarped = np.where(inside, (t * t - gamma_m * gamma_m) / d_safe, 0.0)
    return jac, unwarped


def kernel_time_function(k, gamma_m, theta, t, T):
    """Evaluate ``g(t) = q(t) exp(-2j pi k t / T)`` for Fourier index ``k``."""
    jac, unwarped = _kernel_parts(t, theta, gamma_m, T)
    return jac * np.exp(-2j * np.pi * k * unwarped / T)


def kernel_q(k, gamma_m, theta, t, T):
    """Evaluate the modulation-free kernel ``q(t)``."""
    t = np.asarray(t, dtype=float)
    return kernel_time_function(k, gamma_m, theta, t, T) * np.exp(2j * np.pi * k * t / T)


def _phase_ladder(weights, unwarped, kappa, T):
    """``sum_t weights * exp(-2j pi k unwarped / T)`` for every ``k`` in ``kappa``.

    Consecutive indices share a common ratio, so the exponentials are built
    by repeated multiplication rather than evaluated per index.
    """
    k = np.asarray(kappa, dtype=np.int64)
    if k.size > 1 and np.all(np.diff(k) == 1):
        cur = weights * np.exp(-2j * np.pi * k[0] * unwarped / T)
        step = np.exp(-2j * np.pi * unwarped / T)
        out = np.empty(k.shape + weights.shape[:-1], dtype=complex)
        for j in range(k.size):
            out[j] = cur.sum(axis=-1)
            cur *= step
        return np.moveaxis(out, 0, -1)
    e = np.exp(-2j * np.pi * np.multiply.outer(unwarped, k) / T)
    return np.einsum("...t,...tk->...k", weights, e)


def exact_channel_projection(waveform, kappa, gamma_m, theta, window):
    """Kernel projections ``c_{j,m}`` of one channel for every ``k_j`` in ``kappa``.

    Rectangle-rule quadrature of ``(1/T) int g(t) phi(t) dt`` over the
    stored samples.
    """
    x = np.asarray(waveform, dtype=float)
    k = _as_indices(kappa)
    S = window.n_samples
    if x.shape[-1] != S:
        raise ValueError(f"waveform length {x.shape[-1]} != floor(T*fs) = {S}")
    jac, unwarped = _kernel_parts(window.times, theta, gamma_m, window.duration)
    return _phase_ladder(jac * x, unwarped, k, window.duration) / S


def exact_noise_gain(n_fourier, gammas, theta, window):
    """Expected ``||c||`` of the aggregated exact projections per unit channel noise std.

    For white noise of std ``sigma`` on every channel the aggregated
    coefficients have ``E||c||^2 = sigma^2 K sum_m sum_n J_m(t_n)^2 / (M S)^2``
    because the kernels have modulus ``J_m`` whatever ``k``.
    """
    S = window.n_samples
    gammas = np.asarray(gammas, dtype=float)
    total = sum(np.sum(_kernel_parts(window.times, theta, g, window.duration)[0] ** 2) for g in gammas)
    return float(np.sqrt(n_fourier * total) / (gammas.size * S))


def approx_noise_gain(operators, n_samples):
    """Expected ``||c||`` of the aggregated approximate coefficients per unit channel noise std."""
    total = sum(np.sum(np.abs(op.matrix) ** 2) for op in operators)
    return float(np.sqrt(total / n_samples) / len(operators))


def exact_beam_coefficients(traces, kappa, gammas, theta, window):
    """Per-element kernel projections for an ``(M, S)`` block; returns ``(M, K)``."""
    return np.stack(
        [exact_channel_projection(tr, kappa, g, theta, window) for tr, g in zip(traces, gammas)]
    )


@dataclass(frozen=True)
class KernelSpectrum:
    """Fourier series coefficients ``Q[n]`` of a kernel for ``n`` in ``[-n_max, n_max]``."""

    k: int
    gamma: float
    theta: float
    coefficients: np.ndarray

    @property
    def n_max(self):
        return (self.coefficients.size - 1) // 2

    @property
    def orders(self):
        return np.arange(-self.n_max, self.n_max + 1)

    def __getitem__(self, n):
        return self.coefficients[np.asarray(n) + self.n_max]

    def energy(self, n1=None, n2=None):
        e = np.abs(self.coefficients) ** 2
        if n1 is None:
            return e.sum()
        return e[n1 + self.n_max : n2 + self.n_max + 1].sum()


def kernel_spectra(kappa, gamma_m, theta, T, n_max=DEFAULT_N_MAX, oversample=DEFAULT_OVERSAMPLE):
    """``Q[n]`` for every ``k_j`` in ``kappa``; returns ``(K, 2 n_max + 1)``.

    ``q`` is sampled at the midpoints of ``oversample * 2 n_max`` cells
    covering ``[0, T)`` and transformed with an FFT.
    """
    if oversample < 4:
        raise ValueError("oversample must be at least 4")
    k = _as_indices(kappa)
    P = oversample * 2 * n_max
    tp = (np.arange(P) + 0.5) * T / P
    jac, unwarped = _kernel_parts(tp, theta, gamma_m, T)
    # q = J exp(2j pi k psi / T), psi = t - unwarped
    psi = np.where(jac > 0, tp - unwarped, 0.0)
    if k.size > 1 and np.all(np.diff(k) == 1):
        q = np.empty((k.size, P), dtype=complex)
        q[0] = jac * np.exp(2j * np.pi * k[0] * psi / T)
        step = np.exp(2j * np.pi * psi / T)
        for j in range(1, k.size):
            q[j] = q[j - 1] * step
    else:
        q = jac * np.exp(2j * np.pi * np.outer(k, psi) / T)
    spec = np.fft.fft(q, axis=1) / P
    orders = np.arange(-n_max, n_max + 1)
    # midpoint sampling shifts the grid by half a cell
    return spec[:, orders % P] * np.exp(-1j * np.pi * orders / P)


def kernel_spectrum(k, gamma_m, theta, T, n_max=DEFAULT_N_MAX, oversample=DEFAULT_OVERSAMPLE):
    coeffs = kernel_spectra([k], gamma_m, theta, T, n_max, oversample)[0]
    return KernelSpectrum(int(k), float(gamma_m), float(theta), coeffs)


def select_truncation_windows(energies, rho):
    """Vectorized window selection over rows of ``energies`` (``(R, 2 n_max + 1)``).

    Returns ``(R, 2)`` integer ``(N1, N2)`` pairs in coefficient order.
    """
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie strictly between 0 and 1, got {rho}")
    E = np.atleast_2d(np.asarray(energies, dtype=float))
    R, n = E.shape
    n_max = (n - 1) // 2
    cs = np.concatenate([np.zeros((R, 1)), np.cumsum(E, axis=1)], axis=1)
    need = rho * cs[:, -1]
    starts = np.arange(n)
    rows = np.arange(R)[:, None]

    def window_sums(w):
        end = starts[None, :] + w[:, None]
        ok = end <= n
        s = cs[rows, np.minimum(end, n)] - cs[:, :n]
        return np.where(ok, s, -np.inf)

    lo = np.ones(R, dtype=np.int64)
    hi = np.full(R, n, dtype=np.int64)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        feasible = window_sums(mid).max(axis=1) >= need
        hi = np.where(feasible, mid, hi)
        lo = np.where(feasible, lo, mid + 1)
    w = lo
    sums = window_sums(w)
    best = sums.max(axis=1, keepdims=True)
    n1 = starts[None, :] - n_max
    n2 = n1 + w[:, None] - 1
    key = np.where(sums == best, np.abs(n1 + n2) * (2 * n) + starts[None, :], np.iinfo(np.int64).max)
    a = key.argmin(axis=1)
    N1 = a - n_max
    return np.column_stack([N1, N1 + w - 1])


def select_truncation_window(spec, rho=DEFAULT_RHO):
    """Shortest contiguous ``[N1, N2]`` holding at least ``rho`` of the spectrum's energy.

    Among windows of that width the most energetic wins, then the most
    centered one.
    """
    coeffs = spec.coefficients if isinstance(spec, KernelSpectrum) else np.asarray(spec)
    n1, n2 = select_truncation_windows(np.abs(coeffs) ** 2, rho)[0]
    return int(n1), int(n2)


@dataclass(frozen=True)
class ChannelIndexSet:
    indices: np.ndarray

    @property
    def size(self):
        return self.indices.size

    def __len__(self):
        return self.indices.size


def build_channel_index_set(kappa, windows):
    """Union over ``j`` of ``{k_j - n : N1_j <= n <= N2_j}``, sorted."""
    k = _as_indices(kappa)
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, 2)
    if windows.shape[0] != k.size:
        raise ValueError("need exactly one window per Fourier index")
    parts = [np.arange(kj - n2, kj - n1 + 1) for kj, (n1, n2) in zip(k, windows)]
    return ChannelIndexSet(np.unique(np.concatenate(parts)))


@dataclass(frozen=True)
class ApproxOperator:
    """Linear map from channel coefficients on ``kappa_m`` to ``c_hat`` on ``kappa``.

    Row ``j`` is stored as its window ``(N1_j, N2_j)`` and the kernel
    coefficients ``Q_j[N1_j..N2_j]``; the dense matrix is built on demand.
    """

    kappa: np.ndarray
    kappa_m: np.ndarray
    windows: np.ndarray
    taps: tuple

    @property
    def shape(self):
        return (self.kappa.size, self.kappa_m.size)

    @property
    def matrix(self):
        A = np.zeros(self.shape, dtype=complex)
        starts = np.searchsorted(self.kappa_m, self.kappa - self.windows[:, 1])
        for j, (c0, row) in enumerate(zip(starts, self.taps)):
            # column c0 holds index k_j - N2, so taps run backwards
            A[j, c0 : c0 + row.size] = row[::-1]
        return A

    @classmethod
    def from_matrix(cls, kappa, kappa_m, matrix):
        """Recover the windowed form from a dense matrix (used when loading caches)."""
        kappa = np.asarray(kappa, dtype=np.int64)
        kappa_m = np.asarray(kappa_m, dtype=np.int64)
        windows, taps = [], []
        for j, kj in enumerate(kappa):
            nz = np.flatnonzero(matrix[j])
            if nz.size == 0:
                windows.append((0, -1))
                taps.append(np.zeros(0, dtype=complex))
                continue
            lo, hi = nz[0], nz[-1]
            windows.append((int(kj - kappa_m[hi]), int(kj - kappa_m[lo])))
            taps.append(matrix[j, lo : hi + 1][::-1].copy())
        return cls(kappa, kappa_m, np.array(windows, dtype=np.int64), tuple(taps))


def build_approx_operator(kappa, kappa_m, spectra, windows):
    """Assemble the operator from per-index spectra ``(K, 2 n_max + 1)`` and windows."""
    k = _as_indices(kappa)
    km = kappa_m.indices if isinstance(kappa_m, ChannelIndexSet) else np.asarray(kappa_m, dtype=np.int64)
    spectra = np.atleast_2d(spectra)
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, 2)
    n_max = (spectra.shape[1] - 1) // 2
    if spectra.shape[0] != k.size or windows.shape[0] != k.size:
        raise ValueError("spectra and windows must have one row per Fourier index")
    taps = []
    for j, (kj, (n1, n2)) in enumerate(zip(k, windows)):
        lo, hi = kj - n2, kj - n1
        a = np.searchsorted(km, lo)
        b = np.searchsorted(km, hi, side="right")
        if b - a != hi - lo + 1 or km[a] != lo:
            raise ValueError(f"kappa_m is missing channel indices needed by row {j} ({lo}..{hi})")
        taps.append(spectra[j, n1 + n_max : n2 + n_max + 1].copy())
    return ApproxOperator(k, km, windows, tuple(taps))


def approx_channel_coefficients(op, phi_m):
    """``c_hat_m = A_m phi_m``."""
    phi_m = np.asarray(phi_m)
    if phi_m.shape[-1] != op.shape[1]:
        raise ValueError(f"coefficient vector has length {phi_m.shape[-1]}, operator expects {op.shape[1]}")
    return op.matrix @ phi_m


def aggregate_coefficients(per_channel):
    """Mean over elements of the per-element coefficient vectors."""
    arr = np.asarray(per_channel)
    if arr.size == 0 or arr.shape[0] == 0:
        raise ValueError("need at least one per-element coefficient vector")
    return arr.mean(axis=0)


def element_operators(kappa, gammas, theta, T, rho=DEFAULT_RHO, n_max=DEFAULT_N_MAX, oversample=DEFAULT_OVERSAMPLE):
    """Build the approximate operator of every element for one beam."""
    k = _as_indices(kappa)
    ops = []
    for g in gammas:
        spectra = kernel_spectra(k, g, theta, T, n_max, oversample)
        win = select_truncation_windows(np.abs(spectra) ** 2, rho)
        km = build_channel_index_set(k, win)
        ops.append(build_approx_operator(k, km, spectra, win))
    return ops


# --- operator cache --------------------------------------------------------
#
# Little-endian layout:
#   b"SNBFOPC1"
#   u32 geometry_hash, f64 rho, u32 n_max, u32 oversample, u32 K, i32[K] kappa
#   u32 B, u32 M
#   B*M records in (beam, element) order:
#       u32 K_m, i32[K_m] kappa_m, f64[K * K_m * 2] matrix (row-major, re/im pairs)
#   u32 crc32 of everything after the magic

CACHE_MAGIC = b"SNBFOPC2"
_CACHE_HEADER = struct.Struct("<IdIII")


class StaleCacheError(ValueError):
    """The cache was built for a different setup."""


def save_operator_cache(path, operators, geometry_hash, rho, n_max=DEFAULT_N_MAX, oversample=DEFAULT_OVERSAMPLE):
    """Write ``operators[beam][element]`` to ``path`` in windowed (banded) form.

    Layout (little endian): magic, header ``(hash u32, rho f64, n_max u32,
    oversample u32, K u32)``, ``kappa`` as i32, ``(B, M)`` as u32, then per
    operator ``K_m`` u32, ``kappa_m`` i32, windows ``(K, 2)`` i32 and the
    concatenated taps as complex128; a CRC-32 of everything after the magic
    closes the file.
    """
    B = len(operators)
    M = len(operators[0]) if B else 0
    kappa = operators[0][0].kappa if B and M else np.zeros(0, np.int64)
    crc = 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)

        def put(b):
            nonlocal crc
            crc = zlib.crc32(b, crc)
            fh.write(b)

        put(_CACHE_HEADER.pack(geometry_hash, rho, n_max, oversample, kappa.size))
        put(kappa.astype("<i4").tobytes())
        put(struct.pack("<II", B, M))
        for beam_ops in operators:
            if len(beam_ops) != M:
                raise ValueError("every beam needs the same number of element operators")
            for op in beam_ops:
                put(struct.pack("<I", op.kappa_m.size))
                put(op.kappa_m.astype("<i4").tobytes())
                put(np.asarray(op.windows).astype("<i4").tobytes())
                put(np.concatenate(op.taps).astype("<c16").tobytes() if op.taps else b"")
        fh.write(struct.pack("<I", crc & 0xFFFFFFFF))


def load_operator_cache(path, geometry_hash=None, kappa=None, rho=None, n_max=None, oversample=None):
    """Read an operator cache; raise :class:`StaleCacheError` if it does not match.

    Corrupt files raise ``ValueError``.  Returns ``(operators, meta)``.
    """
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic, not an operator cache")
    if len(blob) < 8 + _CACHE_HEADER.size + 4:
        raise ValueError(f"{path}: operator cache truncated")
    body = blob[8:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", blob[-4:])[0]:
        raise ValueError(f"{path}: operator cache checksum mismatch")
    ghash, c_rho, c_nmax, c_over, K = _CACHE_HEADER.unpack_from(body, 0)
    off = _CACHE_HEADER.size
    try:
        c_kappa = np.frombuffer(body, "<i4", K, off).astype(np.int64)
        off += 4 * K
        stale = []
        if geometry_hash is not None and geometry_hash != ghash:
            stale.append("geometry hash")
        if kappa is not None and not np.array_equal(_as_indices(kappa), c_kappa):
            stale.append("kappa")
        if rho is not None and rho != c_rho:
            stale.append("rho")
        if n_max is not None and n_max != c_nmax:
            stale.append("n_max")
        if oversample is not None and oversample != c_over:
            stale.append("oversample")
        if stale:
            raise StaleCacheError(f"{path}: cache does not match current setup ({', '.join(stale)})")
        B, M = struct.unpack_from("<II", body, off)
        off += 8
        operators = []
        for _ in range(B):
            row = []
            for _ in range(M):
                (Km,) = struct.unpack_from("<I", body, off)
                off += 4
                km = np.frombuffer(body, "<i4", Km, off).astype(np.int64)
                off += 4 * Km
                win = np.frombuffer(body, "<i4", 2 * K, off).astype(np.int64).reshape(K, 2)
                off += 8 * K
                widths = win[:, 1] - win[:, 0] + 1
                flat = np.frombuffer(body, "<c16", int(widths.sum()), off)
                off += 16 * flat.size
                taps = tuple(np.split(flat.copy(), np.cumsum(widths)[:-1]))
                row.append(ApproxOperator(c_kappa, km, win, taps))
            operators.append(row)
    except struct.error:
        raise ValueError(f"{path}: operator cache truncated") from None
    except ValueError as exc:
        if isinstance(exc, StaleCacheError):
            raise
        raise ValueError(f"{path}: malformed operator cache ({exc})") from None
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes in operator cache")
    meta = {"geometry_hash": ghash, "rho": c_rho, "n_max": c_nmax, "oversample": c_over, "kappa": c_kappa}
    return operators, meta
