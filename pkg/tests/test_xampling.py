import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbeam.geometry import AcquisitionWindow, warp_time
from cbeam.pulse import FourierIndexSet, FRIChannelParams, channel_fourier_coefficients, pulse_value, synthesize_channel
from cbeam.reference import dynamic_focus_channel
from cbeam.xampling import (
    ApproxOperator,
    StaleCacheError,
    aggregate_coefficients,
    approx_channel_coefficients,
    approx_noise_gain,
    build_approx_operator,
    build_channel_index_set,
    element_operators,
    exact_beam_coefficients,
    exact_channel_projection,
    exact_noise_gain,
    kernel_q,
    kernel_spectra,
    kernel_spectrum,
    kernel_time_function,
    load_operator_cache,
    save_operator_cache,
    select_truncation_window,
    select_truncation_windows,
)

T = 40e-6
KAPPA = np.arange(126, 146)  # 3.15..3.65 MHz at T = 40 us


def _brute_window(energy, rho):
    """Exhaustive search: shortest window, then most energy, then most centered."""
    n = energy.size
    n_max = (n - 1) // 2
    need = rho * energy.sum()
    for w in range(1, n + 1):
        cands = [(energy[a : a + w].sum(), a) for a in range(n - w + 1)]
        ok = [c for c in cands if c[0] >= need]
        if ok:
            best = max(c[0] for c in ok)
            top = [a for s, a in ok if s == best]
            a = min(top, key=lambda a: (abs(2 * (a - n_max) + w - 1), a))
            return a - n_max, a - n_max + w - 1
    raise AssertionError


def _dense_projection(times, amps, pulse, k, gamma_m, theta, T, fs):
    """Projection computed on the beamformed time axis: integrate the warped channel
    against a plain Fourier exponential (no kernel involved)."""
    t = (np.arange(int(round(T * fs))) + 0.5) / fs
    u = warp_time(t, theta, gamma_m)
    phi = sum(a * pulse_value(pulse, u - tl) for tl, a in zip(times, amps)) * (u < T)
    return np.exp(-2j * np.pi * np.multiply.outer(k, t) / T) @ phi / t.size


# --- kernel ----------------------------------------------------------------


def test_kernel_reduces_to_fourier_exponential_at_zero_offset():
    t = np.linspace(0, T, 1001, endpoint=False)
    g = kernel_time_function(7, 0.0, 0.3, t, T)
    np.testing.assert_allclose(g, np.exp(-2j * np.pi * 7 * t / T), atol=1e-12)


def test_kernel_support_is_the_channel_window():
    gm = 0.4e-6
    t = np.array([0.0, 0.2e-6, 0.399e-6, 0.401e-6, 10e-6, 30e-6])
    g = kernel_time_function(3, gm, 0.2, t, T)
    assert np.all(g[:3] == 0)
    assert np.all(g[3:] != 0)
    # beyond the window end nothing survives
    assert kernel_time_function(3, -gm, 0.2, np.array([T]), T)[0] == 0


@pytest.mark.parametrize("k", [0, 5, -40, 130])
def test_kernel_modulus_is_the_jacobian_for_every_index(k):
    gm, th = 0.5e-6, -0.4
    t = np.linspace(0.6e-6, 39e-6, 300)
    s, c = np.sin(th), np.cos(th)
    jac = 1 + (gm * c / (t - gm * s)) ** 2
    np.testing.assert_allclose(np.abs(kernel_time_function(k, gm, th, t, T)), jac, rtol=1e-13)


def test_q_and_g_differ_by_the_modulation():
    t = np.linspace(1e-6, 30e-6, 50)
    g = kernel_time_function(11, 0.3e-6, 0.1, t, T)
    q = kernel_q(11, 0.3e-6, 0.1, t, T)
    np.testing.assert_allclose(q * np.exp(-2j * np.pi * 11 * t / T), g, rtol=1e-12)


# --- exact projection --------------------------------------------------------


def test_exact_projection_at_zero_offset_is_the_channel_fourier_series(small_window, pulse, rng):
    params = FRIChannelParams(np.sort(rng.uniform(5e-6, 35e-6, 4)), rng.normal(size=4))
    x = synthesize_channel(params, pulse, small_window)
    c = exact_channel_projection(x, KAPPA, 0.0, 0.25, small_window)
    np.testing.assert_allclose(c, channel_fourier_coefficients(x, small_window, KAPPA), atol=1e-14)


def test_exact_projection_is_linear_and_zero_on_zero(small_window, rng):
    x, y = rng.normal(size=(2, small_window.n_samples))
    f = lambda v: exact_channel_projection(v, KAPPA, 0.3e-6, 0.2, small_window)  # noqa: E731
    assert np.all(f(np.zeros_like(x)) == 0)
    np.testing.assert_allclose(f(2 * x - 3 * y), 2 * f(x) - 3 * f(y), atol=1e-13)


@pytest.mark.parametrize("gm,theta", [(0.45e-6, 0.35), (-0.6e-6, -0.5), (0.2e-6, 0.0)])
def test_exact_projection_matches_beamformed_axis_integral(pulse, gm, theta):
    # both sides evaluated on 200 MHz grids: one integrates the raw channel
    # against the kernel, the other the warped channel against exp(-2j pi k t/T)
    fs = 200e6
    win = AcquisitionWindow(T, fs)
    times, amps = np.array([8e-6, 17.3e-6, 29.9e-6]), np.array([1.0, -0.6, 0.8])
    x = synthesize_channel(FRIChannelParams(times, amps), pulse, win)
    got = exact_channel_projection(x, KAPPA, gm, theta, win)
    # the sampled channel starts at t = 0 while the dense oracle uses midpoints;
    # both are converged rectangle rules of a smooth compactly supported integrand
    want = _dense_projection(times, amps, pulse, KAPPA, gm, theta, T, fs)
    assert np.max(np.abs(got - want)) <= 1e-6 * np.max(np.abs(want))


def test_exact_projection_matches_focused_channel_coefficients(small_window, pulse):
    # Fourier coefficients of the dynamically focused (interpolated) channel agree
    # with the kernel projection up to interpolation error
    gm, th = 0.5e-6, 0.3
    params = FRIChannelParams(np.array([12e-6, 26e-6]), np.array([1.0, 0.7]))
    x = synthesize_channel(params, pulse, small_window)
    focused = dynamic_focus_channel(x, th, gm, small_window)
    want = channel_fourier_coefficients(focused, small_window, KAPPA)
    got = exact_channel_projection(x, KAPPA, gm, th, small_window)
    assert np.linalg.norm(got - want) <= 0.02 * np.linalg.norm(want)


def test_exact_projection_rejects_wrong_length(small_window):
    with pytest.raises(ValueError, match="waveform length"):
        exact_channel_projection(np.zeros(small_window.n_samples - 1), KAPPA, 0.0, 0.0, small_window)


def test_exact_beam_coefficients_stack_per_element(small_window, rng):
    traces = rng.normal(size=(3, small_window.n_samples))
    gms = [-0.2e-6, 0.0, 0.3e-6]
    out = exact_beam_coefficients(traces, KAPPA, gms, 0.1, small_window)
    assert out.shape == (3, KAPPA.size)
    np.testing.assert_allclose(out[2], exact_channel_projection(traces[2], KAPPA, gms[2], 0.1, small_window))


def test_exact_noise_gain_matches_monte_carlo(small_window, small_geometry):
    rng = np.random.default_rng(3)
    gms, th = small_geometry.gammas, 0.2
    gain = exact_noise_gain(KAPPA.size, gms, th, small_window)
    norms = [
        np.linalg.norm(
            aggregate_coefficients(exact_beam_coefficients(rng.normal(size=(gms.size, small_window.n_samples)), KAPPA, gms, th, small_window))
        )
        ** 2
        for _ in range(200)
    ]
    assert np.sqrt(np.mean(norms)) == pytest.approx(gain, rel=0.05)


# --- spectra and windows -----------------------------------------------------


def test_spectrum_at_zero_offset_is_a_delta():
    spec = kernel_spectrum(130, 0.0, 0.4, T, n_max=32)
    assert spec[0] == pytest.approx(1.0, abs=1e-12)
    others = np.delete(spec.coefficients, spec.n_max)
    assert np.max(np.abs(others)) < 1e-9
    assert select_truncation_window(spec, 0.95) == (0, 0)


@pytest.mark.parametrize("gm,theta", [(0.2e-6, 0.0), (-0.3e-6, 0.3), (0.5e-6, -0.5)])
def test_spectrum_parseval(gm, theta):
    # sum |Q[n]|^2 against (1/T) int |q|^2 = (1/T) int J^2, integrated on a fine grid
    spec = kernel_spectrum(135, gm, theta, T, n_max=512, oversample=8)
    t = (np.arange(400_000) + 0.5) * T / 400_000
    rhs = np.mean(np.abs(kernel_q(135, gm, theta, t, T)) ** 2)
    assert spec.energy() / rhs >= 0.999
    assert spec.energy() / rhs <= 1.0 + 1e-6


def test_spectrum_reconstructs_kernel_in_the_interior():
    k, gm, th = 132, 0.3e-6, 0.25
    spec = kernel_spectrum(k, gm, th, T, n_max=512)
    t = np.linspace(5e-6, 35e-6, 200)
    series = np.exp(2j * np.pi * np.outer(t, spec.orders) / T) @ spec.coefficients
    q = kernel_q(k, gm, th, t, T)
    assert np.max(np.abs(series - q)) < 2e-2


def test_spectrum_conjugate_mirror_when_index_negated():
    a = kernel_spectrum(120, 0.4e-6, 0.3, T, n_max=64).coefficients
    b = kernel_spectrum(-120, 0.4e-6, 0.3, T, n_max=64).coefficients
    np.testing.assert_allclose(b, np.conj(a[::-1]), atol=1e-12)


def test_batched_spectra_match_single():
    batch = kernel_spectra(KAPPA, -0.25e-6, 0.15, T, n_max=48)
    for j in (0, 7, KAPPA.size - 1):
        np.testing.assert_allclose(batch[j], kernel_spectrum(KAPPA[j], -0.25e-6, 0.15, T, n_max=48).coefficients, atol=1e-13)


def test_spectra_reject_coarse_oversampling():
    with pytest.raises(ValueError, match="oversample"):
        kernel_spectra(KAPPA, 0.1e-6, 0.0, T, oversample=2)


@pytest.mark.parametrize(
    "energy,rho,want",
    [
        ([0, 0, 1, 0, 0], 0.95, (0, 0)),
        ([1, 1, 1, 1, 1, 1, 1], 0.999, (-3, 3)),
        ([0, 1, 2, 0, 0], 0.7, (-1, 0)),
        ([1, 0, 0, 0, 1], 0.5, (-2, -2)),
    ],
)
def test_window_examples(energy, rho, want):
    assert select_truncation_window(np.sqrt(np.array(energy, dtype=float)), rho) == want


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=3, max_size=11).filter(lambda v: len(v) % 2 == 1 and sum(v) > 0),
    st.sampled_from([0.3, 0.5, 0.75, 0.9, 0.95, 0.99]),
)
def test_window_selection_matches_exhaustive_search(energy, rho):
    e = np.array(energy, dtype=float)
    assert tuple(select_truncation_windows(e[None], rho)[0]) == _brute_window(e, rho)


def test_window_selection_rejects_bad_rho():
    for rho in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="rho"):
            select_truncation_windows(np.ones((1, 3)), rho)


def test_windows_widen_with_rho():
    spectra = kernel_spectra(KAPPA, 0.6e-6, 0.4, T, n_max=128)
    widths = []
    for rho in (0.9, 0.95, 0.99, 0.999):
        w = select_truncation_windows(np.abs(spectra) ** 2, rho)
        widths.append(w[:, 1] - w[:, 0])
    for a, b in itertools.pairwise(widths):
        assert np.all(b >= a)


# --- index sets and operators -------------------------------------------------


def test_index_set_is_union_of_windows():
    ks = build_channel_index_set([10, 12, 30], [(0, 0), (-1, 2), (-3, -3)])
    np.testing.assert_array_equal(ks.indices, [10, 11, 12, 13, 33])
    assert len(ks) == ks.size == 5
    with pytest.raises(ValueError, match="one window"):
        build_channel_index_set([1, 2], [(0, 0)])


def test_zero_offset_operator_is_a_selection(small_window, rng):
    ops = element_operators(KAPPA, [0.0], 0.2, T, rho=0.95, n_max=32)
    op = ops[0]
    np.testing.assert_array_equal(op.kappa_m, KAPPA)
    np.testing.assert_allclose(op.matrix, np.eye(KAPPA.size), atol=1e-9)


def test_operator_rows_follow_windows_and_direct_sum(rng):
    gm, th, n_max = 0.5e-6, 0.35, 96
    spectra = kernel_spectra(KAPPA, gm, th, T, n_max=n_max)
    win = select_truncation_windows(np.abs(spectra) ** 2, 0.95)
    ks = build_channel_index_set(KAPPA, win)
    op = build_approx_operator(KAPPA, ks, spectra, win)
    assert op.shape == (KAPPA.size, ks.size)
    A = op.matrix
    np.testing.assert_array_equal(np.count_nonzero(A, axis=1), win[:, 1] - win[:, 0] + 1)
    phi = rng.normal(size=ks.size) + 1j * rng.normal(size=ks.size)
    lookup = dict(zip(ks.indices.tolist(), phi))
    direct = [
        sum(spectra[j, n + n_max] * lookup[kj - n] for n in range(win[j, 0], win[j, 1] + 1))
        for j, kj in enumerate(KAPPA)
    ]
    np.testing.assert_allclose(approx_channel_coefficients(op, phi), direct, rtol=1e-12, atol=1e-15)
    # dense round trip recovers the banded form
    back = ApproxOperator.from_matrix(op.kappa, op.kappa_m, A)
    np.testing.assert_array_equal(back.windows, op.windows)
    np.testing.assert_allclose(back.matrix, A)


def test_index_set_is_minimal():
    gm, th = 0.5e-6, -0.3
    op = element_operators(KAPPA, [gm], th, T, rho=0.95, n_max=96)[0]
    spectra = kernel_spectra(KAPPA, gm, th, T, n_max=96)
    for drop in op.kappa_m[[0, op.kappa_m.size // 2, -1]]:
        with pytest.raises(ValueError, match="missing"):
            build_approx_operator(KAPPA, op.kappa_m[op.kappa_m != drop], spectra, op.windows)


def test_operator_dimension_errors():
    op = element_operators(KAPPA, [0.2e-6], 0.1, T, n_max=32)[0]
    with pytest.raises(ValueError, match="operator expects"):
        approx_channel_coefficients(op, np.zeros(op.shape[1] + 1))
    with pytest.raises(ValueError, match="one row per"):
        build_approx_operator(KAPPA, op.kappa_m, np.zeros((3, 65)), op.windows)


def test_approx_projection_tracks_exact_and_improves_with_rho(small_window, pulse):
    gm, th = 0.55e-6, 0.4
    params = FRIChannelParams(np.array([9e-6, 21e-6, 33e-6]), np.array([1.0, -0.5, 0.8]))
    x = synthesize_channel(params, pulse, small_window)
    exact = exact_channel_projection(x, KAPPA, gm, th, small_window)
    errs = []
    for rho in (0.9, 0.95, 0.99, 0.999):
        op = element_operators(KAPPA, [gm], th, T, rho=rho, n_max=128)[0]
        phi = channel_fourier_coefficients(x, small_window, op.kappa_m)
        errs.append(np.linalg.norm(approx_channel_coefficients(op, phi) - exact) / np.linalg.norm(exact))
    assert errs[-1] < 0.01
    assert all(b <= a * (1 + 1e-9) for a, b in itertools.pairwise(errs))


def test_approx_noise_gain_matches_monte_carlo(small_window, small_geometry):
    rng = np.random.default_rng(5)
    ops = element_operators(KAPPA, small_geometry.gammas, 0.3, T, n_max=64)
    gain = approx_noise_gain(ops, small_window.n_samples)
    norms = []
    for _ in range(300):
        noise = rng.normal(size=(len(ops), small_window.n_samples))
        per = [approx_channel_coefficients(op, channel_fourier_coefficients(n, small_window, op.kappa_m)) for op, n in zip(ops, noise)]
        norms.append(np.linalg.norm(aggregate_coefficients(per)) ** 2)
    assert np.sqrt(np.mean(norms)) == pytest.approx(gain, rel=0.05)


# --- aggregation -------------------------------------------------------------


def test_aggregate_examples(rng):
    v = rng.normal(size=5) + 1j * rng.normal(size=5)
    np.testing.assert_allclose(aggregate_coefficients([v, v, v]), v)
    np.testing.assert_allclose(aggregate_coefficients([v, -v]), 0)
    with pytest.raises(ValueError):
        aggregate_coefficients(np.zeros((0, 5)))


def test_aggregation_reduces_independent_noise_by_sqrt_m():
    rng = np.random.default_rng(11)
    M, K, trials = 16, 20, 2000
    per = rng.normal(size=(trials, M, K)) + 1j * rng.normal(size=(trials, M, K))
    single = np.std(per[:, 0].real)
    agg = np.std(np.mean(per, axis=1).real)
    assert single / agg == pytest.approx(np.sqrt(M), rel=0.05)


# --- operator cache ----------------------------------------------------------


@pytest.fixture(scope="module")
def cached_ops():
    return [element_operators(KAPPA, [-0.3e-6, 0.0, 0.4e-6], th, T, rho=0.95, n_max=48) for th in (-0.2, 0.3)]


def test_cache_round_trip(tmp_path, cached_ops):
    path = tmp_path / "ops.snbc"
    save_operator_cache(path, cached_ops, 1234, 0.95, 48, 8)
    ops, meta = load_operator_cache(path, 1234, KAPPA, 0.95, 48, 8)
    assert meta["geometry_hash"] == 1234 and meta["rho"] == 0.95
    assert len(ops) == 2 and len(ops[0]) == 3
    for a_row, b_row in zip(cached_ops, ops):
        for a, b in zip(a_row, b_row):
            np.testing.assert_array_equal(a.kappa_m, b.kappa_m)
            np.testing.assert_array_equal(a.matrix, b.matrix)


@pytest.mark.parametrize(
    "kwargs,what",
    [
        ({"geometry_hash": 99}, "geometry hash"),
        ({"kappa": KAPPA + 1}, "kappa"),
        ({"rho": 0.99}, "rho"),
        ({"n_max": 64}, "n_max"),
        ({"oversample": 16}, "oversample"),
    ],
)
def test_cache_stale(tmp_path, cached_ops, kwargs, what):
    path = tmp_path / "ops.snbc"
    save_operator_cache(path, cached_ops, 1234, 0.95, 48, 8)
    with pytest.raises(StaleCacheError, match=what):
        load_operator_cache(path, **kwargs)


def test_cache_corruption(tmp_path, cached_ops):
    path = tmp_path / "ops.snbc"
    save_operator_cache(path, cached_ops, 1, 0.95, 48, 8)
    blob = path.read_bytes()

    bad = tmp_path / "bad.snbc"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError, match="magic"):
        load_operator_cache(bad)

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(ValueError, match="checksum"):
        load_operator_cache(bad)

    bad.write_bytes(blob[:20])
    with pytest.raises(ValueError):
        load_operator_cache(bad)

    # a short body with a valid checksum is reported as truncated, not crashed on
    import zlib

    body = blob[8:-4][:-100]
    bad.write_bytes(blob[:8] + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(ValueError, match="truncated|malformed"):
        load_operator_cache(bad)


def test_fourier_index_set_is_accepted(cached_ops, tmp_path):
    ops = element_operators(FourierIndexSet(KAPPA), [0.1e-6], 0.0, T, n_max=32)
    np.testing.assert_array_equal(ops[0].kappa, KAPPA)
