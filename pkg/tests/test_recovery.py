import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbeam.pulse import BandViolationError, BeamformedFRIParams, FourierIndexSet, PulseSpec, beamformed_coefficient_model
from cbeam.recovery import (
    DegenerateSupportError,
    SparseVector,
    build_measurement_model,
    omp_recover,
    reconstruct_line,
)

T = 40e-6
P = PulseSpec()


def _model(K, N):
    return build_measurement_model(FourierIndexSet.centered(K, P, T), P, T, grid_size=N)


def _separated(rng, N, L, gap):
    while True:
        q = np.sort(rng.choice(N, L, replace=False))
        if np.diff(np.r_[q, q[0] + N]).min() >= gap:
            return q


def test_model_matches_closed_form_coefficients(rng):
    m = _model(30, 200)
    q = np.array([3, 50, 120, 199])
    b = rng.normal(size=4)
    want = beamformed_coefficient_model(BeamformedFRIParams(q, b, m.grid_step, 200), P, m.kappa, T)
    x = np.zeros(200)
    x[q] = b
    np.testing.assert_allclose(m.apply(x), want, rtol=1e-12, atol=1e-20)
    with pytest.raises(ValueError, match="model expects"):
        m.apply(np.zeros(199))


def test_model_rejects_out_of_band_indices():
    with pytest.raises(BandViolationError):
        build_measurement_model(np.arange(1, 21), P, T, grid_size=64)


def test_single_spike_recovered_exactly():
    m = _model(20, 64)
    c = 0.7 * m.composite[:, 17]
    x = omp_recover(c, m, n_nonzero=3)
    np.testing.assert_array_equal(x.support, [17])
    assert x.values[0] == pytest.approx(0.7, abs=1e-10)


def test_zero_measurements_give_empty_support():
    m = _model(20, 64)
    x = omp_recover(np.zeros(20, complex), m, n_nonzero=5)
    assert len(x) == 0
    assert np.all(x.dense() == 0)


def test_matches_exhaustive_l0_search(rng):
    # with a small grid every two-atom support can be tried by least squares
    K, N, L = 12, 32, 2
    m = _model(K, N)
    D = np.vstack([m.composite.real, m.composite.imag])
    for _ in range(5):
        q = _separated(rng, N, L, 6)
        b = rng.choice([-1.0, 1.0], L) * rng.uniform(0.5, 1.5, L)
        c = m.composite[:, q] @ b
        y = np.concatenate([c.real, c.imag])
        best = min(
            itertools.combinations(range(N), L),
            key=lambda s: np.linalg.norm(y - D[:, s] @ np.linalg.lstsq(D[:, s], y, rcond=None)[0]),
        )
        x = omp_recover(c, m, n_nonzero=L, real_amplitudes=True)
        np.testing.assert_array_equal(x.support, best)
        np.testing.assert_allclose(x.values.real, b, atol=1e-8)


def test_five_sparse_recovery(rng):
    m = _model(40, 64)
    for _ in range(20):
        q = _separated(rng, 64, 5, 8)
        b = rng.choice([-1.0, 1.0], 5) * rng.uniform(0.5, 1.5, 5)
        x = omp_recover(m.composite[:, q] @ b, m, n_nonzero=5)
        np.testing.assert_array_equal(x.support, q)
        np.testing.assert_allclose(x.values, b, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
def test_scale_equivariance(seed, alpha):
    rng = np.random.default_rng(seed)
    m = _model(20, 64)
    q = _separated(rng, 64, 3, 8)
    c = m.composite[:, q] @ rng.choice([-1.0, 1.0], 3)
    x = omp_recover(c, m, n_nonzero=3)
    y = omp_recover(alpha * c, m, n_nonzero=3)
    np.testing.assert_array_equal(x.support, y.support)
    np.testing.assert_allclose(y.values, alpha * x.values, rtol=1e-8)


def test_complex_amplitudes_mode(rng):
    m = _model(20, 64)
    q = np.array([5, 30])
    b = np.array([1 + 0.5j, -0.3 + 1j])
    x = omp_recover(m.composite[:, q] @ b, m, n_nonzero=2, real_amplitudes=False)
    np.testing.assert_array_equal(x.support, q)
    np.testing.assert_allclose(x.values, b, atol=1e-8)


def test_degenerate_support_raises():
    a = np.array([1.0, 2.0, 0.0, 1.0])
    D = np.column_stack([a, a])
    y = a + np.array([0.0, 0.0, 1.0, 0.0])
    with pytest.raises(DegenerateSupportError):
        omp_recover(y, D, n_nonzero=2, real_amplitudes=False)


def test_argument_checks():
    m = _model(20, 64)
    with pytest.raises(ValueError, match="K/2"):
        omp_recover(np.zeros(20), m, n_nonzero=11)
    with pytest.raises(ValueError, match="measurements"):
        omp_recover(np.zeros(19), m)
    with pytest.raises(ValueError, match="non-negative"):
        omp_recover(np.ones(20), m, n_nonzero=3, noise_level=-1.0)
    with pytest.raises(ValueError, match="refine_radius"):
        omp_recover(np.ones(20), m, n_nonzero=3, refine_radius=-1)


def _ls_residual(m, x, c):
    A = m.composite[:, x.support]
    return np.linalg.norm(c - A @ np.linalg.lstsq(A, c, rcond=None)[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_refinement_never_increases_residual(seed):
    rng = np.random.default_rng(seed)
    m = _model(20, 64)
    q = np.sort(rng.choice(64, 4, replace=False))
    c = m.composite[:, q] @ (rng.normal(size=4) + 1j * rng.normal(size=4))
    plain = omp_recover(c, m, n_nonzero=4)
    polished = omp_recover(c, m, n_nonzero=4, refine_radius=2)
    assert len(polished) == len(plain)
    assert _ls_residual(m, polished, c) <= _ls_residual(m, plain, c) * (1 + 1e-12)
    # refined values are the least-squares fit on the refined support
    A = m.composite[:, polished.support]
    np.testing.assert_allclose(polished.values, np.linalg.lstsq(A, c, rcond=None)[0], atol=1e-10)


def test_refinement_repairs_shifted_greedy_picks():
    # close echoes whose sidelobes push plain OMP off by a cell
    p = PulseSpec.from_bandwidth()
    Tf, N = 207e-6, 1662
    m = build_measurement_model(FourierIndexSet.centered(100, p, Tf), p, Tf, grid_size=N)
    rng = np.random.default_rng(11)
    repaired = 0
    for _ in range(40):
        while True:
            q = np.sort(rng.choice(N, 5, replace=False))
            if np.diff(q).min() >= 40:
                break
        b = rng.choice([-1.0, 1.0], 5) * rng.uniform(0.5, 1.5, 5)
        c = m.composite[:, q] @ b
        polished = omp_recover(c, m, n_nonzero=5, refine_radius=2)
        np.testing.assert_array_equal(polished.support, q)
        repaired += not np.array_equal(omp_recover(c, m, n_nonzero=5).support, q)
    assert repaired > 0


def test_noise_level_stops_early(rng):
    m = _model(20, 64)
    c = m.composite[:, [4, 40]] @ np.array([1.0, 0.1])
    assert len(omp_recover(c, m, n_nonzero=5, noise_level=2 * np.linalg.norm(c))) == 0
    # a level between the two residuals keeps only the strong echo
    r1 = np.linalg.norm(0.1 * m.composite[:, 40])
    x = omp_recover(c, m, n_nonzero=5, noise_level=1.5 * r1)
    np.testing.assert_array_equal(x.support, [4])


def test_sparse_vector_validation():
    with pytest.raises(ValueError, match="equal length"):
        SparseVector([1, 2], [1.0], 5)
    with pytest.raises(ValueError, match="distinct"):
        SparseVector([1, 1], [1.0, 2.0], 5)
    with pytest.raises(ValueError, match="inside"):
        SparseVector([5], [1.0], 5)
    np.testing.assert_array_equal(SparseVector([0, 3], [2.0, -1.0], 4).dense(), [2, 0, 0, -1])


def test_reconstruct_line_stems_and_envelope():
    x = SparseVector([10, 40], [2.0, -0.5], 64)
    line = reconstruct_line(x)
    np.testing.assert_array_equal(np.flatnonzero(line), [10, 40])
    assert line[10] == 2.0 and line[40] == 0.5
    step = T / 64
    smooth = reconstruct_line(x, 64, P, step)
    assert smooth[10] == pytest.approx(2.0)
    assert smooth.argmax() == 10
    assert np.all(reconstruct_line(SparseVector([], [], 64), 64, P, step) == 0)


def _full_scale_success_rate(trials, real_amplitudes, refine_radius, seed=2024):
    p = PulseSpec.from_bandwidth()
    Tf, N = 207e-6, 1662
    m = build_measurement_model(FourierIndexSet.centered(100, p, Tf), p, Tf, grid_size=N)
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(trials):
        while True:
            q = np.sort(rng.choice(N, 5, replace=False))
            if np.diff(q).min() >= 8:
                break
        b = rng.choice([-1.0, 1.0], 5) * rng.uniform(0.5, 1.5, 5)
        x = omp_recover(
            m.composite[:, q] @ b, m, n_nonzero=5, real_amplitudes=real_amplitudes, refine_radius=refine_radius
        )
        ok += np.array_equal(x.support, q)
    return ok / trials


# measured over 1000 trials: plain 0.535 / 0.911, refined 0.929 / 0.914
FLOORS = {(False, 0): 0.45, (True, 0): 0.85, (False, 2): 0.9, (True, 2): 0.88}


@pytest.fixture(scope="module", params=list(FLOORS), ids=["complex", "real", "complex-refined", "real-refined"])
def full_scale_rate(request):
    return request.param, _full_scale_success_rate(1000, *request.param)


@pytest.mark.xfail(
    strict=True,
    reason="100 consecutive indices over 207 us resolve about 16 grid cells; 8-cell separation is below that",
)
def test_full_scale_exact_recovery_reaches_99_percent(full_scale_rate):
    assert full_scale_rate[1] >= 0.99


def test_full_scale_exact_recovery_regression(full_scale_rate):
    key, rate = full_scale_rate
    assert rate >= FLOORS[key]
