import math

import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from msacnn.errors import ConfigurationError, DataError
from msacnn.sigproc import design_butterworth_lowpass, filter_forward, resample_to


@pytest.fixture(scope="module")
def spec40():
    return design_butterworth_lowpass(4, 40.0, 100.0)


def test_dc_and_cutoff_gain(spec40):
    assert abs(abs(spec40.frequency_response(0.0)) - 1.0) < 1e-9
    assert abs(abs(spec40.frequency_response(40.0)) - 1 / math.sqrt(2)) < 1e-6


def test_response_matches_scipy_design(spec40):
    ref = scipy.signal.butter(4, 40.0, btype="low", fs=100.0, output="sos")
    f = np.linspace(0, 50, 201)
    _, h_ref = scipy.signal.sosfreqz(ref, worN=f, fs=100.0)
    np.testing.assert_allclose(spec40.frequency_response(f), h_ref, atol=1e-6)


def test_response_at_20hz_against_direct_polynomial_evaluation(spec40):
    # evaluate the full transfer function from expanded coefficients, not per-section
    b, a = np.array([1.0]), np.array([1.0])
    for b0, b1, b2, a1, a2 in spec40.sos:
        b, a = np.polymul(b, [b0, b1, b2]), np.polymul(a, [1.0, a1, a2])
    z = np.exp(1j * 2 * np.pi * 20 / 100)
    h = np.polyval(b[::-1], 1 / z) / np.polyval(a[::-1], 1 / z)
    assert abs(abs(spec40.frequency_response(20.0)) - abs(h)) < 1e-6
    # prewarping shifts the digital response away from the analog prototype value
    assert abs(h) == pytest.approx(1 / math.sqrt(1 + 0.5 ** 8), abs=5e-3)


def test_poles_inside_unit_circle(spec40):
    assert spec40.sos.shape == (2, 5)
    assert np.all(np.abs(spec40.poles()) < 1)


@pytest.mark.parametrize("order", [2, 4, 6, 8])
def test_magnitude_monotone(order):
    spec = design_butterworth_lowpass(order, 40.0, 100.0)
    mag = np.abs(spec.frequency_response(np.linspace(0, 50, 2001)))
    assert np.all(np.diff(mag) <= 1e-12)


def test_design_errors():
    with pytest.raises(ConfigurationError):
        design_butterworth_lowpass(4, 50.0, 100.0)
    with pytest.raises(ConfigurationError):
        design_butterworth_lowpass(3, 10.0, 100.0)


def test_filter_matches_scipy_sosfilt(spec40):
    x = np.random.default_rng(0).normal(size=500)
    scipy_sos = np.hstack([spec40.sos[:, :3], np.ones((2, 1)), spec40.sos[:, 3:]])
    np.testing.assert_allclose(filter_forward(spec40, x), scipy.signal.sosfilt(scipy_sos, x), atol=1e-12)


def test_constant_and_zero_signals(spec40):
    y = filter_forward(spec40, np.full(300, 2.5))
    assert len(y) == 300
    assert np.max(np.abs(y[100:] - 2.5)) < 1e-6
    np.testing.assert_array_equal(filter_forward(spec40, np.zeros(50)), 0.0)


def test_45hz_sine_steady_state_amplitude(spec40):
    t = np.arange(2000) / 100.0
    y = filter_forward(spec40, np.sin(2 * np.pi * 45 * t))
    expected = abs(spec40.frequency_response(45.0))
    # least-squares sinusoid fit over the steady-state half
    steady = y[1000:]
    n = np.arange(1000, 2000)
    design = np.column_stack([np.sin(2 * np.pi * 45 * n / 100), np.cos(2 * np.pi * 45 * n / 100)])
    coef, *_ = np.linalg.lstsq(design, steady, rcond=None)
    assert abs(np.hypot(*coef) - expected) / expected < 0.02


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_filter_is_linear(a, b, seed):
    spec = design_butterworth_lowpass(4, 40.0, 100.0)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=200), rng.normal(size=200)
    lhs = filter_forward(spec, a * x + b * y)
    rhs = a * filter_forward(spec, x) + b * filter_forward(spec, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_resample_examples():
    x = np.array([3.0, 1.0, 4.0])
    np.testing.assert_array_equal(resample_to(x, 100, 100), x)
    np.testing.assert_allclose(resample_to([0.0, 1.0], 1, 2), [0, 0.5, 1])
    with pytest.raises(DataError):
        resample_to([], 1, 2)


@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(2, 50), st.sampled_from([2, 4, 5, 10]))
def test_resample_round_trip_on_affine(slope, icpt, n, factor):
    x = icpt + slope * np.arange(n)
    back = resample_to(resample_to(x, 1.0, float(factor)), float(factor), 1.0)
    np.testing.assert_allclose(back, x, atol=1e-9)
