import math

import numpy as np
import pytest
from scipy import integrate

from pulsefilter.detector import (
    DetectorModel,
    bandwidth_tau,
    detector_output,
    detector_output_sum_diff,
    fit_response,
    impulse_response,
    reference_shape,
    response_samples,
    sum_diff_responses,
)
from pulsefilter.waveform import SampledWaveform, causal_filter


def h_analytic(t, ta, tb):
    if t < 0:
        return 0.0
    if ta == tb:
        return t * math.exp(-t / ta) / ta**2
    return (math.exp(-t / ta) - math.exp(-t / tb)) / (ta - tb)


@pytest.mark.parametrize("ta,tb,delay", [(30e-9, 6e-9, 0.0), (30e-9, 1e-9, 0.7e-9),
                                         (5e-9, 5e-9, 0.0), (5e-9, 5e-9, 1.3e-9)])
def test_bin_average_matches_quadrature(ta, tb, delay):
    dt, n = 2e-9, 60
    got = response_samples(ta, tb, delay, dt, n)
    ref = [integrate.quad(h_analytic, k * dt - delay, (k + 1) * dt - delay, args=(ta, tb),
                          epsabs=0, epsrel=1e-12)[0] / dt for k in range(n)]
    np.testing.assert_allclose(got, ref, rtol=1e-8, atol=1e-10 * max(ref))


def test_unit_area_and_degenerate_continuity():
    m = DetectorModel()
    h = impulse_response(m, "H", 1e-10)
    assert h.area() == pytest.approx(1.0, abs=1e-12)
    # the response moves by O(eps * t / tau) as the poles separate, with no
    # jump where the evaluation switches branch
    a = response_samples(5e-9, 5e-9, 0.0, 1e-9, 100)
    for eps in (1e-12, 1e-9, 1e-8, 1e-5, 1e-3, 2e-3, 1e-2):
        b = response_samples(5e-9, 5e-9 * (1 + eps), 0.0, 1e-9, 100)
        np.testing.assert_allclose(b, a, rtol=25 * eps + 1e-11, atol=1e-11 * a.max())


def test_bandwidth_tau():
    assert bandwidth_tau(5e6) == pytest.approx(1 / (2 * math.pi * 5e6))


def test_sum_and_diff_paths_agree(rng):
    m = DetectorModel(balance=0.97, delay_v=0.4e-9)
    n, dt = 400, 2e-9
    ph = SampledWaveform(rng.poisson(50, n) / dt, dt, unit="flux")
    pv = SampledWaveform(rng.poisson(40, n) / dt, dt, unit="flux")
    a = detector_output(m, ph, pv)
    b = detector_output_sum_diff(m, ph, pv)
    np.testing.assert_allclose(b.samples, a.samples, rtol=0, atol=1e-12 * np.abs(a.samples).max())


def test_balanced_wiring_cancels_common_mode():
    m = DetectorModel(balance=1.0, tau_v=6e-9, delay_v=0.0)
    hs, hd = sum_diff_responses(m, 1e-9)
    assert np.max(np.abs(hs.samples)) < 1e-15
    assert hd.area() == pytest.approx(2.0, rel=1e-9)


def test_output_is_causal_and_linear(rng):
    m = DetectorModel()
    dt, n = 2e-9, 300
    x = np.zeros(n)
    x[100:150] = 1e12
    z = SampledWaveform(np.zeros(n), dt, unit="flux")
    v = detector_output(m, SampledWaveform(x, dt, unit="flux"), z)
    assert np.max(np.abs(v.samples[:100])) < 1e-12 * np.max(v.samples)
    v2 = detector_output(m, SampledWaveform(2 * x, dt, unit="flux"), z)
    np.testing.assert_allclose(v2.samples, 2 * v.samples)


def test_model_validation():
    for kw in ({"tau_tia": 0.0}, {"balance": -1.0}, {"polarity_v": 0}, {"delay_v": -1e-9}):
        with pytest.raises(ValueError):
            DetectorModel(**kw)
    with pytest.raises(ValueError):
        detector_output(DetectorModel(), SampledWaveform([-1.0, 0.0], 1e-9, unit="flux"),
                        SampledWaveform([0.0, 0.0], 1e-9, unit="flux"))


def test_fit_response_round_trip():
    dt, n = 1e-9, 800
    true = DetectorModel(tau_tia=30e-9, tau_h=6e-9, delay_h=3e-9)
    fast = reference_shape(200e-9, 10e-9, dt, n, 100e-9)
    slow = causal_filter(impulse_response(true, "H", dt, n), fast).scaled(3.0)
    init = DetectorModel(tau_tia=20e-9, tau_h=10e-9, delay_h=1e-9)
    fit = fit_response(fast, slow, init, "H")
    assert fit.model.tau_tia == pytest.approx(30e-9, rel=1e-5)
    assert fit.model.tau_h == pytest.approx(6e-9, rel=1e-4)
    assert fit.model.delay_h == pytest.approx(3e-9, abs=1e-13)
    assert fit.scale == pytest.approx(3.0, rel=1e-6)
    assert fit.residual_rms < 1e-8


def test_fit_rejects_zero_shape():
    dt, n = 1e-9, 100
    fast = reference_shape(20e-9, 2e-9, dt, n, 10e-9)
    with pytest.raises(ValueError):
        fit_response(fast, fast.scaled(0.0), DetectorModel(), "H")
