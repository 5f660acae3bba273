import warnings

import numpy as np
import pytest

from pulsefilter.detector import DetectorModel
from pulsefilter.estimators import raw_pattern, segment_pulses
from pulsefilter.noise import PulseTrainSpec
from pulsefilter.waveform import PulseWindow, SampledWaveform, Spectrum
from pulsefilter.wiener import (
    ideal_window,
    reference_spectra,
    wiener_estimate,
    wiener_filter,
    wiener_spectra,
)


def test_filter_approaches_snr_over_one_plus_snr(rng):
    n, k, dt, sigma = 64, 6000, 1e-9, 0.5
    t = np.arange(n)
    ideal = SampledWaveform(np.exp(-0.5 * ((t - 20) / 3.0) ** 2), dt)
    noise = rng.normal(0, sigma, (k, n))
    v = SampledWaveform((ideal.samples + noise).ravel(), dt)
    windows = [PulseWindow(i * n, (i + 1) * n) for i in range(k)]
    auto, cross = wiener_spectra(v, ideal, windows)
    f = wiener_filter(auto, cross)
    sig = np.abs(np.fft.fft(ideal.samples) * dt) ** 2
    snr = sig / (n * sigma**2 * dt**2)
    np.testing.assert_allclose(f.W.bins.real, snr / (1 + snr), atol=0.04)
    assert f.W.hermitian_error() < 1e-12
    assert np.max(np.abs(f.W.bins)) < 1.05


def test_reference_spectra_use_fluctuations_only(rng):
    n, k, dt = 32, 500, 1e-9
    mean = rng.normal(size=n) * 10
    segs = mean + rng.normal(0, 0.1, (k, n))
    v = SampledWaveform(segs.ravel(), dt)
    windows = [PulseWindow(i * n, (i + 1) * n) for i in range(k)]
    ideal = SampledWaveform(np.hanning(n), dt)
    auto, cross = reference_spectra(v, ideal, windows)
    # the large mean pulse is not part of the ensemble
    ref = np.abs(np.fft.fft(ideal.samples) * dt) ** 2
    assert np.all(auto.bins.real < ref + 10 * n * 0.01 * dt**2)
    np.testing.assert_allclose(cross.bins.real, ref, atol=0.2 * ref.max())


def test_zero_power_bins_are_regularised():
    auto = Spectrum(np.array([1.0, 0.0, 0.0, 0.0]), 1.0)
    cross = Spectrum(np.array([0.5, 0.0, 0.0, 0.0]), 1.0)
    with pytest.warns(RuntimeWarning):
        f = wiener_filter(auto, cross)
    assert np.all(np.isfinite(f.W.bins))
    with pytest.raises(ValueError):
        wiener_filter(auto.replace(np.zeros(4)), cross)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        wiener_filter(auto.replace(np.ones(4)), cross)


def test_unit_filter_reduces_to_raw_estimator(rng):
    ts = PulseTrainSpec(n_pulses=4, mean_power=1e-4)
    m = DetectorModel()
    v = SampledWaveform(rng.normal(size=ts.n_samples), ts.dt, unit="volts")
    win = segment_pulses(v, ts, m)
    raw = raw_pattern(ts, m, win[0])
    n = len(win[0])
    one = Spectrum(np.ones(n), 2 * np.pi / (n * ts.dt), True, n_time=n)
    f = wiener_filter(one, one).with_raw(raw)
    np.testing.assert_allclose(f.pattern.samples, raw.samples, atol=1e-12)
    x = wiener_estimate(v, f, win[1])
    assert x == pytest.approx(np.dot(raw.samples, v.window(win[1]).samples) * ts.dt)
    with pytest.raises(ValueError):
        wiener_estimate(v, wiener_filter(one, one), win[1])


def test_ideal_window_is_linear_in_rotation():
    ts = PulseTrainSpec(n_pulses=2, mean_power=2e-4)
    m = DetectorModel()
    w = PulseWindow(0, ts.period_samples)
    a, b, c = (ideal_window(ts, m, w, s).samples for s in (0.0, 0.5, 1.0))
    np.testing.assert_allclose(b - a, 0.5 * (c - a), atol=1e-12 * np.abs(c).max())
    with pytest.raises(ValueError):
        ideal_window(ts, m, PulseWindow(0, ts.period_samples + 1))
