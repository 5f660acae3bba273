import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pulsefilter.waveform import (
    GridMismatchError,
    PulseWindow,
    SampledWaveform,
    Spectrum,
    causal_filter,
    convolve,
    fft,
    ifft,
    inner_product_freq,
    inner_product_time,
    next_pow2,
    to_two_sided,
)


def direct_convolution(a, b, dt):
    """O(N^2) reference."""
    out = np.zeros(a.size + b.size - 1)
    for i, x in enumerate(a):
        out[i:i + b.size] += x * b
    return out * dt


def test_convolve_matches_direct_sum(rng):
    for n, m in [(1, 1), (7, 3), (64, 65), (200, 17)]:
        a, b = rng.normal(size=n), rng.normal(size=m)
        y = convolve(SampledWaveform(a, 1e-9), SampledWaveform(b, 1e-9))
        ref = direct_convolution(a, b, 1e-9)
        assert len(y) == n + m - 1
        np.testing.assert_allclose(y.samples, ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_convolve_start_time_and_units():
    a = SampledWaveform([1.0, 2.0], 0.5, t0=1.0, unit="dimensionless")
    b = SampledWaveform([3.0], 0.5, t0=2.0, unit="flux")
    y = convolve(a, b)
    assert y.t0 == 3.0 and y.unit == "flux"


def test_causal_filter_truncates_to_input_grid(rng):
    h = SampledWaveform(rng.random(10), 1.0)
    x = SampledWaveform(rng.random(50), 1.0, t0=4.0)
    y = causal_filter(h, x)
    assert len(y) == 50 and y.t0 == 4.0
    np.testing.assert_allclose(y.samples, direct_convolution(h.samples, x.samples, 1.0)[:50])


def test_grid_mismatch_is_rejected():
    with pytest.raises(GridMismatchError):
        convolve(SampledWaveform([1.0, 2.0], 1.0), SampledWaveform([1.0, 2.0], 2.0))
    with pytest.raises(GridMismatchError):
        inner_product_time(SampledWaveform([1.0, 2.0], 1.0), SampledWaveform([1.0, 2.0], 1.0, t0=1.0))


def test_waveform_validation():
    with pytest.raises(ValueError):
        SampledWaveform([1.0, np.nan], 1.0)
    with pytest.raises(ValueError):
        SampledWaveform([1.0], 0.0)
    with pytest.raises(ValueError):
        SampledWaveform([1.0], 1.0, unit="amps")
    w = SampledWaveform([1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        w.samples[0] = 5.0


def test_fft_scaling_and_round_trip(rng):
    x = SampledWaveform(rng.normal(size=100), 2e-9)
    X = fft(x)
    assert X.bins[0] == pytest.approx(x.area())
    assert X.hermitian_error() < 1e-12
    np.testing.assert_allclose(ifft(X).samples, x.samples, atol=1e-12)
    assert len(fft(x, 128)) == 128


def test_ifft_refuses_non_hermitian():
    with pytest.raises(ValueError):
        ifft(Spectrum(np.array([0, 1j, 0, 0]), 1.0))


def test_to_two_sided_preserves_integral(rng):
    for n in (16, 17):
        one = Spectrum(rng.random(n // 2 + 1), 1.0, False, n_time=n)
        two = to_two_sided(one)
        assert len(two) == n
        assert two.integral().real == pytest.approx(one.integral().real)
        assert two.hermitian_error() < 1e-15


def test_next_pow2():
    assert [next_pow2(n) for n in (1, 2, 3, 1024, 1025)] == [1, 2, 4, 1024, 2048]


def test_pulse_window_bounds():
    with pytest.raises(ValueError):
        PulseWindow(5, 5)
    w = SampledWaveform(np.arange(10.0), 1.0)
    with pytest.raises(ValueError):
        w.window(PulseWindow(8, 12))
    seg = w.window(PulseWindow(2, 5))
    assert seg.t0 == 2.0 and list(seg.samples) == [2.0, 3.0, 4.0]


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(st.integers(2, 300), st.integers(0, 2**32 - 1), st.floats(1e-12, 1e-3))
def test_parseval_inner_product(n, seed, dt):
    r = np.random.default_rng(seed)
    g = SampledWaveform(r.normal(size=n), dt)
    x = SampledWaveform(r.normal(size=n) * r.uniform(0.1, 10), dt)
    t = inner_product_time(g, x)
    f = inner_product_freq(fft(g), fft(x))
    scale = np.linalg.norm(g.samples) * np.linalg.norm(x.samples) * dt
    assert abs(f.imag) <= 1e-9 * scale
    assert abs(f.real - t) <= 1e-9 * scale


@given(st.lists(finite, min_size=2, max_size=200))
def test_parseval_energy(vals):
    x = SampledWaveform(vals, 1e-9)
    X = fft(x)
    e = float(np.sum(np.abs(X.bins) ** 2) * X.df)
    assert e == pytest.approx(x.energy(), rel=1e-9, abs=1e-300)
