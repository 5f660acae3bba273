"""Frequency-domain Wiener estimator used as a baseline.

The filter is estimated from an ensemble of pulse windows,

    W(w) = <V_ideal(w) conj(V_out(w))> / <|V_out(w)|^2>,

so that ``W V_out`` is the least-squares estimate of the noise-free output.
The estimator integrates the filtered output over the same region as the
raw estimator; as a pattern function that is ``w' = ifft(conj(W) Gamma)``
with ``Gamma`` the spectrum of the raw window.

For a balanced (polarimetric) measurement the mean output carries no
differential signal, so the filter is designed for a reference pulse:
the ensemble is the differential part of the noise-free output at a
small reference rotation plus the measured fluctuations of each window
(:func:`reference_spectra`).  A reference at the scale of the angle
noise makes ``W`` a noise-weighted filter; a large one drives ``W``
towards 1 and the estimator back to raw.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .detector import DetectorModel, detector_output
from .noise import PulseTrainSpec, gather
from .waveform import (
    PulseWindow,
    SampledWaveform,
    Spectrum,
    check_same_bins,
    check_same_grid,
    fft,
    ifft,
    inner_product_time,
)

#: bins of <|V_out|^2> below this fraction of the maximum are regularised
DENOMINATOR_FLOOR = 1e-12


def build_ideal(ts: PulseTrainSpec, m: DetectorModel) -> SampledWaveform:
    """Noise-free detector output for the nominal (mean-flux) train."""
    flux = ts.mean_flux().samples
    s2 = math.sin(2 * ts.rotation_angle)
    return detector_output(
        m,
        SampledWaveform(flux * (0.5 * (1 + s2)), ts.dt, 0.0, "flux"),
        SampledWaveform(flux * (0.5 * (1 - s2)), ts.dt, 0.0, "flux"),
    )


def ideal_window(ts: PulseTrainSpec, m: DetectorModel, window: PulseWindow,
                 s: float | None = None) -> SampledWaveform:
    """Steady-state noise-free output over one window.

    ``s = sin(2 phi)`` overrides the train's rotation.  ``window`` is taken
    relative to the start of a period cell (offsets of a full-train window
    are reduced modulo the period).  Three cells are simulated so the
    preceding pulse's ring-down is included.
    """
    p = ts.period_samples
    if len(window) > p:
        raise ValueError("window longer than one period")
    ts3 = ts.with_params(n_pulses=3)
    if s is not None:
        ts3 = ts3.with_params(rotation_angle=0.5 * math.asin(float(s)))
    v = build_ideal(ts3, m)
    start = p + window.start % p
    seg = v.samples[start:start + len(window)]
    return SampledWaveform(seg, ts.dt, 0.0, "volts")


@dataclass(frozen=True)
class WienerFilter:
    """Wiener filter on the window grid.

    ``w_time`` is the (circular, zero-phase-centred) impulse response and
    ``pattern`` the estimator pattern ``w'`` once a raw window is attached.
    """

    W: Spectrum
    w_time: SampledWaveform
    n_pulses: int = 0
    pattern: SampledWaveform | None = None

    def with_raw(self, raw: SampledWaveform) -> "WienerFilter":
        """Attach the raw window: filter first, then integrate over it."""
        if len(raw) != len(self.W):
            raise ValueError("raw pattern and filter live on different grids")
        gam = fft(raw)
        pat = ifft(self.W.replace(np.conj(self.W.bins) * gam.bins))
        return WienerFilter(self.W, self.w_time, self.n_pulses, pat.replace(unit="dimensionless"))

    def to_csv(self) -> str:
        from .pattern import solution_csv

        g = self.pattern if self.pattern is not None else self.w_time
        return solution_csv(g, self.W, {"n_pulses": self.n_pulses})


def wiener_spectra(v: SampledWaveform, ideal: SampledWaveform, windows: list[PulseWindow],
                   max_pulses: int | None = None) -> tuple[Spectrum, Spectrum]:
    """Ensemble-averaged ``<|V_out|^2>`` and ``<V_ideal conj(V_out)>`` over windows."""
    check_same_grid(v, ideal)
    if max_pulses is not None:
        windows = windows[:max_pulses]
    if len(windows) < 1:
        raise ValueError("no windows")
    out = np.fft.fft(gather(v.samples, windows), axis=1) * v.dt
    if len(ideal) == len(windows[0]):
        ref = np.broadcast_to(np.fft.fft(ideal.samples) * v.dt, out.shape)
    else:
        ref = np.fft.fft(gather(ideal.samples, windows), axis=1) * v.dt
    auto = np.mean(np.abs(out) ** 2, axis=0)
    cross = np.mean(ref * np.conj(out), axis=0)
    n = out.shape[1]
    dw = 2 * np.pi / (n * v.dt)
    return (Spectrum(auto, dw, True, 0.0, "dimensionless", n),
            Spectrum(cross, dw, True, 0.0, "dimensionless", n))


def reference_spectra(v: SampledWaveform, ideal: SampledWaveform, windows: list[PulseWindow],
                      max_pulses: int | None = None) -> tuple[Spectrum, Spectrum]:
    """Spectra for the ensemble ``ideal + (window - mean window)``.

    The fluctuations are the measured noise; ``ideal`` is the reference
    pulse the filter should preserve.
    """
    if max_pulses is not None:
        windows = windows[:max_pulses]
    if len(windows) < 2:
        raise ValueError("need at least 2 windows to measure fluctuations")
    segs = gather(v.samples, windows)
    if segs.shape[1] != len(ideal):
        raise ValueError("ideal and windows differ in length")
    fl = segs - segs.mean(axis=0)
    ens = SampledWaveform((ideal.samples[None, :] + fl).ravel(), v.dt, 0.0, v.unit)
    n = len(ideal)
    return wiener_spectra(ens, ideal, [PulseWindow(i * n, (i + 1) * n) for i in range(len(windows))])


def wiener_filter(v_out_psd: Spectrum, cross_psd: Spectrum, *, n_pulses: int = 0) -> WienerFilter:
    """``W = cross / auto`` with a floored denominator.

    Bins where ``<|V_out|^2>`` vanishes are regularised (with a warning)
    rather than divided by zero.
    """
    check_same_bins(v_out_psd, cross_psd)
    if not v_out_psd.two_sided:
        raise ValueError("Wiener filter needs two-sided spectra")
    auto = v_out_psd.bins.real
    if not np.any(auto > 0):
        raise ValueError("output power vanishes at every bin")
    floor = DENOMINATOR_FLOOR * auto.max()
    if np.any(auto <= floor):
        warnings.warn("zero-power bins in the Wiener denominator were regularised", RuntimeWarning,
                      stacklevel=2)
    W = cross_psd.bins / np.maximum(auto, floor)
    # force exact Hermitian symmetry so the filter is real in time
    W = 0.5 * (W + np.conj(W[(-np.arange(W.size)) % W.size]))
    spec = v_out_psd.replace(W, unit="dimensionless")
    return WienerFilter(spec, ifft(spec), int(n_pulses))


def wiener_estimate(v: SampledWaveform, f: WienerFilter, window: PulseWindow,
                    calibration=None) -> float:
    """``integral w'(t) v(t) dt`` over one window, optionally calibrated.

    ``calibration`` is an object with an ``apply`` method mapping the raw
    inner product to photon number (see :class:`pulsefilter.estimators.Calibration`).
    """
    if f.pattern is None:
        raise ValueError("attach a raw window first (WienerFilter.with_raw)")
    seg = v.window(window)
    if len(seg) != len(f.pattern):
        raise ValueError("window length differs from the filter grid")
    x = inner_product_time(f.pattern, seg.replace(t0=f.pattern.t0, unit="dimensionless"))
    return float(calibration.apply(x)) if calibration is not None else x
