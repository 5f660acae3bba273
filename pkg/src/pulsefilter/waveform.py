"""Sampled waveforms, spectra and the transform convention used everywhere.

Every discrete sum that stands for an integral carries its measure, so

    X(w) = integral x(t) exp(-i w t) dt  ~=  dt * DFT(x)

and frequency-domain integrals are taken over ``df = dw / (2 pi)``.  With
this pair the inner product is preserved exactly on a common grid:

    sum_n g[n] x[n] dt == sum_k conj(G[k]) X[k] df
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNITS = ("volts", "flux", "dimensionless")

#: relative tolerance used when comparing sample periods
DT_RTOL = 1e-6


class GridMismatchError(ValueError):
    """Two waveforms or spectra do not live on the same grid."""


def next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SampledWaveform:
    """Uniformly sampled real time series.

    Parameters
    ----------
    samples : array_like
        Real, finite samples.
    dt : float
        Sample period in seconds.
    t0 : float
        Time of the first sample in seconds.
    unit : str
        One of ``volts``, ``flux`` (photons/s) or ``dimensionless``.
    """

    samples: np.ndarray
    dt: float
    t0: float = 0.0
    unit: str = "dimensionless"

    def __post_init__(self):
        x = _frozen(self.samples, np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("samples must be a non-empty 1-d array")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def duration(self) -> float:
        return self.dt * self.samples.size

    def area(self) -> float:
        return float(np.sum(self.samples) * self.dt)

    def energy(self) -> float:
        return float(np.sum(self.samples**2) * self.dt)

    def replace(self, samples=None, *, t0=None, unit=None) -> "SampledWaveform":
        return SampledWaveform(
            self.samples if samples is None else samples,
            self.dt,
            self.t0 if t0 is None else t0,
            self.unit if unit is None else unit,
        )

    def scaled(self, factor: float, unit: str | None = None) -> "SampledWaveform":
        return self.replace(self.samples * factor, unit=unit)

    def padded(self, n: int) -> "SampledWaveform":
        """Zero-pad (at the end) or truncate to exactly ``n`` samples."""
        x = np.zeros(n)
        m = min(n, self.samples.size)
        x[:m] = self.samples[:m]
        return self.replace(x)

    def window(self, win: "PulseWindow") -> "SampledWaveform":
        win.check(len(self))
        return SampledWaveform(
            self.samples[win.start : win.stop],
            self.dt,
            self.t0 + win.start * self.dt,
            self.unit,
        )


@dataclass(frozen=True)
class Spectrum:
    """Complex frequency-domain array in FFT bin order.

    ``bins[k]`` sits at angular frequency ``k * domega`` for the first half
    and at negative frequencies after that (numpy ordering).  One-sided
    spectra (``two_sided=False``) hold only the non-negative bins and are
    used for reporting power spectral densities.
    """

    bins: np.ndarray
    domega: float
    two_sided: bool = True
    t0: float = 0.0
    unit: str = "dimensionless"
    n_time: int = field(default=0)

    def __post_init__(self):
        b = _frozen(self.bins, np.complex128)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("bins must be a non-empty 1-d array")
        if not (self.domega > 0):
            raise ValueError("domega must be positive")
        object.__setattr__(self, "bins", b)
        object.__setattr__(self, "domega", float(self.domega))
        if self.n_time == 0:
            n = b.size if self.two_sided else 2 * (b.size - 1)
            object.__setattr__(self, "n_time", int(n))

    def __len__(self) -> int:
        return self.bins.size

    @property
    def df(self) -> float:
        return self.domega / (2 * np.pi)

    @property
    def dt(self) -> float:
        """Sample period of the time grid this spectrum belongs to."""
        return 2 * np.pi / (self.n_time * self.domega)

    @property
    def omega(self) -> np.ndarray:
        if self.two_sided:
            return 2 * np.pi * np.fft.fftfreq(self.n_time, self.dt)
        return 2 * np.pi * np.fft.rfftfreq(self.n_time, self.dt)

    @property
    def freqs(self) -> np.ndarray:
        return self.omega / (2 * np.pi)

    def hermitian_error(self) -> float:
        """Largest relative violation of ``X(-w) = conj(X(w))``."""
        if not self.two_sided:
            raise ValueError("Hermitian check needs a two-sided spectrum")
        b = self.bins
        mirrored = np.conj(b[(-np.arange(b.size)) % b.size])
        scale = np.max(np.abs(b)) or 1.0
        return float(np.max(np.abs(b - mirrored)) / scale)

    def integral(self) -> complex:
        """Integral over frequency, ``sum(bins) * df``."""
        return complex(np.sum(self.bins) * self.df)

    def same_grid(self, other: "Spectrum") -> bool:
        return (
            self.bins.size == other.bins.size
            and self.two_sided == other.two_sided
            and abs(self.domega - other.domega) <= DT_RTOL * self.domega
        )

    def replace(self, bins, unit: str | None = None) -> "Spectrum":
        return Spectrum(bins, self.domega, self.two_sided, self.t0,
                        self.unit if unit is None else unit, self.n_time)


@dataclass(frozen=True)
class PulseWindow:
    """Half-open sample interval ``[start, stop)`` holding one pulse."""

    start: int
    stop: int

    def __post_init__(self):
        if not (0 <= self.start < self.stop):
            raise ValueError(f"invalid window [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

    def check(self, length: int) -> None:
        if self.stop > length:
            raise ValueError(
                f"window [{self.start}, {self.stop}) exceeds waveform length {length}"
            )


def check_same_grid(a: SampledWaveform, b: SampledWaveform, *, aligned: bool = False) -> None:
    if abs(a.dt - b.dt) > DT_RTOL * a.dt:
        raise GridMismatchError(f"sample periods differ: {a.dt} vs {b.dt}")
    if aligned:
        if a.samples.size != b.samples.size:
            raise GridMismatchError(
                f"lengths differ: {a.samples.size} vs {b.samples.size}"
            )
        if abs(a.t0 - b.t0) > DT_RTOL * a.dt:
            raise GridMismatchError(f"start times differ: {a.t0} vs {b.t0}")


def check_same_bins(a: Spectrum, b: Spectrum) -> None:
    if not a.same_grid(b):
        raise GridMismatchError(
            f"spectra on different bins: {a.bins.size}@{a.domega} vs {b.bins.size}@{b.domega}"
        )


def convolve(a: SampledWaveform, b: SampledWaveform) -> SampledWaveform:
    """Full linear convolution approximating ``integral a(t - s) b(s) ds``.

    Output length is ``len(a) + len(b) - 1`` and starts at ``a.t0 + b.t0``.
    The product is formed in the frequency domain on a power-of-two grid,
    large enough that no circular wrap occurs.
    """
    check_same_grid(a, b)
    n_out = len(a) + len(b) - 1
    nfft = next_pow2(n_out)
    y = np.fft.irfft(np.fft.rfft(a.samples, nfft) * np.fft.rfft(b.samples, nfft), nfft)
    unit = a.unit if b.unit == "dimensionless" else b.unit
    return SampledWaveform(y[:n_out] * a.dt, a.dt, a.t0 + b.t0, unit)


def causal_filter(h: SampledWaveform, x: SampledWaveform) -> SampledWaveform:
    """``convolve(h, x)`` truncated to the grid of ``x``.

    ``h`` is an impulse response starting at lag zero; the result is what a
    linear time-invariant system with that response emits over the span of
    ``x`` (assuming silence before ``x`` starts).
    """
    y = convolve(h, x)
    return SampledWaveform(y.samples[: len(x)], x.dt, x.t0, y.unit)


def fft(w: SampledWaveform, n: int | None = None) -> Spectrum:
    """Two-sided spectrum ``dt * DFT(x)``, optionally zero-padded to ``n``.

    The phase reference is the first sample of ``w`` (stored as ``t0``).
    """
    if len(w) < 2:
        raise ValueError("need at least 2 samples for a spectrum")
    n = len(w) if n is None else int(n)
    bins = np.fft.fft(w.samples, n) * w.dt
    return Spectrum(bins, 2 * np.pi / (n * w.dt), True, w.t0, w.unit, n)


def ifft(s: Spectrum, *, imag_tol: float = 1e-9) -> SampledWaveform:
    """Inverse of :func:`fft`; the imaginary residue must be negligible."""
    if not s.two_sided:
        raise ValueError("ifft needs a two-sided spectrum")
    if len(s) < 2:
        raise ValueError("need at least 2 bins")
    x = np.fft.ifft(s.bins) / s.dt
    scale = np.max(np.abs(x)) or 1.0
    if np.max(np.abs(x.imag)) > imag_tol * scale:
        raise ValueError("spectrum is not Hermitian; inverse is not real")
    return SampledWaveform(x.real, s.dt, s.t0, s.unit)


def inner_product_time(g: SampledWaveform, x: SampledWaveform) -> float:
    """``sum g[i] x[i] dt``, the discrete form of ``integral g(t) x(t) dt``.

    Both waveforms must share sample period, start time and length; padding
    or truncation is the caller's business.
    """
    check_same_grid(g, x, aligned=True)
    return float(np.dot(g.samples, x.samples) * g.dt)


def inner_product_freq(G: Spectrum, X: Spectrum) -> complex:
    """``sum conj(G[k]) X[k] df``; equals the time-domain inner product."""
    check_same_bins(G, X)
    return complex(np.vdot(G.bins, X.bins) * G.df)


def to_two_sided(psd: Spectrum) -> Spectrum:
    """Split a one-sided PSD evenly over positive and negative frequencies."""
    if psd.two_sided:
        return psd
    n = psd.n_time
    one = psd.bins.real
    full = np.empty(n)
    half = one / 2.0
    half[0] = one[0]
    if n % 2 == 0:
        half[-1] = one[-1]
    full[: one.size] = half
    # negative frequencies mirror bins 1..ceil(n/2)-1
    m = n - one.size
    full[one.size :] = half[1 : m + 1][::-1]
    return Spectrum(full, psd.domega, True, psd.t0, psd.unit, n)
