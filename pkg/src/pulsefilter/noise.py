"""Synthetic pulse trains with shot, technical and electronic noise, and
the spectral estimates used to characterise them.

Random streams: ``NoiseSpec.seed`` feeds a :class:`numpy.random.SeedSequence`
that is spawned into four children, in this order: technical envelope,
PD_H photon counts, PD_V photon counts, electronic noise.  Sweeps derive
one seed per (dataset, power) cell with :func:`cell_seed`, so cells can be
generated in any order or in parallel and still reproduce bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import signal as sps
from scipy.ndimage import uniform_filter1d

from .detector import DetectorModel, detector_output, reference_shape
from .waveform import PulseWindow, SampledWaveform, Spectrum, check_same_bins

PLANCK = 6.62607015e-34
LIGHT_SPEED = 299792458.0

#: mean photons per sample above which counts are drawn from a Gaussian
GAUSSIAN_THRESHOLD = 1e4

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class NoiseSpec:
    """Noise sources of a simulated acquisition.

    ``electronic_psd`` is the one-sided level (V^2/Hz) of the white detector
    noise.  The technical noise is a Gaussian-band intensity modulation
    ``1 + n_T(t)`` common to both arms, with rms ``tech_relative_depth``.
    ``response_fluctuation`` is reserved for detector-response noise and
    must stay 0.
    """

    electronic_psd: float = 0.0
    tech_center_freq: float = 5e6
    tech_fwhm: float = 1e6
    tech_relative_depth: float = 0.0
    shot_noise: bool = True
    response_fluctuation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.electronic_psd < 0:
            raise ValueError("electronic_psd must be >= 0")
        if not (self.tech_center_freq > 0 and self.tech_fwhm > 0):
            raise ValueError("technical-noise centre and FWHM must be positive")
        if not (0 <= self.tech_relative_depth < 1):
            raise ValueError("tech_relative_depth must lie in [0, 1)")
        if self.response_fluctuation != 0:
            raise NotImplementedError("response fluctuations are not simulated")

    def with_params(self, **kw) -> "NoiseSpec":
        return NoiseSpec(**{**asdict(self), **kw})


@dataclass(frozen=True)
class PulseTrainSpec:
    """Timing and power of the optical pulse train.

    The rotation angle ``phi`` splits the pulse as
    ``phi_H = phi_S (1 + sin 2phi) / 2`` and ``phi_V = phi_S (1 - sin 2phi) / 2``
    so the mean differential photon number is ``N sin 2phi``.
    """

    n_pulses: int = 800
    pulse_width: float = 1.25e-6 / 3
    duty_cycle: float = 1.0 / 3
    mean_power: float = 400e-6
    rotation_angle: float = 0.0
    dt: float = 2e-9
    wavelength: float = 795e-9
    rise_time: float = 20e-9
    efficiency: float = 1.0

    def __post_init__(self):
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        if not (0 < self.duty_cycle <= 1):
            raise ValueError("duty_cycle must lie in (0, 1]")
        if self.mean_power < 0:
            raise ValueError("mean_power must be >= 0")
        if not (self.dt > 0 and self.pulse_width > 0):
            raise ValueError("dt and pulse_width must be positive")
        if not (0 < self.efficiency <= 1):
            raise ValueError("efficiency must lie in (0, 1]")

    def with_params(self, **kw) -> "PulseTrainSpec":
        return PulseTrainSpec(**{**asdict(self), **kw})

    @property
    def period(self) -> float:
        return self.pulse_width / self.duty_cycle

    @property
    def period_samples(self) -> int:
        return int(round(self.period / self.dt))

    @property
    def width_samples(self) -> int:
        return int(round(self.pulse_width / self.dt))

    @property
    def lead_samples(self) -> int:
        """Offset of each pulse's leading edge inside its period cell."""
        return (self.period_samples - self.width_samples) // 2

    @property
    def n_samples(self) -> int:
        return self.n_pulses * self.period_samples

    @property
    def photon_energy(self) -> float:
        return PLANCK * LIGHT_SPEED / self.wavelength

    @property
    def photons_per_pulse(self) -> float:
        """Mean total photon number ``N`` detected per pulse."""
        return self.mean_power * self.period * self.efficiency / self.photon_energy

    @property
    def mean_difference(self) -> float:
        return self.photons_per_pulse * math.sin(2 * self.rotation_angle)

    def onsets(self) -> np.ndarray:
        return np.arange(self.n_pulses) * self.period_samples + self.lead_samples

    def cell_shape(self) -> np.ndarray:
        """Mean summed flux (photons/s) over one period cell."""
        p = self.period_samples
        shape = reference_shape(self.pulse_width, self.rise_time, self.dt, p,
                                self.lead_samples * self.dt)
        return shape.samples * self.photons_per_pulse

    def mean_flux(self, n_cells: int | None = None) -> SampledWaveform:
        n_cells = self.n_pulses if n_cells is None else n_cells
        return SampledWaveform(np.tile(self.cell_shape(), n_cells), self.dt, 0.0, "flux")

    def check_grid(self) -> None:
        if self.width_samples < 20:
            raise ValueError(
                f"pulse width spans {self.width_samples} samples; need >= 20 to resolve edges"
            )
        if self.rise_time * 2 > self.pulse_width:
            raise ValueError("rise_time too long for the pulse width")


class Train(NamedTuple):
    v_out: SampledWaveform
    truth: np.ndarray  # realised S per pulse (photons)


def cell_seed(seed: int, *key) -> int:
    """Deterministic 63-bit seed for one sweep cell."""
    text = json.dumps([int(seed), *[str(k) for k in key]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def tech_band(freqs: np.ndarray, center: float, fwhm: float) -> np.ndarray:
    """Unnormalised two-sided Gaussian band shape of the technical noise."""
    sig = fwhm * FWHM_TO_SIGMA
    f = np.abs(freqs)
    return np.exp(-0.5 * ((f - center) / sig) ** 2)


def technical_envelope(n: int, dt: float, ns: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian modulation with rms ``tech_relative_depth``.

    White noise is shaped in the frequency domain so the expected PSD is
    the Gaussian band exactly (periodic over the record).
    """
    z = rng.standard_normal(n)
    if ns.tech_relative_depth == 0:
        return np.zeros(n)
    f = np.fft.rfftfreq(n, dt)
    band = tech_band(f, ns.tech_center_freq, ns.tech_fwhm)
    # expected variance of irfft(A * rfft(z)) is the mean of |A|^2 over all n bins
    full = np.concatenate([band, band[1 : n - band.size + 1][::-1]])
    amp = np.sqrt(band / full.mean()) * ns.tech_relative_depth
    return np.fft.irfft(amp * np.fft.rfft(z), n)


def tech_autocovariance(n: int, dt: float, ns: NoiseSpec) -> np.ndarray:
    """Circular autocovariance of :func:`technical_envelope` at lags 0..n-1."""
    f = np.fft.fftfreq(n, dt)
    band = tech_band(f, ns.tech_center_freq, ns.tech_fwhm)
    return np.real(np.fft.ifft(band / band.mean())) * ns.tech_relative_depth**2


def _counts(mean: np.ndarray, rng: np.random.Generator, shot: bool) -> np.ndarray:
    z = rng.standard_normal(mean.size)
    if not shot:
        return mean.copy()
    out = mean + np.sqrt(mean) * z
    low = mean < GAUSSIAN_THRESHOLD
    if np.any(low):
        out[low] = rng.poisson(mean[low])
    return out


def generate_train(ts: PulseTrainSpec, ns: NoiseSpec, m: DetectorModel) -> Train:
    """Simulate the detector output for a full pulse train.

    Photon counts per sample are Poissonian around the (technically
    modulated) mean flux of each arm, so per-pulse photon numbers are
    Poissonian too.  Returns the output trace and the realised
    differential photon number of every pulse.
    """
    ts.check_grid()
    if ts.mean_power < 0:
        raise ValueError("power must be non-negative")
    n = ts.n_samples
    dt = ts.dt
    ss = np.random.SeedSequence(int(ns.seed))
    r_tech, r_h, r_v, r_el = (np.random.default_rng(s) for s in ss.spawn(4))

    flux_s = ts.mean_flux().samples * (1.0 + technical_envelope(n, dt, ns, r_tech))
    np.maximum(flux_s, 0.0, out=flux_s)
    s2 = math.sin(2 * ts.rotation_angle)
    n_h = _counts(flux_s * (0.5 * (1 + s2)) * dt, r_h, ns.shot_noise)
    n_v = _counts(flux_s * (0.5 * (1 - s2)) * dt, r_v, ns.shot_noise)

    p = ts.period_samples
    truth = (n_h - n_v).reshape(ts.n_pulses, p).sum(axis=1)

    sigma = math.sqrt(ns.electronic_psd / (2 * dt))
    v_n = sigma * r_el.standard_normal(n)
    v = detector_output(
        m,
        SampledWaveform(n_h / dt, dt, 0.0, "flux"),
        SampledWaveform(n_v / dt, dt, 0.0, "flux"),
        SampledWaveform(v_n, dt, 0.0, "volts"),
    )
    return Train(v, truth)


def psd(v: SampledWaveform, segment_length: int, overlap: float = 0.5,
        window: str = "hann") -> Spectrum:
    """One-sided averaged-periodogram PSD (Welch), window-corrected.

    Bins sit at ``k / (segment_length * dt)``; the integral over the
    returned bins equals the variance of ``v``.
    """
    segment_length = int(segment_length)
    if segment_length < 2 or segment_length > len(v):
        raise ValueError(f"segment_length must lie in [2, {len(v)}], got {segment_length}")
    if not (0 <= overlap <= 0.9):
        raise ValueError("overlap must lie in [0, 0.9]")
    noverlap = int(round(overlap * segment_length))
    _, p = sps.welch(v.samples, fs=1.0 / v.dt, window=window, nperseg=segment_length,
                     noverlap=noverlap, detrend="constant", return_onesided=True,
                     scaling="density")
    return Spectrum(p.astype(complex), 2 * np.pi / (segment_length * v.dt), False,
                    0.0, v.unit, segment_length)


def windowed_psd(v: SampledWaveform, windows: list[PulseWindow], *,
                 subtract_mean: bool = True) -> Spectrum:
    """One-sided PSD averaged over pulse windows (rectangular taper).

    With ``subtract_mean`` the pulse-synchronous average is removed first,
    leaving only the fluctuations: exactly the noise a pattern function
    defined on these windows sees.
    """
    segs = gather(v.samples, windows)
    if subtract_mean:
        segs = segs - segs.mean(axis=0)
    n = segs.shape[1]
    if n < 2:
        raise ValueError("windows too short for a spectrum")
    spec = np.abs(np.fft.rfft(segs, axis=1)) ** 2
    p = spec.mean(axis=0) * v.dt / n
    p[1:] *= 2
    if n % 2 == 0:
        p[-1] /= 2
    return Spectrum(p.astype(complex), 2 * np.pi / (n * v.dt), False, 0.0, v.unit, n)


def gather(x: np.ndarray, windows: list[PulseWindow]) -> np.ndarray:
    """Stack equal-length windows of ``x`` into a (pulses, samples) array."""
    if not windows:
        raise ValueError("no windows")
    n = len(windows[0])
    if any(len(w) != n for w in windows):
        raise ValueError("windows must share one length")
    for w in windows:
        w.check(x.size)
    starts = np.array([w.start for w in windows])
    return x[starts[:, None] + np.arange(n)]


@dataclass(frozen=True)
class NoiseParams:
    """Noise spectra (one-sided, V^2/Hz) extracted from measured PSDs."""

    technical: Spectrum
    electronic: Spectrum
    shot: Spectrum
    smooth_bins: int = 5
    extras: dict = field(default_factory=dict)

    def denominator(self) -> Spectrum:
        """``<|V_T|^2> + <|V_N|^2>``: the noise the pattern function fights."""
        return self.technical.replace(self.technical.bins.real + self.electronic.bins.real)


def smooth(x: np.ndarray, bins: int) -> np.ndarray:
    if bins <= 1:
        return np.asarray(x, dtype=float)
    return uniform_filter1d(np.asarray(x, dtype=float), size=int(bins), mode="nearest")


def extract_noise_params(psd_signal: Spectrum, psd_no_tech: Spectrum, psd_electronic: Spectrum,
                         smooth_bins: int = 5) -> NoiseParams:
    """Split measured PSDs into electronic, shot and technical parts.

    The electronic floor is the dark PSD, the shot level the excess of the
    no-technical-noise PSD over it, and the technical part the excess of
    the noisy PSD over the no-technical-noise one.  Differences are floored
    at zero after smoothing with a ``smooth_bins`` moving average.
    """
    check_same_bins(psd_signal, psd_no_tech)
    check_same_bins(psd_signal, psd_electronic)
    sig = smooth(psd_signal.bins.real, smooth_bins)
    clean = smooth(psd_no_tech.bins.real, smooth_bins)
    elec = smooth(psd_electronic.bins.real, smooth_bins)
    tech = np.maximum(sig - clean, 0.0)
    shot = np.maximum(clean - elec, 0.0)
    return NoiseParams(psd_signal.replace(tech), psd_signal.replace(np.maximum(elec, 0.0)),
                       psd_signal.replace(shot), int(smooth_bins))


# trace files ---------------------------------------------------------------

TRACE_FORMAT = "pulsefilter-trace/1"


class TraceFormatError(ValueError):
    pass


def spec_hash(*objs) -> str:
    payload = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                         sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_trace(path, v: SampledWaveform, *, seed: int | None = None, spec_hash: str = "") -> None:
    """Write a trace as CSV: ``#`` header lines, then one sample per line."""
    buf = io.StringIO()
    buf.write(f"# format = {TRACE_FORMAT}\n")
    buf.write(f"# dt = {float(v.dt)!r}\n")
    buf.write(f"# t0 = {float(v.t0)!r}\n")
    buf.write(f"# unit = {v.unit}\n")
    buf.write(f"# n_samples = {len(v)}\n")
    buf.write(f"# seed = {'' if seed is None else int(seed)}\n")
    buf.write(f"# spec_hash = {spec_hash}\n")
    buf.write("sample\n")
    buf.write("\n".join(repr(float(x)) for x in v.samples))
    buf.write("\n")
    Path(path).write_text(buf.getvalue())


def read_trace(path) -> tuple[SampledWaveform, dict]:
    """Read a trace written by :func:`write_trace`; returns (waveform, metadata).

    Malformed rows are reported with their line number and byte offset.
    """
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    meta: dict[str, str] = {}
    offset = 0
    first = len(lines)
    for lineno, line in enumerate(lines, start=1):
        text = line.decode("utf-8", errors="replace").strip()
        if text.startswith("#"):
            key, sep, val = text[1:].partition("=")
            if not sep:
                raise TraceFormatError(f"line {lineno} (byte {offset}): bad header {text!r}")
            meta[key.strip()] = val.strip()
        elif text:
            first = lineno - 1 if text != "sample" else lineno
            if text == "sample":
                offset += len(line) + 1
            break
        offset += len(line) + 1
    for key in ("dt", "unit", "n_samples"):
        if key not in meta:
            raise TraceFormatError(f"missing header field {key!r}")
    try:
        n = int(meta["n_samples"])
        dt = float(meta["dt"])
    except ValueError as exc:
        raise TraceFormatError(f"bad header value: {exc}") from None

    body = [ln.strip() for ln in lines[first:]]
    while body and not body[-1]:
        body.pop()
    try:
        values = np.array(body, dtype=np.bytes_).astype(np.float64)
        ok = bool(np.all(np.isfinite(values)))
    except ValueError:
        ok = False
    if not ok:
        _locate_bad_row(lines, first, offset)
    if values.size != n:
        raise TraceFormatError(
            f"truncated trace: expected {n} samples, found {values.size} (file ends at byte {len(raw)})"
        )
    t0 = float(meta.get("t0", 0.0) or 0.0)
    return SampledWaveform(values, dt, t0, meta["unit"]), meta


def _locate_bad_row(lines, first, offset):
    """Slow path: find and report the first row that is not a finite number."""
    pos = offset
    for lineno, line in enumerate(lines[first:], start=first + 1):
        text = line.decode("utf-8", errors="replace").strip()
        if text.startswith("#"):
            raise TraceFormatError(f"line {lineno} (byte {pos}): header after data")
        try:
            x = float(text)
        except ValueError:
            raise TraceFormatError(f"line {lineno} (byte {pos}): not a number: {text!r}") from None
        if not math.isfinite(x):
            raise TraceFormatError(f"line {lineno} (byte {pos}): non-finite value {text!r}")
        pos += len(line) + 1
    raise TraceFormatError("malformed trace body")
