"""Balanced photodetector: two-pole impulse responses, sum/difference
responses, response fitting and the electronic output."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .waveform import SampledWaveform, causal_filter, check_same_grid

#: |tau_tia - tau_x| / tau below which the repeated-pole form is used
DEGENERACY_RTOL = 1e-9

#: elementary charge times the 1e5 V/A transimpedance setting
DEFAULT_GAIN = 1.602176634e-19 * 1e5


def bandwidth_tau(f_3db: float) -> float:
    """Single-pole time constant for a -3 dB bandwidth."""
    return 1.0 / (2 * math.pi * f_3db)


@dataclass(frozen=True)
class DetectorModel:
    """Parameters of the two photodiodes behind one transimpedance amplifier.

    ``balance`` is the responsivity of PD_V relative to PD_H and
    ``polarity_v`` the sign with which PD_V enters the output: -1 for the
    back-to-back wiring of a balanced detector, +1 for a summing pair.
    Delays stand in for the optical path differences.
    """

    tau_tia: float = bandwidth_tau(5e6)
    tau_h: float = 6.0e-9
    tau_v: float = 1.0e-9
    gain: float = DEFAULT_GAIN
    delay_h: float = 0.0
    delay_v: float = 0.2e-9
    balance: float = 0.99
    polarity_v: int = -1

    def __post_init__(self):
        for name in ("tau_tia", "tau_h", "tau_v"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.delay_h < 0 or self.delay_v < 0:
            raise ValueError("delays must be non-negative")
        if not self.balance > 0:
            raise ValueError("balance must be positive")
        if self.polarity_v not in (-1, 1):
            raise ValueError("polarity_v must be -1 or +1")

    def tau_x(self, which: str) -> float:
        return {"H": self.tau_h, "V": self.tau_v}[_which(which)]

    def delay(self, which: str) -> float:
        return {"H": self.delay_h, "V": self.delay_v}[_which(which)]

    def weight(self, which: str) -> float:
        """Signed scale of each photodiode in the output (before gain)."""
        return 1.0 if _which(which) == "H" else self.polarity_v * self.balance

    def response_length(self, dt: float) -> int:
        """Samples needed to hold the response to a truncation below 1e-13."""
        span = max(self.delay_h, self.delay_v) + 30 * max(self.tau_tia, self.tau_h, self.tau_v)
        return int(math.ceil(span / dt)) + 2

    def with_params(self, **kw) -> "DetectorModel":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _which(which: str) -> str:
    w = str(which).upper()
    if w not in ("H", "V"):
        raise ValueError(f"detector must be 'H' or 'V', got {which!r}")
    return w


def _step_response(t: np.ndarray, tau_a: float, tau_b: float) -> np.ndarray:
    """Integral of the unit-area two-pole response from 0 to ``t``."""
    t = np.maximum(t, 0.0)
    tau = max(tau_a, tau_b)
    rel = abs(tau_a - tau_b) / tau
    if rel < DEGENERACY_RTOL:
        # repeated pole: h = t exp(-t/tau) / tau^2
        return -np.expm1(-t / tau) - (t / tau) * np.exp(-t / tau)
    if rel > 1e-3:
        return 1.0 - (tau_a * np.exp(-t / tau_a) - tau_b * np.exp(-t / tau_b)) / (tau_a - tau_b)
    # nearly repeated poles: factor out exp(-t/tau_b) to avoid cancellation
    d = t * (tau_a - tau_b) / (tau_a * tau_b)
    ratio = np.ones_like(d)
    nz = d != 0
    ratio[nz] = np.expm1(d[nz]) / d[nz]
    return 1.0 - np.exp(-t / tau_b) * (1.0 + (t / tau_b) * ratio)


def response_samples(tau_tia: float, tau_x: float, delay: float, dt: float, n: int) -> np.ndarray:
    """Bin-averaged samples of the unit-area two-pole response.

    Sample ``k`` is the mean of ``h(t - delay)`` over ``[k dt, (k+1) dt)``,
    so the discrete area equals the continuous one up to truncation and
    sub-sample delays are represented exactly.
    """
    edges = np.arange(n + 1) * dt - delay
    return np.diff(_step_response(edges, tau_tia, tau_x)) / dt


def impulse_response(m: DetectorModel, which: str, dt: float, n: int | None = None) -> SampledWaveform:
    """Unit-area response ``h_X`` of photodiode ``which`` (gain not applied)."""
    n = m.response_length(dt) if n is None else int(n)
    if n < 2:
        raise ValueError("response grid needs at least 2 samples")
    h = response_samples(m.tau_tia, m.tau_x(which), m.delay(which), dt, n)
    return SampledWaveform(h, dt, 0.0, "dimensionless")


def signed_responses(m: DetectorModel, dt: float, n: int | None = None):
    """``(h_H, h_V)`` as they enter the output sum, gain not applied."""
    n = m.response_length(dt) if n is None else int(n)
    return tuple(
        impulse_response(m, w, dt, n).scaled(m.weight(w)) for w in ("H", "V")
    )


def sum_diff_responses(m: DetectorModel, dt: float, n: int | None = None):
    """``h_S = h_H + h_V`` and ``h_D = h_H - h_V`` with signed responses.

    For the balanced wiring (``polarity_v = -1``) ``h_S`` is the small
    common-mode residue and ``h_D`` carries the differential signal.
    """
    hH, hV = signed_responses(m, dt, n)
    return hH.replace(hH.samples + hV.samples), hH.replace(hH.samples - hV.samples)


def detector_output(
    m: DetectorModel,
    phi_h: SampledWaveform,
    phi_v: SampledWaveform,
    noise: SampledWaveform | None = None,
) -> SampledWaveform:
    """Electronic output ``gain * (h_H * phi_H + h_V * phi_V) + v_N``.

    Fluxes are in photons/s on a common grid; the result shares their grid
    and is causal (no light before the first sample).
    """
    check_same_grid(phi_h, phi_v, aligned=True)
    for phi in (phi_h, phi_v):
        if np.any(phi.samples < 0):
            raise ValueError("photon flux must be non-negative")
    hH, hV = signed_responses(m, phi_h.dt)
    v = causal_filter(hH, phi_h).samples + causal_filter(hV, phi_v).samples
    return _finish(m, phi_h, v, noise)


def detector_output_sum_diff(
    m: DetectorModel,
    phi_h: SampledWaveform,
    phi_v: SampledWaveform,
    noise: SampledWaveform | None = None,
) -> SampledWaveform:
    """Same output evaluated as ``(h_S * phi_S + h_D * phi_D) / 2 + v_N``."""
    check_same_grid(phi_h, phi_v, aligned=True)
    hS, hD = sum_diff_responses(m, phi_h.dt)
    phi_s = phi_h.replace(phi_h.samples + phi_v.samples)
    phi_d = phi_h.replace(phi_h.samples - phi_v.samples)
    v = 0.5 * (causal_filter(hS, phi_s).samples + causal_filter(hD, phi_d).samples)
    return _finish(m, phi_h, v, noise)


def _finish(m, grid, v, noise):
    v = m.gain * v
    if noise is not None:
        check_same_grid(grid, noise, aligned=True)
        v = v + noise.samples
    return SampledWaveform(v, grid.dt, grid.t0, "volts")


class FitError(RuntimeError):
    """Response fit did not converge; carries the best parameters found."""

    def __init__(self, message, best: DetectorModel, residual_rms: float):
        super().__init__(message)
        self.best = best
        self.residual_rms = residual_rms


@dataclass(frozen=True)
class ResponseFit:
    model: DetectorModel
    which: str
    scale: float
    residual_rms: float  # relative to the peak of the observed shape
    nfev: int

    def predicted(self, p_fast: SampledWaveform) -> SampledWaveform:
        h = impulse_response(self.model, self.which, p_fast.dt)
        return causal_filter(h, p_fast).scaled(self.scale)


def fit_response(
    p_fast: SampledWaveform,
    p_slow: SampledWaveform,
    init: DetectorModel,
    which: str = "H",
    *,
    max_nfev: int = 400,
    tau_min: float | None = None,
) -> ResponseFit:
    """Fit ``tau_tia``, ``tau_x`` and the delay of one photodiode.

    Minimises the squared difference between ``p_slow`` and the wideband
    shape ``p_fast`` filtered by ``h_X``.  An overall amplitude is profiled
    out by linear least squares, so normalised shapes are fine.  The
    optimiser (trust-region reflective) is deterministic for given inputs.
    """
    which = _which(which)
    check_same_grid(p_fast, p_slow, aligned=True)
    dt = p_fast.dt
    n = len(p_fast)
    y = p_slow.samples
    peak = np.max(np.abs(y))
    if peak == 0:
        raise ValueError("observed shape is identically zero")
    tau_min = dt * 1e-3 if tau_min is None else tau_min
    tau_max = n * dt

    # theta = (log tau_tia, log tau_x, delay in samples); the delay is kept in
    # sample units so finite-difference steps are not lost to rounding
    def model_curve(theta):
        tt, tx, d = math.exp(theta[0]), math.exp(theta[1]), theta[2] * dt
        h = response_samples(tt, tx, d, dt, n)
        return np.convolve(h, p_fast.samples)[:n] * dt

    def resid(theta):
        c = model_curve(theta)
        cc = np.dot(c, c)
        a = np.dot(c, y) / cc if cc > 0 else 0.0
        return (a * c - y) / peak

    x0 = np.array([math.log(init.tau_tia), math.log(init.tau_x(which)), init.delay(which) / dt])
    lo = np.array([math.log(tau_min), math.log(tau_min), 0.0])
    hi = np.array([math.log(tau_max), math.log(tau_max), 0.25 * n])
    x0 = np.clip(x0, lo + 1e-12, hi - 1e-12)
    sol = least_squares(resid, x0, bounds=(lo, hi), method="trf",
                        max_nfev=max_nfev, xtol=1e-12, ftol=1e-12, gtol=1e-12)
    tt, tx, d = math.exp(sol.x[0]), math.exp(sol.x[1]), float(sol.x[2]) * dt
    c = model_curve(sol.x)
    scale = float(np.dot(c, y) / np.dot(c, c))
    rms = float(np.sqrt(np.mean(resid(sol.x) ** 2)))
    # the two time constants enter symmetrically; keep the slower one as the amplifier
    tt, tx = max(tt, tx), min(tt, tx)
    fitted = init.with_params(tau_tia=tt, **{f"tau_{which.lower()}": tx, f"delay_{which.lower()}": d})
    if sol.status <= 0:
        raise FitError(f"response fit did not converge: {sol.message}", fitted, rms)
    return ResponseFit(fitted, which, scale, rms, int(sol.nfev))


def reference_shape(width: float, rise: float, dt: float, n: int, offset: float) -> SampledWaveform:
    """Normalised rectangular pulse with raised-cosine edges (area 1)."""
    t = (np.arange(n) + 0.5) * dt - offset
    x = np.clip(np.minimum(t, width - t) / rise, 0.0, 1.0) if rise > 0 else ((t >= 0) & (t < width)).astype(float)
    x = 0.5 - 0.5 * np.cos(np.pi * x)
    return SampledWaveform(x / (x.sum() * dt), dt, 0.0, "flux")
