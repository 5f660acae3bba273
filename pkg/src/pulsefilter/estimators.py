"""Per-pulse estimators, variance-versus-power fits and angle noise.

Every estimator is a pattern function on the window grid followed by an
affine calibration measured on noise-free pulses:

    S_hat = (integral gamma(t) v(t) dt - offset) / scale

``offset`` is the response to a balanced pulse and ``scale`` the response
per photon of differential signal, so all estimators report photon numbers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .detector import DetectorModel
from .noise import PulseTrainSpec, gather
from .waveform import PulseWindow, SampledWaveform
from .wiener import ideal_window

KINDS = ("raw", "wiener", "optimal")

#: guard after the pulse, in amplifier time constants, required of each window
MIN_GUARD_TAUS = 5.0


# segmentation ----------------------------------------------------------------

def segment_pulses(v: SampledWaveform, ts: PulseTrainSpec, m: DetectorModel | None = None,
                   *, length: int | None = None) -> list[PulseWindow]:
    """One window per nominal pulse, centred on the pulse.

    The default length is one full period, the largest that keeps windows
    disjoint.  With a detector model the guard after the pulse must cover
    ``MIN_GUARD_TAUS`` amplifier time constants.
    """
    p = ts.period_samples
    w = ts.width_samples
    length = p if length is None else int(length)
    if length > p:
        raise ValueError(f"windows of {length} samples overlap (period is {p})")
    if length <= w:
        raise ValueError("window shorter than the pulse")
    before = (length - w) // 2
    after = length - w - before
    if m is not None and after * ts.dt < MIN_GUARD_TAUS * m.tau_tia:
        raise ValueError(
            f"guard of {after} samples after the pulse is below {MIN_GUARD_TAUS} tau_TIA"
        )
    starts = ts.onsets() - before
    if starts[0] < 0 or starts[-1] + length > len(v):
        raise ValueError(f"waveform of {len(v)} samples does not hold {ts.n_pulses} pulse windows")
    return [PulseWindow(int(s), int(s) + length) for s in starts]


def raw_region(ts: PulseTrainSpec, m: DetectorModel, window: PulseWindow, *,
               pre: int = 0, post_taus: float = 0.0) -> PulseWindow:
    """The pulse interval inside a window (window-relative indices).

    By default this is exactly the optical pulse, onset to end.  ``pre``
    widens it by that many samples before the onset and ``post_taus``
    extends it by that many amplifier time constants past the end, to
    include the ring-down.
    """
    onset = ts.lead_samples - window.start % ts.period_samples
    start = max(onset - pre, 0)
    stop = min(onset + ts.width_samples + int(math.ceil(post_taus * m.tau_tia / ts.dt)), len(window))
    return PulseWindow(start, stop)


def raw_pattern(ts: PulseTrainSpec, m: DetectorModel, window: PulseWindow, **kw) -> SampledWaveform:
    """``gamma = 1`` on the pulse interval, 0 elsewhere in the window."""
    r = raw_region(ts, m, window, **kw)
    g = np.zeros(len(window))
    g[r.slice] = 1.0
    return SampledWaveform(g, ts.dt, 0.0, "dimensionless")


# calibration -----------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    """Affine map from ``integral gamma v dt`` to photon number."""

    offset: float
    scale: float

    def apply(self, x):
        return (np.asarray(x) - self.offset) / self.scale


def calibrate(pattern: SampledWaveform, ts: PulseTrainSpec, m: DetectorModel,
              window: PulseWindow, *, s_ref: float = 1.0) -> Calibration:
    """Calibrate a pattern on noise-free balanced and rotated pulses.

    ``s_ref = sin(2 phi_ref)`` is the reference rotation; the output is
    linear in it, so any nonzero value gives the same map.
    """
    if s_ref == 0:
        raise ValueError("reference rotation must be nonzero")
    # the map per photon does not depend on power; at zero power measure it
    # at a nominal one (the balanced offset then vanishes)
    ref = ts if ts.mean_power > 0 else ts.with_params(mean_power=1e-3)
    g = pattern.samples
    c0 = float(np.dot(g, ideal_window(ref, m, window, 0.0).samples) * ts.dt)
    c1 = float(np.dot(g, ideal_window(ref, m, window, s_ref).samples) * ts.dt)
    scale = (c1 - c0) / (ref.photons_per_pulse * s_ref)
    if scale == 0 or not math.isfinite(scale):
        raise ValueError("pattern does not respond to a differential signal")
    return Calibration(c0 if ref is ts else 0.0, scale)


# per-pulse estimates -----------------------------------------------------------

@dataclass(frozen=True)
class EstimateSeries:
    """Calibrated per-pulse estimates of one estimator at one power."""

    kind: str
    power: float
    values: np.ndarray
    seed: int = 0
    spec_hash: str = ""
    truth: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"estimator kind must be one of {KINDS}, got {self.kind!r}")
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.truth is not None:
            t = np.array(self.truth, dtype=float)
            if t.shape != v.shape:
                raise ValueError("truth and values differ in length")
            t.setflags(write=False)
            object.__setattr__(self, "truth", t)

    def __len__(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def var(self) -> float:
        return float(np.var(self.values, ddof=1))

    @property
    def var_se(self) -> float:
        """Standard error of :attr:`var` for Gaussian samples."""
        return self.var * math.sqrt(2.0 / (len(self) - 1))

    def bias_z(self) -> float:
        """Mean error against the truth in units of its standard error."""
        if self.truth is None:
            raise ValueError("no truth attached")
        d = self.values - self.truth
        return float(np.mean(d) / (np.std(d, ddof=1) / math.sqrt(d.size)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind,label,power_W,seed,spec_hash,pulse,estimate,truth\n")
        tr = self.truth if self.truth is not None else [""] * len(self)
        for i, (x, t) in enumerate(zip(self.values, tr)):
            t = "" if t == "" else repr(float(t))
            buf.write(f"{self.kind},{self.label},{float(self.power)!r},{self.seed},{self.spec_hash},"
                      f"{i},{float(x)!r},{t}\n")
        return buf.getvalue()


def estimate_all(v: SampledWaveform, windows: list[PulseWindow], pattern: SampledWaveform,
                 calibration: Calibration, *, kind: str = "raw", power: float = 0.0,
                 seed: int = 0, spec_hash: str = "", truth=None, label: str = "") -> EstimateSeries:
    """Apply one calibrated pattern to every window of ``v``."""
    if abs(pattern.dt - v.dt) > 1e-6 * v.dt:
        raise ValueError("pattern and waveform sample periods differ")
    segs = gather(v.samples, windows)
    if segs.shape[1] != len(pattern):
        raise ValueError(f"pattern has {len(pattern)} samples, windows {segs.shape[1]}")
    x = segs @ pattern.samples * v.dt
    return EstimateSeries(kind, power, calibration.apply(x), seed, spec_hash, truth, label)


def paired_difference_se(a: EstimateSeries, b: EstimateSeries) -> tuple[float, float]:
    """``var(a) - var(b)`` and its standard error for estimates of the same pulses.

    Uses the per-pulse differences of squared deviations, which accounts
    for the (usually strong) correlation between estimators on one trace.
    """
    if len(a) != len(b):
        raise ValueError("series differ in length")
    n = len(a)
    da = (a.values - a.mean) ** 2 * n / (n - 1)
    db = (b.values - b.mean) ** 2 * n / (n - 1)
    d = da - db
    return float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(n))


# variance fits -----------------------------------------------------------------

@dataclass(frozen=True)
class PolyFit:
    coef: np.ndarray  # ascending powers
    cov: np.ndarray
    chi2: float
    dof: int

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def __call__(self, p):
        return np.polyval(self.coef[::-1], p)


@dataclass(frozen=True)
class QuadraticFit:
    """``var = A + B P + C P^2`` with ``P`` in the units of the input powers.

    ``linear`` holds the ``A + B P`` fit of the same data and ``f_test_p``
    the probability of the quadratic term arising by chance (F-test).
    """

    A: float
    B: float
    C: float
    cov: np.ndarray
    chi2: float
    dof: int
    linear: PolyFit = field(repr=False)
    f_test_p: float = float("nan")

    @property
    def sigma_A(self) -> float:
        return float(math.sqrt(self.cov[0, 0]))

    @property
    def sigma_B(self) -> float:
        return float(math.sqrt(self.cov[1, 1]))

    @property
    def sigma_C(self) -> float:
        return float(math.sqrt(self.cov[2, 2]))

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def c_significance(self) -> float:
        return self.C / self.sigma_C

    def ratio_db(self, p_max: float) -> float:
        """``C P^2 / (B P)`` at ``p_max`` in dB."""
        return 10 * math.log10(self.C * p_max / self.B)

    def to_dict(self) -> dict:
        return {
            "A": self.A, "B": self.B, "C": self.C,
            "sigma_A": self.sigma_A, "sigma_B": self.sigma_B, "sigma_C": self.sigma_C,
            "cov": self.cov.tolist(), "chi2": self.chi2, "dof": self.dof,
            "linear_A": float(self.linear.coef[0]), "linear_B": float(self.linear.coef[1]),
            "linear_sigma_B": float(self.linear.sigma[1]), "linear_chi2": self.linear.chi2,
            "f_test_p": self.f_test_p,
        }


def _wls(p, y, sig, deg):
    X = np.vander(p, deg + 1, increasing=True)
    Xw = X / sig[:, None]
    yw = y / sig
    cov = np.linalg.inv(Xw.T @ Xw)
    coef = cov @ Xw.T @ yw
    chi2 = float(np.sum((Xw @ coef - yw) ** 2))
    return PolyFit(coef, cov, chi2, p.size - deg - 1)


def _poly_fit(p, v, n, deg, iterations):
    # variance of a sample variance: 2 sigma^4 / (n - 1); the weights are
    # refined with the fitted curve so noise in v does not bias the fit
    model = v.copy()
    for _ in range(iterations):
        sig = np.sqrt(2.0 / (n - 1)) * np.maximum(model, 1e-300)
        fit = _wls(p, v, sig, deg)
        model = np.maximum(fit(p), 0.05 * np.max(v))
    return fit


def fit_variance_vs_power(powers, variances, n_pulses, *, iterations: int = 4) -> QuadraticFit:
    """Weighted quadratic fit of estimator variance against power.

    ``n_pulses`` (scalar or per point) sets the variance-of-variance
    weights ``2 var^2 / (n - 1)``.
    """
    p = np.asarray(powers, dtype=float)
    v = np.asarray(variances, dtype=float)
    if p.shape != v.shape or p.ndim != 1:
        raise ValueError("powers and variances must be 1-d and equally long")
    if p.size < 4:
        raise ValueError(f"need at least 4 power points, got {p.size}")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    n = np.broadcast_to(np.asarray(n_pulses, dtype=float), p.shape)
    quad = _poly_fit(p, v, n, 2, iterations)
    lin = _poly_fit(p, v, n, 1, iterations)
    f_p = float("nan")
    if quad.dof > 0 and quad.chi2 > 0:
        f = (lin.chi2 - quad.chi2) / (quad.chi2 / quad.dof)
        f_p = float(stats.f.sf(f, 1, quad.dof))
    A, B, C = (float(c) for c in quad.coef)
    return QuadraticFit(A, B, C, quad.cov, quad.chi2, quad.dof, lin, f_p)


def fit_series(series: list[EstimateSeries], power_unit: float = 1e-6, **kw) -> QuadraticFit:
    """:func:`fit_variance_vs_power` over a list of series (powers rescaled)."""
    p = [s.power / power_unit for s in series]
    return fit_variance_vs_power(p, [s.var for s in series], [len(s) for s in series], **kw)


def _history(ts: PulseTrainSpec, window: PulseWindow):
    """Absorption times (window-relative) that reach the window, and the
    photon fraction of the mean pulse at each."""
    p = ts.period_samples
    j = np.arange(-p, len(window))
    ref = ts if ts.mean_power > 0 else ts.with_params(mean_power=1e-3)
    cell = ref.cell_shape() / ref.photons_per_pulse * ts.dt
    return j, cell[(window.start + j) % p]


def _pattern_responses(pattern: SampledWaveform, ts: PulseTrainSpec, m: DetectorModel, j):
    """``integral gamma(t) gain h_X(t - t_j) dt`` for each arm and absorption time."""
    from .detector import signed_responses

    n = len(pattern)
    hH, hV = signed_responses(m, ts.dt, n)
    lag = np.arange(n)[None, :] - j[:, None]
    valid = (lag >= 0) & (lag < n)
    idx = np.clip(lag, 0, n - 1)
    g = pattern.samples
    return [m.gain * ts.dt * (np.where(valid, h.samples[idx], 0.0) @ g) for h in (hH, hV)]


def shot_noise_slope(pattern: SampledWaveform, calibration: Calibration, ts: PulseTrainSpec,
                     m: DetectorModel, window: PulseWindow) -> float:
    """Expected shot-noise variance of an estimator per detected photon.

    Each photon absorbed at sample ``j`` in arm X adds ``gain h_X(t - j dt)``
    to the output, so for a balanced Poissonian input the variance is the
    photon-weighted sum of squared pattern responses over the squared
    calibration scale.  Multiply by the photon number for the variance.
    """
    j, frac = _history(ts, window)
    rH, rV = _pattern_responses(pattern, ts, m, j)
    return float(0.5 * np.sum(frac * (rH**2 + rV**2)) / calibration.scale**2)


def technical_variance(pattern: SampledWaveform, calibration: Calibration, ts: PulseTrainSpec,
                       ns, m: DetectorModel, window: PulseWindow) -> float:
    """Expected technical-noise variance (photons^2) of an estimator.

    The common-mode envelope ``1 + n_T`` multiplies both arms, so a
    balanced input contributes ``u_j = N f_j (r_H,j + r_V,j) / 2`` per
    absorption time and the variance is ``u^T C_T u`` with the envelope
    autocovariance ``C_T``.  Clipping of the flux at zero is ignored.
    """
    from scipy.linalg import toeplitz

    from .noise import tech_autocovariance

    j, frac = _history(ts, window)
    rH, rV = _pattern_responses(pattern, ts, m, j)
    u = 0.5 * ts.photons_per_pulse * frac * (rH + rV)
    ac = tech_autocovariance(max(ts.n_samples, 2 * j.size), ts.dt, ns)[: j.size]
    return float(u @ toeplitz(ac) @ u / calibration.scale**2)


def electronic_variance(pattern: SampledWaveform, calibration: Calibration, ts: PulseTrainSpec,
                        electronic_psd: float) -> float:
    """Expected variance (photons^2) from white electronic noise."""
    sigma2 = electronic_psd / (2 * ts.dt)
    return float(sigma2 * np.sum(pattern.samples**2) * ts.dt**2 / calibration.scale**2)


# angle noise -----------------------------------------------------------------

@dataclass(frozen=True)
class AngleNoise:
    var_phi: float
    dSdphi: float
    var_phi_se: float = float("nan")

    def __post_init__(self):
        if self.var_phi < 0:
            raise ValueError("var_phi must be >= 0")


def dS_dphi(ts: PulseTrainSpec, phi: float | None = None) -> float:
    """Analytic slope of ``S = N sin(2 phi)``: ``2 N cos(2 phi)``."""
    phi = ts.rotation_angle if phi is None else phi
    return 2 * ts.photons_per_pulse * math.cos(2 * phi)


def dS_dphi_numeric(pattern: SampledWaveform, calibration: Calibration, ts: PulseTrainSpec,
                    m: DetectorModel, window: PulseWindow, h: float = 1e-3) -> float:
    """Central difference of noise-free estimates at ``phi +- h``."""
    vals = []
    for phi in (ts.rotation_angle - h, ts.rotation_angle + h):
        s = math.sin(2 * phi)
        x = np.dot(pattern.samples, ideal_window(ts, m, window, s).samples) * ts.dt
        vals.append(float(calibration.apply(x)))
    return (vals[1] - vals[0]) / (2 * h)


def angle_noise(series: EstimateSeries | float, dSdphi: float) -> AngleNoise:
    """``var(phi) = var(S_hat) / (dS/dphi)^2`` (small-angle regime)."""
    if dSdphi == 0 or not math.isfinite(dSdphi):
        raise ValueError("dS/dphi must be finite and nonzero")
    if isinstance(series, EstimateSeries):
        v, se = series.var, series.var_se
    else:
        v, se = float(series), float("nan")
    d2 = dSdphi**2
    return AngleNoise(v / d2, dSdphi, se / d2)
