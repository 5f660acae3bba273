"""Optimal model-based pattern function.

Minimises the estimator noise power

    N = integral |G(f)|^2 S_n(f) df

subject to orthogonality with the common-mode template
``integral conj(G) H_S Phi_S df = 0`` and the calibration
``integral conj(G) H_D Phi_S df = Phi_S(0)``.  The stationarity condition
gives ``G = (l1 H_S Phi_S + l2 H_D Phi_S) / S_n``, and the two multipliers
follow from a 2x2 system of overlap integrals.

The same Lagrange solution holds for any noise covariance ``R`` over the
pulse window, with the overlap integrals replaced by quadratic forms
``a^T R^-1 b``.  A stationary noise gives a circulant ``R`` and the two
forms coincide; pulse-gated (multiplicative) noise does not, and
:func:`solve_pattern_covariance` handles that case.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .detector import DetectorModel, sum_diff_responses
from .waveform import (
    SampledWaveform,
    Spectrum,
    check_same_bins,
    fft,
    ifft,
    inner_product_time,
    to_two_sided,
)

#: the noise PSD is floored at this fraction of its maximum
PSD_FLOOR = 1e-6

#: relative size of the 2x2 determinant below which the system is singular
SINGULAR_RTOL = 1e-12


class InfeasiblePatternError(ValueError):
    """No pattern function can satisfy the calibration condition."""


class SingularPatternError(ValueError):
    """The multiplier system is (numerically) singular."""


def _hermitian(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.conj(x[(-np.arange(x.size)) % x.size]))


@dataclass(frozen=True)
class PatternProblem:
    """Inputs to the pattern-function optimisation, all on one frequency grid.

    ``noise_psd`` is the two-sided PSD ``<|V_T|^2> + <|V_N|^2>``; ``Phi0`` is
    the zero-frequency value of ``Phis`` (the mean photon number per pulse).
    """

    Hs: Spectrum
    Hd: Spectrum
    Phis: Spectrum
    noise_psd: Spectrum
    Phi0: float

    def __post_init__(self):
        for s in (self.Hd, self.Phis, self.noise_psd):
            check_same_bins(self.Hs, s)
        if not self.Hs.two_sided:
            raise ValueError("pattern problems live on two-sided spectra")
        if np.any(self.noise_psd.bins.real < 0) or not np.any(self.noise_psd.bins.real > 0):
            raise ValueError("noise PSD must be non-negative and not identically zero")
        p0 = self.Phis.bins[0].real
        if abs(self.Phi0 - p0) > 1e-9 * max(abs(p0), abs(self.Phi0)):
            raise ValueError(f"Phi0={self.Phi0!r} disagrees with Phis(0)={p0!r}")

    @property
    def df(self) -> float:
        return self.Hs.df

    @property
    def denominator(self) -> np.ndarray:
        """Noise PSD floored at ``PSD_FLOOR`` times its maximum."""
        s = self.noise_psd.bins.real
        return np.maximum(s, PSD_FLOOR * s.max())

    @property
    def common_mode(self) -> np.ndarray:
        return self.Hs.bins * self.Phis.bins

    @property
    def differential(self) -> np.ndarray:
        return self.Hd.bins * self.Phis.bins

    def templates(self) -> tuple[SampledWaveform, SampledWaveform]:
        """Time-domain ``h_S * phi_S`` and ``h_D * phi_S`` on the problem grid."""
        mk = self.Hs.replace
        return ifft(mk(self.common_mode)), ifft(mk(self.differential))


@dataclass(frozen=True)
class PatternSolution:
    G: Spectrum
    g: SampledWaveform
    lambda1: float
    lambda2: float
    O1: complex
    O2: complex
    C1: complex
    C2: complex
    N_sigma: float
    I_or: complex
    I_cal: complex
    Phi0: float

    @property
    def orthogonality_residual(self) -> float:
        """``|I_or|`` normalised by ``||G|| ||H_S Phi_S||``."""
        return abs(self.I_or) / self._norm_or

    @property
    def calibration_residual(self) -> float:
        return abs(self.I_cal - self.Phi0) / abs(self.Phi0)

    _norm_or: float = 1.0

    def to_csv(self) -> str:
        return solution_csv(self.g, self.G, {
            "lambda1": self.lambda1, "lambda2": self.lambda2, "N_sigma": self.N_sigma,
            "orthogonality_residual": self.orthogonality_residual,
            "calibration_residual": self.calibration_residual,
        })


def constraint_orthogonality(G: Spectrum, prob: PatternProblem) -> complex:
    """``I_or = integral conj(G) H_S Phi_S df``."""
    check_same_bins(G, prob.Hs)
    return complex(np.vdot(G.bins, prob.common_mode) * prob.df)


def constraint_calibration(G: Spectrum, prob: PatternProblem) -> complex:
    """``I_cal = integral conj(G) H_D Phi_S df``; the target is ``Phi0``."""
    check_same_bins(G, prob.Hs)
    if not np.any(np.abs(prob.differential) > 0):
        raise InfeasiblePatternError("H_D Phi_S vanishes identically: calibration impossible")
    return complex(np.vdot(G.bins, prob.differential) * prob.df)


def constraints_time(g: SampledWaveform, prob: PatternProblem) -> tuple[float, float]:
    """Time-domain twins of the two constraint integrals."""
    a, b = prob.templates()
    a = a.replace(t0=g.t0)
    b = b.replace(t0=g.t0)
    return inner_product_time(g, a), inner_product_time(g, b)


def noise_power(G: Spectrum, prob: PatternProblem) -> float:
    """``integral |G|^2 S_n df`` with the regularised noise PSD."""
    check_same_bins(G, prob.Hs)
    return float(np.sum(np.abs(G.bins) ** 2 * prob.denominator) * prob.df)


def solve_pattern(prob: PatternProblem) -> PatternSolution:
    """Closed-form minimiser of the noise power under both constraints."""
    a = prob.common_mode
    b = prob.differential
    if not np.any(np.abs(b) > 0):
        raise InfeasiblePatternError("H_D Phi_S vanishes identically: calibration impossible")
    s = prob.denominator
    df = prob.df

    # overlap integrals; integrands are Hermitian-symmetrised so O1, C2 are
    # real and O2 = conj(C1) up to rounding
    O1 = np.sum(_hermitian(np.abs(a) ** 2 / s)) * df
    O2 = np.sum(_hermitian(np.conj(b) * a / s)) * df
    C1 = np.sum(_hermitian(np.conj(a) * b / s)) * df
    C2 = np.sum(_hermitian(np.abs(b) ** 2 / s)) * df
    scale = max(abs(O1) * abs(C2), np.finfo(float).tiny)
    if abs(O2.imag) > 1e-9 * np.sqrt(scale) or abs(C1 - np.conj(O2)) > 1e-9 * np.sqrt(scale):
        raise ValueError("overlap integrals are not Hermitian; inputs are not real signals")
    O1, O2, C1, C2 = O1.real, O2.real, C1.real, C2.real

    det = C1 * O2 - C2 * O1
    if abs(det) <= SINGULAR_RTOL * scale:
        raise SingularPatternError(
            "multiplier system is singular: common-mode and differential templates are collinear"
        )
    lam1, lam2 = _multipliers(O1, O2, C2, det, prob.Phi0)

    Gb = _hermitian((lam1 * a + lam2 * b) / s)
    G = prob.Hs.replace(Gb, unit="dimensionless")
    g = ifft(G)
    I_or = constraint_orthogonality(G, prob)
    I_cal = constraint_calibration(G, prob)
    norm_or = np.sqrt(np.sum(np.abs(Gb) ** 2) * df * np.sum(np.abs(a) ** 2) * df) or 1.0
    return PatternSolution(G, g, float(lam1), float(lam2), O1, O2, C1, C2,
                           noise_power(G, prob), I_or, I_cal, float(prob.Phi0), float(norm_or))


def _multipliers(O1, O2, C2, det, phi0):
    return phi0 * O2 / det, phi0 * O1 / (-det)


def covariance_from_psd(noise_psd: Spectrum) -> np.ndarray:
    """Circulant covariance matrix (V^2) of stationary noise with this PSD.

    The window length is the number of time samples behind the spectrum.
    """
    two = to_two_sided(noise_psd).bins.real
    r = np.real(np.fft.ifft(two)) / noise_psd.dt
    n = two.size
    lag = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return r[lag]


def window_covariance(segments: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of (pulses, samples) window segments."""
    x = np.asarray(segments, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (pulses, samples) array with at least 2 pulses")
    x = x - x.mean(axis=0)
    return x.T @ x / (x.shape[0] - 1)


def technical_covariance(noisy: np.ndarray, clean: np.ndarray, rank: int = 8) -> np.ndarray:
    """Low-rank estimate of the technical-noise covariance over a window.

    The difference of the sample covariances of windows with and without
    technical noise is projected onto its ``rank`` largest positive
    eigenvalues; the rest of the spectrum is sampling noise.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    d = window_covariance(noisy) - window_covariance(clean)
    w, v = np.linalg.eigh(0.5 * (d + d.T))
    w, v = w[-rank:], v[:, -rank:]
    keep = w > 0
    return (v[:, keep] * w[keep]) @ v[:, keep].T


def solve_pattern_covariance(prob: PatternProblem, R: np.ndarray) -> PatternSolution:
    """Lagrange solution for a general noise covariance ``R`` on the window.

    Minimises ``dt^2 g^T R g`` under the two constraints, which gives
    ``g = (l1 R^-1 a + l2 R^-1 b) / dt`` with the same multipliers as the
    spectral solution, the overlaps now being ``O1 = a^T R^-1 a``,
    ``O2 = C1 = b^T R^-1 a`` and ``C2 = b^T R^-1 b``.  ``PatternSolution.N_sigma``
    is the exact quadratic form for ``R``.
    """
    a_w, b_w = prob.templates()
    a, b = a_w.samples, b_w.samples
    n = a.size
    R = np.asarray(R, dtype=float)
    if R.shape != (n, n):
        raise ValueError(f"covariance must be {n}x{n}, got {R.shape}")
    if not np.any(b != 0):
        raise InfeasiblePatternError("H_D Phi_S vanishes identically: calibration impossible")
    R = 0.5 * (R + R.T)
    try:
        fac = linalg.cho_factor(R)
        Ra, Rb = linalg.cho_solve(fac, a), linalg.cho_solve(fac, b)
    except linalg.LinAlgError:
        # not positive definite: same relative floor as the spectral solver,
        # applied to the eigenvalues
        w, v = np.linalg.eigh(R)
        w = np.maximum(w, PSD_FLOOR * w.max())
        Ra, Rb = v @ ((v.T @ a) / w), v @ ((v.T @ b) / w)
    O1, O2, C2 = float(a @ Ra), float(a @ Rb), float(b @ Rb)
    C1 = O2
    det = C1 * O2 - C2 * O1
    scale = max(abs(O1) * abs(C2), np.finfo(float).tiny)
    if abs(det) <= SINGULAR_RTOL * scale:
        raise SingularPatternError(
            "multiplier system is singular: common-mode and differential templates are collinear"
        )
    lam1, lam2 = _multipliers(O1, O2, C2, det, prob.Phi0)
    dt = a_w.dt
    g = SampledWaveform((lam1 * Ra + lam2 * Rb) / dt, dt, 0.0, "dimensionless")
    G = fft(g)
    I_or = constraint_orthogonality(G, prob)
    I_cal = constraint_calibration(G, prob)
    norm_or = np.sqrt(np.sum(np.abs(G.bins) ** 2) * prob.df
                      * np.sum(np.abs(prob.common_mode) ** 2) * prob.df) or 1.0
    n_sigma = float(dt * dt * g.samples @ R @ g.samples)
    return PatternSolution(G, g, float(lam1), float(lam2), O1, O2, C1, C2, n_sigma,
                           I_or, I_cal, float(prob.Phi0), float(norm_or))


def build_problem(model: DetectorModel, mean_flux: SampledWaveform, noise_psd: Spectrum,
                  *, include_gain: bool = True) -> PatternProblem:
    """Assemble a problem on the grid of one pulse window.

    ``mean_flux`` is the average summed flux ``phi_S`` over the window (its
    area is the mean photon number) and ``noise_psd`` the noise on the same
    bins, one- or two-sided.
    """
    n = len(mean_flux)
    dt = mean_flux.dt
    hS, hD = sum_diff_responses(model, dt, n)
    k = model.gain if include_gain else 1.0
    Hs = fft(hS.scaled(k))
    Hd = fft(hD.scaled(k))
    Phis = fft(mean_flux)
    noise = to_two_sided(noise_psd)
    check_same_bins(Hs, noise)
    return PatternProblem(Hs, Hd, Phis, noise, float(Phis.bins[0].real))


def solution_csv(g: SampledWaveform, G: Spectrum, meta: dict) -> str:
    """CSV with a ``#`` metadata block, then (t, g) and (f, Re G, Im G) tables."""
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k} = {v!r}\n")
    buf.write("t,g\n")
    for t, x in zip(g.times, g.samples):
        buf.write(f"{t!r},{x!r}\n")
    buf.write("f,re_G,im_G\n")
    for f, x in zip(G.freqs, G.bins):
        buf.write(f"{f!r},{x.real!r},{x.imag!r}\n")
    return buf.getvalue()
