import numpy as np
import pytest
from oracles import kkt_solution, random_problem

from pulsefilter.detector import DetectorModel, reference_shape
from pulsefilter.pattern import (
    InfeasiblePatternError,
    PatternProblem,
    SingularPatternError,
    build_problem,
    constraints_time,
    covariance_from_psd,
    noise_power,
    solve_pattern,
    solve_pattern_covariance,
    technical_covariance,
)
from pulsefilter.waveform import Spectrum


def test_matches_kkt_oracle(rng):
    for _ in range(5):
        prob = random_problem(rng)
        sol = solve_pattern(prob)
        G_ref, _, _ = kkt_solution(prob)
        err = np.max(np.abs(sol.G.bins - G_ref)) / np.max(np.abs(G_ref))
        assert err < 1e-7


def test_constraints_hold_in_both_domains(rng):
    prob = random_problem(rng, 200)
    sol = solve_pattern(prob)
    assert sol.orthogonality_residual < 1e-10
    assert sol.calibration_residual < 1e-10
    i_or, i_cal = constraints_time(sol.g, prob)
    assert abs(i_cal - prob.Phi0) < 1e-9 * prob.Phi0
    assert abs(i_or) < 1e-9 * prob.Phi0
    assert sol.G.hermitian_error() < 1e-12


def test_feasible_perturbations_only_add_noise(rng):
    prob = random_problem(rng, 128)
    sol = solve_pattern(prob)
    a = prob.common_mode
    b = prob.differential
    basis = np.stack([a, b], axis=1)
    best = noise_power(sol.G, prob)
    for _ in range(20):
        x = np.fft.fft(rng.normal(size=128))
        # project out the constraint directions under the plain inner product
        coef = np.linalg.lstsq(basis, x, rcond=None)[0]
        d = x - basis @ coef
        d *= 1e-3 * np.linalg.norm(sol.G.bins) / np.linalg.norm(d)
        G2 = sol.G.replace(sol.G.bins + d)
        assert noise_power(G2, prob) > best


def test_scale_covariance(rng):
    prob = random_problem(rng, 96)
    base = solve_pattern(prob)
    louder = PatternProblem(prob.Hs, prob.Hd, prob.Phis, prob.noise_psd.replace(prob.noise_psd.bins * 7.5),
                            prob.Phi0)
    s = solve_pattern(louder)
    np.testing.assert_allclose(s.G.bins, base.G.bins, atol=1e-12 * np.abs(base.G.bins).max())
    assert s.N_sigma == pytest.approx(7.5 * base.N_sigma, rel=1e-10)
    brighter = PatternProblem(prob.Hs, prob.Hd, prob.Phis.replace(prob.Phis.bins * 3.0),
                              prob.noise_psd, 3.0 * prob.Phi0)
    s = solve_pattern(brighter)
    np.testing.assert_allclose(s.G.bins, base.G.bins, atol=1e-12 * np.abs(base.G.bins).max())


def test_covariance_solver_agrees_for_stationary_noise(rng):
    prob = random_problem(rng, 150)
    spec = solve_pattern(prob)
    cov = solve_pattern_covariance(prob, covariance_from_psd(prob.noise_psd))
    np.testing.assert_allclose(cov.g.samples, spec.g.samples, atol=1e-9 * np.abs(spec.g.samples).max())
    assert cov.N_sigma == pytest.approx(spec.N_sigma, rel=1e-9)
    assert cov.lambda1 == pytest.approx(spec.lambda1, rel=1e-9)


def test_covariance_solver_beats_spectral_for_gated_noise(rng):
    prob = random_problem(rng, 120)
    R0 = covariance_from_psd(prob.noise_psd)
    a, _ = prob.templates()
    # noise that only lives where the pulse is: a rank-one gated term
    u = a.samples / np.linalg.norm(a.samples)
    R = R0 + 50 * np.abs(R0).max() * np.outer(u, u)
    cov = solve_pattern_covariance(prob, R)
    spec = solve_pattern(prob)
    dt = a.dt
    assert cov.N_sigma <= dt * dt * spec.g.samples @ R @ spec.g.samples
    assert cov.orthogonality_residual < 1e-9 and cov.calibration_residual < 1e-9


def test_noise_power_monte_carlo(rng):
    prob = random_problem(rng, 64)
    sol = solve_pattern(prob)
    _, _, R = kkt_solution(prob)
    L = np.linalg.cholesky(R + 1e-12 * np.abs(R).max() * np.eye(64))
    x = rng.normal(size=(40000, 64)) @ L.T
    dt = prob.Hs.dt
    est = (x @ sol.g.samples) * dt
    assert est.var() == pytest.approx(sol.N_sigma, rel=0.05)


def test_technical_covariance_is_low_rank_psd(rng):
    clean = rng.normal(size=(400, 40))
    u = rng.normal(size=(40, 2))
    noisy = rng.normal(size=(400, 40)) + rng.normal(size=(400, 2)) @ (3 * u.T)
    C = technical_covariance(noisy, clean, rank=4)
    w = np.linalg.eigvalsh(C)
    assert np.sum(w > 1e-9 * w.max()) <= 4
    assert w.min() > -1e-9 * w.max()
    # the injected subspace dominates the estimate
    P = u @ np.linalg.pinv(u)
    assert np.trace(P @ C) / np.trace(C) > 0.8


def _problem(m):
    dt, n = 2e-9, 128
    flux = reference_shape(80e-9, 8e-9, dt, n, 40e-9).scaled(1e6)
    psd = Spectrum(np.ones(n, complex) * 1e-14, 2 * np.pi / (n * dt), True, n_time=n)
    return build_problem(m, flux, psd)


def test_infeasible_and_singular_problems():
    twin = dict(tau_h=5e-9, tau_v=5e-9, delay_v=0.0, balance=1.0)
    with pytest.raises(InfeasiblePatternError):
        solve_pattern(_problem(DetectorModel(polarity_v=1, **twin)))
    with pytest.raises(SingularPatternError):
        solve_pattern(_problem(DetectorModel(polarity_v=-1, **twin)))
    with pytest.raises(SingularPatternError):
        prob = _problem(DetectorModel(polarity_v=-1, **twin))
        solve_pattern_covariance(prob, np.eye(128))


def test_problem_validation():
    prob = _problem(DetectorModel())
    with pytest.raises(ValueError):
        PatternProblem(prob.Hs, prob.Hd, prob.Phis, prob.noise_psd, 2 * prob.Phi0)
    with pytest.raises(ValueError):
        PatternProblem(prob.Hs, prob.Hd, prob.Phis, prob.noise_psd.replace(-prob.noise_psd.bins), prob.Phi0)
    with pytest.raises(ValueError):
        solve_pattern_covariance(prob, np.eye(5))


def test_solution_csv(rng):
    sol = solve_pattern(random_problem(rng, 40))
    text = sol.to_csv()
    assert text.startswith("# lambda1")
    assert "t,g" in text and "f,re_G,im_G" in text
