"""Power sweep: simulate (or load) traces, characterise the noise, solve the
pattern functions, evaluate every estimator and fit the variance curves.

Datasets per power ``P`` (seeded independently per cell):

``clean_char`` / ``tech_char``
    characterisation traces without / with technical noise; they feed the
    noise model, the optimal pattern and the Wiener filter.
``clean`` / ``tech``
    evaluation traces, never used for characterisation.

A single ``dark`` trace (no light) gives the electronic floor.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .detector import DetectorModel
from .estimators import (
    Calibration,
    EstimateSeries,
    angle_noise,
    calibrate,
    dS_dphi,
    dS_dphi_numeric,
    electronic_variance,
    estimate_all,
    fit_series,
    paired_difference_se,
    raw_pattern,
    segment_pulses,
    shot_noise_slope,
    technical_variance,
)
from .noise import (
    NoiseSpec,
    PulseTrainSpec,
    Train,
    cell_seed,
    extract_noise_params,
    gather,
    generate_train,
    psd,
    read_trace,
    windowed_psd,
)
from .pattern import (
    build_problem,
    covariance_from_psd,
    solve_pattern,
    solve_pattern_covariance,
    technical_covariance,
)
from .waveform import PulseWindow, SampledWaveform
from .wiener import ideal_window, reference_spectra, wiener_filter

POWER_UNIT = 1e-6  # fits and plot files use microwatts
DATASETS = ("clean", "tech")


class PipelineError(RuntimeError):
    """A sweep stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


# noise levels ----------------------------------------------------------------

@dataclass(frozen=True)
class Levels:
    """Noise settings actually used, with the raw-estimator reference numbers."""

    noise: NoiseSpec
    shot_slope: float  # raw shot variance per photon
    raw_shot_var_top: float
    raw_tech_var_top: float
    raw_elec_var: float

    def to_dict(self) -> dict:
        return {"electronic_psd": self.noise.electronic_psd,
                "tech_relative_depth": self.noise.tech_relative_depth,
                "raw_shot_slope_per_photon": self.shot_slope,
                "raw_shot_var_top": self.raw_shot_var_top,
                "raw_tech_var_top": self.raw_tech_var_top,
                "raw_electronic_var": self.raw_elec_var}


def reference_window(ts: PulseTrainSpec, m: DetectorModel) -> PulseWindow:
    """Window of the first pulse; every window shares its cell offset."""
    probe = SampledWaveform(np.zeros(ts.period_samples), ts.dt)
    return segment_pulses(probe, ts.with_params(n_pulses=1), m)[0]


def noise_levels(cfg: ExperimentConfig) -> Levels:
    """Set the electronic floor and technical depth from the raw estimator.

    With ``run.electronic_ratio`` the raw estimator's electronic variance is
    that multiple of its shot variance at the top power; with ``run.tech_db``
    its technical variance at the top power exceeds the shot variance by
    that many dB.  Both use the analytic variances, so no simulation is
    involved and the result is deterministic.
    """
    m, run = cfg.detector, cfg.run
    top = cfg.train.with_params(mean_power=float(cfg.sweep.powers()[-1]))
    win = reference_window(top, m)
    raw = raw_pattern(top, m, win)
    cal = calibrate(raw, top, m, win)
    slope = shot_noise_slope(raw, cal, top, m, win)
    shot_top = slope * top.photons_per_pulse
    ns = cfg.noise
    if run.electronic_ratio is not None:
        unit = electronic_variance(raw, cal, top, 1.0)
        ns = ns.with_params(electronic_psd=run.electronic_ratio * shot_top / unit)
    if not run.technical_noise:
        ns = ns.with_params(tech_relative_depth=0.0)
    elif run.tech_db is not None:
        unit = technical_variance(raw, cal, top, ns.with_params(tech_relative_depth=0.5), m, win) / 0.25
        depth = math.sqrt(10 ** (run.tech_db / 10) * shot_top / unit)
        if depth >= 1:
            raise ValueError(f"technical depth {depth:.3f} needed for {run.tech_db} dB is >= 1")
        ns = ns.with_params(tech_relative_depth=depth)
    tech_top = technical_variance(raw, cal, top, ns, m, win) if ns.tech_relative_depth > 0 else 0.0
    return Levels(ns, slope, shot_top, tech_top, electronic_variance(raw, cal, top, ns.electronic_psd))


# traces ----------------------------------------------------------------------

def trace_name(dataset: str, power: float) -> str:
    return f"{dataset}_P{power / POWER_UNIT:.3f}uW.csv"


def _train(cfg: ExperimentConfig, ns: NoiseSpec, dataset: str, power: float, index: int) -> Train:
    ts = cfg.train.with_params(mean_power=float(power))
    if cfg.run.trace_dir:
        v, meta = read_trace(Path(cfg.run.trace_dir) / trace_name(dataset, power))
        return Train(v, None)
    tech = dataset.startswith("tech") and cfg.run.technical_noise
    spec = ns.with_params(seed=cell_seed(cfg.run.seed, dataset, index),
                          tech_relative_depth=ns.tech_relative_depth if tech else 0.0)
    return generate_train(ts, spec, cfg.detector)


def simulate_trace(cfg: ExperimentConfig, dataset: str, power: float, index: int = 0,
                   levels: Levels | None = None) -> Train:
    """One trace exactly as the sweep would produce it for cell ``index``."""
    if dataset not in ("dark", "clean", "tech", "clean_char", "tech_char"):
        raise ValueError(f"unknown dataset {dataset!r}")
    levels = levels or noise_levels(cfg)
    return _train(cfg, levels.noise, dataset, float(power), index)


def electronic_floor(cfg: ExperimentConfig, levels: Levels):
    """Electronic PSD measured on the dark trace (two-sided, per window)."""
    dark = _train(cfg, levels.noise, "dark", 0.0, 0)
    ts0 = cfg.train.with_params(mean_power=0.0)
    windows = segment_pulses(dark.v_out, ts0, cfg.detector)
    return dark, extract_noise_params(*(windowed_psd(dark.v_out, windows),) * 3,
                                      smooth_bins=cfg.run.smooth_bins).electronic


# one power --------------------------------------------------------------------

@dataclass
class CellResult:
    power: float
    series: dict = field(default_factory=dict)  # (dataset, label) -> EstimateSeries
    patterns: dict = field(default_factory=dict)  # label -> (pattern, calibration)
    info: dict = field(default_factory=dict)


def _char_segments(train: Train, windows):
    return gather(train.v_out.samples, windows)


def run_cell(cfg: ExperimentConfig, levels: Levels, electronic, index: int, power: float) -> CellResult:
    """Characterise, solve and evaluate at one power."""
    m, run = cfg.detector, cfg.run
    ts = cfg.train.with_params(mean_power=float(power))
    ns = levels.noise
    out = CellResult(float(power))
    sel = set(run.estimators)
    datasets = DATASETS if run.technical_noise else ("clean",)

    with _Stage(f"simulate P={power:.3e} W"):
        traces = {d: _train(cfg, ns, d, power, index) for d in datasets}
        chars = {d: _train(cfg, ns, d + "_char", power, index) for d in datasets}
    windows = segment_pulses(traces["clean"].v_out, ts, m)
    win0 = windows[0]
    raw = raw_pattern(ts, m, win0)
    # the pattern problem needs a nonzero mean pulse; at zero power only its
    # shape matters, so a nominal power stands in
    shape_ts = ts if power > 0 else ts.with_params(mean_power=cfg.sweep.powers()[-1])
    flux = SampledWaveform(shape_ts.cell_shape()[win0.start % ts.period_samples:][: len(win0)],
                           ts.dt, 0.0, "flux")

    patterns: dict[tuple, tuple] = {}
    if "raw" in sel:
        with _Stage("calibrate raw"):
            cal = calibrate(raw, ts, m, win0)
            for d in datasets:
                patterns[(d, "raw")] = (raw, cal)

    if "optimal" in sel:
        with _Stage(f"characterise noise P={power:.3e} W"):
            pe = electronic
            clean_segs = _char_segments(chars["clean"], windows)
            Rn = covariance_from_psd(pe)
        for d in datasets:
            with _Stage(f"solve pattern ({d}) P={power:.3e} W"):
                prob = build_problem(m, flux, pe)
                segs = _char_segments(chars[d], windows)
                R = Rn
                if d != "clean":
                    R = Rn + technical_covariance(segs, clean_segs, run.tech_rank)
                sol = solve_pattern_covariance(prob, R)
                params = extract_noise_params(windowed_psd(chars[d].v_out, windows),
                                              windowed_psd(chars["clean"].v_out, windows),
                                              pe, smooth_bins=run.smooth_bins)
                spec_sol = solve_pattern(build_problem(m, flux, params.denominator()))
                main, alt = (sol, spec_sol) if run.solver == "covariance" else (spec_sol, sol)
                for label, s in (("optimal", main), ("optimal_alt", alt)):
                    g = s.g
                    patterns[(d, label)] = (g, calibrate(g, ts, m, win0))
                out.info[f"{d}_optimal"] = {
                    "lambda1": main.lambda1, "lambda2": main.lambda2, "N_sigma": main.N_sigma,
                    "orthogonality_residual": main.orthogonality_residual,
                    "calibration_residual": main.calibration_residual,
                }

    if "wiener" in sel and power > 0:
        for d in datasets:
            with _Stage(f"wiener filter ({d}) P={power:.3e} W"):
                # differential part only: the common-mode residual is removed by the offset
                ideal = ideal_window(ts, m, win0, run.wiener_reference)
                ideal = ideal.replace(ideal.samples - ideal_window(ts, m, win0, 0.0).samples)
                auto, cross = reference_spectra(chars[d].v_out, ideal, windows, run.wiener_pulses)
                f = wiener_filter(auto, cross, n_pulses=min(run.wiener_pulses, len(windows)))
                f = f.with_raw(raw)
                patterns[(d, "wiener")] = (f.pattern, calibrate(f.pattern, ts, m, win0))

    with _Stage(f"estimate P={power:.3e} W"):
        for (d, label), (g, cal) in sorted(patterns.items()):
            kind = "optimal" if label.startswith("optimal") else label
            out.series[(d, label)] = estimate_all(
                traces[d].v_out, windows, g, cal, kind=kind, power=float(power),
                seed=cell_seed(run.seed, d, index), truth=traces[d].truth, label=f"{d}/{label}")
            out.patterns[(d, label)] = (g, cal)
    return out


# the sweep -------------------------------------------------------------------

@dataclass
class SweepReport:
    summary: dict
    files: dict  # file name -> text
    cells: list = field(default_factory=list, repr=False)
    levels: Levels | None = None

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.files):
            p = d / name
            p.write_text(self.files[name])
            written.append(p)
        return written


def _cell_job(args):
    cfg, levels, electronic, index, power = args
    return run_cell(cfg, levels, electronic, index, power)


def run_sweep(cfg: ExperimentConfig, *, write: bool = False, keep_cells: bool = False) -> SweepReport:
    """Run every power of the sweep and assemble the report bundle."""
    with _Stage("config"):
        cfg.validate()
    powers = cfg.sweep.powers()
    with _Stage("noise levels"):
        levels = noise_levels(cfg)
    with _Stage("electronic floor"):
        dark, electronic = electronic_floor(cfg, levels)

    jobs = [(cfg, levels, electronic, i, float(p)) for i, p in enumerate(powers)]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(cfg.run.workers) as ex:
            cells = list(ex.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]

    with _Stage("fit and report"):
        report = _assemble(cfg, levels, cells, dark)
    if keep_cells:
        report.cells = cells
    report.levels = levels
    if write:
        with _Stage("write outputs"):
            report.write(cfg.run.output_dir)
    return report


def _header(cfg: ExperimentConfig) -> str:
    return f"# pulsefilter {__version__} config_hash={cfg.config_hash()}\n"


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _fit_or_none(series):
    series = [s for s in series if s is not None]
    if len(series) < 4:
        return None
    return fit_series(series, POWER_UNIT)


def _assemble(cfg: ExperimentConfig, levels: Levels, cells: list[CellResult], dark: Train) -> SweepReport:
    powers = [c.power for c in cells]
    labels = sorted({k for c in cells for k in c.series})
    get = lambda c, k: c.series.get(k)  # noqa: E731
    top = cfg.train.with_params(mean_power=powers[-1])
    files: dict[str, str] = {}
    head = _header(cfg)

    fits = {}
    for k in labels:
        fit = _fit_or_none([get(c, k) for c in cells])
        if fit is not None:
            fits["/".join(k)] = fit
    summary: dict = {
        "tool": "pulsefilter", "version": __version__, "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(), "levels": levels.to_dict(),
        "powers_W": powers, "power_unit_W": POWER_UNIT,
        "fits": {k: v.to_dict() for k, v in sorted(fits.items())},
    }
    # analytic shot slope of the raw estimator in fit units (photons^2 per uW)
    b_shot = levels.shot_slope * top.photons_per_pulse / (powers[-1] / POWER_UNIT)
    summary["raw_shot_slope_analytic"] = b_shot
    p_max = powers[-1] / POWER_UNIT
    derived = {}
    if "clean/raw" in fits:
        f = fits["clean/raw"]
        derived["clean_raw_B_over_analytic"] = f.B / b_shot
        derived["clean_raw_C_sigma"] = f.C / f.sigma_C
    if "tech/raw" in fits:
        f = fits["tech/raw"]
        derived["tech_raw_C_sigma"] = f.C / f.sigma_C
        derived["tech_raw_ratio_db"] = f.ratio_db(p_max) if f.C > 0 and f.B > 0 else None
    if "tech/optimal" in fits and "clean/optimal" in fits:
        fn, fc = fits["tech/optimal"], fits["clean/optimal"]
        derived["tech_optimal_C_sigma"] = fn.C / fn.sigma_C
        derived["slope_ratio_noisy_over_clean"] = fn.B / fc.B
        derived["slope_ratio_clean_over_noisy"] = fc.B / fn.B
        # linear fits read both curves as straight lines in power
        derived["linear_slope_ratio_noisy_over_clean"] = float(fn.linear.coef[1] / fc.linear.coef[1])
    summary["derived"] = derived

    # per-power table, ordering and bias checks
    rows = []
    for c in cells:
        row = {"power_W": c.power}
        for k in labels:
            s = get(c, k)
            if s is None:
                continue
            name = "/".join(k)
            row[f"{name}/var"] = s.var
            row[f"{name}/var_se"] = s.var_se
            row[f"{name}/mean"] = s.mean
            if s.truth is not None:
                row[f"{name}/bias_z"] = s.bias_z()
        if c.power > 0:
            ts = cfg.train.with_params(mean_power=c.power)
            d = dS_dphi(ts)
            row["dS_dphi"] = d
            for k in labels:
                s = get(c, k)
                if s is not None:
                    a = angle_noise(s, d)
                    row["/".join(k) + "/var_phi"] = a.var_phi
                    row["/".join(k) + "/var_phi_se"] = a.var_phi_se
            order = {}
            o, w, r = (get(c, ("tech", x)) for x in ("optimal", "wiener", "raw"))
            if o is not None and w is not None and r is not None:
                d1, se1 = paired_difference_se(w, o)
                d2, se2 = paired_difference_se(r, w)
                order = {"wiener_minus_optimal": d1, "wiener_minus_optimal_se": se1,
                         "raw_minus_wiener": d2, "raw_minus_wiener_se": se2,
                         "ordered_2se": bool(d1 >= 2 * se1 and d2 >= 2 * se2)}
            row["ordering"] = order
        row["info"] = c.info
        rows.append(row)
    summary["per_power"] = rows

    # finite-difference check of dS/dphi for each pattern at the top power
    last = cells[-1]
    if last.patterns:
        win0 = reference_window(top, cfg.detector)
        fd = {}
        for k, (g, cal) in sorted(last.patterns.items()):
            fd["/".join(k)] = dS_dphi_numeric(g, cal, top, cfg.detector, win0) / dS_dphi(top) - 1
        summary["dS_dphi_fd_relative_error"] = fd

    files["summary.json"] = json.dumps(_jsonable(summary), sort_keys=True, indent=1) + "\n"
    files.update(_figure_files(cfg, cells, labels, fits, dark, head))
    files["estimates.csv"] = head + _estimates_csv(cells)
    return SweepReport(json.loads(files["summary.json"]), files)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _estimates_csv(cells) -> str:
    buf = io.StringIO()
    buf.write("dataset,estimator,power_W,pulse,estimate,truth\n")
    for c in cells:
        for (d, label), s in sorted(c.series.items()):
            tr = s.truth if s.truth is not None else [None] * len(s)
            for i, (x, t) in enumerate(zip(s.values, tr)):
                buf.write(f"{d},{label},{float(c.power)!r},{i},{float(x)!r},{_f(t)}\n")
    return buf.getvalue()


def _table(head: str, cols: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(head)
    buf.write(",".join(cols) + "\n")
    for r in rows:
        buf.write(",".join(_f(x) for x in r) + "\n")
    return buf.getvalue()


def _figure_files(cfg, cells, labels, fits, dark, head) -> dict:
    files = {}
    powers = [c.power for c in cells]
    pu = [p / POWER_UNIT for p in powers]

    def col(k, attr):
        return [getattr(c.series[k], attr) if k in c.series else None for c in cells]

    def fitcol(name):
        f = fits.get(name)
        return [f.A + f.B * p + f.C * p * p if f else None for p in pu]

    # variance of the raw estimator with and without technical noise
    keys6 = [k for k in (("clean", "raw"), ("tech", "raw")) if k in labels]
    cols, data = ["power_uW"], [pu]
    for k in keys6:
        n = "_".join(k)
        cols += [f"var_{n}", f"var_se_{n}", f"fit_{n}"]
        data += [col(k, "var"), col(k, "var_se"), fitcol("/".join(k))]
    files["fig6_var.csv"] = _table(head, cols, list(zip(*data)))

    # optimal (and the other estimators) on clean and noisy data
    cols, data = ["power_uW"], [pu]
    for k in labels:
        n = "_".join(k)
        cols += [f"var_{n}", f"var_se_{n}", f"fit_{n}"]
        data += [col(k, "var"), col(k, "var_se"), fitcol("/".join(k))]
    files["fig8_compare.csv"] = _table(head, cols, list(zip(*data)))

    # angle noise
    cols, data = ["power_uW"], [pu]
    for k in labels:
        n = "_".join(k)
        vp, se = [], []
        for c in cells:
            s = c.series.get(k)
            if s is None or c.power <= 0:
                vp.append(None)
                se.append(None)
                continue
            a = angle_noise(s, dS_dphi(cfg.train.with_params(mean_power=c.power)))
            vp.append(a.var_phi)
            se.append(a.var_phi_se)
        cols += [f"var_phi_{n}", f"var_phi_se_{n}"]
        data += [vp, se]
    files["fig9_angle.csv"] = _table(head, cols, list(zip(*data)))

    files["fig5_psd.csv"] = head + _psd_table(cfg, dark)
    return files


def _psd_table(cfg: ExperimentConfig, dark: Train) -> str:
    """Welch PSDs at the top power: with and without technical noise, and dark."""
    levels = noise_levels(cfg)
    p = float(cfg.sweep.powers()[-1])
    n_idx = len(cfg.sweep.powers()) - 1
    seg = 4 * cfg.train.period_samples
    curves = {"electronic": psd(dark.v_out, seg)}
    curves["no_tech"] = psd(_train(cfg, levels.noise, "clean", p, n_idx).v_out, seg)
    if cfg.run.technical_noise:
        curves["with_tech"] = psd(_train(cfg, levels.noise, "tech", p, n_idx).v_out, seg)
    names = [k for k in ("with_tech", "no_tech", "electronic") if k in curves]
    ref = curves["electronic"]
    sm = {}
    if "with_tech" in curves:
        params = extract_noise_params(curves["with_tech"], curves["no_tech"], ref,
                                      smooth_bins=cfg.run.smooth_bins)
        sm = {"technical": params.technical, "shot": params.shot}
    buf = io.StringIO()
    buf.write(",".join(["freq_Hz"] + [f"psd_{n}" for n in names] + [f"psd_{n}" for n in sm]) + "\n")
    for i, f in enumerate(ref.freqs):
        vals = [curves[n].bins[i].real for n in names] + [sm[n].bins[i].real for n in sm]
        buf.write(",".join([repr(float(f))] + [repr(float(v)) for v in vals]) + "\n")
    return buf.getvalue()
