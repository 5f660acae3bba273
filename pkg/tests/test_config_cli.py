import json

import pytest

from pulsefilter import __version__
from pulsefilter.cli import build_parser, main
from pulsefilter.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    flag_name,
    keys,
    load_config,
)
from pulsefilter.noise import read_trace
from pulsefilter.pipeline import PipelineError, run_sweep

SMALL = ["--train-n-pulses", "60", "--power-step", "100e-6", "--wiener-pulses", "40"]


def test_defaults_and_file_precedence(tmp_path):
    cfg = load_config()
    assert len(cfg.sweep.powers()) == 21
    assert cfg.sweep.powers()[-1] == pytest.approx(400e-6)
    p = tmp_path / "run.ini"
    p.write_text("[run]\nseed = 5\nestimators = raw, optimal\n[sweep]\nstop = 2e-4  # watts\n")
    cfg = load_config(p)
    assert cfg.run.seed == 5 and cfg.run.estimators == ("raw", "optimal")
    assert cfg.sweep.stop == 2e-4
    cfg = load_config(p, {"run.seed": "9"})
    assert cfg.run.seed == 9


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        load_config(None, {"sweep.step": "0"}).validate()
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, {"run.colour": "red"})
    with pytest.raises(ConfigError, match="bad value"):
        load_config(None, {"run.seed": "many"})
    with pytest.raises(ConfigError, match="unknown estimators"):
        load_config(None, {"run.estimators": "raw,median"}).validate()
    with pytest.raises(ConfigError):
        load_config(None, {"noise.tech_relative_depth": "1.5"})
    with pytest.raises(ConfigError, match="trace_dir"):
        load_config(None, {"run.trace_dir": str(tmp_path / "nope")}).validate()
    bad = tmp_path / "bad.ini"
    bad.write_text("[colour]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(bad)


def test_config_hash_and_text_round_trip(tmp_path):
    a = ExperimentConfig()
    assert apply_overrides(a, {"run.output_dir": "elsewhere"}).config_hash() == a.config_hash()
    assert apply_overrides(a, {"run.seed": 1}).config_hash() != a.config_hash()
    p = tmp_path / "c.ini"
    p.write_text(a.to_text())
    assert load_config(p).config_hash() == a.config_hash()


def test_every_key_has_a_flag():
    parser = build_parser()
    helptext = parser._subparsers._group_actions[0].choices["sweep"].format_help()
    for k in keys():
        assert flag_name(k) in helptext
    assert flag_name("run.technical_noise") == "--technical-noise"
    assert flag_name("sweep.stop") == "--power-stop"
    assert flag_name("noise.tech_center_freq") == "--noise-tech-center-freq"


def test_sweep_writes_versioned_outputs(tmp_path, capsys):
    out = tmp_path / "res"
    code = main(["sweep", *SMALL, "--output-dir", str(out)])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    summary = json.loads((out / "summary.json").read_text())
    h = summary["config_hash"]
    assert printed["config_hash"] == h and summary["version"] == __version__
    for name in ("fig5_psd.csv", "fig6_var.csv", "fig8_compare.csv", "fig9_angle.csv", "estimates.csv"):
        first = (out / name).read_text().splitlines()[0]
        assert h in first and __version__ in first
    assert set(summary["fits"]) >= {"clean/raw", "tech/raw", "clean/optimal", "tech/optimal"}


def test_raw_only_sweep_without_technical_noise(tmp_path, capsys):
    code = main(["sweep", *SMALL, "--estimators", "raw", "--no-technical-noise",
                 "--output-dir", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert list(out["fits"]) == ["clean/raw"]
    assert abs(out["derived"]["clean_raw_C_sigma"]) < 4


def test_empty_sweep_fails_with_structured_error(capsys):
    assert main(["sweep", "--power-step", "0"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["stage"] == "config" and "empty" in err["message"]


def test_stage_errors_name_the_stage(tmp_path, capsys):
    code = main(["sweep", *SMALL, "--trace-dir", str(tmp_path), "--output-dir", str(tmp_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["stage"].startswith("electronic floor")
    with pytest.raises(PipelineError) as info:
        run_sweep(load_config(None, {"run.trace_dir": str(tmp_path)}))
    assert info.value.stage == "electronic floor"


def test_stage_commands_and_ingest(tmp_path, capsys):
    small = SMALL[:2]
    trace = tmp_path / "t.csv"
    assert main(["simulate", "--power", "2e-4", "--dataset", "tech", "-o", str(trace), *small]) == 0
    v, meta = read_trace(trace)
    assert len(v) == 60 * 625 and meta["seed"]
    capsys.readouterr()
    assert main(["ingest", str(trace), "-o", str(tmp_path / "ingest.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["traces"][0]["n_samples"] == 60 * 625
    assert main(["solve-pattern", "--power", "2e-4", "-o", str(tmp_path / "pat"), *small]) == 0
    info = json.loads(capsys.readouterr().out)["info"]
    assert info["tech_optimal"]["calibration_residual"] < 1e-8
    assert (tmp_path / "pat" / "pattern_tech_optimal.csv").exists()
    assert main(["estimate", "--power", "2e-4", "--estimators", "raw,optimal", "-o",
                 str(tmp_path / "est"), *small]) == 0
    est = json.loads(capsys.readouterr().out)["estimates"]
    assert set(est) == {"clean/raw", "clean/optimal", "clean/optimal_alt", "tech/raw",
                        "tech/optimal", "tech/optimal_alt"}
    bad = tmp_path / "bad.csv"
    bad.write_text(trace.read_text()[:500])
    assert main(["ingest", str(bad)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "TraceFormatError" and "byte" in err["message"]


def test_sweep_from_recorded_traces(tmp_path):
    # traces written by `simulate` under the sweep's names reproduce the sweep
    from pulsefilter.pipeline import noise_levels, simulate_trace, trace_name
    from pulsefilter.noise import write_trace

    cfg = load_config(None, {"train.n_pulses": "40", "sweep.step": "100e-6", "run.estimators": "raw"})
    levels = noise_levels(cfg)
    for i, p in enumerate(cfg.sweep.powers()):
        for d in ("clean", "tech", "clean_char", "tech_char"):
            write_trace(tmp_path / trace_name(d, p), simulate_trace(cfg, d, p, i, levels).v_out)
    write_trace(tmp_path / trace_name("dark", 0.0), simulate_trace(cfg, "dark", 0.0, 0, levels).v_out)
    live = run_sweep(cfg).summary
    replay = run_sweep(apply_overrides(cfg, {"run.trace_dir": str(tmp_path)})).summary
    for a, b in zip(live["per_power"], replay["per_power"]):
        assert b["tech/raw/var"] == pytest.approx(a["tech/raw/var"], rel=1e-12)
    assert replay["fits"]["tech/raw"]["C"] == pytest.approx(live["fits"]["tech/raw"]["C"], rel=1e-9)
