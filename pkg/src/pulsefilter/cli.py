"""Command-line harness.

Subcommands run one pipeline stage each, or the whole sweep::

    pulsefilter simulate --power 4e-4 --dataset tech -o tech.csv
    pulsefilter solve-pattern --power 4e-4 -o patterns/
    pulsefilter estimate --power 4e-4 --estimators raw,optimal -o est/
    pulsefilter sweep --config run.ini --output-dir results/
    pulsefilter ingest traces/*.csv

Every config key is a flag (``--seed``, ``--power-stop``,
``--noise-tech-center-freq``, ...); flags override ``--config``.  Errors exit
nonzero with a one-line JSON report on stderr naming the failed stage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, flag_name, keys, load_config
from .noise import TraceFormatError, cell_seed, read_trace, spec_hash, write_trace
from .pattern import solution_csv
from .pipeline import (
    PipelineError,
    _Stage,
    electronic_floor,
    noise_levels,
    run_cell,
    run_sweep,
    simulate_trace,
)
from .waveform import fft

EXIT_CONFIG = 2
EXIT_STAGE = 1


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value per section, SI units)")
    g = p.add_argument_group("config keys (override the file)")
    for key, (section, name, typ) in keys().items():
        flag = flag_name(key)
        if typ is bool:
            g.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None,
                           help=f"[{section}] {name}")
        else:
            g.add_argument(flag, dest=key, default=None, metavar=name.upper(), help=f"[{section}] {name}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pulsefilter", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"pulsefilter {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one synthetic trace")
    p.add_argument("--power", type=float, required=True, help="mean optical power (W)")
    p.add_argument("--dataset", default="clean",
                   choices=("clean", "tech", "dark", "clean_char", "tech_char"))
    p.add_argument("--index", type=int, default=0, help="sweep cell index (selects the seed)")
    p.add_argument("-o", "--out", required=True, help="output trace CSV")
    _add_config_flags(p)

    p = sub.add_parser("solve-pattern", help="characterise noise and solve the optimal pattern")
    p.add_argument("--power", type=float, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("estimate", help="apply the selected estimators at one power")
    p.add_argument("--power", type=float, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="full power sweep with fits and figure data")
    _add_config_flags(p)

    p = sub.add_parser("ingest", help="validate recorded traces and report their metadata")
    p.add_argument("paths", nargs="+")
    p.add_argument("-o", "--out", help="write the report as JSON here")
    return ap


def _config(args, **fixed) -> ExperimentConfig:
    over = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    over.update(fixed)
    return load_config(args.config, over).validate()


def _header(cfg: ExperimentConfig) -> dict:
    return {"version": __version__, "config_hash": cfg.config_hash()}


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def cmd_simulate(args) -> int:
    cfg = _config(args)
    with _Stage("simulate"):
        tr = simulate_trace(cfg, args.dataset, args.power, args.index)
    with _Stage("write outputs"):
        write_trace(args.out, tr.v_out, seed=cell_seed(cfg.run.seed, args.dataset, args.index),
                    spec_hash=spec_hash(cfg.config_hash(), args.dataset, args.power, args.index))
    _emit({**_header(cfg), "out": args.out, "n_samples": len(tr.v_out), "dt": tr.v_out.dt})
    return 0


def _one_cell(cfg: ExperimentConfig, power: float, index: int):
    with _Stage("noise levels"):
        levels = noise_levels(cfg)
    with _Stage("electronic floor"):
        _, electronic = electronic_floor(cfg, levels)
    return run_cell(cfg, levels, electronic, index, power)


def cmd_solve_pattern(args) -> int:
    cfg = _config(args, **{"run.estimators": "optimal"})
    cell = _one_cell(cfg, args.power, args.index)
    out = Path(args.out)
    with _Stage("write outputs"):
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for (d, label), (g, cal) in sorted(cell.patterns.items()):
            meta = {**_header(cfg), "dataset": d, "label": label, "power_W": args.power,
                    "offset": cal.offset, "scale": cal.scale}
            p = out / f"pattern_{d}_{label}.csv"
            p.write_text(solution_csv(g, fft(g), meta))
            written.append(str(p))
    _emit({**_header(cfg), "files": written, "info": cell.info})
    return 0


def cmd_estimate(args) -> int:
    cfg = _config(args)
    cell = _one_cell(cfg, args.power, args.index)
    out = Path(args.out)
    stats = {}
    with _Stage("write outputs"):
        out.mkdir(parents=True, exist_ok=True)
        head = f"# pulsefilter {__version__} config_hash={cfg.config_hash()}\n"
        body = "".join(s.to_csv() if i == 0 else s.to_csv().split("\n", 1)[1]
                       for i, s in enumerate(cell.series[k] for k in sorted(cell.series)))
        (out / "estimates.csv").write_text(head + body)
        for (d, label), s in sorted(cell.series.items()):
            stats[f"{d}/{label}"] = {"mean": s.mean, "var": s.var, "var_se": s.var_se, "n": len(s)}
    _emit({**_header(cfg), "power_W": args.power, "estimates": stats})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    report = run_sweep(cfg, write=True)
    s = report.summary
    _emit({**_header(cfg), "output_dir": cfg.run.output_dir, "levels": s["levels"],
           "derived": s["derived"],
           "fits": {k: {x: v[x] for x in ("A", "B", "C", "sigma_C")} for k, v in s["fits"].items()}})
    return 0


def cmd_ingest(args) -> int:
    rows = []
    for path in args.paths:
        with _Stage(f"ingest {path}"):
            v, meta = read_trace(path)
            rows.append({"path": str(path), "n_samples": len(v), "dt": v.dt, "unit": v.unit,
                         "seed": meta.get("seed", ""), "spec_hash": meta.get("spec_hash", ""),
                         "sha256": hashlib.sha256(Path(path).read_bytes()).hexdigest(),
                         "mean": float(np.mean(v.samples)), "std": float(np.std(v.samples))})
    report = {"version": __version__, "traces": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    _emit(report)
    return 0


COMMANDS = {"simulate": cmd_simulate, "solve-pattern": cmd_solve_pattern, "estimate": cmd_estimate,
            "sweep": cmd_sweep, "ingest": cmd_ingest}


def _fail(stage: str, exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except PipelineError as exc:
        cause = exc.cause
        if isinstance(cause, ConfigError):
            return _fail("config", cause, EXIT_CONFIG)
        err = {"error": type(cause).__name__, "stage": exc.stage, "message": str(cause)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_STAGE
    except (TraceFormatError, OSError) as exc:
        return _fail("io", exc, EXIT_STAGE)


if __name__ == "__main__":
    sys.exit(main())
