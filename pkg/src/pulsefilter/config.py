"""Experiment configuration: ``key = value`` files in SI units.

A config file has up to five sections::

    [train]      pulse train (PulseTrainSpec fields)
    [noise]      noise sources (NoiseSpec fields)
    [detector]   detector model (DetectorModel fields)
    [sweep]      start, stop, step (watts)
    [run]        seed, estimators, output_dir and pipeline knobs

Every key is also a command-line flag (see :func:`flag_name`), and flags
override the file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .detector import DetectorModel
from .estimators import KINDS
from .noise import NoiseSpec, PulseTrainSpec

SECTIONS = ("train", "noise", "detector", "sweep", "run")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    start: float = 0.0
    stop: float = 400e-6
    step: float = 20e-6

    def powers(self) -> np.ndarray:
        if not (self.step > 0) or self.stop < self.start or self.start < 0:
            raise ConfigError(
                f"empty or invalid power sweep: start={self.start}, stop={self.stop}, step={self.step}"
            )
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(n)


@dataclass(frozen=True)
class RunSpec:
    """Pipeline knobs.

    ``electronic_ratio`` and ``tech_db`` set the electronic-noise floor and
    the technical-noise depth from the raw estimator at the top power
    (electronic variance relative to shot variance, and technical excess
    over shot in dB).  Set either to ``none`` to use the ``[noise]`` values
    as given.  ``wiener_reference`` is ``sin(2 phi)`` of the reference
    pulse the Wiener filter is designed for.
    """

    seed: int = 20240501
    estimators: tuple = KINDS
    output_dir: str = "results"
    technical_noise: bool = True
    electronic_ratio: float | None = 0.47
    tech_db: float | None = 10.0
    tech_rank: int = 8
    solver: str = "covariance"
    smooth_bins: int = 5
    wiener_pulses: int = 100
    wiener_reference: float = 1e-3
    trace_dir: str = ""
    workers: int = 1

    def check(self) -> None:
        if not self.estimators:
            raise ConfigError("no estimators selected")
        bad = [e for e in self.estimators if e not in KINDS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; choose from {KINDS}")
        if self.solver not in ("covariance", "spectral"):
            raise ConfigError("solver must be 'covariance' or 'spectral'")
        if self.tech_rank < 1 or self.smooth_bins < 1 or self.wiener_pulses < 1 or self.workers < 1:
            raise ConfigError("tech_rank, smooth_bins, wiener_pulses and workers must be >= 1")
        if not (0 < abs(self.wiener_reference) <= 1):
            raise ConfigError("wiener_reference (sin 2phi of the reference pulse) must lie in (0, 1]")
        if self.trace_dir and not Path(self.trace_dir).is_dir():
            raise ConfigError(f"trace_dir {self.trace_dir!r} does not exist")


@dataclass(frozen=True)
class ExperimentConfig:
    train: PulseTrainSpec = field(default_factory=PulseTrainSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    detector: DetectorModel = field(default_factory=DetectorModel)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def validate(self) -> "ExperimentConfig":
        self.sweep.powers()
        self.run.check()
        self.train.check_grid()
        if self.sweep.stop <= 0:
            raise ConfigError("the sweep needs a positive top power")
        return self

    def to_dict(self) -> dict:
        return {s: _plain(asdict(getattr(self, s))) for s in SECTIONS}

    def config_hash(self) -> str:
        """Hash of everything that affects results (not paths or worker count)."""
        d = self.to_dict()
        for k in ("output_dir", "workers", "trace_dir"):
            d["run"].pop(k)
        payload = json.dumps(d, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for s, vals in self.to_dict().items():
            cp[s] = {k: _fmt(v) for k, v in vals.items()}
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _plain(d):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section_type(section: str):
    return {"train": PulseTrainSpec, "noise": NoiseSpec, "detector": DetectorModel,
            "sweep": SweepSpec, "run": RunSpec}[section]


def keys() -> dict[str, tuple[str, str, type]]:
    """All config keys as ``section.name -> (section, name, default type)``."""
    out = {}
    for s in SECTIONS:
        for f in fields(_section_type(s)):
            out[f"{s}.{f.name}"] = (s, f.name, type(getattr(_section_type(s)(), f.name)))
    return out


def flag_name(key: str) -> str:
    """Command-line flag for a config key; ``run`` and ``sweep`` keys are short."""
    s, name = key.split(".")
    if s == "run":
        return "--" + name.replace("_", "-")
    if s == "sweep":
        return "--power-" + name
    return f"--{s}-{name.replace('_', '-')}"


def parse_value(key: str, text: str):
    s, name, typ = keys()[key]
    t = str(text).strip()
    try:
        if name in ("electronic_ratio", "tech_db"):
            return None if t.lower() in ("none", "") else float(t)
        if name == "estimators":
            return tuple(x.strip() for x in t.split(",") if x.strip())
        if typ is bool:
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if typ is int:
            return int(t)
        if typ is float:
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Return ``cfg`` with ``section.name -> value`` overrides applied."""
    known = keys()
    per: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, val in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        s, name, _ = known[key]
        per[s][name] = parse_value(key, val) if isinstance(val, str) else val
    try:
        return ExperimentConfig(**{s: replace(getattr(cfg, s), **per[s]) if per[s] else getattr(cfg, s)
                                   for s in SECTIONS})
    except (TypeError, ValueError, NotImplementedError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    vals: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} not found")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
        for s in cp.sections():
            if s not in SECTIONS:
                raise ConfigError(f"{p}: unknown section [{s}]")
            for k, v in cp[s].items():
                vals[f"{s}.{k}"] = v
    vals.update(overrides or {})
    return apply_overrides(ExperimentConfig(), vals)
