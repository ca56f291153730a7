"""Experiment configuration: an INI file with sections ``system``, ``kernel``,
``grid``, ``run`` and ``output``. Unknown sections or keys are errors.

Defaults reproduce the three-level dephasing example:
``A = diag(1, 0, -1)``, ``D(tau, s) = exp(-|tau - s|)``, ``S = 0``,
``psi0 = (1, 1, 1) / sqrt(3)``, ``t_max = 3``, ``dt = 0.01``, ``N = 1000``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .errors import ConfigError

MODES = ("linear-traj", "nonlinear-traj", "density", "histogram", "validate", "covariance-check")
KERNELS = ("exponential", "single_mode", "from_coupling")
RELATIONS = ("zero", "equal")


@dataclass(frozen=True)
class SystemSection:
    a: Optional[str] = "1 0 -1"
    A: Optional[str] = None
    H0: Optional[str] = None
    psi0: str = "1 1 1"


@dataclass(frozen=True)
class KernelSection:
    name: str = "exponential"
    rate: float = 1.0
    omega0: float = 1.0
    coupling_file: Optional[str] = None
    relation: str = "zero"


@dataclass(frozen=True)
class GridSection:
    t_max: float = 3.0
    dt: float = 0.01


@dataclass(frozen=True)
class RunSection:
    mode: str = "linear-traj"
    n_xi: int = 1000
    n_eta: int = 1000
    seed: int = 2017
    scheme: str = "exp_midpoint"
    j_policy: str = "real_field"
    inner: str = "mc"
    times: str = "1 3"
    n_nonlinear: int = 1000
    n_reweighted: int = 100000
    repetitions: int = 0
    threads: int = 1
    xi_file: Optional[str] = None


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    formats: str = "csv,json"


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    grid: GridSection = field(default_factory=GridSection)
    run: RunSection = field(default_factory=RunSection)
    output: OutputSection = field(default_factory=OutputSection)

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **flat) -> "ExperimentConfig":
        """Replace ``section.key`` entries given as ``{"run.seed": 3, ...}``."""
        cfg = self
        for dotted, value in flat.items():
            if value is None:
                continue
            sec, key = dotted.split(".")
            part = getattr(cfg, sec)
            cfg = replace(cfg, **{sec: replace(part, **{key: _coerce(part, key, value, sec)})})
        return cfg

    @property
    def times(self) -> list[float]:
        return [float(t) for t in self.run.times.replace(",", " ").split()]


_SECTION_CLASSES = {
    "system": SystemSection,
    "kernel": KernelSection,
    "grid": GridSection,
    "run": RunSection,
    "output": OutputSection,
}


def _coerce(part, key, raw, sec):
    typ = {f.name: f.type for f in fields(type(part))}.get(key)
    if typ is None:
        raise ConfigError(f"unknown key {sec}.{key}")
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return None if raw == "" else str(raw)
    except ValueError as exc:
        raise ConfigError(f"{sec}.{key}: cannot parse {raw!r}") from exc


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; missing sections and keys take their defaults."""
    cfg = ExperimentConfig()
    if path is None:
        return validate_config(cfg)
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    flat = {}
    for sec in parser.sections():
        if sec not in _SECTION_CLASSES:
            raise ConfigError(f"unknown section [{sec}]")
        for key, value in parser.items(sec):
            flat[f"{sec}.{key}"] = value
    if "system.A" in flat and "system.a" not in flat:
        flat["system.a"] = ""
    base = os.path.dirname(os.path.abspath(path))
    cfg = cfg.with_overrides(**flat)
    for dotted in ("kernel.coupling_file", "run.xi_file"):
        sec, key = dotted.split(".")
        value = getattr(getattr(cfg, sec), key)
        if value and not os.path.isabs(value):
            cfg = cfg.with_overrides(**{dotted: os.path.join(base, value)})
    return validate_config(cfg)


def parse_vector(text: str, key: str) -> np.ndarray:
    try:
        return np.array([complex(tok) for tok in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse vector {text!r}") from exc


def parse_matrices(text: str, key: str) -> np.ndarray:
    """JSON nested lists; entries are numbers or strings accepted by ``complex``."""
    try:
        raw = json.loads(text)
        arr = np.array(_complexify(raw), dtype=complex)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse matrix {text!r}") from exc
    return arr


def _complexify(x):
    if isinstance(x, list):
        return [_complexify(v) for v in x]
    return complex(x.replace(" ", "")) if isinstance(x, str) else complex(x)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    r, k, g, s = cfg.run, cfg.kernel, cfg.grid, cfg.system
    if r.mode not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {r.mode!r}")
    if k.name not in KERNELS:
        raise ConfigError(f"kernel.name must be one of {KERNELS}, got {k.name!r}")
    if k.relation not in RELATIONS:
        raise ConfigError(f"kernel.relation must be one of {RELATIONS}")
    if k.name == "from_coupling" and not (k.coupling_file and os.path.exists(k.coupling_file)):
        raise ConfigError("kernel.coupling_file must name an existing file")
    if r.xi_file and not os.path.exists(r.xi_file):
        raise ConfigError(f"run.xi_file {r.xi_file} does not exist")
    if not g.dt > 0:
        raise ConfigError("grid.dt must be positive")
    if not g.t_max > 0:
        raise ConfigError("grid.t_max must be positive")
    M = int(round(g.t_max / g.dt)) + 1
    if M < 2 or abs(g.t_max - (M - 1) * g.dt) > 1e-12 * g.t_max:
        raise ConfigError("grid.t_max must be a multiple of grid.dt")
    for key in ("n_xi", "n_eta", "n_nonlinear", "n_reweighted"):
        if getattr(r, key) < 2:
            raise ConfigError(f"run.{key} must be >= 2")
    if r.threads < 1:
        raise ConfigError("run.threads must be >= 1")
    if r.scheme not in ("euler", "exp_midpoint"):
        raise ConfigError("run.scheme must be euler or exp_midpoint")
    if r.j_policy not in ("real_field", "diagonal_shift"):
        raise ConfigError("run.j_policy must be real_field or diagonal_shift")
    if r.inner not in ("oracle", "mc"):
        raise ConfigError("run.inner must be oracle or mc")
    try:
        times = cfg.times
    except ValueError as exc:
        raise ConfigError(f"run.times: {exc}") from exc
    for t in times if r.mode in ("density", "histogram") else ():
        if not 0 <= t <= g.t_max + 1e-12:
            raise ConfigError(f"run.times entry {t} outside the grid")
    if s.a and s.A:
        raise ConfigError("system: give either a (diagonal shorthand) or A, not both")
    if not s.a and not s.A:
        raise ConfigError("system.a or system.A is required")
    return cfg
