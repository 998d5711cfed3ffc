"""Model and verifier configuration, config-file parsing and hashing."""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .kernel import HurstParams
from .spectral import SpectralField, collocation_grid, transform

SOLVERS = ("exponential", "picard")
SAMPLERS = ("volterra", "cholesky")


def _default_eps_grid():
    return tuple(2.0 ** -j for j in range(2, 10))


@dataclass(frozen=True)
class ModelConfig:
    H: float = 0.75
    T: float = 1.0
    sigma: float = 0.1
    f_coeffs: tuple = (1.0, 0.0, -1.0, 0.0)
    cutoff_n: int | None = 10
    u0: float | tuple = 0.0
    n_modes: int = 64
    n_time: int = 256
    n_grid: int = 128
    solver: str = "exponential"
    picard_kmax: int = 40
    picard_tol: float = 1e-12
    sampler: str = "volterra"
    substeps: int = 8
    allow_nonconforming: bool = False

    def __post_init__(self):
        errs = validate_model(self)
        if errs:
            raise ValueError("invalid model config: " + "; ".join(errs))
        object.__setattr__(self, "f_coeffs", tuple(float(c) for c in self.f_coeffs))
        if not isinstance(self.u0, (int, float)):
            object.__setattr__(self, "u0", tuple(float(v) for v in self.u0))

    @cached_property
    def params(self) -> HurstParams:
        return HurstParams(self.H)

    @property
    def dt(self) -> float:
        return self.T / self.n_time

    @cached_property
    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_time + 1)

    @property
    def x_grid(self) -> np.ndarray:
        return collocation_grid(self.n_grid)

    def u0_field(self) -> SpectralField:
        if isinstance(self.u0, (int, float)):
            values = np.full(self.n_grid, float(self.u0))
        else:
            values = np.asarray(self.u0, dtype=float)
        return transform(values, "to_coeffs", n_modes=self.n_modes)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def validate_model(c: ModelConfig) -> list[str]:
    errs = []
    if not (0.5 < float(c.H) < 1.0):
        errs.append(f"H={c.H}: Hurst exponent must satisfy 1/2 < H < 1")
    if not c.T > 0:
        errs.append("T must be > 0")
    if not (math.isfinite(c.sigma) and c.sigma >= 0):
        errs.append("sigma must be finite and >= 0")
    if len(c.f_coeffs) != 4:
        errs.append("f_coeffs must have 4 entries (c3, c2, c1, c0)")
    elif not c.f_coeffs[0] > 0 and not c.allow_nonconforming:
        errs.append("f_coeffs: leading coefficient c3 must be > 0 (set allow_nonconforming to override)")
    if c.cutoff_n is not None and not (int(c.cutoff_n) == c.cutoff_n and c.cutoff_n >= 1):
        errs.append("cutoff_n must be a positive integer or none")
    if c.n_modes < 1:
        errs.append("n_modes must be >= 1")
    if c.n_grid < c.n_modes:
        errs.append("n_grid must be >= n_modes")
    if c.n_time < 1:
        errs.append("n_time must be >= 1")
    if c.solver not in SOLVERS:
        errs.append(f"solver must be one of {SOLVERS}")
    if c.sampler not in SAMPLERS:
        errs.append(f"sampler must be one of {SAMPLERS}")
    if c.substeps < 1:
        errs.append("substeps must be >= 1")
    if not isinstance(c.u0, (int, float)) and len(c.u0) != c.n_grid:
        errs.append("u0 grid samples must have n_grid entries")
    return errs


@dataclass(frozen=True)
class VerifySettings:
    seed: int = 20240601
    x_points: tuple = (0.0, math.pi / 4, math.pi / 2)
    scan_t: float = 1.0
    delta_grid: tuple = field(default_factory=_default_eps_grid)
    eps_grid: tuple = field(default_factory=_default_eps_grid)
    hurst_scan: tuple = (0.6, 0.75, 0.9)
    covariance_hurst: tuple = (0.6, 0.75)
    samples_covariance: int = 20000
    samples_isometry: int = 10000
    samples_first_estimate: int = 2000
    samples_density: int = 50000
    traj_localization: int = 500
    traj_positivity: int = 500
    traj_restricted: int = 100
    fd_pairs: int = 10
    x_star: float = math.pi / 2
    t_star: float = 0.5
    positivity_delta: float = 1e-12
    localization_n: tuple = (2, 4, 8, 16)
    localization_sigma: float = 1.5
    picard_modes: int = 32
    malliavin_modes: int = 32
    malliavin_time: int = 128


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_VERIFY_KEYS = {f.name for f in fields(VerifySettings)}
_TUPLE_KEYS = {"f_coeffs", "x_points", "delta_grid", "eps_grid", "hurst_scan",
               "covariance_hurst", "localization_n"}


def _coerce(name: str, raw: str, proto):
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw.strip().strip('"')
    if name == "cutoff_n" and val in ("none", None):
        return None
    if name in _TUPLE_KEYS or (name == "u0" and isinstance(val, list)):
        if not isinstance(val, list):
            raise ValueError(f"{name}: expected a list")
        return tuple(val)
    if isinstance(proto, bool):
        if not isinstance(val, bool):
            raise ValueError(f"{name}: expected true/false")
        return val
    if isinstance(proto, int) and not isinstance(proto, bool) and name != "u0":
        if not (isinstance(val, int) and not isinstance(val, bool)):
            raise ValueError(f"{name}: expected an integer")
        return val
    if isinstance(proto, float) or name == "u0":
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ValueError(f"{name}: expected a number")
        return float(val)
    if isinstance(proto, str):
        return str(val)
    return val


def parse_config_text(text: str) -> tuple[ModelConfig, VerifySettings]:
    """Parse the [model] / [verify] key-value format. All problems are reported at once."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    errs = []
    model_kw, verify_kw = {}, {}
    base_m, base_v = ModelConfig(), VerifySettings()
    for section in cp.sections():
        if section not in ("model", "verify"):
            errs.append(f"unknown section [{section}]")
            continue
        known = _MODEL_KEYS if section == "model" else _VERIFY_KEYS
        base = base_m if section == "model" else base_v
        target = model_kw if section == "model" else verify_kw
        for key, raw in cp.items(section):
            if key not in known:
                errs.append(f"unknown key '{key}' in [{section}]")
                continue
            try:
                target[key] = _coerce(key, raw, getattr(base, key))
            except ValueError as e:
                errs.append(str(e))
    model = None
    if not errs:
        try:
            model = ModelConfig(**model_kw)
        except (ValueError, TypeError) as e:
            errs.append(str(e))
    if errs:
        raise ValueError("config errors:\n  " + "\n  ".join(errs))
    return model, VerifySettings(**verify_kw)


def parse_config(path) -> tuple[ModelConfig, VerifySettings]:
    return parse_config_text(Path(path).read_text())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return json.dumps([float(x) if isinstance(x, float) else x for x in v])
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    return str(v)


def effective_config_text(model: ModelConfig, verify: VerifySettings) -> str:
    lines = ["[model]"]
    lines += [f"{f.name} = {_fmt(getattr(model, f.name))}" for f in fields(ModelConfig)]
    lines += ["", "[verify]"]
    lines += [f"{f.name} = {_fmt(getattr(verify, f.name))}" for f in fields(VerifySettings)]
    return "\n".join(lines) + "\n"


def config_hash(model: ModelConfig, verify: VerifySettings | None = None) -> str:
    """Hash of everything except the seed (the run directory is named hash + seed)."""
    verify = asdict(verify or VerifySettings())
    verify.pop("seed")
    blob = json.dumps({"model": asdict(model), "verify": verify}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
