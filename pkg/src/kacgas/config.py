"""Flat ``key = value`` experiment configuration with fail-closed validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

__all__ = ["KINDS", "ConfigError", "ExperimentConfig", "parse_config", "render_config"]

KINDS = (
    "simulate",
    "hydro-compare",
    "hydrostatic",
    "pde-evolve",
    "pde-stationary",
    "ldp-eval",
    "ldp-perturb",
    "beta0",
    "kernel-info",
    "contraction",
)

INITIAL_PROFILES = ("linear", "sine", "constant")

# keys that must be given explicitly for each kind
REQUIRED = {
    "simulate": ("N", "beta", "rho_minus", "rho_plus"),
    "hydro-compare": ("N", "beta", "rho_minus", "rho_plus"),
    "hydrostatic": ("N", "beta", "rho_minus", "rho_plus"),
    "pde-evolve": ("beta", "rho_minus", "rho_plus"),
    "pde-stationary": ("beta", "rho_minus", "rho_plus"),
    "ldp-eval": ("beta", "path_file"),
    "ldp-perturb": ("beta", "rho_minus", "rho_plus", "f_coeffs"),
    "beta0": (),
    "kernel-info": ("N",),
    "contraction": ("rho_minus", "rho_plus"),
}


class ConfigError(ValueError):
    """Every violation found in a configuration, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    N: int = 100
    beta: float = 0.0
    beta_over_beta0: float | None = None
    rho_minus: float = 0.2
    rho_plus: float = 0.8
    seed: int = 0
    t_end: float = 0.5
    sample_times: tuple = (0.0, 0.5)
    replicas: int = 1
    workers: int = 1
    out_dir: str = "out"
    kernel: str = "bump"
    initial: str = "sine"
    initial_amp: float = 0.2
    n_cells: int = 200
    dt: float = 1e-3
    refine: int = 16
    stationary_tol: float = 1e-8
    burn_in: float = 2.0
    n_samples: int = 400
    thinning: float = 0.05
    bin_width: float = 0.05
    l1_tol: float | None = None
    K: int = 8
    M: int = 8
    path_file: str | None = None
    mollify_eps: float = 0.05
    f_coeffs: tuple = ()
    n_pairs: int = 20
    contraction_tol: float = 0.05

    def effective_beta(self, beta0: float) -> float:
        return self.beta if self.beta_over_beta0 is None else self.beta_over_beta0 * beta0

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _kind_of(f) -> str:
    t = str(f.type)
    if t.startswith("tuple"):
        return "list"
    if "int" in t:
        return "int"
    if "float" in t:
        return "float"
    return "str"


def _convert(name: str, raw: str):
    f = _FIELDS[name]
    kind = _kind_of(f)
    optional = "None" in str(f.type)
    if optional and raw.lower() == "none":
        return None
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind == "list":
        return tuple(float(x) for x in raw.replace(",", " ").split()) if raw.strip() else ()
    return raw


def _validate(cfg: dict, given: set) -> list[str]:
    errors = []

    def need(cond, msg):
        if not cond:
            errors.append(msg)

    kind = cfg["kind"]
    for key in REQUIRED.get(kind, ()):
        need(key in given or (key == "beta" and "beta_over_beta0" in given),
             f"missing required key '{key}' for kind '{kind}'")
    need(cfg["N"] >= 2, "N must be >= 2")
    need(cfg["beta"] >= 0, "beta must be >= 0")
    if cfg["beta_over_beta0"] is not None:
        need(cfg["beta_over_beta0"] >= 0, "beta_over_beta0 must be >= 0")
    need(0.0 < cfg["rho_minus"] < 1.0, "rho_minus must lie in (0, 1)")
    need(0.0 < cfg["rho_plus"] < 1.0, "rho_plus must lie in (0, 1)")
    need(cfg["rho_minus"] <= cfg["rho_plus"], "rho_minus <= rho_plus violated")
    need(cfg["seed"] >= 0, "seed must be >= 0")
    need(cfg["t_end"] > 0, "t_end must be > 0")
    s = cfg["sample_times"] if kind in ("simulate", "hydro-compare") else (0.0,)
    need(len(s) >= 1, "sample_times must not be empty")
    need(all(b > a for a, b in zip(s, s[1:])), "sample_times must be strictly increasing")
    need(all(0.0 <= x <= cfg["t_end"] for x in s), "sample_times must lie in [0, t_end]")
    need(cfg["replicas"] >= 1, "replicas must be >= 1")
    need(cfg["workers"] >= 1, "workers must be >= 1")
    need(cfg["kernel"] == "bump", f"unknown kernel '{cfg['kernel']}'")
    need(cfg["initial"] in INITIAL_PROFILES, f"initial must be one of {', '.join(INITIAL_PROFILES)}")
    need(0.0 <= cfg["initial_amp"] <= 0.5, "initial_amp must lie in [0, 0.5]")
    need(cfg["n_cells"] >= 4, "n_cells must be >= 4")
    need(cfg["dt"] > 0, "dt must be > 0")
    need(cfg["refine"] >= 2 and cfg["refine"] % 2 == 0, "refine must be an even integer >= 2")
    need(cfg["stationary_tol"] > 0, "stationary_tol must be > 0")
    need(cfg["burn_in"] > 0, "burn_in must be > 0")
    need(cfg["n_samples"] >= 1, "n_samples must be >= 1")
    need(cfg["thinning"] > 0, "thinning must be > 0")
    need(0 < cfg["bin_width"] <= 2, "bin_width must lie in (0, 2]")
    if cfg["l1_tol"] is not None:
        need(cfg["l1_tol"] > 0, "l1_tol must be > 0")
    need(cfg["K"] >= 0, "K must be >= 0")
    need(cfg["M"] >= 1, "M must be >= 1")
    need(0 < cfg["mollify_eps"] < 1, "mollify_eps must lie in (0, 1)")
    if kind == "ldp-perturb" and "f_coeffs" in given:
        need(len(cfg["f_coeffs"]) == cfg["K"] * (cfg["M"] + 1),
             f"f_coeffs needs K*(M+1) = {cfg['K'] * (cfg['M'] + 1)} entries")
    need(cfg["n_pairs"] >= 1, "n_pairs must be >= 1")
    need(cfg["contraction_tol"] >= 0, "contraction_tol must be >= 0")
    return errors


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  ``overrides`` win over the text.

    Raises ``ConfigError`` listing every unknown key, bad value and range violation.
    """
    errors = []
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if key in raw:
            errors.append(f"line {lineno}: duplicate key '{key}'")
        raw[key] = value
    for key, value in (overrides or {}).items():
        raw[key] = str(value)
    values = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            errors.append(f"unknown key '{key}'")
            continue
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            errors.append(f"bad value for '{key}': {value!r} ({exc})")
    if "kind" not in values:
        errors.append("missing required key 'kind'")
    elif values["kind"] not in KINDS:
        errors.append(f"unknown kind '{values['kind']}'")
    else:
        merged = {f.name: f.default for f in fields(ExperimentConfig)
                  if f.default is not dataclasses.MISSING}
        merged.update(values)
        errors += _validate(merged, set(values))
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(**merged)


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: ExperimentConfig) -> str:
    """Every field as ``key = value``; ``parse_config(render_config(c)) == c``."""
    return "".join(f"{f.name} = {_render_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
