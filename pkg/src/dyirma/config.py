"""INI-style run configuration with strict key checking.

Relative paths are resolved against the directory holding the config file.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .hier_model import KINDS

SCHEMA = {
    "paths": {"realizations", "prior", "output"},
    "data": {"seasons", "segments"},
    "model": {"cov", "permute", "mu_beta", "tau_beta", "p_incl", "mu_alpha", "tau_alpha",
              "wishart_nu", "wishart_r", "ig_shape", "ig_scale", "beta_a", "beta_b"},
    "sampler": {"iterations", "burn_in", "thinning", "chains", "seed", "step_size"},
    "kde": {"floor", "bandwidths", "bandwidth_sign", "normalize"},
    "report": {"rho_threshold", "patterns", "groups", "comparisons", "interval", "rhat_max",
               "split_rhat"},
    "synth": {"mode", "segments", "seasons", "draws", "prior_draws", "seed", "alpha",
              "jump_season", "jump_size", "sigma2", "realization_sd", "prior_max",
              "taxa_per_season", "season_spacing", "phi", "groups", "phi_min", "phi_max"},
}

SYNTH_MODES = ("hierarchical", "coalescent")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _lists(text: str) -> list[list[str]]:
    """``a,b ; c`` -> ``[["a", "b"], ["c"]]``."""
    out = []
    for chunk in text.split(";"):
        items = [v.strip() for v in chunk.split(",") if v.strip()]
        if items:
            out.append(items)
    return out


@dataclass
class RunConfig:
    path: Path
    raw: dict = field(default_factory=dict)

    def get(self, section, key, default=None):
        return self.raw.get(section, {}).get(key, default)

    def number(self, section, key, default=None, kind=float, check=None, what=""):
        text = self.get(section, key)
        if text is None:
            if default is None:
                raise ConfigError(f"[{section}] {key} is required")
            return default
        try:
            value = kind(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {kind.__name__}") \
                from None
        if check is not None and not check(value):
            raise ConfigError(f"[{section}] {key} = {value} outside its domain {what}".rstrip())
        return value

    def flag(self, section, key, default=False) -> bool:
        text = self.get(section, key)
        if text is None:
            return default
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")

    def path_of(self, key, must_exist=True) -> Path:
        text = self.get("paths", key)
        if text is None:
            raise ConfigError(f"[paths] {key} is required")
        p = Path(text)
        if not p.is_absolute():
            p = self.path.parent / p
        if must_exist and not p.exists():
            raise FileNotFoundError(f"[paths] {key}: {p} does not exist")
        return p

    def floats(self, section, key):
        text = self.get(section, key)
        if text is None:
            return None
        try:
            return _floats(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected numbers, got {text!r}") from None

    def lists(self, section, key) -> list[list[str]]:
        text = self.get(section, key)
        return [] if text is None else _lists(text)

    @property
    def cov_kind(self) -> str:
        kind = self.get("model", "cov", "ind").strip().lower()
        if kind not in KINDS:
            raise ConfigError(f"[model] cov = {kind!r}; allowed values: {', '.join(KINDS)}")
        return kind


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = {}
    problems = []
    for section in parser.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                problems.append(f"unknown key [{section}] {key}")
        raw[section] = dict(parser.items(section))
    if problems:
        raise ConfigError("; ".join(problems))
    cfg = RunConfig(path.resolve(), raw)
    if "model" in raw:
        cfg.cov_kind
    mode = cfg.get("synth", "mode")
    if mode is not None and mode not in SYNTH_MODES:
        raise ConfigError(f"[synth] mode = {mode!r}; allowed values: {', '.join(SYNTH_MODES)}")
    return cfg
