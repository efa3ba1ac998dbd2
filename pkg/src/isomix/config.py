"""YAML run configuration.

Layout (every section optional unless a command needs it)::

    seed: 1
    out: results              # output directory
    data:
      consumers: consumers.csv
      sources: sources.csv    # raw samples, or a mean_/sd_ summary
      tefs: tefs.csv
      concentrations: q.csv
      time_covariate: time
    model: {formula: "1 + harmonic(time)", helmert: false, priors: {beta_sd: 10}}
    models: {intercept: "1", linear: "1 + time"}     # for `isomix dic`
    mcmc: {chains: 3, iterations: 50000, burn_in: 10000, thin: 20, threads: 1}
    source_spline: {knot_count: 25, degree: 3, restarts: 5, grid: 200}
    time_varying_sources: false
    predictive: {mode: conditional, level: 0.95}
    simulate: {...}           # see :func:`generative_spec`

Relative paths are taken relative to the config file.
"""
import os
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .data import DataError, SourceSummary, TefSummary
from .model import ModelSpec, PriorSpec, parse_formula
from .sampler import McmcConfig, SamplerError
from .simulate import GEESE_TEF_MEAN, GenerativeSpec, geese_summaries

__all__ = ["ConfigError", "RunConfig", "load_config", "generative_spec"]


class ConfigError(ValueError):
    pass


_SECTIONS = {"seed", "out", "data", "model", "models", "mcmc", "source_spline", "time_varying_sources",
             "predictive", "simulate"}
_DATA_KEYS = {"consumers", "sources", "tefs", "concentrations", "time_covariate"}
_SPLINE_KEYS = {"knot_count", "degree", "restarts", "grid", "anchor_sd", "kappa_sigma", "tau_shape", "tau_rate"}


@dataclass
class RunConfig:
    path: str = None
    seed: int = 0
    out: str = None
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    source_spline: dict = field(default_factory=dict)
    time_varying_sources: bool = False
    predictive: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)

    def data_path(self, key, required=True):
        value = self.data.get(key)
        if value is None:
            if required:
                raise ConfigError(f"config: data.{key} is required for this command")
            return None
        return _resolve(self.path, value)

    def model_spec(self, entry=None, concentration=None):
        entry = self.model if entry is None else entry
        if isinstance(entry, str):
            entry = {"formula": entry}
        unknown = set(entry) - {"formula", "helmert", "priors"}
        if unknown:
            raise ConfigError(f"config: unknown model keys {sorted(unknown)}")
        priors = dict(entry.get("priors") or self.model.get("priors") or {})
        names = {f.name for f in fields(PriorSpec)}
        if set(priors) - names:
            raise ConfigError(f"config: unknown prior keys {sorted(set(priors) - names)}")
        if "sigma_scale" in priors:
            priors["sigma_scale"] = np.asarray(priors["sigma_scale"], dtype=float)
        try:
            return ModelSpec(parse_formula(str(entry.get("formula", "1"))),
                             use_helmert_contrasts=bool(entry.get("helmert", False)),
                             priors=PriorSpec(**priors), concentration=concentration)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None

    def mcmc_config(self, **overrides):
        opts = {**self.mcmc, **{k: v for k, v in overrides.items() if v is not None}}
        opts.setdefault("seed", self.seed)
        names = {f.name for f in fields(McmcConfig)}
        if set(opts) - names:
            raise ConfigError(f"config: unknown mcmc keys {sorted(set(opts) - names)}")
        try:
            return McmcConfig(**opts)
        except (TypeError, ValueError, SamplerError) as exc:
            raise ConfigError(f"config: {exc}") from None


def _resolve(base, value):
    value = os.path.expanduser(str(value))
    if os.path.isabs(value) or base is None:
        return value
    return os.path.join(os.path.dirname(os.path.abspath(base)), value)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = RunConfig(path=str(path), **doc)
    if set(cfg.data) - _DATA_KEYS:
        raise ConfigError(f"{path}: unknown data keys {sorted(set(cfg.data) - _DATA_KEYS)}")
    if set(cfg.source_spline) - _SPLINE_KEYS:
        raise ConfigError(f"{path}: unknown source_spline keys {sorted(set(cfg.source_spline) - _SPLINE_KEYS)}")
    if cfg.out is not None:
        cfg.out = _resolve(path, cfg.out)
    try:
        cfg.seed = int(cfg.seed)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: seed must be an integer") from None
    return cfg


def _sources_from(block, isotopes=None):
    if block in (None, "geese"):
        return geese_summaries()[0]
    if not isinstance(block, dict) or not block:
        raise ConfigError("simulate.sources must be 'geese' or a mapping name -> {mean, cov}")
    names = tuple(block)
    try:
        mean = np.array([block[n]["mean"] for n in names], dtype=float)
        cov = np.array([block[n]["cov"] for n in names], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"simulate.sources: {exc}") from None
    J = mean.shape[1]
    if isotopes:
        iso = tuple(isotopes)
    else:
        iso = ("d13C", "d15N") if J == 2 else tuple(f"iso{j + 1}" for j in range(J))
    if len(iso) != J:
        raise ConfigError(f"simulate.isotopes lists {len(iso)} names for {J}-dimensional sources")
    return SourceSummary(names, iso, mean, cov)


def generative_spec(block, seed=0):
    """:class:`GenerativeSpec` from a ``simulate`` config section.

    Keys: ``sources`` ('geese' or name -> {mean, cov}); ``isotopes``;
    ``tef_mean`` and ``tef_cov`` (shared by all sources; default the geese
    values with unit covariance); ``n_consumers``; ``sigma`` (J x J); ``proportions`` or
    ``harmonic``; ``kappa``; ``period``; ``time_span``; ``source_samples``.
    """
    block = dict(block or {})
    known = {"sources", "isotopes", "tef_mean", "tef_cov", "n_consumers", "sigma", "proportions", "harmonic",
             "kappa", "period", "time_span", "source_samples"}
    if set(block) - known:
        raise ConfigError(f"config: unknown simulate keys {sorted(set(block) - known)}")
    src = _sources_from(block.get("sources"), block.get("isotopes"))
    K, J = src.K, src.J
    tef_mean = np.asarray(block.get("tef_mean", GEESE_TEF_MEAN if J == 2 else np.zeros(J)), dtype=float)
    tef_cov = np.asarray(block.get("tef_cov", np.eye(J)), dtype=float)
    tefs = TefSummary(src.names, src.isotopes, np.tile(tef_mean, (K, 1)), np.tile(tef_cov, (K, 1, 1)))
    try:
        return GenerativeSpec(src, tefs, int(block.get("n_consumers", 9)),
                              np.asarray(block.get("sigma", np.eye(J) * 0.1), dtype=float),
                              proportions=block.get("proportions"), harmonic=block.get("harmonic"),
                              kappa=float(block.get("kappa", 0.0)), period=float(block.get("period", 365.0)),
                              time_span=tuple(block.get("time_span", (0.0, 365.0))),
                              source_samples=int(block.get("source_samples", 30)), seed=int(seed))
    except (DataError, TypeError, ValueError) as exc:
        raise ConfigError(f"config: simulate: {exc}") from None
