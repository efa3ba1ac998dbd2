import os

import numpy as np
import pytest

from isomix.config import ConfigError, generative_spec, load_config


def config(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return load_config(path)


def test_paths_resolve_against_config_file(tmp_path):
    cfg = config(tmp_path, "out: res\ndata: {consumers: d/c.csv, sources: /abs/s.csv}\n")
    assert cfg.out == os.path.join(str(tmp_path), "res")
    assert cfg.data_path("consumers") == os.path.join(str(tmp_path), "d/c.csv")
    assert cfg.data_path("sources") == "/abs/s.csv"
    assert cfg.data_path("concentrations", required=False) is None
    with pytest.raises(ConfigError, match="data.tefs"):
        cfg.data_path("tefs")


def test_empty_file_gives_defaults(tmp_path):
    cfg = config(tmp_path, "")
    assert cfg.seed == 0 and cfg.time_varying_sources is False
    assert cfg.mcmc_config().retained == 2000


def test_model_spec_and_priors(tmp_path):
    cfg = config(tmp_path, "model: {formula: '1 + harmonic(time)', helmert: true, priors: {beta_sd: 3}}\n"
                           "models: {a: '1', b: {formula: '1 + time'}}\n")
    spec = cfg.model_spec()
    assert spec.use_helmert_contrasts and spec.priors.beta_sd == 3
    assert [t.kind for t in spec.formula] == ["intercept", "harmonic"]
    # entries in `models` inherit the shared priors
    assert cfg.model_spec(cfg.models["a"]).priors.beta_sd == 3
    assert [t.kind for t in cfg.model_spec(cfg.models["b"]).formula] == ["intercept", "linear"]
    with pytest.raises(ConfigError, match="unknown model keys"):
        cfg.model_spec({"formula": "1", "colour": 1})
    with pytest.raises(ConfigError, match="unknown prior keys"):
        cfg.model_spec({"formula": "1", "priors": {"nope": 1}})


def test_mcmc_overrides(tmp_path):
    cfg = config(tmp_path, "seed: 3\nmcmc: {chains: 2, iterations: 500, burn_in: 100, thin: 2}\n")
    mc = cfg.mcmc_config(chains=4, thin=None)
    assert (mc.chains, mc.iterations, mc.thin, mc.seed) == (4, 500, 2, 3)
    with pytest.raises(ConfigError):
        cfg.mcmc_config(burn_in=1000)
    bad = config(tmp_path, "mcmc: {chain: 2}\n")
    with pytest.raises(ConfigError, match="unknown mcmc keys"):
        bad.mcmc_config()


def test_invalid_yaml(tmp_path):
    with pytest.raises(ConfigError, match="invalid YAML"):
        config(tmp_path, "a: [1, 2\n")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")


def test_generative_spec_geese_default():
    spec = generative_spec({"proportions": [1, 1, 1, 1]}, seed=2)
    assert spec.sources.names == ("Enteromorpha", "Grass", "Ulva", "Zostera")
    np.testing.assert_allclose(spec.proportions, 0.25)
    np.testing.assert_allclose(spec.tefs.mean, np.tile([1.63, 3.54], (4, 1)))
    assert spec.seed == 2


def test_generative_spec_custom_sources():
    spec = generative_spec({"sources": {"x": {"mean": [0, 0, 0], "cov": np.eye(3).tolist()},
                                        "y": {"mean": [1, 1, 1], "cov": np.eye(3).tolist()}},
                            "proportions": [0.3, 0.7], "sigma": np.eye(3).tolist()})
    assert spec.sources.isotopes == ("iso1", "iso2", "iso3")
    np.testing.assert_array_equal(spec.tefs.mean, 0.0)


@pytest.mark.parametrize("block, msg", [
    ({"proportions": [1, 1, 1, 1], "colour": 1}, "unknown simulate keys"),
    ({"sources": "moon", "proportions": [1]}, "'geese' or a mapping"),
    ({"sources": {"x": {"mean": [0, 0]}}, "proportions": [1]}, "simulate.sources"),
    ({"proportions": [1, 1]}, "need 4 proportions"),
    ({}, "exactly one"),
    ({"sources": {"x": {"mean": [0, 0], "cov": [[1, 0], [0, 1]]}}, "isotopes": ["a"], "proportions": [1]},
     "lists 1 names"),
])
def test_generative_spec_errors(block, msg):
    with pytest.raises(ConfigError, match=msg):
        generative_spec(block)
