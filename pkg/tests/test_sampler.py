import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest
from scipy import stats

from isomix import sampler
from isomix.data import ConsumerDataset, SourceSummary, TefSummary
from isomix.model import ModelSpec, ParameterState, PriorSpec, build_model
from isomix.sampler import McmcConfig, SamplerError, batch_means_se, potential_scale_reduction
from isomix.simulate import geese_summaries, simulate_consumers


@pytest.fixture(scope="module")
def geese_model():
    src, tef = geese_summaries()
    rng = np.random.default_rng(11)
    p = np.tile([0.15, 0.1, 0.15, 0.6], (9, 1))
    Y, _, _ = simulate_consumers(p, src, tef, np.eye(2) * 0.1, rng)
    return build_model(ConsumerDataset(Y, src.isotopes), src, tef, ModelSpec("1"))


def small_model(N=5, formula="1 + x", priors=None, seed=0):
    rng = np.random.default_rng(seed)
    names, iso = ("a", "b", "c"), ("d13C", "d15N")
    src = SourceSummary(names, iso, np.array([[-14.0, 9.8], [-30.0, 4.4], [-11.0, 11.0]]),
                        np.tile(np.eye(2), (3, 1, 1)))
    tef = TefSummary(names, iso, np.tile([1.63, 3.54], (3, 1)), np.tile(np.eye(2) * 0.5, (3, 1, 1)))
    data = ConsumerDataset(rng.normal([-15, 10], 2, (N, 2)), iso, {"x": rng.normal(size=N)})
    return build_model(data, src, tef, ModelSpec(formula, priors=priors or PriorSpec()))


def test_config_validation():
    with pytest.raises(SamplerError):
        McmcConfig(chains=0)
    with pytest.raises(SamplerError):
        McmcConfig(iterations=10, burn_in=10)
    with pytest.raises(SamplerError):
        McmcConfig(thin=0)
    with pytest.raises(SamplerError):
        McmcConfig(frozen=("nope",))
    assert McmcConfig().retained == 2000
    assert McmcConfig(iterations=200_000, burn_in=20_000, thin=90).retained == 2000


def test_prior_only_beta_moments():
    src, tef = geese_summaries()
    empty = ConsumerDataset(np.zeros((0, 2)), src.isotopes)
    model = build_model(empty, src, tef, ModelSpec("1"))
    d = sampler.run(model, McmcConfig(chains=1, iterations=60_000, burn_in=5_000, thin=1, seed=5))
    b = d.beta[0, :, :, 0]
    for r in range(3):
        x = b[:, r]
        assert abs(x.mean()) < 3 * batch_means_se(x)
        assert abs((x ** 2).mean() - 100.0) < 3 * batch_means_se(x ** 2)


def conjugate_setup():
    names, iso = ("a", "b"), ("d13C",)
    mu1, v1, sigma2 = 2.0, 4.0, 0.5
    src = SourceSummary(names, iso, np.array([[mu1], [1.0]]), np.array([[[v1]], [[0.0]]]))
    tef = TefSummary(names, iso, np.array([[0.5], [0.5]]), np.zeros((2, 1, 1)))
    y = 3.0
    model = build_model(ConsumerDataset(np.array([[y]]), iso), src, tef, ModelSpec("1"))
    init = ParameterState(np.zeros((1, 1)), np.zeros((1, 1)), np.ones(1), np.array([[sigma2]]),
                          model.mu_s.copy(), model.mu_c.copy())
    p1 = 0.5
    prec = 1 / v1 + p1 ** 2 / sigma2
    resid = y - 0.5 * 1.0 - 0.5
    mean = (mu1 / v1 + p1 * resid / sigma2) / prec
    return model, init, mean, 1 / prec


@pytest.mark.filterwarnings("ignore::isomix.data.DegenerateCovarianceWarning")
def test_conjugate_normal_normal():
    model, init, mean, var = conjugate_setup()
    cfg = McmcConfig(chains=1, iterations=40_000, burn_in=1_000, thin=1, seed=2,
                     frozen=("phi", "beta", "c", "Sigma", "kappa"))
    d = sampler.run(model, cfg, init=init)
    s1 = d.s[0, :, 0, 0, 0]
    assert abs(s1.mean() - mean) < 3 * batch_means_se(s1)
    assert abs(s1.var() - var) < 3 * batch_means_se((s1 - mean) ** 2)


def test_determinism(geese_model):
    cfg = McmcConfig(chains=2, iterations=600, burn_in=200, thin=2, seed=9)
    a, b = sampler.run(geese_model, cfg), sampler.run(geese_model, cfg)
    for name in ("beta", "phi", "kappa", "Sigma", "s", "c", "deviance"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = sampler.run(geese_model, McmcConfig(chains=2, iterations=600, burn_in=200, thin=2, seed=10))
    assert not np.array_equal(a.phi, c.phi)
    assert not np.array_equal(a.phi[0], a.phi[1])


def test_threads_do_not_change_draws(geese_model):
    one = sampler.run(geese_model, McmcConfig(chains=4, iterations=500, burn_in=100, thin=1, seed=1, threads=1))
    four = sampler.run(geese_model, McmcConfig(chains=4, iterations=500, burn_in=100, thin=1, seed=1, threads=4))
    np.testing.assert_array_equal(one.phi, four.phi)
    np.testing.assert_array_equal(one.deviance, four.deviance)


def test_retention_and_invariants(geese_model):
    cfg = McmcConfig(chains=2, iterations=1_003, burn_in=400, thin=7, seed=3)
    d = sampler.run(geese_model, cfg)
    assert d.n_draws == (1_003 - 400) // 7
    np.testing.assert_array_equal(d.iteration[0], 400 + 7 * np.arange(1, d.n_draws + 1))
    assert np.all(d.iteration > cfg.burn_in)
    assert np.all(d.kappa > 0)
    assert np.all(np.linalg.eigvalsh(d.Sigma) > 0)
    assert np.all(np.isfinite(d.deviance))


def test_zero_scales_are_stationary(geese_model):
    cfg = McmcConfig(chains=1, iterations=300, burn_in=100, thin=1, seed=4, init_phi_scale=0.0,
                     init_beta_scale=0.0)
    init = sampler.initial_state(geese_model, np.random.default_rng(0))
    d = sampler.run(geese_model, cfg, init=init)
    np.testing.assert_array_equal(d.phi[0], np.broadcast_to(init.phi, d.phi[0].shape))
    np.testing.assert_array_equal(d.beta[0], np.broadcast_to(init.beta, d.beta[0].shape))
    assert np.ptp(d.kappa[0]) > 0


def test_kappa_gibbs_moments():
    model = small_model(N=6)
    rng = np.random.default_rng(8)
    init = sampler.initial_state(model, rng)
    init.beta = rng.normal(size=init.beta.shape)
    cfg = McmcConfig(chains=1, iterations=10_001, burn_in=1, thin=1, seed=6,
                     frozen=("phi", "beta", "s", "c", "Sigma", "tau"))
    d = sampler.run(model, cfg, init=init)
    from isomix.model import linear_predictor
    e = init.phi - linear_predictor(model.X, init.beta)
    a = 1 + model.N / 2
    for r in range(2):
        b = 1 + 0.5 * np.sum(e[:, r] ** 2)
        ref = stats.invgamma(a, scale=b)
        x = d.kappa[0, :, r]
        assert abs(x.mean() - ref.mean()) < 3 * x.std() / np.sqrt(x.size)
        sq = (x - ref.mean()) ** 2
        assert abs(sq.mean() - ref.var()) < 3 * sq.std() / np.sqrt(x.size)
        assert stats.kstest(x, ref.cdf).pvalue > 1e-3


def test_acceptance_rates(geese_model):
    d = sampler.run(geese_model, McmcConfig(chains=3, iterations=10_000, burn_in=5_000, thin=5, seed=0))
    for key in ("phi", "beta", "shift"):
        rate = d.acceptance[key].mean()
        assert 0.15 <= rate <= 0.6, (key, rate)


def test_initialization_failure(monkeypatch, geese_model):
    monkeypatch.setattr(sampler, "log_joint", lambda *a: -np.inf)
    with pytest.raises(SamplerError, match="initialization failure"):
        sampler.initial_state(geese_model, np.random.default_rng(0))


def test_update_schedule_leaves_input():
    model = small_model()
    st = sampler.initial_state(model, np.random.default_rng(0))
    before = st.copy()
    new = sampler.update_schedule(st, model, np.random.default_rng(1))
    np.testing.assert_array_equal(st.phi, before.phi)
    assert not np.array_equal(new.Sigma, st.Sigma)


def test_rhat_identical_chains():
    x = np.random.default_rng(0).normal(size=50)
    n = 50
    assert potential_scale_reduction(np.stack([x, x])) == pytest.approx(np.sqrt((n - 1) / n), rel=1e-14)


def test_rhat_same_distribution():
    x = np.random.default_rng(1).normal(size=(3, 10_000))
    assert potential_scale_reduction(x) < 1.01


def test_rhat_separated_chains():
    x = np.random.default_rng(2).normal(size=(2, 500))
    x[1] += 100
    assert potential_scale_reduction(x) > 1.1


def test_rhat_constant_is_nan():
    assert np.isnan(potential_scale_reduction(np.ones((2, 20))))
    with pytest.raises(SamplerError):
        potential_scale_reduction(np.ones((1, 20)))


def test_gelman_rubin_labels(geese_model):
    d = sampler.run(geese_model, McmcConfig(chains=2, iterations=300, burn_in=100, thin=1, seed=0))
    rh = sampler.gelman_rubin(d)
    assert set(rh) == {"beta[1,(Intercept)]", "beta[2,(Intercept)]", "beta[3,(Intercept)]", "kappa[1]",
                       "kappa[2]", "kappa[3]", "Sigma[d13C,d13C]", "Sigma[d13C,d15N]", "Sigma[d15N,d15N]"}
    with pytest.raises(SamplerError):
        sampler.gelman_rubin(d, min_draws=1000)


def test_geweke_joint_distribution():
    model = small_model(priors=PriorSpec(beta_sd=1.0, sigma_dof=5, kappa_shape=3, kappa_rate=2))
    res = sampler.geweke_test(model, n_marginal=10_000, n_successive=100_000, burn_in=3_000, seed=0)
    assert res.passed, res.z


FALLBACK_SCRIPT = textwrap.dedent("""
    import json, sys
    import numpy as np
    from isomix import _jit, sampler
    from isomix.model import ModelSpec, build_model
    from isomix.data import ConsumerDataset
    from isomix.simulate import geese_summaries
    src, tef = geese_summaries()
    Y = np.array([[-12.0, 10.0], [-14.0, 11.0], [-13.0, 9.0]])
    m = build_model(ConsumerDataset(Y, src.isotopes, {"x": np.array([0.1, -0.3, 0.9])}), src, tef,
                    ModelSpec("1 + x", use_helmert_contrasts=True))
    d = sampler.run(m, sampler.McmcConfig(chains=1, iterations=150, burn_in=50, thin=1, seed=7))
    print(json.dumps({"jit": _jit.USE_NUMBA, "phi": d.phi.ravel().tolist(), "dev": d.deviance.ravel().tolist(),
                      "sigma": d.Sigma.ravel().tolist()}))
""")


def test_fallback_matches_compiled():
    runs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ISOMIX_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", FALLBACK_SCRIPT], env=env, capture_output=True, text=True,
                             check=True)
        runs[flag] = json.loads(out.stdout.strip().splitlines()[-1])
    assert runs["0"]["jit"] and not runs["1"]["jit"]
    for key in ("phi", "dev", "sigma"):
        np.testing.assert_allclose(runs["0"][key], runs["1"][key], rtol=1e-9, atol=1e-12)
