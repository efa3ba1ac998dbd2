"""Multi-chain adaptive Metropolis-within-Gibbs sampling.

Each sweep updates, in order: every consumer's ilr coordinates (random-walk
Metropolis block), every coefficient (scalar random-walk Metropolis), a
joint shift of each coefficient with the ilr coordinates it drives, the
source and TEF random effects (conjugate Gaussian), ``Sigma``
(inverse-Wishart), ``kappa`` (inverse-gamma) and ``tau`` (gamma).
Proposal scales adapt by Robbins-Monro steps during burn-in only.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels as K
from . import compositional as comp
from .model import ParameterState, linear_predictor, log_joint, mixture_mean

log = logging.getLogger(__name__)

__all__ = [
    "SamplerError",
    "BLOCKS",
    "McmcConfig",
    "PosteriorDraws",
    "chain_rng",
    "initial_state",
    "run",
    "update_schedule",
    "prior_draw",
    "potential_scale_reduction",
    "gelman_rubin",
    "batch_means_se",
    "GewekeResult",
    "geweke_test",
]

BLOCKS = ("phi", "beta", "s", "c", "Sigma", "kappa", "tau")
TARGET_BLOCK = 0.30
TARGET_SCALAR = 0.44


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 3
    iterations: int = 50_000
    burn_in: int = 10_000
    thin: int = 20
    seed: int = 0
    adapt_window: int = 50
    threads: int = 1
    frozen: tuple = ()
    init_phi_scale: float = 0.5
    init_beta_scale: float = 0.5

    def __post_init__(self):
        if self.chains < 1:
            raise SamplerError("chains must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise SamplerError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise SamplerError("thin must be >= 1")
        if self.adapt_window < 1:
            raise SamplerError("adapt_window must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise SamplerError("seed must be an unsigned 64-bit integer")
        unknown = set(self.frozen) - set(BLOCKS)
        if unknown:
            raise SamplerError(f"unknown frozen blocks {sorted(unknown)}; choose from {BLOCKS}")

    @property
    def retained(self):
        return (self.iterations - self.burn_in) // self.thin


def chain_rng(seed, chain):
    """Independent counter-based stream for ``(seed, chain)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


@dataclass
class PosteriorDraws:
    """Retained draws; every array has leading axes ``(chain, draw)``."""

    model: object
    config: McmcConfig
    beta: np.ndarray
    phi: np.ndarray
    kappa: np.ndarray
    Sigma: np.ndarray
    s: np.ndarray
    c: np.ndarray
    tau: np.ndarray
    deviance: np.ndarray
    iteration: np.ndarray
    acceptance: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.beta.shape[0]

    @property
    def n_draws(self):
        return self.beta.shape[1]

    def proportions(self):
        """Dietary proportions ``(chain, draw, N, K)``."""
        return comp.ilr_inv(self.phi, self.model.V) if self.model.N else np.zeros(self.phi.shape[:3] + (self.model.K,))

    def population_proportions(self):
        """Per-draw mean over consumers of the dietary proportions ``(chain, draw, K)``."""
        return self.proportions().mean(axis=2)

    def state(self, chain, draw):
        return ParameterState(self.beta[chain, draw].copy(), self.phi[chain, draw].copy(),
                              self.kappa[chain, draw].copy(), self.Sigma[chain, draw].copy(),
                              self.s[chain, draw].copy(), self.c[chain, draw].copy(),
                              self.tau[chain, draw].copy() if self.model.has_spline else None)

    def scalar_parameters(self):
        """Labels and ``(chain, draw, P)`` array of every top-level scalar."""
        m = self.model
        C, D = self.beta.shape[:2]
        cols = [self.beta.reshape(C, D, -1), self.kappa]
        if m.has_spline:
            cols.append(self.tau)
        iu = np.triu_indices(m.J)
        cols.append(self.Sigma[:, :, iu[0], iu[1]])
        return m.parameter_labels(), np.concatenate(cols, axis=2)

    def merged(self, name):
        arr = getattr(self, name)
        return arr.reshape((arr.shape[0] * arr.shape[1],) + arr.shape[2:])


def initial_state(model, rng, max_tries=100):
    """Starting point: phi ~ N(0, 1), beta = 0, Sigma = I, kappa = tau = 1,
    source/TEF effects at their summary means."""
    N, K1 = model.N, model.K - 1
    base = dict(beta=np.zeros((K1, model.L)), kappa=np.ones(K1), Sigma=np.eye(model.J),
                s=np.array(model.mu_s, dtype=float), c=np.array(model.mu_c, dtype=float),
                tau=np.ones(K1) if model.has_spline else None)
    for _ in range(max_tries):
        state = ParameterState(phi=rng.standard_normal((N, K1)), **{k: np.copy(v) if v is not None else None
                                                                  for k, v in base.items()})
        if np.isfinite(log_joint(state, model)):
            return state
    raise SamplerError(f"initialization failure: log density non-finite after {max_tries} attempts")


def _kernel_args(model):
    pri = model.spec.priors
    sl = model.design.spline
    q = np.ones((model.K, model.J)) if model.q is None else np.asarray(model.q, dtype=float)
    return (np.array(model.Y, dtype=float), np.ascontiguousarray(model.X, dtype=float),
            np.ascontiguousarray(model.mu_s), np.ascontiguousarray(model.prec_s),
            np.ascontiguousarray(model.mu_c), np.ascontiguousarray(model.prec_c),
            q, model.q is not None, np.ascontiguousarray(model.V), bool(model.spec.use_helmert_contrasts),
            -1 if sl is None else sl.start, -1 if sl is None else sl.stop,
            float(pri.beta_sd), float(model.sigma_dof), np.ascontiguousarray(model.sigma_scale),
            float(pri.kappa_shape), float(pri.kappa_rate), float(pri.tau_shape), float(pri.tau_rate))


def _state_args(state, model):
    K1 = model.K - 1
    tau = np.ones(K1) if state.tau is None else np.array(state.tau, dtype=float)
    return [np.array(a, dtype=float) for a in (state.beta, state.phi, state.kappa, state.Sigma, state.s,
                                                state.c)] + [tau]


def _frozen_flags(frozen):
    return np.array([b in frozen for b in BLOCKS], dtype=np.bool_)


def _alloc(n, model):
    N, J, K1, Kk, L = model.N, model.J, model.K - 1, model.K, model.L
    return dict(beta=np.empty((n, K1, L)), phi=np.empty((n, N, K1)), kappa=np.empty((n, K1)),
                Sigma=np.empty((n, J, J)), s=np.empty((n, N, Kk, J)), c=np.empty((n, N, Kk, J)),
                tau=np.empty((n, K1)), deviance=np.empty(n), iteration=np.empty(n, dtype=np.int64))


def _run_one(model, config, chain, init=None, scales=None, regen_y=False):
    rng = chain_rng(config.seed, chain)
    state = init(chain, rng) if callable(init) else (init or initial_state(model, rng))
    args = list(_kernel_args(model))
    st = _state_args(state, model)
    N, K1 = model.N, model.K - 1
    if scales is None:
        phi_scale = np.full(N, float(config.init_phi_scale))
        beta_scale = np.full((K1, model.L), float(config.init_beta_scale))
        shift_scale = beta_scale.copy()
    else:
        phi_scale, beta_scale, shift_scale = (np.array(a, dtype=float) for a in scales)
    n_keep = config.retained
    out = _alloc(n_keep, model)
    phi_acc = np.zeros(N)
    beta_acc = np.zeros((K1, model.L))
    shift_acc = np.zeros((K1, model.L))
    target_phi = TARGET_BLOCK if K1 > 1 else TARGET_SCALAR
    kept = K.run_chain(rng, *args, *st, phi_scale, beta_scale, shift_scale, _frozen_flags(config.frozen),
                       config.iterations, config.burn_in, config.thin, config.adapt_window,
                       target_phi, TARGET_SCALAR, regen_y,
                       out["beta"], out["phi"], out["kappa"], out["Sigma"], out["s"], out["c"], out["tau"],
                       out["deviance"], out["iteration"], phi_acc, beta_acc, shift_acc)
    assert kept == n_keep
    n_post = config.iterations - config.burn_in
    final = ParameterState(*st[:6], st[6] if model.has_spline else None)
    return out, dict(phi=phi_acc / n_post, beta=beta_acc / n_post, shift=shift_acc / n_post,
                     phi_scale=phi_scale, beta_scale=beta_scale, shift_scale=shift_scale), final, args[0]


def run(model, config, init=None):
    """Sample the posterior. ``init`` may be a :class:`ParameterState` or a
    callable ``(chain, rng) -> ParameterState``."""
    threads = max(1, int(config.threads))
    chains = range(config.chains)
    if threads == 1 or config.chains == 1:
        results = [_run_one(model, config, ch, init) for ch in chains]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, config.chains)) as pool:
            results = list(pool.map(lambda ch: _run_one(model, config, ch, init), chains))
    stacked = {k: np.stack([r[0][k] for r in results]) for k in results[0][0]}
    if not np.all(np.isfinite(stacked["deviance"])):
        raise SamplerError("non-finite deviance in retained draws")
    acceptance = {k: np.stack([r[1][k] for r in results]) for k in results[0][1]}
    return PosteriorDraws(model, config, **stacked, acceptance=acceptance)


def update_schedule(state, model, rng, phi_scale=None, beta_scale=None, shift_scale=None, frozen=()):
    """One full sweep from ``state``; returns the new state (input untouched)."""
    args = _kernel_args(model)
    st = _state_args(state, model)
    N, K1, J = model.N, model.K - 1, model.J
    gamma = np.empty((N, K1))
    p = np.empty((N, model.K))
    mean = np.empty((N, J))
    Sinv = np.empty((J, J))
    logdet = np.empty(1)
    Y, X, mu_s, prec_s, mu_c, prec_c, q, has_q, V, helmert = args[:10]
    logdet[0] = K.refresh_caches(X, V, q, has_q, helmert, st[0], st[1], st[4], st[5], st[3], gamma, p, mean,
                                 Sinv)
    phi_scale = np.full(N, 0.5) if phi_scale is None else np.broadcast_to(phi_scale, (N,)).astype(float)
    beta_scale = (np.full((K1, model.L), 0.5) if beta_scale is None
                  else np.broadcast_to(beta_scale, (K1, model.L)).astype(float))
    shift_scale = beta_scale if shift_scale is None else np.broadcast_to(shift_scale, (K1, model.L)).astype(float)
    K.sweep(rng, *args, *st, gamma, p, mean, Sinv, logdet, phi_scale, beta_scale, shift_scale,
            np.zeros(N), np.zeros((K1, model.L)), np.zeros((K1, model.L)), _frozen_flags(frozen))
    return ParameterState(*st[:6], st[6] if model.has_spline else None)


def prior_draw(model, rng):
    """Independent draw of every parameter from its prior (given the design)."""
    pri = model.spec.priors
    N, K1, L = model.N, model.K - 1, model.L
    kappa = stats.invgamma.rvs(pri.kappa_shape, scale=pri.kappa_rate, size=K1, random_state=rng)
    tau = None
    beta = rng.normal(0.0, pri.beta_sd, size=(K1, L))
    sl = model.design.spline
    if sl is not None:
        tau = rng.gamma(pri.tau_shape, 1.0 / pri.tau_rate, size=K1)
        n = sl.stop - sl.start
        steps = rng.standard_normal((K1, n - 1)) / np.sqrt(tau)[:, None]
        beta[:, sl] = beta[:, sl.start:sl.start + 1] + np.concatenate([np.zeros((K1, 1)), np.cumsum(steps, 1)], 1)
    Sigma = np.atleast_2d(stats.invwishart.rvs(model.sigma_dof, model.sigma_scale, random_state=rng))
    gamma = linear_predictor(model.X, beta, model.spec.use_helmert_contrasts)
    phi = gamma + rng.standard_normal((N, K1)) * np.sqrt(kappa)
    cov_s = np.linalg.inv(model.prec_s)
    cov_c = np.linalg.inv(model.prec_c)
    s = model.mu_s + np.einsum("nkab,nkb->nka", np.linalg.cholesky(cov_s), rng.standard_normal(model.mu_s.shape))
    c = model.mu_c + np.einsum("nkab,nkb->nka", np.linalg.cholesky(cov_c), rng.standard_normal(model.mu_c.shape))
    return ParameterState(beta, phi, kappa, Sigma, s, c, tau)


def simulate_y(state, model, rng):
    """Consumer data from the likelihood at ``state``."""
    p = comp.ilr_inv(state.phi, model.V)
    m = mixture_mean(p, state.s, state.c, model.q)
    L = np.linalg.cholesky(state.Sigma)
    return m + rng.standard_normal(m.shape) @ L.T


# -- convergence -------------------------------------------------------------

def potential_scale_reduction(x):
    """R-hat for ``x`` of shape ``(chains, n)`` or ``(chains, n, P)``.

    Parameters with zero within-chain variance get NaN.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    m, n = x.shape[:2]
    if m < 2 or n < 2:
        raise SamplerError("R-hat needs at least 2 chains and 2 draws per chain")
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * x.mean(axis=1).var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(((n - 1) / n * W + B / n) / W)
    rhat = np.where(W > 0, rhat, np.nan)
    return rhat[0] if squeeze else rhat


def gelman_rubin(draws, min_draws=10):
    """Dict of label -> R-hat over all top-level scalars. NaN flags a
    parameter with no within-chain variation."""
    if draws.n_chains < 2:
        raise SamplerError("gelman_rubin needs at least 2 chains")
    if draws.n_draws < min_draws:
        raise SamplerError(f"gelman_rubin needs at least {min_draws} draws per chain")
    labels, arr = draws.scalar_parameters()
    rh = potential_scale_reduction(arr)
    return dict(zip(labels, (float(v) for v in rh)))


def batch_means_se(x, n_batches=50):
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = (x.shape[0] // n_batches) * n_batches
    b = x[:n].reshape((n_batches, -1) + x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(n_batches)


# -- joint-distribution test ------------------------------------------------

def _geweke_stats(state, model):
    p = comp.ilr_inv(state.phi, model.V)
    Sigma = np.atleast_2d(state.Sigma)
    sd = np.sqrt(np.diag(Sigma))
    out = [state.beta.ravel(), np.log(state.kappa), np.log(sd)]
    if model.J > 1:
        out.append([Sigma[0, 1] / (sd[0] * sd[1])])
    out += [p[0], p[-1], state.s[0, 0], state.c[0, -1]]
    if model.has_spline:
        out.append(np.log(state.tau))
    return np.concatenate([np.ravel(o) for o in out])


@dataclass
class GewekeResult:
    z: np.ndarray
    pvalues: np.ndarray
    alpha: float
    marginal_mean: np.ndarray
    successive_mean: np.ndarray

    @property
    def passed(self):
        return bool(np.all(self.pvalues > self.alpha / len(self.pvalues)))


def geweke_test(model, n_marginal=20_000, n_successive=200_000, burn_in=5_000, seed=0, alpha=0.01):
    """Compare prior moments from independent forward simulation with those
    visited by the sampler when the data are redrawn after every sweep.

    Passing means every z-test clears ``alpha`` after Bonferroni correction.
    """
    rng = np.random.default_rng([seed, 1])
    g_mc = np.array([_geweke_stats(prior_draw(model, rng), model) for _ in range(n_marginal)])

    rng0 = np.random.default_rng([seed, 2])
    theta0 = prior_draw(model, rng0)
    Y0 = simulate_y(theta0, model, rng0)
    tune = McmcConfig(chains=1, iterations=burn_in, burn_in=burn_in - 1, thin=1, seed=seed, adapt_window=50)
    # adaptation phase; its single retained draw is discarded
    _, acc, state, Y = _run_one(model.with_data(Y0), tune, 0, init=theta0, regen_y=True)
    run_cfg = McmcConfig(chains=1, iterations=n_successive + 1, burn_in=0, thin=1, seed=seed + 1)
    out, _, _, _ = _run_one(model.with_data(Y), run_cfg, 0, init=state,
                            scales=(acc["phi_scale"], acc["beta_scale"], acc["shift_scale"]), regen_y=True)
    g_sc = np.array([_geweke_stats(ParameterState(out["beta"][d], out["phi"][d], out["kappa"][d],
                                                  out["Sigma"][d], out["s"][d], out["c"][d],
                                                  out["tau"][d] if model.has_spline else None), model)
                     for d in range(out["beta"].shape[0])])
    se = np.sqrt(g_mc.var(axis=0, ddof=1) / n_marginal + batch_means_se(g_sc) ** 2)
    z = (g_mc.mean(axis=0) - g_sc.mean(axis=0)) / se
    pv = 2 * stats.norm.sf(np.abs(z))
    return GewekeResult(z, pv, alpha, g_mc.mean(axis=0), g_sc.mean(axis=0))
