"""Model comparison, posterior predictive checks and posterior summaries."""
import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import compositional as comp
from .data import fmt
from .model import ParameterState, linear_predictor, log_likelihood, mixture_mean
from .sampler import gelman_rubin

__all__ = [
    "DiagnosticsError",
    "DicReport",
    "dic",
    "PredictiveCheck",
    "posterior_predictive",
    "compare_consumers",
    "PosteriorSummary",
    "summarize",
    "covariance_ellipse",
    "write_dic_table",
    "write_summary_report",
    "write_proportion_table",
    "write_density_grid",
]

log = logging.getLogger(__name__)

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


class DiagnosticsError(ValueError):
    pass


# -- DIC ---------------------------------------------------------------------

@dataclass(frozen=True)
class DicReport:
    mean_deviance: float
    p_d: float
    p_v: float

    @property
    def dic_pd(self):
        return self.mean_deviance + self.p_d

    @property
    def dic_pv(self):
        return self.mean_deviance + self.p_v

    def as_dict(self):
        return dict(mean_deviance=self.mean_deviance, p_d=self.p_d, dic_pd=self.dic_pd, p_v=self.p_v,
                    dic_pv=self.dic_pv)


def _spd_log_mean(S):
    """Matrix-log mean of SPD matrices stacked on the leading axis."""
    ev, U = np.linalg.eigh(np.asarray(S, dtype=float))
    L = np.einsum("...ik,...k,...jk->...ij", U, np.log(ev), U).mean(axis=0)
    w, W = np.linalg.eigh(0.5 * (L + L.T))
    return (W * np.exp(w)) @ W.T


def posterior_mean_state(draws):
    """Plug-in state from posterior means taken on unconstrained scales.

    Compositions are averaged in ilr coordinates, variances on the log scale
    and ``Sigma`` through the matrix logarithm.
    """
    m = draws.model
    Sigma = _spd_log_mean(draws.merged("Sigma"))
    tau = np.exp(np.log(draws.merged("tau")).mean(axis=0)) if m.has_spline else None
    return ParameterState(draws.merged("beta").mean(axis=0), draws.merged("phi").mean(axis=0),
                          np.exp(np.log(draws.merged("kappa")).mean(axis=0)), Sigma,
                          draws.merged("s").mean(axis=0), draws.merged("c").mean(axis=0), tau)


def _half_variance(D):
    # shifting first keeps a constant deviance at exactly zero
    return float(np.var(D - D[0], ddof=1) / 2)


def dic(draws, model=None):
    """Both DIC variants from stored draws.

    ``p_v`` is half the sample variance (``ddof=1``) of the deviance; ``p_d``
    is the mean deviance minus the deviance at :func:`posterior_mean_state`.
    """
    model = model or draws.model
    D = np.asarray(draws.deviance, dtype=float).ravel()
    if D.size < 2:
        raise DiagnosticsError(f"DIC needs at least 2 retained draws, got {D.size}")
    if not np.all(np.isfinite(D)):
        raise DiagnosticsError("non-finite deviance in retained draws")
    mean_d = float(D.mean())
    p_v = _half_variance(D)
    d_bar = -2.0 * log_likelihood(posterior_mean_state(draws), model)
    return DicReport(mean_d, float(mean_d - d_bar), p_v)


def dic_from_deviance(deviance, d_at_mean=None):
    """DIC from a bare deviance vector; ``p_d`` is NaN without ``d_at_mean``."""
    D = np.asarray(deviance, dtype=float).ravel()
    if D.size < 2:
        raise DiagnosticsError(f"DIC needs at least 2 retained draws, got {D.size}")
    mean_d = float(D.mean())
    p_d = math.nan if d_at_mean is None else mean_d - float(d_at_mean)
    return DicReport(mean_d, p_d, _half_variance(D))


# -- posterior predictive ----------------------------------------------------

@dataclass
class PredictiveCheck:
    replicates: np.ndarray     # (R, N, J), one replicate dataset per retained draw
    inside: np.ndarray         # (N,) observation inside its central 95% region
    level: float
    grid_x: np.ndarray = None  # density grid (J = 2 only)
    grid_y: np.ndarray = None
    density: np.ndarray = None  # (len(grid_y), len(grid_x))
    notice: str = ""

    @property
    def fraction_inside(self):
        return float(self.inside.mean()) if self.inside.size else math.nan


def _factor(cov):
    # eigen square root; tolerates singular summary covariances
    w, U = np.linalg.eigh(cov)
    return U * np.sqrt(np.maximum(w, 0))[..., None, :]


def _replicate(model, state, rng, mode):
    N, K, J = model.N, model.K, model.J
    if mode == "conditional":
        phi, s, c = state.phi, state.s, state.c
    else:
        gamma = linear_predictor(model.X, state.beta, model.spec.use_helmert_contrasts)
        phi = gamma + rng.standard_normal((N, K - 1)) * np.sqrt(state.kappa)
        cs, cc = _factor(model.cov_s), _factor(model.cov_c)
        s = model.mu_s + np.einsum("nkab,nkb->nka", cs, rng.standard_normal((N, K, J)))
        c = model.mu_c + np.einsum("nkab,nkb->nka", cc, rng.standard_normal((N, K, J)))
    mean = mixture_mean(comp.ilr_inv(phi, model.V), s, c, model.q)
    return mean + rng.standard_normal((N, J)) @ _factor(state.Sigma).T


def _central_region(rep, y, level):
    """Observation inside the ellipsoid holding ``level`` of its replicates."""
    mu = rep.mean(axis=0)
    C = np.atleast_2d(np.cov(rep, rowvar=False))
    P = np.linalg.pinv(C)
    d_rep = np.einsum("ra,ab,rb->r", rep - mu, P, rep - mu)
    d_obs = float((y - mu) @ P @ (y - mu))
    return d_obs <= np.quantile(d_rep, level)


def kde_grid(points, n_grid=100, pad=3.0):
    """Product-Gaussian kernel density on a regular grid, per-axis
    normal-reference bandwidths ``sd * n**(-1/6)``."""
    n = points.shape[0]
    sd = points.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1e-12)
    h = sd * n ** (-1 / 6)
    lo, hi = points.min(axis=0) - pad * h, points.max(axis=0) + pad * h
    gx, gy = np.linspace(lo[0], hi[0], n_grid), np.linspace(lo[1], hi[1], n_grid)
    kx = stats.norm.pdf((gx[:, None] - points[None, :, 0]) / h[0]) / h[0]
    ky = stats.norm.pdf((gy[:, None] - points[None, :, 1]) / h[1]) / h[1]
    return gx, gy, ky @ kx.T / n


def posterior_predictive(draws, model=None, data=None, seed=0, mode="conditional", level=0.95, n_grid=100,
                         max_kde_points=20_000):
    """Replicate datasets, one per retained draw, and a 95% region check.

    ``mode="conditional"`` simulates the likelihood at each draw's own
    consumer-level quantities. ``mode="new"`` draws fresh ``phi``, ``s`` and
    ``c`` for each consumer from the draw's hyperparameters, the predictive
    for a new consumer sharing the covariates, which is a stricter check.
    """
    model = model or draws.model
    if mode not in ("conditional", "new"):
        raise DiagnosticsError(f"unknown predictive mode {mode!r}")
    Y = model.Y if data is None else np.asarray(getattr(data, "Y", data), dtype=float)
    if Y.shape != (model.N, model.J):
        raise DiagnosticsError(f"observed data has shape {Y.shape}, model expects {(model.N, model.J)}")
    rng = np.random.default_rng([int(seed), 31])
    C, D = draws.n_chains, draws.n_draws
    reps = np.empty((C * D, model.N, model.J))
    for c in range(C):
        for d in range(D):
            reps[c * D + d] = _replicate(model, draws.state(c, d), rng, mode)
    inside = np.array([_central_region(reps[:, i], Y[i], level) for i in range(model.N)], dtype=bool)
    out = PredictiveCheck(reps, inside, level)
    if model.J == 2:
        pts = reps.reshape(-1, 2)
        if pts.shape[0] > max_kde_points:
            pts = pts[rng.choice(pts.shape[0], max_kde_points, replace=False)]
        out.grid_x, out.grid_y, out.density = kde_grid(pts, n_grid)
    else:
        out.notice = f"density grid skipped: J = {model.J} isotopes (contours need J = 2)"
        log.info(out.notice)
    return out


# -- summaries ---------------------------------------------------------------

def compare_consumers(draws, i, i2, k):
    """Posterior probability that consumer ``i`` eats more of source ``k`` than ``i2``."""
    m = draws.model
    for name, v, hi in (("i", i, m.N), ("i2", i2, m.N), ("k", k, m.K)):
        if not isinstance(v, (int, np.integer)) or not 0 <= v < hi:
            raise DiagnosticsError(f"{name} = {v!r} is not a valid index (0 <= {name} < {hi})")
    p = draws.proportions()
    return float(np.mean(p[:, :, i, k] > p[:, :, i2, k]))


@dataclass
class PosteriorSummary:
    source_names: tuple
    mean: np.ndarray        # (N, K)
    sd: np.ndarray          # (N, K)
    quantiles: np.ndarray   # (N, K, 5) at QUANTILES
    population_mean: np.ndarray  # (K,)
    correlation: np.ndarray  # (K, K) between per-draw population-mean proportions
    rhat: dict


def _correlation(x):
    K = x.shape[1]
    out = np.eye(K)
    ok = np.ptp(x, axis=0) > 0
    if ok.sum() >= 2:
        sub = np.corrcoef(x[:, ok], rowvar=False)
        idx = np.flatnonzero(ok)
        out[np.ix_(idx, idx)] = sub
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def summarize(draws):
    p = draws.proportions()
    flat = p.reshape((-1,) + p.shape[2:])
    pop = draws.population_proportions().reshape(-1, draws.model.K)
    q = np.moveaxis(np.quantile(flat, QUANTILES, axis=0), 0, -1)
    rhat = {}
    if draws.n_chains >= 2 and draws.n_draws >= 2:
        rhat = gelman_rubin(draws, min_draws=2)
    return PosteriorSummary(tuple(draws.model.source_names), flat.mean(axis=0), flat.std(axis=0), q,
                            pop.mean(axis=0), _correlation(pop), rhat)


def covariance_ellipse(mean, cov, prob, n=100):
    """``(n, 2)`` boundary of the ``prob`` highest-density ellipse of a bivariate normal."""
    r = math.sqrt(stats.chi2.ppf(prob, 2))
    w, U = np.linalg.eigh(np.asarray(cov, dtype=float))
    ang = np.linspace(0, 2 * np.pi, n)
    circle = np.column_stack([np.cos(ang), np.sin(ang)])
    return np.asarray(mean, dtype=float) + r * (circle * np.sqrt(np.maximum(w, 0))) @ U.T


# -- writers -----------------------------------------------------------------

def write_dic_table(path, reports):
    """One row per model: ``model, mean_deviance, p_d, dic_pd, p_v, dic_pv``."""
    cols = ("mean_deviance", "p_d", "dic_pd", "p_v", "dic_pv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + cols)
        for name, rep in reports.items():
            d = rep.as_dict()
            w.writerow([name] + [fmt(d[c]) for c in cols])


def write_proportion_table(path, summary, consumer_labels=None):
    """``consumer, source, mean, sd, q2.5, q25, q50, q75, q97.5`` rows."""
    N, K = summary.mean.shape
    labels = consumer_labels or [str(i + 1) for i in range(N)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["consumer", "source", "mean", "sd"] + [f"q{100 * q:g}" for q in QUANTILES])
        for i in range(N):
            for k in range(K):
                w.writerow([labels[i], summary.source_names[k], fmt(summary.mean[i, k]), fmt(summary.sd[i, k])]
                           + [fmt(v) for v in summary.quantiles[i, k]])


def write_summary_report(path, summary, dic_report=None, predictive=None, extra=None):
    """JSON report.

    Keys: ``sources``; ``population_mean`` (source -> mean proportion);
    ``correlation`` (K x K list); ``rhat`` (label -> value, null if
    undefined); ``max_rhat``; optionally ``dic`` (mean_deviance, p_d,
    dic_pd, p_v, dic_pv), ``predictive`` (level, fraction_inside, and
    notice) and anything in ``extra``.
    """
    rh = {k: (None if not np.isfinite(v) else float(v)) for k, v in summary.rhat.items()}
    finite = [v for v in rh.values() if v is not None]
    doc = dict(sources=list(summary.source_names),
               population_mean={n: float(v) for n, v in zip(summary.source_names, summary.population_mean)},
               correlation=summary.correlation.tolist(), rhat=rh, max_rhat=max(finite) if finite else None)
    if dic_report is not None:
        doc["dic"] = dic_report.as_dict()
    if predictive is not None:
        doc["predictive"] = dict(level=predictive.level, fraction_inside=predictive.fraction_inside,
                                 notice=predictive.notice)
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_density_grid(path, predictive):
    """``x, y, density`` rows of the predictive density grid."""
    if predictive.density is None:
        raise DiagnosticsError(predictive.notice or "no density grid to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "density"])
        for b, yv in enumerate(predictive.grid_y):
            for a, xv in enumerate(predictive.grid_x):
                w.writerow([fmt(xv), fmt(yv), fmt(predictive.density[b, a])])
