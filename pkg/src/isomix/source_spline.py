"""Time-varying source summaries by penalised B-spline MAP estimation.

For one source with samples ``y_m`` (J isotopes) at times ``t_m``::

    y_m ~ N(mu(t_m), D_m R D_m),   mu_j(t) = B(t) . bm_j
    D_m = diag(exp(h(t_m) / 2)),   h_j(t) ~ N(B(t) . bv_j, kappa_sigma)
    R = [[1, rho], [rho, 1]]       (J = 2; R = [1] for J = 1)

The log-variance deviations ``h`` are latent, one per distinct sampling
time and isotope, shared by every sample taken at that time. Each spline's
coefficients carry a random-walk prior with roughness precision ``tau``
(gamma prior) and a diffuse normal anchor on the first coefficient. All of
it is maximised jointly; the variance curve reported is ``exp(B(t) . bv_j)``.
"""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .bspline import bspline_basis, n_basis
from .data import DataError, SourceSummary, fmt

__all__ = [
    "SplineFitError",
    "SplinePriors",
    "SourceSplineParams",
    "SourceTrajectory",
    "objective",
    "fit_one_source",
    "fit_source_spline",
    "predict_source",
    "predict_trajectory",
    "mean_standard_error",
    "pooled_standard_error",
    "gradient_check",
    "write_trajectory",
]

LOG_2PI = math.log(2 * math.pi)


class SplineFitError(RuntimeError):
    """MAP optimisation failed; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SplinePriors:
    tau_shape: float = 2.0
    tau_rate: float = 1.0
    anchor_sd: float = 100.0
    kappa_sigma: float = 1.0
    tau_mean: float = None       # fix the mean-spline roughness instead of estimating it


@dataclass
class SourceSplineParams:
    name: str
    isotopes: tuple
    span: tuple
    knot_count: int
    degree: int
    beta_mean: np.ndarray        # (J, L)
    beta_logvar: np.ndarray      # (J, L)
    rho: float
    tau_mean: np.ndarray         # (J,)
    tau_logvar: np.ndarray       # (J,)
    kappa_sigma: float = 1.0
    h: np.ndarray = None         # (G, J) latent log-variances at the distinct sampling times
    h_times: np.ndarray = None   # (G,)
    diagnostics: dict = field(default_factory=dict)

    @property
    def J(self):
        return self.beta_mean.shape[0]

    @property
    def L(self):
        return self.beta_mean.shape[1]


@dataclass
class SourceTrajectory:
    names: tuple
    isotopes: tuple
    times: np.ndarray
    mean: np.ndarray   # (T, K, J)
    cov: np.ndarray    # (T, K, J, J)

    def to_summary(self):
        return SourceSummary(self.names, self.isotopes, self.mean, self.cov, times=self.times)


# -- packing -----------------------------------------------------------------

class _Layout:
    def __init__(self, J, L, G, fixed_tau_mean):
        self.J, self.L, self.G = J, L, G
        self.fixed_tau_mean = fixed_tau_mean
        sizes = [("bm", J * L), ("bv", J * L), ("z", 1 if J == 2 else 0),
                 ("ltm", 0 if fixed_tau_mean else J), ("ltv", J), ("h", G * J)]
        self.slices, start = {}, 0
        for name, n in sizes:
            self.slices[name] = slice(start, start + n)
            start += n
        self.size = start

    def unpack(self, x):
        J, L, G = self.J, self.L, self.G
        s = self.slices
        bm = x[s["bm"]].reshape(J, L)
        bv = x[s["bv"]].reshape(J, L)
        z = x[s["z"]][0] if J == 2 else 0.0
        ltm = (np.full(J, math.log(self.fixed_tau_mean)) if self.fixed_tau_mean else x[s["ltm"]])
        ltv = x[s["ltv"]]
        h = x[s["h"]].reshape(G, J)
        return bm, bv, z, ltm, ltv, h

    def pack(self, bm, bv, z, ltm, ltv, h):
        parts = [np.ravel(bm), np.ravel(bv)]
        if self.J == 2:
            parts.append([z])
        if not self.fixed_tau_mean:
            parts.append(ltm)
        parts += [ltv, np.ravel(h)]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def _rw_prior(b, log_tau, pri):
    """Random-walk log prior (+ gamma prior on tau) for rows of ``b``; value and gradients."""
    tau = np.exp(log_tau)
    d = np.diff(b, axis=1)
    n_d = d.shape[1]
    S = np.sum(d ** 2, axis=1)
    A2 = pri.anchor_sd ** 2
    val = np.sum(-0.5 * (LOG_2PI + math.log(A2)) - 0.5 * b[:, 0] ** 2 / A2)
    val += np.sum(n_d * (0.5 * log_tau - 0.5 * LOG_2PI) - 0.5 * tau * S)
    a, r = pri.tau_shape, pri.tau_rate
    val += np.sum(a * math.log(r) - math.lgamma(a) + (a - 1) * log_tau - r * tau)
    gb = np.zeros_like(b)
    gb[:, 0] -= b[:, 0] / A2
    gb[:, 1:] -= tau[:, None] * d
    gb[:, :-1] += tau[:, None] * d
    glt = 0.5 * n_d - 0.5 * tau * S + (a - 1) - r * tau
    return val, gb, glt


def _objective(x, layout, d, pri):
    """Log posterior (to maximise) and its gradient in packed coordinates."""
    J = layout.J
    bm, bv, z, ltm, ltv, hg = layout.unpack(x)
    y, B = d.y, d.B
    val = 0.0
    g_bm = np.zeros_like(bm)
    g_bv = np.zeros_like(bv)
    g_hg = np.zeros_like(hg)
    g_z = 0.0
    if y.shape[0]:
        h = hg[d.group]
        mu = B @ bm.T
        u = (y - mu) * np.exp(-0.5 * h)
        if J == 2:
            rho = math.tanh(z)
            # 1 - tanh(z)^2 without cancellation
            ez = math.exp(-2 * abs(z))
            log_om = math.log(4.0) - 2 * abs(z) - 2 * math.log1p(ez)
            om = math.exp(log_om)
            if om == 0.0:
                return -np.inf, np.zeros_like(x)
            Q = u[:, 0] ** 2 - 2 * rho * u[:, 0] * u[:, 1] + u[:, 1] ** 2
            Ru = np.column_stack([u[:, 0] - rho * u[:, 1], u[:, 1] - rho * u[:, 0]]) / om
            val += np.sum(-LOG_2PI - 0.5 * h.sum(axis=1) - 0.5 * log_om - 0.5 * Q / om)
            g_rho = np.sum(rho / om + u[:, 0] * u[:, 1] / om - rho * Q / om ** 2)
            g_z = g_rho * om
        else:
            Ru = u
            val += np.sum(-0.5 * J * LOG_2PI - 0.5 * h.sum(axis=1) - 0.5 * np.sum(u * u, axis=1))
        g_bm += (Ru * np.exp(-0.5 * h)).T @ B
        np.add.at(g_hg, d.group, -0.5 + 0.5 * u * Ru)
        ks = pri.kappa_sigma
        e = hg - d.Bg @ bv.T
        val += np.sum(-0.5 * (LOG_2PI + math.log(ks)) - 0.5 * e ** 2 / ks)
        g_hg -= e / ks
        g_bv += (e / ks).T @ d.Bg
    v, gb, glt_m = _rw_prior(bm, ltm, pri)
    val += v
    g_bm += gb
    v, gb, glt_v = _rw_prior(bv, ltv, pri)
    val += v
    g_bv += gb
    if layout.fixed_tau_mean:
        # the fixed precision's gamma prior is a constant; drop it
        a, r = pri.tau_shape, pri.tau_rate
        val -= J * (a * math.log(r) - math.lgamma(a) + (a - 1) * ltm[0] - r * math.exp(ltm[0]))
    return val, layout.pack(g_bm, g_bv, g_z, glt_m, glt_v, g_hg)


@dataclass
class _Data:
    y: np.ndarray      # (M, J)
    B: np.ndarray      # (M, L)
    group: np.ndarray  # (M,) index of each sample's time in ``times``
    times: np.ndarray  # (G,) distinct sampling times
    Bg: np.ndarray     # (G, L)


def _prepare(x, t, span, knot_count, degree, J=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, J or 1)
    t = np.asarray(t, dtype=float)
    if x.shape[0] != t.shape[0]:
        raise DataError(f"{x.shape[0]} samples but {t.shape[0]} times")
    if x.shape[1] > 2:
        raise DataError("time-varying sources support J <= 2 isotopes; a J > 2 correlation model is not implemented")
    times, group = np.unique(t, return_inverse=True)
    L = n_basis(knot_count, degree)
    if t.size:
        Bg = bspline_basis(times, knot_count, degree, span=span)
        B = Bg[group]
    else:
        Bg = B = np.zeros((0, L))
    return _Data(x, B, group.ravel(), times, Bg)


def objective(params, x, t, priors=None):
    """MAP objective value at ``params`` for samples ``x`` at times ``t``."""
    pri = priors or SplinePriors(kappa_sigma=params.kappa_sigma)
    d = _prepare(x, t, params.span, params.knot_count, params.degree, params.J)
    layout = _Layout(params.J, params.L, d.times.size, pri.tau_mean)
    return _objective(_params_to_x(params, layout, d), layout, d, pri)[0]


def _params_to_x(params, layout, d):
    h = params.h
    if h is None or h.shape != (d.times.size, params.J):
        h = d.Bg @ params.beta_logvar.T
    return layout.pack(params.beta_mean, params.beta_logvar, math.atanh(params.rho) if params.J == 2 else 0.0,
                       np.log(params.tau_mean), np.log(params.tau_logvar), h)


def _initial(layout, d, rng, jitter):
    J, L = layout.J, layout.L
    y, B = d.y, d.B
    D = np.diff(np.eye(L), axis=0)
    bm = np.linalg.solve(B.T @ B + 1e-3 * np.eye(L) + 1e-2 * D.T @ D, B.T @ y).T
    resid = y - B @ bm.T
    var = np.maximum(resid.var(axis=0), 1e-12 * max(1.0, float(np.abs(y).max()) ** 2))
    h0 = np.log(var)
    bv = np.tile(h0[:, None], (1, L))
    h = np.tile(h0, (d.times.size, 1))
    z = 0.0
    if J == 2 and y.shape[0] > 2:
        c = np.corrcoef(resid.T)[0, 1]
        z = math.atanh(np.clip(c if np.isfinite(c) else 0.0, -0.95, 0.95))
    x0 = layout.pack(bm, bv, z, np.zeros(J), np.zeros(J), h)
    if jitter:
        sd = np.concatenate([np.full(2 * J * L, 0.1), np.full(layout.size - 2 * J * L, 0.3)])
        x0 = x0 + jitter * sd * rng.standard_normal(layout.size)
    return x0


def _hessian(fun, v, eps=1e-5):
    """Symmetrised central-difference Hessian of an analytic gradient."""
    n = v.size
    H = np.empty((n, n))
    for i in range(n):
        step = eps * max(1.0, abs(v[i]))
        e = np.zeros(n)
        e[i] = step
        H[:, i] = (fun(v + e)[1] - fun(v - e)[1]) / (2 * step)
    return 0.5 * (H + H.T)


def _newton_polish(fun, v, gtol, max_steps=8):
    """Damped Newton ascent from a quasi-Newton end point.

    Returns the end point, its objective and gradient, and the objective
    change made by the last accepted step (0 if none was taken)."""
    f, g = fun(v)
    last = 0.0
    for _ in range(max_steps):
        if np.max(np.abs(g)) < 1e-3 * gtol:
            break
        A = -_hessian(fun, v)
        lam = 0.0
        moved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.eye(v.size), g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                f_new, g_new = fun(v + step)
                if np.isfinite(f_new) and (f_new >= f or np.max(np.abs(g_new)) < np.max(np.abs(g))):
                    last = f_new - f
                    v, f, g = v + step, f_new, g_new
                    moved = True
                    break
            lam = max(1e-8, 10 * lam) if lam else 1e-6 * max(1.0, np.abs(np.diag(A)).max())
        if not moved:
            break
    return v, f, g, last


def fit_one_source(x, t, knot_count=25, degree=3, span=None, priors=None, name="source", isotopes=None,
                   restarts=5, seed=0, gtol=1e-6, ftol=1e-8, maxiter=20000):
    """MAP spline fit for one source's samples ``x`` (M, J) at times ``t``.

    Each of ``restarts`` seeded starts runs L-BFGS and then damped Newton
    steps; the best converged run is kept. A run has converged when the
    gradient max-norm is below ``gtol`` and the final relative objective
    change is below ``ftol``. If none converges a :class:`SplineFitError`
    carrying the best iterate is raised.
    """
    pri = priors or SplinePriors()
    t = np.asarray(t, dtype=float)
    if span is None:
        span = (float(t.min()), float(t.max()))
    d = _prepare(x, t, span, knot_count, degree)
    M, J = d.y.shape
    L = d.B.shape[1]
    if M < 3:
        raise DataError(f"source {name!r}: need at least 3 timed samples, got {M}")
    layout = _Layout(J, L, d.times.size, pri.tau_mean)
    rng = np.random.default_rng([int(seed), 17])

    def fun(v):
        return _objective(v, layout, d, pri)

    def neg(v):
        f, g = fun(v)
        return -f, -g

    runs, ends = [], []
    for k in range(restarts):
        v = _initial(layout, d, rng, jitter=0.0 if k == 0 else 1.0)
        res = minimize(neg, v, jac=True, method="L-BFGS-B",
                       options=dict(maxiter=maxiter, maxfun=4 * maxiter, gtol=1e-10, ftol=1e-14, maxcor=30))
        v, f, g, last = _newton_polish(fun, res.x, gtol)
        gmax = float(np.max(np.abs(g)))
        rel = abs(last) / max(1.0, abs(f))
        runs.append(dict(objective=float(f), grad_max=gmax, converged=bool(gmax < gtol and rel < ftol),
                         nit=int(res.nit)))
        ends.append(v)
    ok = [i for i, r in enumerate(runs) if r["converged"] and np.isfinite(r["objective"])]
    pool = ok or [i for i, r in enumerate(runs) if np.isfinite(r["objective"])] or [0]
    ib = max(pool, key=lambda i: runs[i]["objective"])
    bm, bv, z, ltm, ltv, h = layout.unpack(ends[ib])
    best = runs[ib]
    params = SourceSplineParams(name, tuple(isotopes or [f"iso{j + 1}" for j in range(J)]), tuple(span),
                                knot_count, degree, bm.copy(), bv.copy(), math.tanh(z) if J == 2 else 0.0,
                                np.exp(ltm), np.exp(ltv), pri.kappa_sigma, h.copy(), d.times.copy(),
                                dict(objective=best["objective"], grad_max=best["grad_max"],
                                     converged=best["converged"], runs=runs))
    if not ok:
        raise SplineFitError(f"source {name!r}: MAP optimisation did not converge "
                             f"(best gradient max-norm {best['grad_max']:.3g})", params, params.diagnostics)
    return params


def fit_source_spline(samples, knot_count=25, degree=3, priors=None, span=None, restarts=5, seed=0, threads=1):
    """Fit every source of a timed :class:`SourceSamples`; returns ``{name: params}``.

    All sources share one knot span (the union of their sampling times unless
    ``span`` is given) so their trajectories live on a common grid.
    """
    if not samples.times or any(n not in samples.times for n in samples.names):
        raise DataError("time-varying sources need a 'time' column for every source")
    if len(samples.isotopes) > 2:
        raise DataError("time-varying sources support J <= 2 isotopes; a J > 2 correlation model is not implemented")
    if span is None:
        allt = np.concatenate([samples.times[n] for n in samples.names])
        span = (float(allt.min()), float(allt.max()))

    def one(item):
        k, name = item
        return fit_one_source(samples.samples[name], samples.times[name], knot_count, degree, span, priors,
                              name, samples.isotopes, restarts, seed=int(seed) + k)

    items = list(enumerate(samples.names))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(one, items))
    else:
        fits = [one(it) for it in items]
    return {f.name: f for f in fits}


def predict_source(params, t):
    """Mean ``(T, J)`` and covariance ``(T, J, J)`` at times ``t`` (scalars give ``(J,)``, ``(J, J)``)."""
    scalar = np.ndim(t) == 0
    B = bspline_basis(np.atleast_1d(t), params.knot_count, params.degree, span=params.span)
    mu = B @ params.beta_mean.T
    var = np.exp(B @ params.beta_logvar.T)
    sd = np.sqrt(var)
    J = params.J
    R = np.eye(J)
    if J == 2:
        R[0, 1] = R[1, 0] = params.rho
    cov = R * sd[:, :, None] * sd[:, None, :]
    idx = np.arange(J)
    cov[:, idx, idx] = var
    if scalar:
        return mu[0], cov[0]
    return mu, cov


def mean_standard_error(params, x, t, t_eval, priors=None):
    """Laplace standard errors ``(T, J)`` of the fitted mean curve at ``t_eval``,
    conditional on the fitted variances, correlation and roughness."""
    pri = priors or SplinePriors(kappa_sigma=params.kappa_sigma)
    d = _prepare(x, t, params.span, params.knot_count, params.degree, params.J)
    J, L = params.J, params.L
    h = (params.h if params.h is not None else d.Bg @ params.beta_logvar.T)[d.group]
    R = np.eye(J)
    if J == 2:
        R[0, 1] = R[1, 0] = params.rho
    Rinv = np.linalg.inv(R)
    s = np.exp(-0.5 * h)
    Hs = np.zeros((J * L, J * L))
    for a in range(J):
        for b in range(J):
            wgt = Rinv[a, b] * s[:, a] * s[:, b]
            Hs[a * L:(a + 1) * L, b * L:(b + 1) * L] = (d.B * wgt[:, None]).T @ d.B
    D = np.diff(np.eye(L), axis=0)
    for j in range(J):
        blk = slice(j * L, (j + 1) * L)
        Hs[blk, blk] += params.tau_mean[j] * D.T @ D
        Hs[j * L, j * L] += 1.0 / pri.anchor_sd ** 2
    C = np.linalg.inv(Hs)
    Be = bspline_basis(np.atleast_1d(t_eval), params.knot_count, params.degree, span=params.span)
    out = np.empty((Be.shape[0], J))
    for j in range(J):
        blk = slice(j * L, (j + 1) * L)
        out[:, j] = np.sqrt(np.einsum("tl,lm,tm->t", Be, C[blk, blk], Be))
    return out


def pooled_standard_error(x, t):
    """Standard error ``(J,)`` of a single sampling time's mean, using the
    within-time variance pooled over all times with replicate samples."""
    x = np.asarray(x, dtype=float)
    times, group, counts = np.unique(np.asarray(t, dtype=float), return_inverse=True, return_counts=True)
    means = np.zeros((times.size, x.shape[1]))
    np.add.at(means, group, x)
    means /= counts[:, None]
    dof = int(np.sum(counts - 1))
    if dof == 0:
        raise DataError("pooled standard error needs replicate samples at some sampling time")
    s2 = np.sum((x - means[group]) ** 2, axis=0) / dof
    return np.sqrt(s2 / counts.mean())


def gradient_check(params, x, t, priors=None, h=1e-6):
    """Largest relative difference between the analytic gradient of the MAP
    objective and central finite differences, over all parameters.

    Relative error is ``|a - f| / max(|a|, |f|, 1)``.
    """
    pri = priors or SplinePriors(kappa_sigma=params.kappa_sigma)
    d = _prepare(x, t, params.span, params.knot_count, params.degree, params.J)
    layout = _Layout(params.J, params.L, d.times.size, pri.tau_mean)
    v = _params_to_x(params, layout, d)
    _, g = _objective(v, layout, d, pri)
    fd = np.empty_like(v)
    for i in range(v.size):
        step = h * max(1.0, abs(v[i]))
        e = np.zeros_like(v)
        e[i] = step
        fd[i] = (_objective(v + e, layout, d, pri)[0] - _objective(v - e, layout, d, pri)[0]) / (2 * step)
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1.0)))


def predict_trajectory(fits, times, names=None):
    """Stack per-source predictions on a common time grid."""
    names = tuple(names or fits)
    times = np.asarray(times, dtype=float)
    preds = [predict_source(fits[n], times) for n in names]
    mean = np.stack([p[0] for p in preds], axis=1)
    cov = np.stack([p[1] for p in preds], axis=1)
    return SourceTrajectory(names, tuple(fits[names[0]].isotopes), times, mean, cov)


def write_trajectory(path, traj):
    """``source, time, mean_<iso>, var_<iso>[, corr]`` rows, one per source and time."""
    iso = traj.isotopes
    J = len(iso)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "time"] + [f"mean_{i}" for i in iso] + [f"var_{i}" for i in iso]
                   + (["corr"] if J == 2 else []))
        for k, name in enumerate(traj.names):
            for ti, t in enumerate(traj.times):
                cov = traj.cov[ti, k]
                row = [name, fmt(t)] + [fmt(v) for v in traj.mean[ti, k]] + [fmt(cov[j, j]) for j in range(J)]
                if J == 2:
                    row.append(fmt(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1])))
                w.writerow(row)
