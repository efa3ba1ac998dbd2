"""Model specification, design matrices and the joint log-density.

The dietary model on ilr coordinates is

    Y_i ~ N(p_i' (s_i + c_i), Sigma),      p_i = ilr_inv(phi_i)
    phi_ir ~ N(gamma_ir, kappa_r),         gamma_i = X_i' beta (optionally Helmert-coded)
    s_ik ~ N(mu_s_k, Sigma_s_k),           c_ik ~ N(mu_c_k, Sigma_c_k)

with source and TEF hyperparameters fixed at their empirical summaries.
"""
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, multigammaln

from . import compositional as comp
from .bspline import bspline_basis, n_basis
from .data import ConcentrationTable, ConsumerDataset, DataError

__all__ = [
    "ModelError",
    "Term",
    "PriorSpec",
    "ModelSpec",
    "DesignMatrix",
    "ParameterState",
    "Model",
    "parse_formula",
    "build_design_matrix",
    "linear_predictor",
    "mixture_mean",
    "build_model",
    "log_joint",
    "log_joint_terms",
    "log_likelihood",
    "log_joint_gradient",
    "JITTER",
]

JITTER = 1e-8
LOG_2PI = math.log(2 * math.pi)


class ModelError(ValueError):
    """Invalid model specification or parameter state."""


@dataclass(frozen=True)
class Term:
    kind: str  # intercept | linear | harmonic | factor | interaction | bspline
    covariate: str = None
    period: float = 365.0
    knots: int = 25
    degree: int = 3
    parents: tuple = ()

    def __str__(self):
        if self.kind == "intercept":
            return "1"
        if self.kind == "interaction":
            return ":".join(str(p) for p in self.parents)
        if self.kind == "harmonic":
            return f"harmonic({self.covariate}, period={self.period:g})"
        if self.kind == "bspline":
            return f"bspline({self.covariate}, {self.knots}, degree={self.degree})"
        return f"{self.kind}({self.covariate})"


_CALL_RE = re.compile(r"^(\w+)\s*\((.*)\)$")


def _parse_atom(text):
    text = text.strip()
    if text == "1":
        return Term("intercept")
    m = _CALL_RE.match(text)
    if not m:
        if re.fullmatch(r"[A-Za-z_]\w*", text):
            return Term("linear", text)
        raise ModelError(f"cannot parse formula term {text!r}")
    fn, args = m.group(1), [a.strip() for a in m.group(2).split(",") if a.strip()]
    pos = [a for a in args if "=" not in a]
    kw = dict(a.split("=", 1) for a in args if "=" in a)
    kw = {k.strip(): v.strip() for k, v in kw.items()}
    if not pos:
        raise ModelError(f"term {text!r} names no covariate")
    cov = pos[0]
    if fn == "linear":
        return Term("linear", cov)
    if fn == "factor":
        return Term("factor", cov)
    if fn == "harmonic":
        return Term("harmonic", cov, period=float(kw.get("period", pos[1] if len(pos) > 1 else 365.0)))
    if fn == "bspline":
        knots = int(kw.get("knots", pos[1] if len(pos) > 1 else 25))
        degree = int(kw.get("degree", 3))
        if knots < max(4, degree + 1):
            raise ModelError(f"bspline needs at least {max(4, degree + 1)} knots, got {knots}")
        return Term("bspline", cov, knots=knots, degree=degree)
    raise ModelError(f"unknown term function {fn!r}")


def parse_formula(formula):
    """Parse e.g. ``"1 + harmonic(t) + factor(age) + factor(age):factor(sex)"``.

    The formula ``"0"`` has no terms: the linear predictor is fixed at zero.
    """
    if formula.strip() == "0":
        return ()
    terms = []
    for chunk in formula.split("+"):
        if not chunk.strip():
            raise ModelError(f"empty term in formula {formula!r}")
        parts = chunk.split(":")
        if len(parts) == 1:
            terms.append(_parse_atom(parts[0]))
        else:
            parents = tuple(_parse_atom(p) for p in parts)
            if any(p.kind in ("intercept", "bspline") for p in parents):
                raise ModelError("interactions of intercept or spline terms are not supported")
            terms.append(Term("interaction", parents=parents))
    if not terms:
        raise ModelError("formula has no terms")
    if sum(t.kind == "bspline" for t in terms) > 1:
        raise ModelError("at most one bspline term is supported")
    return tuple(terms)


@dataclass(frozen=True)
class PriorSpec:
    beta_sd: float = 10.0
    sigma_dof: float = None          # defaults to J + 1
    sigma_scale: np.ndarray = None   # defaults to identity
    kappa_shape: float = 1.0
    kappa_rate: float = 1.0
    tau_shape: float = 2.0
    tau_rate: float = 1.0

    def __post_init__(self):
        for name in ("beta_sd", "kappa_shape", "kappa_rate", "tau_shape", "tau_rate"):
            if not getattr(self, name) > 0:
                raise ModelError(f"prior hyperparameter {name} must be positive")

    def resolved(self, J):
        dof = float(J + 1) if self.sigma_dof is None else float(self.sigma_dof)
        scale = np.eye(J) if self.sigma_scale is None else np.asarray(self.sigma_scale, dtype=float)
        if dof < J:
            raise ModelError(f"inverse-Wishart dof must be >= J={J}, got {dof}")
        if scale.shape != (J, J) or np.linalg.eigvalsh(scale).min() <= 0:
            raise ModelError("inverse-Wishart scale must be a J x J positive definite matrix")
        return dof, scale


@dataclass(frozen=True)
class ModelSpec:
    formula: tuple = (Term("intercept"),)
    use_helmert_contrasts: bool = False
    priors: PriorSpec = field(default_factory=PriorSpec)
    concentration: ConcentrationTable = None

    def __post_init__(self):
        f = self.formula
        if isinstance(f, str):
            f = parse_formula(f)
        object.__setattr__(self, "formula", tuple(f))

    @property
    def formula_string(self):
        return " + ".join(str(t) for t in self.formula) or "0"


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    labels: tuple
    spline: slice = None
    levels: dict = field(default_factory=dict)
    spans: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.X.shape[1]


def _term_columns(term, covariates, n, levels, spans):
    if term.kind == "intercept":
        return np.ones((n, 1)), ["(Intercept)"]
    if term.kind == "interaction":
        cols, labels = np.ones((n, 1)), [""]
        for parent in term.parents:
            pc, pl = _term_columns(parent, covariates, n, levels, spans)
            cols = (cols[:, :, None] * pc[:, None, :]).reshape(n, -1)
            labels = [f"{a}:{b}" if a else b for a in labels for b in pl]
        return cols, labels
    if term.covariate not in covariates:
        raise ModelError(f"unknown covariate {term.covariate!r}; available: {sorted(covariates)}")
    x = covariates[term.covariate]
    if term.kind == "factor":
        if term.covariate not in levels:
            lv = sorted({str(v) for v in x})
            if len(lv) < 2:
                raise ModelError(f"factor {term.covariate!r} has only one observed level")
            levels[term.covariate] = tuple(lv)
        lv = levels[term.covariate]
        xs = np.array([str(v) for v in x])
        unknown = set(xs) - set(lv)
        if unknown:
            raise ModelError(f"factor {term.covariate!r} has unseen levels {sorted(unknown)}")
        return (np.column_stack([(xs == v).astype(float) for v in lv[1:]]),
                [f"{term.covariate}[{v}]" for v in lv[1:]])
    try:
        x = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ModelError(f"covariate {term.covariate!r} is not numeric") from None
    if term.kind == "linear":
        return x[:, None], [term.covariate]
    if term.kind == "harmonic":
        w = 2 * np.pi * x / term.period
        return np.column_stack([np.cos(w), np.sin(w)]), [f"cos({term.covariate})", f"sin({term.covariate})"]
    if term.kind == "bspline":
        key = term.covariate
        if key not in spans:
            if n == 0:
                raise ModelError("spline span cannot be inferred from zero consumers")
            spans[key] = (float(x.min()), float(x.max()))
        B = bspline_basis(x, term.knots, term.degree, span=spans[key]) if n else np.zeros(
            (0, n_basis(term.knots, term.degree)))
        return B, [f"bs({key})[{l}]" for l in range(B.shape[1])]
    raise ModelError(f"unknown term kind {term.kind!r}")


def build_design_matrix(dataset, spec, reference=None):
    """Design matrix with columns in formula order.

    ``reference`` (a previous :class:`DesignMatrix`) fixes factor levels and
    spline spans, for evaluating the same model at new covariate values.
    ``dataset`` may be a :class:`ConsumerDataset` or a plain covariate dict.
    """
    if isinstance(dataset, ConsumerDataset):
        covariates, n = dataset.covariates, dataset.n
    else:
        covariates = dict(dataset)
        n = len(next(iter(covariates.values()))) if covariates else 0
    levels = dict(reference.levels) if reference else {}
    spans = dict(reference.spans) if reference else {}
    blocks, labels, spline = [], [], None
    for term in spec.formula:
        cols, lab = _term_columns(term, covariates, n, levels, spans)
        if term.kind == "bspline":
            start = sum(b.shape[1] for b in blocks)
            spline = slice(start, start + cols.shape[1])
        blocks.append(cols)
        labels.extend(lab)
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    if not np.all(np.isfinite(X)):
        raise ModelError("design matrix has non-finite entries")
    return DesignMatrix(X, tuple(labels), spline, levels, spans)


def linear_predictor(X, beta, use_helmert=False):
    """``gamma = X beta'``; under Helmert coding row 0 of ``beta`` is the shared
    baseline and coordinate ``r >= 1`` uses ``beta[0] + beta[r]``."""
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 2 or beta.shape[1] != X.shape[1]:
        raise ModelError(f"beta shape {beta.shape} does not conform to design with L={X.shape[1]}")
    if use_helmert:
        beta = beta.copy()
        beta[1:] += beta[0]
    return X @ beta.T


def mixture_mean(p, s, c, q=None):
    """Per-isotope mean ``sum_k w_kj (s_kj + c_kj)``.

    Without concentrations ``w_kj = p_k``; with them ``w_kj`` is ``p_k q_kj``
    renormalised over sources, separately for each isotope.
    """
    p = np.asarray(p, dtype=float)
    sc = np.asarray(s, dtype=float) + np.asarray(c, dtype=float)
    if sc.shape[-2] != p.shape[-1]:
        raise ModelError(f"{p.shape[-1]} proportions for {sc.shape[-2]} sources")
    if q is None:
        w = np.broadcast_to(p[..., :, None], sc.shape)
    else:
        q = q.q if isinstance(q, ConcentrationTable) else np.asarray(q, dtype=float)
        if q.shape != sc.shape[-2:]:
            raise ModelError(f"concentration shape {q.shape} does not match {sc.shape[-2:]}")
        w = p[..., :, None] * q
        w = w / w.sum(axis=-2, keepdims=True)
    return np.sum(w * sc, axis=-2)


@dataclass
class ParameterState:
    beta: np.ndarray      # (K-1, L)
    phi: np.ndarray       # (N, K-1)
    kappa: np.ndarray     # (K-1,)
    Sigma: np.ndarray     # (J, J)
    s: np.ndarray         # (N, K, J)
    c: np.ndarray         # (N, K, J)
    tau: np.ndarray = None  # (K-1,), spline models only

    def copy(self):
        return ParameterState(*(None if v is None else np.array(v, dtype=float, copy=True)
                                for v in (self.beta, self.phi, self.kappa, self.Sigma, self.s, self.c,
                                          self.tau)))


def _chol_prec(cov):
    """Jittered precision matrices and log-determinants for a stack of covariances."""
    cov = np.asarray(cov, dtype=float)
    J = cov.shape[-1]
    flat = cov.reshape(-1, J, J)
    prec = np.empty_like(flat)
    logdet = np.empty(flat.shape[0])
    for i, S in enumerate(flat):
        S = 0.5 * (S + S.T)
        ev = np.linalg.eigvalsh(S)
        if ev[0] <= 1e-12 * max(ev[-1], 0.0) or ev[-1] <= 0:
            S = S + JITTER * np.eye(J)
        L = np.linalg.cholesky(S)
        Linv = np.linalg.inv(L)
        prec[i] = Linv.T @ Linv
        logdet[i] = 2 * np.sum(np.log(np.diag(L)))
    return prec.reshape(cov.shape), logdet.reshape(cov.shape[:-2])


@dataclass
class Model:
    """Everything the sampler needs, as plain arrays."""

    spec: ModelSpec
    design: DesignMatrix
    Y: np.ndarray
    mu_s: np.ndarray
    cov_s: np.ndarray
    mu_c: np.ndarray
    cov_c: np.ndarray
    q: np.ndarray
    source_names: tuple
    isotopes: tuple
    covariates: dict = field(default_factory=dict)
    prec_s: np.ndarray = field(init=False)
    logdet_s: np.ndarray = field(init=False)
    prec_c: np.ndarray = field(init=False)
    logdet_c: np.ndarray = field(init=False)
    V: np.ndarray = field(init=False)

    def __post_init__(self):
        self.prec_s, self.logdet_s = _chol_prec(self.cov_s)
        self.prec_c, self.logdet_c = _chol_prec(self.cov_c)
        self.V = np.array(comp.build_ilr_basis(self.K))
        self.sigma_dof, self.sigma_scale = self.spec.priors.resolved(self.J)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def J(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return self.mu_s.shape[1]

    @property
    def L(self):
        return self.design.L

    @property
    def X(self):
        return self.design.X

    @property
    def has_spline(self):
        return self.design.spline is not None

    def with_data(self, Y):
        """Same model with replacement consumer measurements."""
        return Model(self.spec, self.design, np.asarray(Y, dtype=float), self.mu_s, self.cov_s, self.mu_c,
                     self.cov_c, self.q, self.source_names, self.isotopes, self.covariates)

    def parameter_labels(self):
        K1, J = self.K - 1, self.J
        labels = [f"beta[{r + 1},{lab}]" for r in range(K1) for lab in self.design.labels]
        labels += [f"kappa[{r + 1}]" for r in range(K1)]
        if self.has_spline:
            labels += [f"tau[{r + 1}]" for r in range(K1)]
        labels += [f"Sigma[{self.isotopes[a]},{self.isotopes[b]}]" for a in range(J) for b in range(a, J)]
        return labels


def build_model(consumers, sources, tefs, spec=None, time_covariate="time"):
    """Assemble a :class:`Model` from data and summaries.

    Time-indexed source summaries are evaluated at each consumer's value of
    ``time_covariate``.
    """
    spec = spec or ModelSpec()
    if tuple(sources.isotopes) != tuple(consumers.isotopes):
        raise DataError(f"isotopes differ between consumers {consumers.isotopes} and sources {sources.isotopes}")
    if tuple(tefs.names) != tuple(sources.names) or tuple(tefs.isotopes) != tuple(sources.isotopes):
        raise DataError("TEF summary must list the same sources and isotopes as the source summary")
    design = build_design_matrix(consumers, spec)
    N = consumers.n
    if sources.times is not None:
        mu_s, cov_s = sources.at(consumers.covariate(time_covariate))
    else:
        mu_s, cov_s = sources.at(np.zeros(N))
    mu_c, cov_c = tefs.at(np.zeros(N)) if tefs.times is None else tefs.at(consumers.covariate(time_covariate))
    q = None
    if spec.concentration is not None:
        conc = spec.concentration
        if tuple(conc.names) != tuple(sources.names):
            raise DataError("concentration table sources do not match the source summary")
        q = conc.q
    if sources.K < 2:
        raise ModelError("need at least 2 sources")
    return Model(spec, design, np.array(consumers.Y), mu_s, cov_s, mu_c, cov_c, q,
                 tuple(sources.names), tuple(consumers.isotopes), dict(consumers.covariates))


# -- densities ---------------------------------------------------------------

def _mvn_logpdf(x, mean, prec, logdet):
    d = x - mean
    J = x.shape[-1]
    quad = np.einsum("...i,...ij,...j->...", d, prec, d)
    return -0.5 * (J * LOG_2PI + logdet + quad)


def _sigma_factor(Sigma):
    Sigma = np.asarray(Sigma, dtype=float)
    if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Sigma).max())):
        return None
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, 2 * np.sum(np.log(np.diag(L)))


def state_means(state, model):
    p = comp.ilr_inv(state.phi, model.V) if model.N else np.zeros((0, model.K))
    return p, mixture_mean(p, state.s, state.c, model.q)


def log_likelihood(state, model):
    """Gaussian log-likelihood of the consumers given latent quantities."""
    f = _sigma_factor(state.Sigma)
    if f is None:
        return -np.inf
    _, m = state_means(state, model)
    return float(np.sum(_mvn_logpdf(model.Y, m, f[0], f[1])))


def _beta_prior(beta, tau, model):
    pri = model.spec.priors
    sd2 = pri.beta_sd ** 2
    sl = model.design.spline
    mask = np.ones(model.L, dtype=bool)
    total = 0.0
    if sl is not None:
        mask[sl] = False
        b = beta[:, sl]
        total += np.sum(-0.5 * (LOG_2PI + math.log(sd2)) - 0.5 * b[:, 0] ** 2 / sd2)
        d = np.diff(b, axis=1)
        total += np.sum(-0.5 * LOG_2PI + 0.5 * np.log(tau)[:, None] - 0.5 * tau[:, None] * d ** 2)
    b = beta[:, mask]
    total += np.sum(-0.5 * (LOG_2PI + math.log(sd2)) - 0.5 * b ** 2 / sd2)
    return float(total)


def log_joint_terms(state, model):
    """Dictionary of the individual log-density contributions."""
    pri = model.spec.priors
    K1 = model.K - 1
    kappa = np.asarray(state.kappa, dtype=float)
    if kappa.shape != (K1,) or np.any(kappa <= 0):
        raise ModelError("kappa must be a positive (K-1)-vector")
    tau = None
    if model.has_spline:
        tau = np.asarray(state.tau, dtype=float)
        if tau.shape != (K1,) or np.any(tau <= 0):
            raise ModelError("tau must be a positive (K-1)-vector for spline models")
    terms = {}
    terms["likelihood"] = log_likelihood(state, model)
    gamma = linear_predictor(model.X, state.beta, model.spec.use_helmert_contrasts)
    r = state.phi - gamma
    terms["phi"] = float(np.sum(-0.5 * (LOG_2PI + np.log(kappa)) - 0.5 * r ** 2 / kappa))
    terms["sources"] = float(np.sum(_mvn_logpdf(state.s, model.mu_s, model.prec_s, model.logdet_s)))
    terms["tefs"] = float(np.sum(_mvn_logpdf(state.c, model.mu_c, model.prec_c, model.logdet_c)))
    terms["beta"] = _beta_prior(np.asarray(state.beta, dtype=float), tau, model)
    a, b = pri.kappa_shape, pri.kappa_rate
    terms["kappa"] = float(np.sum(a * math.log(b) - gammaln(a) - (a + 1) * np.log(kappa) - b / kappa))
    if tau is not None:
        a, b = pri.tau_shape, pri.tau_rate
        terms["tau"] = float(np.sum(a * math.log(b) - gammaln(a) + (a - 1) * np.log(tau) - b * tau))
    f = _sigma_factor(state.Sigma)
    if f is None:
        terms["Sigma"] = -np.inf
    else:
        nu, Psi = model.sigma_dof, model.sigma_scale
        J = model.J
        terms["Sigma"] = float(0.5 * nu * np.linalg.slogdet(Psi)[1] - 0.5 * nu * J * math.log(2)
                               - multigammaln(0.5 * nu, J) - 0.5 * (nu + J + 1) * f[1]
                               - 0.5 * np.trace(Psi @ f[0]))
    return terms


def log_joint(state, model):
    """Unnormalised log posterior; ``-inf`` when ``Sigma`` is not positive definite."""
    terms = log_joint_terms(state, model)
    if any(v == -np.inf for v in terms.values()):
        return -np.inf
    return float(sum(terms.values()))


def log_joint_gradient(state, model):
    """Analytic gradient of :func:`log_joint` in the unconstrained
    coordinates ``phi``, ``beta``, ``log kappa`` and ``log tau``.

    The log-scale entries are derivatives of the same density (no Jacobian
    term), i.e. ``kappa * d/dkappa``.
    """
    pri = model.spec.priors
    f = _sigma_factor(state.Sigma)
    if f is None:
        raise ModelError("Sigma is not positive definite")
    Sinv = f[0]
    beta = np.asarray(state.beta, dtype=float)
    kappa = np.asarray(state.kappa, dtype=float)
    helmert = model.spec.use_helmert_contrasts
    gamma = linear_predictor(model.X, beta, helmert)
    e = state.phi - gamma

    p, m = state_means(state, model)
    a = np.asarray(state.s) + np.asarray(state.c)
    if model.q is None:
        w = np.broadcast_to(p[:, :, None], a.shape)
    else:
        w = p[:, :, None] * model.q
        w = w / w.sum(axis=1, keepdims=True)
    r = (model.Y - m) @ Sinv
    gz = np.einsum("nj,nkj,nkj->nk", r, w, a - m[:, None, :])
    g_phi = gz @ model.V - e / kappa

    G = e / kappa                      # d/dgamma
    g_beta = G.T @ model.X
    if helmert:
        g_beta[0] = G.sum(axis=1) @ model.X
    sd2 = pri.beta_sd ** 2
    sl = model.design.spline
    mask = np.ones(model.L, dtype=bool)
    g_tau = None
    if sl is not None:
        mask[sl] = False
        tau = np.asarray(state.tau, dtype=float)
        b = beta[:, sl]
        d = np.diff(b, axis=1)
        gb = np.zeros_like(b)
        gb[:, 0] -= b[:, 0] / sd2
        gb[:, 1:] -= tau[:, None] * d
        gb[:, :-1] += tau[:, None] * d
        g_beta[:, sl] += gb
        n_d = d.shape[1]
        g_tau = tau * (0.5 * n_d / tau - 0.5 * np.sum(d ** 2, axis=1)
                       + (pri.tau_shape - 1) / tau - pri.tau_rate)
    g_beta[:, mask] -= beta[:, mask] / sd2

    N = model.N
    g_kappa = kappa * (-0.5 * N / kappa + 0.5 * np.sum(e ** 2, axis=0) / kappa ** 2
                       - (pri.kappa_shape + 1) / kappa + pri.kappa_rate / kappa ** 2)
    return dict(phi=g_phi, beta=g_beta, log_kappa=g_kappa, log_tau=g_tau)
