"""Forward simulation of consumers, sources and TEFs from the mixing model."""
from dataclasses import dataclass, field

import numpy as np

from . import compositional as comp
from .data import ConsumerDataset, DataError, SourceSamples, SourceSummary, TefSummary
from .model import mixture_mean

__all__ = [
    "GEESE_SOURCES",
    "GEESE_ISOTOPES",
    "geese_summaries",
    "draw_latent",
    "simulate_consumers",
    "simulate_source_samples",
    "harmonic_phi",
    "time_varying_sources",
    "GenerativeSpec",
    "simulate",
]

GEESE_ISOTOPES = ("d13C", "d15N")
# name -> (mean, covariance) of the brent geese food sources
GEESE_SOURCES = {
    "Enteromorpha": ([-14.06, 9.82], [[1.37, 0.0], [0.0, 1.37]]),
    "Grass": ([-30.88, 4.43], [[0.41, 0.0], [0.0, 5.15]]),
    "Ulva": ([-11.17, 11.2], [[3.83, 0.85], [0.85, 1.24]]),
    "Zostera": ([-11.17, 6.45], [[1.48, -0.56], [-0.56, 2.16]]),
}
GEESE_TEF_MEAN = (1.63, 3.54)


def geese_summaries():
    """Source and TEF summaries of the geese case study (TEF covariance identity)."""
    names = tuple(GEESE_SOURCES)
    mean = np.array([GEESE_SOURCES[n][0] for n in names], dtype=float)
    cov = np.array([GEESE_SOURCES[n][1] for n in names], dtype=float)
    K = len(names)
    src = SourceSummary(names, GEESE_ISOTOPES, mean, cov)
    tef = TefSummary(names, GEESE_ISOTOPES, np.tile(GEESE_TEF_MEAN, (K, 1)), np.tile(np.eye(2), (K, 1, 1)))
    return src, tef


def _mvn(rng, mean, cov, size):
    # eigen factor tolerates singular covariances
    ev, U = np.linalg.eigh(np.asarray(cov, dtype=float))
    A = U * np.sqrt(np.clip(ev, 0.0, None))
    return np.asarray(mean, dtype=float) + rng.standard_normal((size, len(ev))) @ A.T


def draw_latent(summary, n, rng, times=None):
    """``(n, K, J)`` draws from each source's Gaussian summary (at ``times`` if time-indexed)."""
    if summary.times is not None:
        mu, cov = summary.at(times)
        out = np.empty(mu.shape)
        for i in range(n):
            for k in range(summary.K):
                out[i, k] = _mvn(rng, mu[i, k], cov[i, k], 1)[0]
        return out
    return np.stack([_mvn(rng, summary.mean[k], summary.cov[k], n) for k in range(summary.K)], axis=1)


def simulate_consumers(p, sources, tefs, Sigma, rng, q=None, times=None):
    """Consumers ``Y_i ~ N(p_i'(s_i + c_i), Sigma)`` with ``s``, ``c`` drawn per consumer.

    ``p`` is ``(N, K)``. Returns ``(Y, s, c)``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = p.shape[0]
    s = draw_latent(sources, n, rng, times)
    c = draw_latent(tefs, n, rng, times)
    m = mixture_mean(p, s, c, q)
    Y = m + _mvn(rng, np.zeros(m.shape[1]), Sigma, n)
    return Y, s, c


def simulate_source_samples(summary, m, rng):
    """``m`` raw samples per source from a static Gaussian summary."""
    return SourceSamples(tuple(summary.names), tuple(summary.isotopes),
                         {name: _mvn(rng, summary.mean[k], summary.cov[k], m)
                          for k, name in enumerate(summary.names)})


def harmonic_phi(t, coef, period=365.0):
    """ilr coordinates ``a + b cos(wt) + c sin(wt)``; ``coef`` is ``(3, K-1)``."""
    coef = np.asarray(coef, dtype=float)
    w = 2 * np.pi * np.asarray(t, dtype=float) / period
    X = np.column_stack([np.ones_like(w), np.cos(w), np.sin(w)])
    return X @ coef


def time_varying_sources(t, mean0, amp, var0, var_slope, rho, period=365.0, t0=None):
    """Truth of a time-varying source: sinusoidal mean, log-linear variances,
    constant correlation. Returns ``(mu (T, J), cov (T, J, J))``."""
    t = np.asarray(t, dtype=float)
    t0 = t.min() if t0 is None else t0
    w = 2 * np.pi * t / period
    mu = np.asarray(mean0, float) + np.sin(w)[:, None] * np.asarray(amp, float)
    var = np.asarray(var0, float) * np.exp(np.asarray(var_slope, float) * (t - t0)[:, None])
    sd = np.sqrt(var)
    J = mu.shape[1]
    corr = np.full((J, J), float(rho))
    np.fill_diagonal(corr, 1.0)
    return mu, corr * sd[:, :, None] * sd[:, None, :]


@dataclass
class GenerativeSpec:
    """Truth for a synthetic study.

    ``proportions`` is either one composition shared by every consumer or,
    with ``harmonic`` coefficients ``(3, K-1)`` on the ilr scale, a seasonal
    diet over ``times``. ``kappa`` adds consumer-level ilr noise.
    """

    sources: SourceSummary
    tefs: TefSummary
    n_consumers: int
    sigma: np.ndarray
    proportions: np.ndarray = None
    harmonic: np.ndarray = None
    kappa: float = 0.0
    period: float = 365.0
    time_span: tuple = (0.0, 365.0)
    source_samples: int = 30
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.proportions is None) == (self.harmonic is None):
            raise DataError("give exactly one of constant proportions or harmonic coefficients")
        if self.n_consumers < 1:
            raise DataError("n_consumers must be >= 1")
        if self.proportions is not None:
            p = np.asarray(self.proportions, dtype=float)
            if p.shape != (self.sources.K,):
                raise DataError(f"need {self.sources.K} proportions, got {p.shape}")
            self.proportions = comp.closure(p)
        else:
            h = np.asarray(self.harmonic, dtype=float)
            if h.shape != (3, self.sources.K - 1):
                raise DataError(f"harmonic coefficients must be (3, {self.sources.K - 1})")
            self.harmonic = h
        S = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if S.shape != (self.sources.J, self.sources.J) or np.linalg.eigvalsh(S).min() < 0:
            raise DataError("sigma must be a J x J positive semidefinite matrix")
        self.sigma = S


def simulate(spec, rng=None):
    """Draw one synthetic study. Returns a dict with ``consumers``
    (:class:`ConsumerDataset`), ``source_samples``, ``tefs`` and ``truth``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n_consumers
    covariates = {}
    if spec.harmonic is not None:
        t = np.sort(rng.uniform(*spec.time_span, size=n))
        phi = harmonic_phi(t, spec.harmonic, spec.period)
        covariates["time"] = t
    else:
        phi = np.tile(comp.ilr(spec.proportions), (n, 1))
    if spec.kappa > 0:
        phi = phi + rng.normal(0.0, np.sqrt(spec.kappa), phi.shape)
    p = comp.ilr_inv(phi)
    Y, s, c = simulate_consumers(p, spec.sources, spec.tefs, spec.sigma, rng)
    consumers = ConsumerDataset(Y, tuple(spec.sources.isotopes), covariates)
    samples = simulate_source_samples(spec.sources, spec.source_samples, rng)
    truth = dict(p=p, phi=phi, s=s, c=c, sigma=spec.sigma)
    return dict(consumers=consumers, source_samples=samples, tefs=spec.tefs, truth=truth)
