"""Consumer, source, TEF and concentration data; empirical-Bayes summaries.

All files are comma-separated UTF-8 text with a header row. Isotope column
order is taken from the source file and enforced on every other file.
"""
import csv
import logging
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "DegenerateCovarianceWarning",
    "ConsumerDataset",
    "SourceSamples",
    "TefSamples",
    "SourceSummary",
    "TefSummary",
    "ConcentrationTable",
    "HullReport",
    "empirical_bayes_summarize",
    "load_consumers",
    "load_sources",
    "load_tefs",
    "load_concentrations",
    "load_source_trajectory",
    "write_consumers",
    "write_samples",
    "write_summary",
    "isospace_check",
    "is_isotope_name",
]

_ISOTOPE_RE = re.compile(r"^(d|delta)\d+[A-Za-z]+$")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class DegenerateCovarianceWarning(UserWarning):
    """A summary covariance matrix is singular."""


def is_isotope_name(name):
    return bool(_ISOTOPE_RE.match(name.strip()))


def fmt(x):
    """Shortest repr that round-trips a double."""
    return repr(float(x))


@dataclass(frozen=True)
class ConsumerDataset:
    Y: np.ndarray
    isotopes: tuple
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != len(self.isotopes) or len(self.isotopes) < 1:
            raise DataError(f"consumer matrix shape {Y.shape} does not match isotopes {self.isotopes}")
        if not np.all(np.isfinite(Y)):
            raise DataError("consumer isotope values must be finite")
        for name, col in self.covariates.items():
            if len(col) != Y.shape[0]:
                raise DataError(f"covariate {name!r} has {len(col)} values for {Y.shape[0]} consumers")
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def J(self):
        return self.Y.shape[1]

    def covariate(self, name):
        try:
            return self.covariates[name]
        except KeyError:
            raise DataError(f"unknown covariate {name!r}; available: {sorted(self.covariates)}") from None


@dataclass(frozen=True)
class SourceSamples:
    names: tuple
    isotopes: tuple
    samples: dict
    times: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.names)


@dataclass(frozen=True)
class TefSamples:
    """Per-source TEF data: raw sample rows and/or a direct (mean, cov)."""

    names: tuple
    isotopes: tuple
    samples: dict = field(default_factory=dict)
    direct: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.names)


@dataclass(frozen=True)
class SourceSummary:
    """Gaussian summary per source.

    ``mean`` is ``(K, J)`` and ``cov`` ``(K, J, J)``. A time-indexed summary
    carries ``times`` of length ``T`` with ``mean`` ``(T, K, J)`` and
    ``cov`` ``(T, K, J, J)``.
    """

    names: tuple
    isotopes: tuple
    mean: np.ndarray
    cov: np.ndarray
    times: np.ndarray = None

    @property
    def K(self):
        return len(self.names)

    @property
    def J(self):
        return len(self.isotopes)

    def at(self, t):
        """Means and covariances at consumer times ``t``: ``(N,K,J)``, ``(N,K,J,J)``.

        Static summaries are broadcast; time-indexed ones are interpolated
        linearly in the mean, the log variances and the correlations.
        """
        t = np.asarray(t, dtype=float)
        if self.times is None:
            return (np.broadcast_to(self.mean, (t.size,) + self.mean.shape).copy(),
                    np.broadcast_to(self.cov, (t.size,) + self.cov.shape).copy())
        lo, hi = self.times[0], self.times[-1]
        if np.any(t < lo - 1e-9) or np.any(t > hi + 1e-9):
            raise DataError(f"consumer times outside the source trajectory span [{lo}, {hi}]")
        sd = np.sqrt(np.einsum("tkjj->tkj", self.cov))
        corr = self.cov / (sd[..., :, None] * sd[..., None, :])
        logv = 2 * np.log(sd)

        def interp(arr):
            flat = arr.reshape(len(self.times), -1)
            out = np.column_stack([np.interp(t, self.times, flat[:, c]) for c in range(flat.shape[1])])
            return out.reshape((t.size,) + arr.shape[1:])

        mean = interp(self.mean)
        sd_t = np.exp(0.5 * interp(logv))
        corr_t = interp(corr)
        cov = corr_t * sd_t[..., :, None] * sd_t[..., None, :]
        return mean, cov


class TefSummary(SourceSummary):
    pass


@dataclass(frozen=True)
class ConcentrationTable:
    names: tuple
    isotopes: tuple
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.shape != (len(self.names), len(self.isotopes)):
            raise DataError(f"concentration table shape {q.shape} does not match sources/isotopes")
        if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q > 1):
            raise DataError("concentrations must lie in (0, 1]")
        object.__setattr__(self, "q", q)

    @classmethod
    def ones(cls, names, isotopes):
        return cls(tuple(names), tuple(isotopes), np.ones((len(names), len(isotopes))))


def _summarize_one(name, x):
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise DataError(f"missing source {name!r}: no samples")
    if x.shape[0] == 1:
        raise DataError(f"insufficient samples for source {name!r}: need at least 2 rows or a direct covariance")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        warnings.warn(f"source {name!r} has a singular sample covariance", DegenerateCovarianceWarning, stacklevel=3)
    return mu, cov


def empirical_bayes_summarize(samples):
    """Sample mean and unbiased (``M-1``) covariance for every source.

    Accepts :class:`SourceSamples` or :class:`TefSamples`; a direct TEF
    specification is passed through unchanged.
    """
    means, covs = [], []
    for name in samples.names:
        direct = getattr(samples, "direct", {}).get(name)
        if direct is not None:
            mu, cov = (np.asarray(a, dtype=float) for a in direct)
        else:
            mu, cov = _summarize_one(name, samples.samples.get(name, np.empty((0, len(samples.isotopes)))))
        means.append(mu)
        covs.append(cov)
    cls = TefSummary if isinstance(samples, TefSamples) else SourceSummary
    return cls(tuple(samples.names), tuple(samples.isotopes), np.array(means), np.array(covs))


# -- file parsing ------------------------------------------------------------

def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    (_, header), body = rows[0], rows[1:]
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError(f"{path}:1: duplicate column names")
    if not body:
        raise DataError(f"{path}: header but no data rows")
    for lineno, r in body:
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(r)}")
    return header, body


def _float(path, lineno, col, value):
    try:
        x = float(value)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r}: cannot parse {value!r} as a number") from None
    if not np.isfinite(x):
        raise DataError(f"{path}:{lineno}: column {col!r}: non-finite value {value!r}")
    return x


def _check_isotopes(path, found, expected):
    if expected is not None and tuple(found) != tuple(expected):
        if set(found) == set(expected):
            return
        raise DataError(f"{path}: isotope columns {tuple(found)} do not match {tuple(expected)}")


def load_consumers(path, isotopes=None):
    """Read a consumer file.

    Isotope columns are ``isotopes`` if given, otherwise every column named
    like ``d13C`` or ``delta15N``. Remaining columns become covariates:
    numeric when every value parses, categorical strings otherwise.
    """
    header, body = _read_rows(path)
    if isotopes is None:
        isotopes = tuple(h for h in header if is_isotope_name(h))
        if not isotopes:
            raise DataError(f"{path}: no isotope columns found in header {header}")
    missing = [iso for iso in isotopes if iso not in header]
    if missing:
        raise DataError(f"{path}: isotope columns {missing} missing from header")
    idx = [header.index(iso) for iso in isotopes]
    Y = np.array([[_float(path, ln, header[c], r[c]) for c in idx] for ln, r in body])
    covariates = {}
    for c, name in enumerate(header):
        if c in idx:
            continue
        raw = [r[c].strip() for _, r in body]
        for (ln, _), v in zip(body, raw):
            if v == "":
                raise DataError(f"{path}:{ln}: missing value for covariate {name!r}")
        try:
            col = np.array([float(v) for v in raw])
        except ValueError:
            col = np.array(raw, dtype=object)
        covariates[name] = col
    if covariates:
        log.info("%s: %d consumers, covariates %s", path, len(body), ", ".join(covariates))
    return ConsumerDataset(Y, tuple(isotopes), covariates)


_DIRECT_RE = re.compile(r"^(mean|sd)_(.+)$")


def _group_by_source(path, header, body, value_cols, known=None):
    if "source" not in header:
        raise DataError(f"{path}:1: missing 'source' column")
    s_idx = header.index("source")
    groups = {}
    for ln, r in body:
        name = r[s_idx].strip()
        if not name:
            raise DataError(f"{path}:{ln}: empty source label")
        if known is not None and name not in known:
            raise DataError(f"{path}:{ln}: unknown source label {name!r}")
        groups.setdefault(name, []).append((ln, r))
    return groups


def load_sources(path):
    """Read raw source samples (``source``, isotope columns, optional ``time``)."""
    header, body = _read_rows(path)
    isotopes = tuple(h for h in header if h not in ("source", "time"))
    if not isotopes:
        raise DataError(f"{path}:1: no isotope columns")
    groups = _group_by_source(path, header, body, isotopes)
    if len(groups) < 2:
        raise DataError(f"{path}: need at least 2 sources, found {len(groups)}")
    idx = [header.index(i) for i in isotopes]
    samples, times = {}, {}
    for name, rows in groups.items():
        samples[name] = np.array([[_float(path, ln, header[c], r[c]) for c in idx] for ln, r in rows])
        if "time" in header:
            t = header.index("time")
            times[name] = np.array([_float(path, ln, "time", r[t]) for ln, r in rows])
    return SourceSamples(tuple(groups), isotopes, samples, times)


def _parse_direct(path, header, body, known, isotopes):
    iso_mean = [m.group(2) for h in header if (m := _DIRECT_RE.match(h)) and m.group(1) == "mean"]
    _check_isotopes(path, iso_mean, isotopes)
    isotopes = tuple(isotopes) if isotopes is not None else tuple(iso_mean)
    for iso in isotopes:
        if f"sd_{iso}" not in header:
            raise DataError(f"{path}:1: missing column sd_{iso}")
    groups = _group_by_source(path, header, body, isotopes, known)
    direct = {}
    for name, rows in groups.items():
        if len(rows) != 1:
            raise DataError(f"{path}:{rows[1][0]}: duplicate row for source {name!r}")
        ln, r = rows[0]
        mu = np.array([_float(path, ln, f"mean_{i}", r[header.index(f"mean_{i}")]) for i in isotopes])
        sd = np.array([_float(path, ln, f"sd_{i}", r[header.index(f"sd_{i}")]) for i in isotopes])
        if np.any(sd < 0):
            raise DataError(f"{path}:{ln}: negative standard deviation")
        cov = np.diag(sd ** 2)
        for a in range(len(isotopes)):
            for b in range(a + 1, len(isotopes)):
                col = f"cov_{isotopes[a]}_{isotopes[b]}"
                if col in header:
                    cov[a, b] = cov[b, a] = _float(path, ln, col, r[header.index(col)])
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise DataError(f"{path}:{ln}: covariance for {name!r} is not positive semidefinite")
        direct[name] = (mu, cov)
    return isotopes, direct


def load_tefs(path, sources=None, isotopes=None):
    """Read TEF data as raw samples or as ``source, mean_<iso>, sd_<iso>`` rows.

    The direct format may also carry ``cov_<a>_<b>`` off-diagonal columns.
    ``sources`` restricts (and orders) the allowed labels.
    """
    header, body = _read_rows(path)
    known = None if sources is None else tuple(sources)
    if any(_DIRECT_RE.match(h) for h in header):
        isotopes, direct = _parse_direct(path, header, body, known, isotopes)
        names = known or tuple(direct)
        return TefSamples(tuple(names), isotopes, {}, direct)
    found = tuple(h for h in header if h not in ("source", "time"))
    _check_isotopes(path, found, isotopes)
    isotopes = tuple(isotopes) if isotopes is not None else found
    groups = _group_by_source(path, header, body, isotopes, known)
    idx = [header.index(i) for i in isotopes]
    samples = {name: np.array([[_float(path, ln, header[c], r[c]) for c in idx] for ln, r in rows])
               for name, rows in groups.items()}
    names = known or tuple(groups)
    return TefSamples(tuple(names), isotopes, samples, {})


def load_source_summary(path, sources=None, isotopes=None):
    """Read a direct Gaussian source summary (same layout as direct TEFs)."""
    header, body = _read_rows(path)
    isotopes, direct = _parse_direct(path, header, body, sources, isotopes)
    names = tuple(sources) if sources is not None else tuple(direct)
    missing = [n for n in names if n not in direct]
    if missing:
        raise DataError(f"{path}: missing source(s) {missing}")
    return SourceSummary(names, isotopes, np.array([direct[n][0] for n in names]),
                         np.array([direct[n][1] for n in names]))


def load_concentrations(path, sources=None, isotopes=None):
    header, body = _read_rows(path)
    found = tuple(h for h in header if h != "source")
    _check_isotopes(path, found, isotopes)
    isotopes = tuple(isotopes) if isotopes is not None else found
    known = None if sources is None else tuple(sources)
    groups = _group_by_source(path, header, body, isotopes, known)
    names = known or tuple(groups)
    q = []
    for name in names:
        if name not in groups:
            raise DataError(f"{path}: no concentration row for source {name!r}")
        ln, r = groups[name][0]
        q.append([_float(path, ln, i, r[header.index(i)]) for i in isotopes])
    try:
        return ConcentrationTable(tuple(names), isotopes, np.array(q))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_source_trajectory(path, sources=None):
    """Read a trajectory file written by :func:`isomix.source_spline.write_trajectory`."""
    header, body = _read_rows(path)
    isotopes = tuple(m.group(1) for h in header if (m := re.match(r"^mean_(.+)$", h)))
    if "time" not in header or not isotopes:
        raise DataError(f"{path}:1: expected columns source, time, mean_<iso>, var_<iso>[, corr]")
    groups = _group_by_source(path, header, body, isotopes, None if sources is None else set(sources))
    names = tuple(sources) if sources is not None else tuple(groups)
    J = len(isotopes)
    t_col = header.index("time")
    per = {}
    for name in names:
        if name not in groups:
            raise DataError(f"{path}: no trajectory rows for source {name!r}")
        rows = groups[name]
        t = np.array([_float(path, ln, "time", r[t_col]) for ln, r in rows])
        mu = np.array([[_float(path, ln, f"mean_{i}", r[header.index(f"mean_{i}")]) for i in isotopes]
                       for ln, r in rows])
        var = np.array([[_float(path, ln, f"var_{i}", r[header.index(f"var_{i}")]) for i in isotopes]
                        for ln, r in rows])
        rho = np.zeros(len(rows))
        if "corr" in header:
            rho = np.array([_float(path, ln, "corr", r[header.index("corr")]) for ln, r in rows])
        order = np.argsort(t, kind="stable")
        per[name] = (t[order], mu[order], var[order], rho[order])
    times = per[names[0]][0]
    for name in names[1:]:
        if not np.array_equal(per[name][0], times):
            raise DataError(f"{path}: sources must share the same time grid")
    mean = np.stack([per[n][1] for n in names], axis=1)
    sd = np.sqrt(np.stack([per[n][2] for n in names], axis=1))
    cov = sd[..., :, None] * sd[..., None, :]
    rho = np.stack([per[n][3] for n in names], axis=1)
    corr = np.broadcast_to(np.eye(J), cov.shape).copy()
    if J == 2:
        corr[..., 0, 1] = corr[..., 1, 0] = rho
    return SourceSummary(names, isotopes, mean, cov * corr, times=times)


# -- writers -----------------------------------------------------------------

def write_consumers(path, data):
    names = list(data.isotopes) + list(data.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(data.n):
            row = [fmt(v) for v in data.Y[i]]
            for col in data.covariates.values():
                v = col[i]
                row.append(fmt(v) if isinstance(v, (float, np.floating, int, np.integer)) else str(v))
            w.writerow(row)


def write_samples(path, samples):
    """Write raw :class:`SourceSamples` or :class:`TefSamples` rows."""
    has_time = bool(getattr(samples, "times", None))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + list(samples.isotopes) + (["time"] if has_time else []))
        for name in samples.names:
            x = samples.samples[name]
            for m in range(x.shape[0]):
                row = [name] + [fmt(v) for v in x[m]]
                if has_time:
                    row.append(fmt(samples.times[name][m]))
                w.writerow(row)


def write_summary(path, summary):
    """Direct ``source, mean_*, sd_*, cov_*_*`` layout for a static summary."""
    iso = summary.isotopes
    pairs = [(a, b) for a in range(len(iso)) for b in range(a + 1, len(iso))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [f"mean_{i}" for i in iso] + [f"sd_{i}" for i in iso]
                   + [f"cov_{iso[a]}_{iso[b]}" for a, b in pairs])
        for k, name in enumerate(summary.names):
            cov = summary.cov[k]
            w.writerow([name] + [fmt(v) for v in summary.mean[k]]
                       + [fmt(np.sqrt(cov[j, j])) for j in range(len(iso))]
                       + [fmt(cov[a, b]) for a, b in pairs])


# -- iso-space geometry ------------------------------------------------------

@dataclass(frozen=True)
class HullReport:
    computed: bool
    inside: np.ndarray = None
    distance: np.ndarray = None
    corrected_means: np.ndarray = None
    message: str = ""


def _hull(points):
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _segment_distance(y, a, b):
    ab = b - a
    denom = ab @ ab
    t = 0.0 if denom == 0 else np.clip((y - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(y - (a + t * ab))


def isospace_check(consumers, sources, tefs):
    """Report whether each consumer lies in the hull of TEF-corrected source means."""
    corrected = np.asarray(sources.mean) + np.asarray(tefs.mean)
    if consumers.J != 2 or corrected.ndim != 2:
        return HullReport(False, corrected_means=corrected if corrected.ndim == 2 else None,
                          message="hull report not computed: needs J = 2 and static source summaries")
    hull = _hull(corrected)
    scale = max(1.0, float(np.abs(corrected).max()))
    tol = 1e-9 * scale
    inside = np.zeros(consumers.n, dtype=bool)
    dist = np.zeros(consumers.n)
    for i, y in enumerate(consumers.Y):
        if len(hull) == 1:
            d = np.linalg.norm(y - hull[0])
            inside_i = d <= tol
        else:
            edges = [(hull[e], hull[(e + 1) % len(hull)]) for e in range(len(hull))]
            d = min(_segment_distance(y, a, b) for a, b in edges)
            if len(hull) == 2:
                inside_i = d <= tol
            else:
                crosses = [(b[0] - a[0]) * (y[1] - a[1]) - (b[1] - a[1]) * (y[0] - a[0]) for a, b in edges]
                inside_i = min(crosses) >= -tol * scale or d <= tol
        inside[i] = inside_i
        dist[i] = 0.0 if inside_i else d
    return HullReport(True, inside, dist, corrected)
