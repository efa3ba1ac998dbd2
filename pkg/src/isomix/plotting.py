"""Static figures. Each plot first builds a table, writes it as CSV, and
then renders the SVG from that table alone."""
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

from .data import fmt  # noqa: E402
from .diagnostics import covariance_ellipse  # noqa: E402

__all__ = [
    "isospace_table",
    "proportion_density_table",
    "ribbon_table",
    "predictive_table",
    "isospace_plot",
    "proportion_density_plot",
    "ribbon_plot",
    "predictive_plot",
]

ELLIPSE_LEVELS = (0.5, 0.9)
plt.rcParams["svg.hashsalt"] = "isomix"


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- tables ------------------------------------------------------------------

def isospace_table(consumers, sources, tefs, n=100):
    """Rows ``(kind, label, level, x, y)``: consumer points, then each
    source's TEF-corrected 50% and 90% ellipses."""
    rows = [("consumer", str(i + 1), 0.0, float(y[0]), float(y[1])) for i, y in enumerate(consumers.Y)]
    mean = np.asarray(sources.mean) + np.asarray(tefs.mean)
    cov = np.asarray(sources.cov) + np.asarray(tefs.cov)
    for k, name in enumerate(sources.names):
        for lev in ELLIPSE_LEVELS:
            for x, y in covariance_ellipse(mean[k], cov[k], lev, n):
                rows.append(("ellipse", name, lev, float(x), float(y)))
    return rows


def proportion_density_table(pop, names, n_grid=201):
    """Rows ``(source, p, density)``: kernel density of each source's
    population-mean proportion over ``[0, 1]``."""
    grid = np.linspace(0.0, 1.0, n_grid)
    rows = []
    for k, name in enumerate(names):
        x = pop[:, k]
        if np.ptp(x) > 0:
            dens = stats.gaussian_kde(x)(grid)
        else:
            dens = np.where(np.isclose(grid, x[0], atol=0.5 / (n_grid - 1)), float(n_grid - 1), 0.0)
        rows += [(name, float(g), float(d)) for g, d in zip(grid, dens)]
    return rows


def ribbon_table(p, times, names, band=0.9):
    """Rows ``(source, time, median, lower, upper)`` from proportion draws
    ``p`` of shape ``(draws, N, K)``, one row per distinct time (consumers
    sharing a time are pooled)."""
    lo, hi = (1 - band) / 2, 1 - (1 - band) / 2
    times = np.asarray(times, dtype=float)
    rows = []
    for k, name in enumerate(names):
        for t in np.unique(times):
            x = p[:, times == t, k].ravel()
            q = np.quantile(x, [lo, 0.5, hi])
            rows.append((name, float(t), float(q[1]), float(q[0]), float(q[2])))
    return rows


def predictive_table(grid_x, grid_y, density, Y):
    """Rows ``(kind, x, y, value)``: the density grid, then the observations."""
    rows = [("density", float(x), float(y), float(density[b, a]))
            for b, y in enumerate(grid_y) for a, x in enumerate(grid_x)]
    rows += [("observation", float(y[0]), float(y[1]), 0.0) for y in Y]
    return rows


# -- renderers ---------------------------------------------------------------

def isospace_plot(svg_path, data_path, consumers, sources, tefs):
    rows = isospace_table(consumers, sources, tefs)
    _write_rows(data_path, ["kind", "label", "level", "x", "y"], rows)
    iso = consumers.isotopes
    fig, ax = plt.subplots(figsize=(6, 5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, name in enumerate(sources.names):
        col = colors[k % len(colors)]
        for lev in ELLIPSE_LEVELS:
            pts = np.array([(r[3], r[4]) for r in rows if r[0] == "ellipse" and r[1] == name and r[2] == lev])
            if lev == 0.5:
                ax.fill(pts[:, 0], pts[:, 1], color=col, alpha=0.4, label=name)
            else:
                ax.plot(pts[:, 0], pts[:, 1], color=col)
    pts = np.array([(r[3], r[4]) for r in rows if r[0] == "consumer"])
    ax.plot(pts[:, 0], pts[:, 1], "k.", label="consumers")
    ax.set_xlabel(iso[0])
    ax.set_ylabel(iso[1])
    ax.legend(fontsize="small")
    _save(fig, svg_path)
    return rows


def proportion_density_plot(svg_path, data_path, pop, names):
    rows = proportion_density_table(pop, names)
    _write_rows(data_path, ["source", "p", "density"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in names:
        pts = np.array([(r[1], r[2]) for r in rows if r[0] == name])
        ax.plot(pts[:, 0], pts[:, 1], label=name)
    ax.set_xlabel("proportion")
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    _save(fig, svg_path)
    return rows


def ribbon_plot(svg_path, data_path, p, times, names, band=0.9):
    rows = ribbon_table(p, times, names, band)
    _write_rows(data_path, ["source", "time", "median", "lower", "upper"], rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in names:
        pts = np.array([r[1:] for r in rows if r[0] == name])
        line, = ax.plot(pts[:, 0], pts[:, 1], label=name)
        ax.fill_between(pts[:, 0], pts[:, 2], pts[:, 3], color=line.get_color(), alpha=0.25)
    ax.set_xlabel("time")
    ax.set_ylabel("proportion")
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    _save(fig, svg_path)
    return rows


def predictive_plot(svg_path, data_path, grid_x, grid_y, density, Y, isotopes):
    rows = predictive_table(grid_x, grid_y, density, Y)
    _write_rows(data_path, ["kind", "x", "y", "value"], rows)
    dens = np.array([r[3] for r in rows if r[0] == "density"]).reshape(len(grid_y), len(grid_x))
    obs = np.array([(r[1], r[2]) for r in rows if r[0] == "observation"])
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.contour(grid_x, grid_y, dens, levels=8)
    ax.plot(obs[:, 0], obs[:, 1], "k.")
    ax.set_xlabel(isotopes[0])
    ax.set_ylabel(isotopes[1])
    _save(fig, svg_path)
    return rows
