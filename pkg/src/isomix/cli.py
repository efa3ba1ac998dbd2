"""Command-line front end.

Subcommands: ``simulate``, ``check``, ``sources``, ``fit``, ``dic`` and
``plot``. Outputs are staged in a scratch directory and moved into the
output directory only when a command succeeds, so a failed run leaves no
partial files. Every command writes ``manifest.json``.
"""
import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__, _jit
from . import compositional as comp
from . import diagnostics as dg
from . import plotting
from . import sampler
from . import source_spline as ss
from .bspline import SplineSpanError
from .config import ConfigError, generative_spec, load_config
from .data import (
    DataError, _read_rows, empirical_bayes_summarize, fmt, isospace_check, load_concentrations, load_consumers,
    load_source_summary, load_source_trajectory, load_sources, load_tefs, write_consumers, write_samples,
    write_summary,
)
from .model import ModelError, build_model
from .simulate import simulate

__all__ = ["main", "build_parser", "write_draws", "read_draws"]

log = logging.getLogger("isomix")

OUT_ENV = "ISOMIX_OUT"
DEFAULT_OUT = "isomix_out"
RHAT_WARN = 1.1
ERRORS = (DataError, ModelError, ConfigError, sampler.SamplerError, ss.SplineFitError, dg.DiagnosticsError,
          OSError, np.linalg.LinAlgError)


# -- output staging and manifest ---------------------------------------------

class Outputs:
    """Scratch directory whose files are moved to ``out`` on :meth:`commit`."""

    def __init__(self, out):
        self.out = os.path.abspath(out)
        parent = os.path.dirname(self.out)
        os.makedirs(parent, exist_ok=True)
        self.stage = tempfile.mkdtemp(prefix=".isomix-stage-", dir=parent)
        self.files = []

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.stage, name)

    def commit(self):
        os.makedirs(self.out, exist_ok=True)
        for name in self.files:
            os.replace(os.path.join(self.stage, name), os.path.join(self.out, name))
        self.discard()

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(outs, command, cfg, args, started, extra=None):
    files = [dict(file=name, sha256=_sha256(os.path.join(outs.stage, name))) for name in outs.files]
    data = {k: cfg.data_path(k, required=False) for k in cfg.data if k != "time_covariate"}
    doc = dict(command=command, config=os.path.abspath(cfg.path) if cfg.path else None, data=data,
               seed=cfg.seed, argv=sys.argv[1:] if args is None else args, started=started, finished=_now(),
               version=__version__, numba=_jit.USE_NUMBA, output_dir=outs.out, outputs=files)
    doc.update(extra or {})
    with open(outs.path("manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- draws file ----------------------------------------------------------------

def write_draws(path, draws):
    """One row per retained draw: chain, draw, iteration, deviance, every
    top-level scalar, then ``phi[i,r]`` for every consumer."""
    labels, scal = draws.scalar_parameters()
    m = draws.model
    phi_labels = [f"phi[{i + 1},{r + 1}]" for i in range(m.N) for r in range(m.K - 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw", "iteration", "deviance"] + labels + phi_labels)
        for c in range(draws.n_chains):
            for d in range(draws.n_draws):
                w.writerow([c + 1, d + 1, int(draws.iteration[c, d]), fmt(draws.deviance[c, d])]
                           + [fmt(v) for v in scal[c, d]] + [fmt(v) for v in draws.phi[c, d].ravel()])


def read_draws(path):
    """``(header, array)`` of a draws file."""
    header, body = _read_rows(path)
    return header, np.array([[float(v) for v in r] for _, r in body])


def draws_proportions(header, table, K):
    """Proportion draws ``(draws, N, K)`` from the ``phi`` columns of a draws table."""
    cols = [j for j, h in enumerate(header) if h.startswith("phi[")]
    n = len(cols) // (K - 1)
    phi = table[:, cols].reshape(-1, n, K - 1)
    return comp.ilr_inv(phi, comp.build_ilr_basis(K))


# -- data loading ------------------------------------------------------------

def _header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def load_inputs(cfg, time_varying=False, threads=1):
    """Consumers, source summary, TEF summary, concentrations and (when
    time-varying) the fitted source trajectory."""
    consumers = load_consumers(cfg.data_path("consumers"))
    spath = cfg.data_path("sources")
    header = _header(spath)
    traj = None
    tcol = cfg.data.get("time_covariate", "time")
    if any(h.startswith("var_") for h in header) and "time" in header:
        sources = load_source_trajectory(spath)
    elif any(h.startswith("mean_") for h in header):
        sources = load_source_summary(spath, isotopes=consumers.isotopes)
    else:
        samples = load_sources(spath)
        if time_varying:
            if tcol not in consumers.covariates:
                raise DataError(f"time-varying sources need a {tcol!r} column in the consumer file")
            fits = fit_splines(cfg, samples, threads)
            times = np.unique(np.asarray(consumers.covariates[tcol], dtype=float))
            try:
                traj = ss.predict_trajectory(fits, times, samples.names)
            except SplineSpanError as exc:
                raise DataError(f"consumer times outside the source sampling span: {exc}") from None
            sources = traj.to_summary()
        else:
            sources = empirical_bayes_summarize(samples)
    if time_varying and sources.times is None:
        raise DataError("--time-varying-sources needs timed source samples or a trajectory file")
    tefs = empirical_bayes_summarize(load_tefs(cfg.data_path("tefs"), sources=sources.names,
                                               isotopes=sources.isotopes))
    q = None
    qpath = cfg.data_path("concentrations", required=False)
    if qpath:
        q = load_concentrations(qpath, sources=sources.names, isotopes=sources.isotopes)
    return consumers, sources, tefs, q, traj


def fit_splines(cfg, samples, threads=1):
    sp = cfg.source_spline
    pri = ss.SplinePriors(**{k: float(sp[k]) for k in ("tau_shape", "tau_rate", "anchor_sd", "kappa_sigma")
                             if k in sp})
    return ss.fit_source_spline(samples, knot_count=int(sp.get("knot_count", 25)), degree=int(sp.get("degree", 3)),
                                priors=pri, restarts=int(sp.get("restarts", 5)), seed=cfg.seed, threads=threads)


# -- commands ------------------------------------------------------------------

def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.time_varying_sources:
        cfg.time_varying_sources = True
    return cfg


def _mcmc(cfg, args):
    return cfg.mcmc_config(seed=cfg.seed, chains=args.chains, iterations=args.iterations, burn_in=args.burn_in,
                           thin=args.thin, threads=args.threads)


def cmd_simulate(cfg, args, outs):
    spec = generative_spec(cfg.simulate, seed=cfg.seed)
    res = simulate(spec)
    write_consumers(outs.path("consumers.csv"), res["consumers"])
    write_samples(outs.path("sources.csv"), res["source_samples"])
    write_summary(outs.path("tefs.csv"), res["tefs"])
    tr = res["truth"]
    truth = dict(sources=list(spec.sources.names), isotopes=list(spec.sources.isotopes),
                 p=tr["p"].tolist(), phi=tr["phi"].tolist(), sigma=np.asarray(tr["sigma"]).tolist(),
                 s=tr["s"].tolist(), c=tr["c"].tolist())
    with open(outs.path("truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
        fh.write("\n")
    print(f"simulated {spec.n_consumers} consumers from {spec.sources.K} sources")
    return {}


def cmd_check(cfg, args, outs):
    consumers, sources, tefs, _, _ = load_inputs(cfg, cfg.time_varying_sources, args.threads or 1)
    rep = isospace_check(consumers, sources, tefs)
    path = outs.path("hull_report.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["consumer", "inside", "distance"])
        if rep.computed:
            for i in range(consumers.n):
                w.writerow([i + 1, int(rep.inside[i]), fmt(rep.distance[i])])
    if rep.computed:
        outside = np.flatnonzero(~rep.inside) + 1
        print(f"{consumers.n} consumers, {len(outside)} outside the hull of TEF-corrected source means"
              + (f": {', '.join(map(str, outside))}" if len(outside) else ""))
    else:
        print(rep.message)
    return {}


def cmd_sources(cfg, args, outs):
    samples = load_sources(cfg.data_path("sources"))
    fits = fit_splines(cfg, samples, args.threads or 1)
    lo = max(f.span[0] for f in fits.values())
    hi = min(f.span[1] for f in fits.values())
    grid = np.linspace(lo, hi, int(cfg.source_spline.get("grid", 200)))
    traj = ss.predict_trajectory(fits, grid, samples.names)
    ss.write_trajectory(outs.path("source_trajectory.csv"), traj)
    params = {n: dict(rho=f.rho, tau_mean=f.tau_mean.tolist(), tau_logvar=f.tau_logvar.tolist(),
                      span=list(f.span), knot_count=f.knot_count, degree=f.degree,
                      beta_mean=f.beta_mean.tolist(), beta_logvar=f.beta_logvar.tolist(),
                      objective=f.diagnostics["objective"], grad_max=f.diagnostics["grad_max"])
              for n, f in fits.items()}
    with open(outs.path("source_spline.json"), "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for n, f in fits.items():
        print(f"{n}: rho = {f.rho:.3f}, gradient max-norm {f.diagnostics['grad_max']:.2g}")
    return {}


def _warn_rhat(rhat, label=""):
    bad = {k: v for k, v in rhat.items() if np.isfinite(v) and v > RHAT_WARN}
    if bad:
        worst = ", ".join(f"{k}={v:.3f}" for k, v in sorted(bad.items(), key=lambda kv: -kv[1])[:5])
        print(f"WARNING: {label}R-hat > {RHAT_WARN} for {len(bad)} parameter(s) ({worst}); "
              "the chains have not converged", file=sys.stderr)
    return bad


def _fit_one(cfg, args, entry=None):
    consumers, sources, tefs, q, traj = load_inputs(cfg, cfg.time_varying_sources, args.threads or 1)
    spec = cfg.model_spec(entry, concentration=q)
    model = build_model(consumers, sources, tefs, spec, time_covariate=cfg.data.get("time_covariate", "time"))
    mc = _mcmc(cfg, args)
    draws = sampler.run(model, mc)
    rhat = sampler.gelman_rubin(draws, min_draws=2) if mc.chains >= 2 and draws.n_draws >= 2 else {}
    return consumers, model, draws, rhat, traj


def cmd_fit(cfg, args, outs):
    consumers, model, draws, rhat, traj = _fit_one(cfg, args)
    write_draws(outs.path("draws.csv"), draws)
    rep = dg.dic(draws)
    summ = dg.summarize(draws)
    pcfg = cfg.predictive
    pp = dg.posterior_predictive(draws, seed=cfg.seed, mode=pcfg.get("mode", "conditional"),
                                 level=float(pcfg.get("level", 0.95)))
    dg.write_summary_report(outs.path("summary.json"), summ, rep, pp,
                            extra=dict(acceptance={k: float(np.mean(v)) for k, v in draws.acceptance.items()}))
    dg.write_proportion_table(outs.path("proportions.csv"), summ)
    if pp.density is not None:
        dg.write_density_grid(outs.path("predictive_density.csv"), pp)
    if traj is not None:
        ss.write_trajectory(outs.path("source_trajectory.csv"), traj)
    bad = _warn_rhat(rhat)
    print(f"{draws.n_chains} chains x {draws.n_draws} draws; DIC(p_v) = {rep.dic_pv:.2f}, "
          f"DIC(p_D) = {rep.dic_pd:.2f}; {pp.fraction_inside:.0%} of observations inside the "
          f"{pp.level:.0%} predictive region")
    return dict(mcmc=dict(chains=draws.n_chains, iterations=draws.config.iterations,
                          burn_in=draws.config.burn_in, thin=draws.config.thin),
                rhat_warnings=sorted(bad))


def cmd_dic(cfg, args, outs):
    if not cfg.models:
        raise ConfigError("config: `models` (name -> formula) is required for the dic command")
    reports, warnings_ = {}, {}
    for name, entry in cfg.models.items():
        _, _, draws, rhat, _ = _fit_one(cfg, args, entry)
        reports[name] = dg.dic(draws)
        warnings_[name] = sorted(_warn_rhat(rhat, f"model {name!r}: "))
    dg.write_dic_table(outs.path("dic_table.csv"), reports)
    width = max(len(n) for n in reports)
    print(f"{'model':<{width}}  {'mean D':>10}  {'p_D':>8}  {'DIC(p_D)':>10}  {'p_V':>8}  {'DIC(p_V)':>10}")
    for name, r in reports.items():
        print(f"{name:<{width}}  {r.mean_deviance:10.2f}  {r.p_d:8.2f}  {r.dic_pd:10.2f}  {r.p_v:8.2f}  "
              f"{r.dic_pv:10.2f}")
    return dict(rhat_warnings=warnings_)


def cmd_plot(cfg, args, outs):
    consumers, sources, tefs, _, _ = load_inputs(cfg, False)
    names = sources.names
    done = []
    if consumers.J == 2 and sources.times is None and not cfg.time_varying_sources:
        plotting.isospace_plot(outs.path("isospace.svg"), outs.path("isospace.csv"), consumers, sources, tefs)
        done.append("isospace")
    draws_path = os.path.join(outs.out, "draws.csv")
    if os.path.exists(draws_path):
        header, table = read_draws(draws_path)
        p = draws_proportions(header, table, len(names))
        plotting.proportion_density_plot(outs.path("proportions.svg"), outs.path("proportions_density.csv"),
                                         p.mean(axis=1), names)
        done.append("proportions")
        tcol = cfg.data.get("time_covariate", "time")
        if tcol in consumers.covariates:
            plotting.ribbon_plot(outs.path("proportions_time.svg"), outs.path("proportions_time.csv"), p,
                                 consumers.covariates[tcol], names)
            done.append("proportions_time")
    grid_path = os.path.join(outs.out, "predictive_density.csv")
    if os.path.exists(grid_path):
        g = np.loadtxt(grid_path, delimiter=",", skiprows=1, ndmin=2)
        gx = np.unique(g[:, 0])
        gy = np.unique(g[:, 1])
        plotting.predictive_plot(outs.path("predictive.svg"), outs.path("predictive.csv"), gx, gy,
                                 g[:, 2].reshape(gy.size, gx.size), consumers.Y, consumers.isotopes)
        done.append("predictive")
    if not done:
        raise DataError(f"nothing to plot: no iso-space inputs and no draws.csv in {outs.out}")
    print("wrote plots: " + ", ".join(done))
    return {}


COMMANDS = dict(simulate=cmd_simulate, check=cmd_check, sources=cmd_sources, fit=cmd_fit, dic=cmd_dic,
                plot=cmd_plot)


# -- entry point ---------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="isomix", description="Bayesian stable isotope mixing models.")
    ap.add_argument("--version", action="version", version=f"isomix {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = dict(simulate="write a synthetic dataset and its truth", check="validate data, iso-space hull report",
                 sources="fit time-varying source splines", fit="fit one mixing model",
                 dic="compare the models listed in the config by DIC", plot="write SVG figures and plot data")
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--chains", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--thin", type=int)
        p.add_argument("--threads", type=int, help="cap on concurrent chains / source fits")
        p.add_argument("--out", help=f"output directory (default: config `out`, ${OUT_ENV}, or ./{DEFAULT_OUT})")
        p.add_argument("--time-varying-sources", action="store_true",
                       help="summarise sources by spline trajectories at the consumer times")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    outs = None
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = args.out or cfg.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
        outs = Outputs(out)
        extra = COMMANDS[args.command](cfg, args, outs)
        write_manifest(outs, args.command, cfg, argv, started, extra)
        outs.commit()
    except ERRORS as exc:
        if outs is not None:
            outs.discard()
        print(f"isomix {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BaseException:
        if outs is not None:
            outs.discard()
        raise
    print(f"outputs in {outs.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
