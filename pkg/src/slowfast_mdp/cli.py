"""Command-line experiment driver.

Usage: ``slowfast-mdp <subcommand> CONFIG.json [--out DIR] [--workers N]``.

Every subcommand writes CSV files plus ``manifest.json`` into the output
directory.  CSV bodies depend only on the config; timestamps and hashes go
to the manifest.  Exit codes: 0 success, 1 numerical fault, 2 assumption
failure or invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from . import __version__
from .averaging import averaged_coefficients, averaged_diffusion_alt
from .equilibrium import GridSpec, invariant_density
from .errors import AssumptionViolation, ConfigError, NumericalFault, SlowFastError
from .fluctuation import HermiteDictionary, fluctuation_pairings, tanh_function
from .model import Budget, build_model, validate_assumptions
from .poisson import solve_cell_problem
from .simulate import (ControlField, StepPolicy, coupling_error, simulate_averaged,
                       simulate_iid_mv, simulate_multiscale)

WORKERS_ENV = "SLOWFAST_MDP_WORKERS"
FMT = "%.17g"
SUBCOMMANDS = ("equilibrium", "cell", "average", "simulate", "couple", "fluctuate", "rate",
               "validate")
LIMIT_SEED_OFFSET = 2 ** 32


@dataclass
class ExperimentConfig:
    model: dict
    eps: list = field(default_factory=lambda: [0.1])
    N: list = field(default_factory=lambda: [64])
    rho_a: float = 0.25
    T: float = 1.0
    K: int = 20
    report_dt: float = 1e-2
    seeds: list = field(default_factory=lambda: [0])
    J: int = 16
    output_dir: str = "out"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.model, dict):
            raise ConfigError("model must be an object")
        self.eps = [float(e) for e in _as_list(self.eps)]
        self.N = [int(n) for n in _as_list(self.N)]
        self.seeds = [int(s) for s in _as_list(self.seeds)]
        if not self.eps or any(not 0 < e <= 1 for e in self.eps):
            raise ConfigError("eps values must lie in (0, 1]")
        if not self.N or any(n < 2 for n in self.N):
            raise ConfigError("N values must be at least 2")
        if not 0 < self.rho_a < 0.5:
            raise ConfigError("rho_a must lie in (0, 0.5)")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct non-negative integers")
        if not self.T > 0 or self.J < 1:
            raise ConfigError("T must be positive and J at least 1")
        self.policy = StepPolicy(K=int(self.K), report_dt=float(self.report_dt))
        self.policy.n_macro(self.T)

    def a_N(self, N):
        return float(N) ** (-self.rho_a)

    def to_dict(self):
        d = asdict(self)
        return d


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigError("config needs a model entry")
    return ExperimentConfig(**raw)


def worker_count(cli_value=None):
    if cli_value is not None:
        return max(1, int(cli_value))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    return 1


def _parallel_map(fn, items, workers):
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FMT % v
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# ---------------------------------------------------------------------------
# grid-level subcommands

def _grid(cfg):
    opt = cfg.options.get("grid", {})
    return GridSpec(n=int(opt.get("n", 2049)), half_width=opt.get("half_width"))


def _x_list(cfg):
    return [float(x) for x in _as_list(cfg.options.get("x", [0.0]))]


def _mu(cfg):
    from .measures import MeasureHandle
    atoms = cfg.options.get("mu_atoms", [0.0])
    return MeasureHandle.empirical(np.asarray(_as_list(atoms), dtype=float))


def run_equilibrium(cfg, out, workers=1):
    model = build_model(cfg.model)
    grid, mu = _grid(cfg), _mu(cfg)
    summary, density = [], []
    for x in _x_list(cfg):
        eq = invariant_density(model, x, mu, grid)
        m1, m2 = eq.moments[0], eq.moments[1]
        summary.append((x, eq.normalization, m1, m2 - m1 * m1, eq.tail_mass))
        density.extend((x, y, p) for y, p in zip(eq.y, eq.density))
    write_csv(out / "equilibrium.csv", ["x", "normalization", "mean", "variance", "tail_mass"],
              summary)
    write_csv(out / "equilibrium_density.csv", ["x", "y", "density"], density)
    return ["equilibrium.csv", "equilibrium_density.csv"]


def run_cell(cfg, out, workers=1):
    model = build_model(cfg.model)
    grid, mu = _grid(cfg), _mu(cfg)
    rows = []
    for x in _x_list(cfg):
        cell = solve_cell_problem(model, x, mu, grid=grid)
        rows.extend((x, y, u, uy, uyy) for y, u, uy, uyy in
                    zip(cell.y, cell.u, cell.u_y, cell.u_yy))
    write_csv(out / "cell.csv", ["x", "y", "phi", "phi_y", "phi_yy"], rows)
    return ["cell.csv"]


def run_average(cfg, out, workers=1):
    model = build_model(cfg.model)
    grid, mu = _grid(cfg), _mu(cfg)
    rows = []
    for x in _x_list(cfg):
        g, D = averaged_coefficients(model, x, mu, grid)
        rows.append((x, g, D, averaged_diffusion_alt(model, x, mu, grid)))
    write_csv(out / "average.csv", ["x", "gamma_bar", "D_bar", "D_bar_alt"], rows)
    return ["average.csv"]


def run_validate(cfg, out, workers=1):
    model = build_model(cfg.model)
    opts = cfg.options.get("budget", {})
    report = validate_assumptions(model, Budget(**opts))
    rows = [(name, int(c.passed), float(c.margin)) for name, c in sorted(report.checks.items())]
    write_csv(out / "validate.csv", ["assumption", "passed", "margin"], rows)
    failed = {k: c.witness for k, c in report.checks.items() if not c.passed}
    with open(out / "validate.json", "w") as fh:
        json.dump({"passed": report.passed, "beta": report.beta, "failed": failed}, fh,
                  indent=2, sort_keys=True, default=float)
    if not report.passed:
        raise AssumptionViolation(f"assumptions failed: {sorted(failed)}")
    return ["validate.csv", "validate.json"]


# ---------------------------------------------------------------------------
# simulation subcommands

def _control_from(spec):
    if spec is None or spec == "none":
        return None
    if spec == "zero" or spec.get("family") == "zero":
        return ControlField.zero()
    fam = spec.get("family", "constant")
    if fam == "constant":
        return ControlField.constant(spec.get("h1", 0.0), spec.get("h2", 0.0))
    if fam == "expression":
        from .model import _EXPR_NAMESPACE
        code = {k: compile(spec[k], f"<control {k}>", "eval") for k in ("h1", "h2")}
        ns = dict(_EXPR_NAMESPACE)

        def fn(t, x, y):
            env = dict(ns, t=t, x=np.asarray(x), y=np.asarray(y))
            return (eval(code["h1"], {"__builtins__": {}}, env),
                    eval(code["h2"], {"__builtins__": {}}, env))
        return ControlField(fn=fn, name=f"expression({spec['h1']},{spec['h2']})")
    raise ConfigError(f"unknown control family {fam!r}")


def _simulate_one(model_cfg, system, N, eps, T, K, report_dt, seed, control_spec, a_N, m_aux):
    model = build_model(model_cfg)
    policy = StepPolicy(K=K, report_dt=report_dt)
    if system == "multiscale":
        path = simulate_multiscale(model, N, eps, T, policy, seed,
                                   control=_control_from(control_spec), a_N=a_N)
    elif system == "iid":
        path = simulate_iid_mv(model, N, m_aux, eps, T, policy, seed)
    elif system == "averaged":
        path = simulate_averaged(model, N, T, report_dt, seed)
    else:
        raise ConfigError(f"unknown system {system!r}")
    rows = []
    for k, t in enumerate(path.t):
        for i in range(path.N):
            rows.append((seed, t, i, path.X[i, k],
                         path.Y[i, k] if path.Y is not None else "",
                         path.U[i, k, 0] if path.U is not None else "",
                         path.U[i, k, 1] if path.U is not None else ""))
    return rows


def run_simulate(cfg, out, workers=1):
    system = cfg.options.get("system", "multiscale")
    N, eps = cfg.N[0], cfg.eps[0]
    jobs = [(cfg.model, system, N, eps, cfg.T, cfg.policy.K, cfg.policy.report_dt, s,
             cfg.options.get("control"), cfg.a_N(N), cfg.options.get("M_aux"))
            for s in sorted(cfg.seeds)]
    rows = [r for chunk in _parallel_map(_simulate_one, jobs, workers) for r in chunk]
    write_csv(out / "simulate.csv", ["seed", "t", "i", "X", "Y", "u1", "u2"], rows)
    return ["simulate.csv"]


def _coupling_job(model_cfg, N, eps, T, K, report_dt, seed, m_aux_factor):
    model = build_model(model_cfg)
    policy = StepPolicy(K=K, report_dt=report_dt)
    ms = simulate_multiscale(model, N, eps, T, policy, seed)
    av = simulate_averaged(model, m_aux_factor * N, T, report_dt, seed,
                           substeps=policy.substeps(eps), n_track=N)
    return coupling_error(ms, av)


def _weak_job(model_cfg, M, eps, T, K, report_dt, seed):
    model = build_model(model_cfg)
    policy = StepPolicy(K=K, report_dt=report_dt)
    iid = simulate_iid_mv(model, M, M, eps, T, policy, seed)
    av = simulate_averaged(model, M, T, report_dt, seed, substeps=policy.substeps(eps))
    phi = np.tanh
    return float(np.mean(phi(iid.X[:, -1])) - np.mean(phi(av.X[:, -1])))


def _slope(xs, ys):
    fit = linregress(np.log(xs), np.log(ys))
    return float(fit.slope), float(fit.stderr)


def run_coupling_study(cfg, out, workers=1):
    """Mean-square coupling gap and weak averaging gap versus eps and N.

    The slow gap compares the interacting multiscale system with the
    averaged McKean-Vlasov limit driven by the same W, B streams (its law
    realised by ``m_aux_factor * N`` particles).  The weak gap compares
    ``mean tanh`` of IID slow-fast particles and averaged particles with
    common random numbers; ``weak_samples`` particles are split over seeds.
    """
    if len(cfg.eps) < 3 or len(cfg.N) < 3 or len(cfg.seeds) < 10:
        raise ConfigError("coupling study needs >= 3 eps values, >= 3 N values and >= 10 seeds")
    opt = cfg.options
    m_aux = int(opt.get("m_aux_factor", 8))
    eps_list = sorted(cfg.eps, reverse=True)
    N_list = sorted(cfg.N)
    N_eps = int(opt.get("N_for_eps", N_list[-1]))
    eps_tiny = float(opt.get("eps_tiny", min(eps_list) / 2))
    seeds = sorted(cfg.seeds)
    base = (cfg.T, cfg.policy.K, cfg.policy.report_dt)

    jobs = [(cfg.model, N_eps, e, *base, s, m_aux) for e in eps_list for s in seeds]
    jobs += [(cfg.model, n, eps_tiny, *base, s, m_aux) for n in N_list for s in seeds]
    gaps = _parallel_map(_coupling_job, jobs, workers)
    rows = [("eps_sweep", j[2], j[1], j[6], g) for j, g in zip(jobs, gaps)]
    n_e = len(eps_list) * len(seeds)
    mean_eps = [float(np.mean(gaps[i * len(seeds):(i + 1) * len(seeds)]))
                for i in range(len(eps_list))]
    mean_N = [float(np.mean(gaps[n_e + i * len(seeds): n_e + (i + 1) * len(seeds)]))
              for i in range(len(N_list))]

    weak_total = int(opt.get("weak_samples", 10_000))
    per_seed = max(2, weak_total // len(seeds))
    wjobs = [(cfg.model, per_seed, e, *base, s) for e in eps_list for s in seeds]
    wvals = _parallel_map(_weak_job, wjobs, workers)
    weak = [abs(float(np.mean(wvals[i * len(seeds):(i + 1) * len(seeds)])))
            for i in range(len(eps_list))]
    rows += [("weak", j[2], j[1], j[6], v) for j, v in zip(wjobs, wvals)]
    write_csv(out / "coupling.csv", ["study", "eps", "N", "seed", "value"], rows)

    eps_slope, eps_se = _slope(eps_list, mean_eps)
    weak_slope, weak_se = _slope(eps_list, weak)
    decreases = sum(mean_N[i + 1] < mean_N[i] for i in range(len(mean_N) - 1))
    summary = [("eps_slope", eps_slope, eps_se), ("weak_slope", weak_slope, weak_se),
               ("N_decreasing_pairs", float(decreases), 0.0)]
    write_csv(out / "slopes.csv", ["quantity", "value", "stderr"], summary)
    write_csv(out / "coupling_means.csv", ["study", "eps", "N", "mean"],
              [("eps_sweep", e, N_eps, v) for e, v in zip(eps_list, mean_eps)]
              + [("N_sweep", eps_tiny, n, v) for n, v in zip(N_list, mean_N)]
              + [("weak", e, per_seed * len(seeds), v) for e, v in zip(eps_list, weak)])
    return ["coupling.csv", "slopes.csv", "coupling_means.csv"]


def _fluct_job(model_cfg, N, eps, T, K, report_dt, seed, a_N, limit_factor, J):
    model = build_model(model_cfg)
    policy = StepPolicy(K=K, report_dt=report_dt)
    emp = simulate_multiscale(model, N, eps, T, policy, seed)
    lim = simulate_averaged(model, limit_factor * N, T, report_dt, LIMIT_SEED_OFFSET + seed)
    funcs = [tanh_function()] + list(HermiteDictionary(J).members)
    field_ = fluctuation_pairings(emp, lim, a_N, funcs)
    return field_.t, field_.z


def run_fluctuation_study(cfg, out, workers=1):
    """Pairings of the fluctuation process with tanh (j = 0) and the dictionary.

    ``options.scaling`` is "mdp" (``a_N = N^-rho_a``) or "clt" (``a_N = 1``).
    """
    opt = cfg.options
    clt = opt.get("scaling", "mdp") == "clt"
    eps = cfg.eps[0]
    limit_factor = int(opt.get("limit_factor", 10))
    stride = int(opt.get("csv_stride", 10))
    seeds = sorted(cfg.seeds)
    Ns = sorted(cfg.N)
    jobs = [(cfg.model, n, eps, cfg.T, cfg.policy.K, cfg.policy.report_dt, s,
             1.0 if clt else cfg.a_N(n), limit_factor, cfg.J) for n in Ns for s in seeds]
    res = _parallel_map(_fluct_job, jobs, workers)
    rows = []
    for job, (t, z) in zip(jobs, res):
        keep = list(range(0, t.size, stride))
        if keep[-1] != t.size - 1:
            keep.append(t.size - 1)
        rows += [(job[1], job[6], t[k], j, z[j, k]) for k in keep for j in range(z.shape[0])]
    write_csv(out / "fluctuation.csv", ["N", "seed", "t", "j", "z"], rows)
    summary = {"scaling": "clt" if clt else "mdp", "eps": eps, "per_N": {}}
    for i, n in enumerate(Ns):
        zT = np.array([res[i * len(seeds) + s][1][:, -1] for s in range(len(seeds))])
        summary["per_N"][str(n)] = {"variance_T": [float(v) for v in zT.var(axis=0, ddof=1)],
                                    "mean_abs_T": [float(v) for v in np.abs(zT).mean(axis=0)]}
    v = [summary["per_N"][str(n)]["variance_T"][0] for n in Ns]
    summary["tanh_variance_ratio"] = v[-1] / v[0]
    with open(out / "fluctuation_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return ["fluctuation.csv", "fluctuation_summary.json"]


def run_rate_study(cfg, out, workers=1):
    from .mdp_rate import LimitContext, dg_profile, rate_study, assemble_limit_generator, \
        control_forcing, solve_limit_ode
    model = build_model(cfg.model)
    opt = cfg.options
    control = _control_from(opt.get("control", {"family": "zero"}))
    if control is None:
        control = ControlField.zero()
    lim = simulate_averaged(model, int(opt.get("limit_M", 4000)), cfg.T, cfg.policy.report_dt,
                            cfg.seeds[0])
    ctx = LimitContext(model, lim)
    dic = HermiteDictionary(cfg.J)
    gen = assemble_limit_generator(ctx, dic, tol=float(opt.get("galerkin_tol", 1e-3)))
    report = rate_study(ctx, control, dic, gen=gen)
    with open(out / "rate_report.json", "w") as fh:
        fh.write(report.to_json())
    Z = solve_limit_ode(gen, control_forcing(ctx, control, dic))
    prof = dg_profile(Z, gen, ctx, dic)
    write_csv(out / "rate_slices.csv", ["t", "span_value", "member_value", "sup_index"],
              zip(prof.t, prof.span_value, prof.member_value, prof.sup_index))
    return ["rate_report.json", "rate_slices.csv"]


RUNNERS = {
    "equilibrium": run_equilibrium,
    "cell": run_cell,
    "average": run_average,
    "simulate": run_simulate,
    "couple": run_coupling_study,
    "fluctuate": run_fluctuation_study,
    "rate": run_rate_study,
    "validate": run_validate,
}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(subcommand, cfg, out, workers=1):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    status, error, files = "ok", None, []
    try:
        files = RUNNERS[subcommand](cfg, out, workers)
    except SlowFastError as exc:
        status, error = type(exc).__name__, str(exc)
        raise
    finally:
        manifest = {
            "subcommand": subcommand, "config": cfg.to_dict(), "version": __version__,
            "workers": workers, "status": status, "error": error,
            "started": started, "elapsed_s": time.time() - started,
            "files": {f: _sha256(out / f) for f in files},
        }
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return files


def build_parser():
    p = argparse.ArgumentParser(prog="slowfast-mdp", description=__doc__.split("\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config", help="path to a JSON experiment config")
    p.add_argument("--out", help="output directory (overrides config.output_dir)")
    p.add_argument("--workers", type=int, help=f"worker processes (else ${WORKERS_ENV}, else 1)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        workers = worker_count(args.workers)
        out = args.out or cfg.output_dir
        run(args.subcommand, cfg, out, workers)
    except (AssumptionViolation, ConfigError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (NumericalFault, SlowFastError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
