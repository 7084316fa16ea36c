"""Command-line front end.

Subcommands: ``analyze``, ``synth``, ``calibrate``, ``tune``, ``validate``
and ``simulate``. Every run writes into its own ``--out`` directory, starting
with a ``config.json`` snapshot of the resolved options.

Exit codes: 0 success, 1 other failure, 2 data error, 3 non-convergence,
4 capability error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from cfcalib import __version__
from cfcalib.errors import CapabilityError, DataError

EXIT_OK, EXIT_FAIL, EXIT_DATA, EXIT_NONCONVERGED, EXIT_CAPABILITY = 0, 1, 2, 3, 4


class NonConvergence(Exception):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _snapshot(args, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    for key in ("data", "priors", "fit"):
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _load(path):
    from cfcalib.data import load_csv

    if not Path(path).is_file():
        raise DataError(f"cannot read {path}")
    ds, report = load_csv(path)
    if len(ds) == 0:
        raise DataError("no instances")
    for line_no, msg in report.diagnostics[:20]:
        print(f"line {line_no}: {msg}", file=sys.stderr)
    return ds


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    from cfcalib import plotting
    from cfcalib.validation import dataset_summary, describe, lag_histogram, write_histograms, write_summary_tables

    ds = _load(args.data)
    out = Path(args.out)
    _snapshot(args, out)
    summary = dataset_summary(ds)
    write_summary_tables(summary, str(out / "frequency"))
    write_histograms(ds, out / "histograms.csv", bins=args.bins)
    with open(out / "describe.csv", "w", encoding="utf-8") as fh:
        from cfcalib.records import COLUMNS

        fields = ["n", "mean", "std", "skew", "excess_kurtosis", "min", "median", "max"]
        fh.write("variable," + ",".join(fields) + "\n")
        for c in COLUMNS:
            d = describe(np.concatenate([getattr(i, c) for i in ds]))
            fh.write(c + "," + ",".join(repr(d[f]) for f in fields) + "\n")
    hist = lag_histogram(ds, args.max_lag)
    with open(out / "pacf_lags.csv", "w", encoding="utf-8") as fh:
        fh.write("significant_lags,instances\n")
        for k in range(args.max_lag + 1):
            fh.write(f"{k},{hist.get(k, 0)}\n")
    modal = max(hist, key=lambda k: (hist[k], -k)) if hist else None
    plotting.plot_variable_histograms(ds, out / "histograms.png")
    plotting.plot_lag_histogram(hist, out / "pacf_lags.png", args.max_lag)
    print(f"instances: {len(ds)}  rows: {ds.n_rows}  frameworks: {len(summary['framework'])}  drivers: {len(summary['driver'])}")
    print(f"modal significant PACF lags: {modal}")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def _default_truth(model, fw=4):
    from cfcalib.models import IdmParams, W99Params
    from cfcalib.priors import wzdm_params

    if model == "idm":
        return IdmParams()
    if model == "w99":
        return W99Params()
    return wzdm_params(fw)


def _truth_from_mapping(model, base, mapping):
    from dataclasses import replace

    if model == "wzdm":
        fp, rp = base
        fp_keys = {k: v for k, v in mapping.items() if hasattr(fp, k)}
        rp_keys = {k: v for k, v in mapping.items() if hasattr(rp, k)}
        return replace(fp, **fp_keys), replace(rp, **rp_keys)
    return replace(base, **mapping)


def cmd_synth(args) -> int:
    from cfcalib.data import instance_specs, save_csv, synth_generate, write_ground_truth
    from cfcalib.distributions import DoubleGammaParams
    from cfcalib.priors import read_config

    out = Path(args.out)
    _snapshot(args, out)
    specs = instance_specs(args.n_groups, args.per_group, key=args.group_by, framework_id=args.framework)
    overrides = read_config(args.truth) if args.truth else {}
    truth = {}
    for g in range(args.n_groups):
        key = f"g{g}"
        fw = (g % 12) + 1 if args.group_by == "framework" else args.framework
        base = _default_truth(args.model, fw)
        truth[key] = _truth_from_mapping(args.model, base, {**overrides.get("all", {}), **overrides.get(key, {})})
    noise = DoubleGammaParams(0.0, args.noise_beta, args.noise_gamma) if args.noise_beta > 0 else None
    ds, record = synth_generate(args.model, truth, specs, noise, np.random.default_rng(args.seed), n_steps=args.steps)
    save_csv(ds, out / "data.csv")
    write_ground_truth(out / "truth.txt", record)
    print(f"wrote {len(ds)} instances ({ds.n_rows} rows) to {out / 'data.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------


def _grouping(args):
    # W99 threads regime state per instance, so it is batched per instance
    return "instance" if args.model == "w99" else args.group_by


def cmd_calibrate(args) -> int:
    from cfcalib import plotting
    from cfcalib.data import group_by
    from cfcalib.evolution import DeConfig
    from cfcalib.fitting import calibrate_de, calibrate_mcmc, write_posterior_table
    from cfcalib.inference import write_trace
    from cfcalib.priors import load_priors
    from cfcalib.probmodel import PoolingSpec, ProbModel

    if args.method == "hmc" and args.model != "idm":
        raise CapabilityError(f"hmc needs a differentiable model; use rwmh for {args.model}")
    ds = _load(args.data)
    out = Path(args.out)
    args.group_by = _grouping(args)
    _snapshot(args, out)
    bd = group_by(ds, args.group_by)
    reports, labels = [], []
    if args.method == "de":
        sigma = args.prior_sigma[0] if args.prior_sigma else None
        pm = ProbModel(args.model, load_priors(args.priors, args.model, sigma), PoolingSpec("pooled", args.group_by))
        for lam in args.lam or [0.0]:
            cfg = DeConfig(None, args.cr, args.f, lam, args.generations)
            rep = calibrate_de(pm, bd, cfg, seed=args.seed)
            tag = f"lambda_{lam:g}"
            plotting.plot_fitness_trace(rep.extra["trace"], out / f"fitness_{tag}.png")
            with open(out / f"fitness_{tag}.csv", "w", encoding="utf-8") as fh:
                fh.write("generation,best_fitness\n")
                fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(map(float, rep.extra["trace"])))
            reports.append(rep)
            labels.append(f"lambda={lam:g}")
        converged = True
    else:
        converged = True
        for sigma in args.prior_sigma or [10.0]:
            pm = ProbModel(args.model, load_priors(args.priors, args.model, sigma), PoolingSpec(args.pooling, args.group_by))
            rep = calibrate_mcmc(
                pm,
                bd,
                args.method,
                seed=args.seed,
                increment=args.increment,
                threshold=args.threshold,
                max_runs=args.max_runs,
                compute_loo=False,
            )
            tag = f"sigma_{sigma:g}"
            write_trace(rep.chain, out / f"trace_{tag}.csv", rep.extra["columns"], rep.extra["cat_columns"])
            plotting.plot_trace(rep.chain, out / f"trace_{tag}.png", rep.extra["columns"])
            converged &= rep.converged
            reports.append(rep)
            labels.append(f"sigma={sigma:g}")
    write_posterior_table(reports, labels, out / "posterior_table.csv")
    with open(out / "rmse.csv", "w", encoding="utf-8") as fh:
        fh.write("run,group,rmse\n")
        for lab, rep in zip(labels, reports):
            fh.writelines(f"{lab},{g},{v!r}\n" for g, v in rep.rmse.items())
    if len(reports) > 1:
        xs = args.lam if args.method == "de" else args.prior_sigma
        plotting.plot_sweep(xs, [r.rmse["overall"] for r in reports], out / "rmse_sweep.png", "lambda" if args.method == "de" else "prior sigma", logx=args.method != "de")
    for lab, rep in zip(labels, reports):
        print(f"{lab}: RMSE {rep.rmse['overall']:.4f}" + ("" if rep.converged else "  (not converged)"))
    if not converged:
        raise NonConvergence("convergence protocol hit its run cap; partial outputs written")
    return EXIT_OK


# --------------------------------------------------------------------------
# tune
# --------------------------------------------------------------------------


def cmd_tune(args) -> int:
    from cfcalib.data import group_by
    from cfcalib.evolution import DeConfig, TuneGrid, bounds_from_priors, model_problem, tune_bayesopt, tune_grid, write_rows
    from cfcalib.priors import load_priors

    ds = _load(args.data)
    out = Path(args.out)
    args.group_by = _grouping(args)
    _snapshot(args, out)
    bd = group_by(ds, args.group_by)
    pr = load_priors(args.priors, args.model, args.prior_sigma[0] if args.prior_sigma else None)
    means = pr.mu_vector()
    bounds = bounds_from_priors(means, pr.sigma_vector(), [pr.supports[n] for n in pr.names])
    problem = model_problem(args.model, bd, means, bounds, pr.names)
    base = DeConfig(max_generations=args.generations)
    if args.tune == "grid":
        grid = TuneGrid(
            tuple(args.cr_values) if args.cr_values else TuneGrid.cr,
            tuple(args.f_values) if args.f_values else TuneGrid.f,
            tuple(args.lam) if args.lam else TuneGrid.lam,
        )
        res = tune_grid(problem, grid, base, rng=args.seed)
        res.to_csv(out / "tuning_grid.csv")
        best = res.best
        print(f"{len(grid)} cells; best CR={best['cr']} F={best['f']} lambda={best['lam']} fitness={best['fitness']:.5g}")
    else:
        lam_hi = max(args.lam) if args.lam else 1e-4
        res = tune_bayesopt(problem, [(0.0, 1.0), (0.05, 2.0), (0.0, lam_hi)], args.evals, rng=args.seed, base=base, de_seed=args.seed)
        rows = [{"eval": i, "cr": x[0], "f": x[1], "lam": x[2], "fitness": y} for i, (x, y) in enumerate(zip(res.X.tolist(), res.Y.tolist()))]
        write_rows(out / "tuning_bo.csv", rows, ["eval", "cr", "f", "lam", "fitness"])
        print(f"best CR={res.x[0]:.4f} F={res.x[1]:.4f} lambda={res.x[2]:.3g} fitness={res.y:.5g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------


def cmd_validate(args) -> int:
    from cfcalib import plotting
    from cfcalib.data import group_by
    from cfcalib.inference import read_trace
    from cfcalib.priors import load_priors
    from cfcalib.probmodel import PoolingSpec, ProbModel
    from cfcalib.validation import psis_loo, write_criteria, write_k_values

    fit = Path(args.fit)
    cfg = json.loads((fit / "config.json").read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else fit / "validation"
    out.mkdir(parents=True, exist_ok=True)
    if cfg["method"] == "de":
        rows = (fit / "rmse.csv").read_text(encoding="utf-8")
        (out / "rmse.csv").write_text(rows, encoding="utf-8")
        print("point-estimate fit has no posterior draws; WAIC and PSIS-LOO skipped (RMSE only)")
        print(rows.strip())
        return EXIT_OK
    ds = _load(args.data or cfg["data"])
    bd = group_by(ds, cfg["group_by"])
    for sigma in cfg["prior_sigma"] or [10.0]:
        tag = f"sigma_{sigma:g}"
        pm = ProbModel(cfg["model"], load_priors(cfg["priors"], cfg["model"], sigma), PoolingSpec(cfg["pooling"], cfg["group_by"]))
        post = pm.bind(bd)
        header, _, states = _read_full_trace(fit / f"trace_{tag}.csv", post)
        idx = np.linspace(0, len(states) - 1, min(args.draws, len(states))).astype(int)
        ll = np.array([post.pointwise_loglik(x, z) for x, z in (states[i] for i in idx)])
        rep = psis_loo(ll)
        write_k_values(rep, out / f"pareto_k_{tag}.csv")
        write_criteria(rep, out / f"criteria_{tag}.csv")
        plotting.plot_pareto_k(rep.pareto_k, out / f"pareto_k_{tag}.png")
        (out / f"summary_{tag}.txt").write_text(rep.summary() + "\n", encoding="utf-8")
        print(f"[{tag}]\n{rep.summary()}")
    return EXIT_OK


def _read_full_trace(path, post):
    """Continuous states and categorical values (mapped back to indices) from a trace."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    n_cont = post.dim
    body = rows[1:]
    states = []
    for r in body:
        x = np.array(r[2 : 2 + n_cont], dtype=float)
        z = np.array(r[2 + n_cont :], dtype=np.int64) if post.cat_slots else None
        states.append((x, z))
    return header, None, states


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from cfcalib.data import Dataset, random_leader_profile, save_csv
    from cfcalib.distributions import DoubleGammaParams
    from cfcalib.models import simulate_trajectory
    from cfcalib.priors import read_config

    out = Path(args.out)
    _snapshot(args, out)
    rng = np.random.default_rng(args.seed)
    if args.leader:
        lead = np.loadtxt(args.leader, delimiter=",", ndmin=1)
    else:
        lead = random_leader_profile(rng, args.steps)
    params = _default_truth(args.model, args.framework)
    if args.params:
        params = _truth_from_mapping(args.model, params, read_config(args.params))
    noise = DoubleGammaParams(0.0, args.noise_beta, args.noise_gamma) if args.noise_beta > 0 else None
    inst = simulate_trajectory(args.model, params, lead, init=(args.gap, args.speed), noise=noise, rng=rng, framework_id=args.framework)
    save_csv(Dataset([inst]), out / "trajectory.csv")
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    axes[0].plot(inst.t, inst.v_l, label="leader")
    axes[0].plot(inst.t, inst.v_f, label="follower")
    axes[0].set_ylabel("speed (m/s)")
    axes[0].legend()
    axes[1].plot(inst.t, inst.dx, color="C2")
    axes[1].set_ylabel("gap (m)")
    axes[1].set_xlabel("t (s)")
    fig.tight_layout()
    fig.savefig(out / "trajectory.png", dpi=110)
    plt.close(fig)
    print(f"{len(inst)} steps" + (" (collision)" if inst.collided else ""))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfcalib", description="Calibrate car-following models against driving data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("data", nargs="?", help="dataset CSV")
        sp.add_argument("--config", help="YAML/JSON file supplying defaults for any option")
        sp.add_argument("--out", default="run", help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    def model_opts(sp):
        sp.add_argument("--model", choices=("idm", "w99", "wzdm"), default="idm")
        sp.add_argument("--group-by", dest="group_by", choices=("framework", "driver", "framework_driver", "instance"), default="instance")
        sp.add_argument("--priors", help="prior table overrides (YAML/JSON)")
        sp.add_argument("--prior-sigma", dest="prior_sigma", type=_floats, default=None, help="comma-separated prior sigma values (sweep)")
        sp.add_argument("--lambda", dest="lam", type=_floats, default=None, help="comma-separated DE regularisation weights")

    sp = sub.add_parser("analyze", help="frequency tables, histograms and PACF lag analysis")
    common(sp)
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--max-lag", dest="max_lag", type=int, default=7)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with known parameters")
    common(sp, data=False)
    sp.add_argument("--model", choices=("idm", "w99", "wzdm"), default="idm")
    sp.add_argument("--group-by", dest="group_by", choices=("framework", "driver", "instance"), default="driver")
    sp.add_argument("--n-groups", dest="n_groups", type=int, default=1)
    sp.add_argument("--per-group", dest="per_group", type=int, default=10)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--framework", type=int, default=4)
    sp.add_argument("--noise-beta", dest="noise_beta", type=float, default=0.2)
    sp.add_argument("--noise-gamma", dest="noise_gamma", type=float, default=1.0)
    sp.add_argument("--truth", help="YAML/JSON parameter overrides: {all: {...}, g0: {...}}")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("calibrate", help="fit a model by MCMC or differential evolution")
    common(sp)
    model_opts(sp)
    sp.add_argument("--pooling", choices=("pooled", "unpooled", "hierarchical"), default="pooled")
    sp.add_argument("--method", choices=("rwmh", "hmc", "de"), default="rwmh")
    sp.add_argument("--increment", type=int, default=2500)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--max-runs", dest="max_runs", type=int, default=20)
    sp.add_argument("--generations", type=int, default=300)
    sp.add_argument("--cr", type=float, default=0.7)
    sp.add_argument("--f", type=float, default=0.8)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("tune", help="tune DE hyperparameters by grid search or Bayesian optimisation")
    common(sp)
    model_opts(sp)
    sp.add_argument("--tune", choices=("grid", "bo"), default="grid")
    sp.add_argument("--generations", type=int, default=50)
    sp.add_argument("--evals", type=int, default=30)
    sp.add_argument("--cr-values", dest="cr_values", type=_floats, default=None)
    sp.add_argument("--f-values", dest="f_values", type=_floats, default=None)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("validate", help="WAIC and PSIS-LOO for a calibration run")
    sp.add_argument("fit", help="calibration output directory")
    sp.add_argument("--data", help="dataset CSV (defaults to the one recorded in the run)")
    sp.add_argument("--out", default=None)
    sp.add_argument("--draws", type=int, default=1000)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="roll a model out behind a leader profile")
    common(sp, data=False)
    sp.add_argument("--model", choices=("idm", "w99", "wzdm"), default="idm")
    sp.add_argument("--leader", help="CSV of leader speeds, one per step")
    sp.add_argument("--steps", type=int, default=600)
    sp.add_argument("--framework", type=int, default=4)
    sp.add_argument("--params", help="YAML/JSON parameter overrides")
    sp.add_argument("--gap", type=float, default=30.0)
    sp.add_argument("--speed", type=float, default=20.0)
    sp.add_argument("--noise-beta", dest="noise_beta", type=float, default=0.0)
    sp.add_argument("--noise-gamma", dest="noise_gamma", type=float, default=1.0)
    sp.set_defaults(func=cmd_simulate)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        from cfcalib.priors import read_config

        cfg = read_config(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        given = {a.dest for a in sp._actions if any(opt in (argv or sys.argv[1:]) for opt in a.option_strings)}
        for key, val in cfg.items():
            key = key.replace("-", "_")
            if key in ("prior_sigma", "lam") and not isinstance(val, list):
                val = [float(val)]
            if key not in given:
                setattr(args, key, val)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "data", "unset") is None and args.command in ("analyze", "calibrate", "tune"):
        print("error: a dataset path is required", file=sys.stderr)
        return EXIT_DATA
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except NonConvergence as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
