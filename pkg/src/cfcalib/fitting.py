"""End-to-end calibration runs producing a :class:`FitReport`.

MCMC runs start from the posterior mode. The Laplace covariance there sets
the random-walk proposal shape (scaled by ``2.38^2 / d``) or the dense HMC
mass matrix (its inverse).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from cfcalib.data import BatchedData
from cfcalib.errors import CapabilityError
from cfcalib.evolution import DeConfig, bounds_from_priors, de_optimize, model_problem
from cfcalib.inference import FunctionTarget, HmcConfig, converge_by_increments, find_mode, laplace_covariance
from cfcalib.probmodel import LatentState, ProbModel, kernel_predict, rmse
from cfcalib.validation import LooReport, psis_loo


# force smoothing for HMC, as a fraction of the acceleration spread
HMC_FORCE_SMOOTHING = 0.01


@dataclass
class FitReport:
    """Point estimates or posterior summaries of one calibration."""

    model: str
    method: str
    pooling: str
    names: tuple
    group_labels: tuple
    theta: np.ndarray  # (groups, params) constrained posterior means or DE estimate
    rmse: dict
    theta_ci: np.ndarray | None = None  # (groups, params, 2)
    theta_latent: np.ndarray | None = None
    level2: np.ndarray | None = None  # constrained level-2 location
    level2_latent: np.ndarray | None = None
    likelihood: dict = field(default_factory=dict)
    cats: dict = field(default_factory=dict)
    loo: LooReport | None = None
    chain: object = None
    draws: np.ndarray | None = None
    converged: bool = True
    runs_used: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def has_draws(self) -> bool:
        return self.draws is not None


def _summaries(post, states):
    th = np.array([post.constrained(x)["theta"] for x in states])
    lat = np.array([post.constrained(x)["theta_latent"] for x in states])
    out = {
        "theta": th.mean(axis=0),
        "theta_ci": np.stack([np.percentile(th, 2.5, axis=0), np.percentile(th, 97.5, axis=0)], axis=-1),
        "theta_latent": lat.mean(axis=0),
    }
    if post.mode == "hierarchical":
        parts = post.layout.unpack(states)
        out["level2_latent"] = parts["mu"].mean(axis=0)
        out["level2"] = post.to_constrained(parts["mu"]).mean(axis=0)
    beta_gamma = np.array([[post.constrained(x)["beta"], post.constrained(x)["gamma"]] for x in states])
    out["likelihood"] = {"beta": float(beta_gamma[:, 0].mean()), "gamma": float(beta_gamma[:, 1].mean())}
    return out


def _modal_cats(chain, post):
    if chain.cats is None or not len(post.cat_slots):
        return None
    modes = np.array([np.bincount(col, minlength=len(s.values)).argmax() for col, s in zip(chain.cats.T, post.cat_slots)])
    return modes


def _search_mode(post, init):
    """Three-stage mode search used to start the samplers.

    The shape latent stays at its prior value (> 1) in the first two stages
    so the optimiser cannot chase the spikes a shape below one puts at zero
    residual. Stage one works on the smoothed likelihood, stage two on the
    exact one, and stage three frees only the two likelihood parameters.
    Returns the mode and the smoothed target.
    """
    lik = post.layout.slices["lik_u"]
    smooth = FunctionTarget(lambda x, z=None: post.smoothed_log_density(x, z), post.dim, cat_sizes=post.cat_sizes)
    x, _ = find_mode(smooth, init.x, init.z, fixed=[lik.start + 1])
    x, _ = find_mode(post, x, init.z, fixed=[lik.start + 1])
    others = np.setdiff1d(np.arange(post.dim), np.arange(lik.start, lik.stop))
    x, _ = find_mode(post, x, init.z, fixed=others)
    return x, smooth


def calibrate_mcmc(
    pm: ProbModel,
    data: BatchedData,
    method: str = "rwmh",
    seed=0,
    increment: int = 2500,
    threshold: float = 0.5,
    max_runs: int = 20,
    burn_in: int = 500,
    n_loo_draws: int = 1000,
    hmc_steps: int = 10,
    compute_loo: bool = True,
) -> FitReport:
    """Posterior means, 95% intervals and RMSE at the posterior mean."""
    if method == "hmc" and not pm.differentiable:
        raise CapabilityError(f"hmc needs a differentiable model; {pm.model} must use rwmh")
    post = pm.bind(data)
    init = post.initial_state()
    x_mode, smooth = _search_mode(post, init)
    # finite differences of the exact density pick up kink curvature and
    # shrink the proposal; the smoothed surface gives the posterior scale
    cov = laplace_covariance(smooth, x_mode, init.z, scales=post.prior_scales())
    start = LatentState(x_mode, init.z, post.layout)
    d = post.dim
    if method == "rwmh":
        kwargs = {"proposal_scale": 1.0, "cov": (2.38**2 / d) * cov, "burn_in": burn_in}
    elif method == "hmc":
        mass = np.linalg.inv(cov)
        mass = 0.5 * (mass + mass.T)
        kwargs = {"cfg": HmcConfig(0.5, hmc_steps, mass), "adapt": burn_in}
    else:
        raise ValueError(f"unknown method {method!r}")
    target = post
    if method == "hmc" and data.n_rows:
        # leapfrog driven by the smoothed gradient; the accept step still uses
        # the exact density, so the chain targets the exact posterior
        force_eps = HMC_FORCE_SMOOTHING * float(np.std(data.a_f))
        target = FunctionTarget(post.log_density, post.dim, grad=lambda x: post.grad(x, smoothing=force_eps))
    conv = converge_by_increments(target, start, increment, threshold, max_runs, rng=seed, sampler=method, **kwargs)
    chain = conv.chain
    summ = _summaries(post, chain.states)
    cats = _modal_cats(chain, post)
    pred = post._predict_theta(summ["theta"], cats)
    report = FitReport(
        model=pm.model,
        method=method,
        pooling=post.mode,
        names=tuple(post.names),
        group_labels=tuple(post.group_labels),
        theta=summ["theta"],
        theta_ci=summ["theta_ci"],
        theta_latent=summ["theta_latent"],
        level2=summ.get("level2"),
        level2_latent=summ.get("level2_latent"),
        likelihood=summ["likelihood"],
        cats={s.name: s.values[k] for s, k in zip(post.cat_slots, cats)} if cats is not None else {},
        rmse=rmse(pred, data.a_f, data.group_index, data.group_ids),
        chain=chain,
        converged=bool(chain.meta.get("converged", True)),
        runs_used=conv.runs_used,
        extra={"columns": post.layout.columns(), "cat_columns": [s.name for s in post.cat_slots], "nan_count": post.nan_count},
    )
    idx = np.linspace(0, len(chain) - 1, min(n_loo_draws, len(chain))).astype(int)
    report.draws = chain.states[idx]
    if compute_loo and len(idx) >= 100 and data.n_rows:
        zs = chain.cats[idx] if chain.cats is not None else [None] * len(idx)
        ll = np.array([post.pointwise_loglik(x, z) for x, z in zip(report.draws, zs)])
        report.loo = psis_loo(ll)
    return report


def calibrate_de(pm: ProbModel, data: BatchedData, cfg: DeConfig = DeConfig(), seed=0, bounds=None, width=4.0) -> FitReport:
    """Pooled DE point estimate; the regulariser anchors at the prior table."""
    pr = pm.priors
    means = pr.mu_vector(_single_framework(data) if pm.model == "wzdm" else None)
    if bounds is None:
        bounds = bounds_from_priors(means, pr.sigma_vector(), [pr.supports[n] for n in pr.names], width)
    problem = model_problem(pm.model, data, means, bounds, pr.names)
    res = de_optimize(problem, cfg, seed)
    pred = kernel_predict(pm.model, data, res.theta)
    return FitReport(
        model=pm.model,
        method="de",
        pooling="pooled",
        names=tuple(pr.names),
        group_labels=("all",),
        theta=res.theta[None, :],
        rmse=rmse(pred, data.a_f, data.group_index, data.group_ids),
        extra={"fitness": res.fitness, "generations": res.generations, "trace": res.trace, "bounds": bounds},
    )


def _single_framework(data):
    fws = np.unique(data.instance_framework)
    return int(fws[0]) if len(fws) == 1 else None


def write_posterior_table(reports, labels, path):
    """Parameter x run table (one column per run label) with an RMSE row.

    Hierarchical runs report their level-2 location; others the first
    group's estimate, or every group when a single run is written.
    """
    reports = list(reports)
    header = ["parameter"] + [str(lab) for lab in labels]
    rows = []
    base = reports[0]
    per_group = len(reports) == 1 and base.theta.shape[0] > 1
    if per_group:
        header = ["parameter"] + [f"{lab}" for lab in base.group_labels]
        if base.level2 is not None:
            header.append("level2")
        for j, name in enumerate(base.names):
            row = [name] + [repr(float(v)) for v in base.theta[:, j]]
            if base.level2 is not None:
                row.append(repr(float(base.level2[j])))
            rows.append(row)
        rmse_row = ["RMSE"] + [repr(base.rmse.get(g, float("nan"))) for g in _rmse_keys(base)]
        if base.level2 is not None:
            rmse_row.append(repr(base.rmse["overall"]))
        rows.append(rmse_row)
    else:
        for j, name in enumerate(base.names):
            rows.append([name] + [repr(float((r.level2 if r.level2 is not None else r.theta[0])[j])) for r in reports])
        rows.append(["RMSE"] + [repr(r.rmse["overall"]) for r in reports])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _rmse_keys(report):
    keys = [k for k in report.rmse if k != "overall"]
    return keys[: len(report.group_labels)]
