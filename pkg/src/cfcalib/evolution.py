"""Differential Evolution calibration and hyperparameter tuning.

The DE variant is rand/1/bin: for each member a mutant
``x_r1 + F (x_r2 - x_r3)`` is crossed binomially with the member (at least
one gene from the mutant) and replaces it when its fitness is no worse.
Fitness is an error, so lower is better.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm, qmc

from cfcalib.data import BatchedData
from cfcalib.errors import InitializationError
from cfcalib.probmodel import kernel_predict, rmse

INFEASIBLE = 1e300


@dataclass(frozen=True)
class DeConfig:
    population_size: int | None = None  # default 15 * dimension
    crossover_prob: float = 0.7
    differential_weight: float = 0.8
    lam: float = 0.0
    max_generations: int = 300
    convergence_eps: float = 1e-8

    def __post_init__(self):
        if self.population_size is not None and self.population_size < 4:
            raise ValueError("population_size must be at least 4")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ValueError("crossover_prob must lie in [0, 1]")
        if not self.differential_weight > 0:
            raise ValueError("differential_weight must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.max_generations < 1:
            raise ValueError("max_generations must be at least 1")


@dataclass
class DeProblem:
    """A fitness ``f(theta, lam)`` to minimise inside a box."""

    fitness: Callable
    bounds: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.bounds)) or np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValueError("bounds must be finite with lower < upper")

    @property
    def dim(self) -> int:
        return len(self.bounds)


@dataclass
class DeResult:
    theta: np.ndarray
    fitness: float
    generations: int
    trace: np.ndarray
    population: np.ndarray
    pop_fitness: np.ndarray
    names: tuple = ()

    def as_dict(self) -> dict:
        return dict(zip(self.names, map(float, self.theta)))


def de_fitness(theta, data: BatchedData, prior_means, lam: float, model: str = "idm", cats=None) -> float:
    """Mean per-batch RMSE plus ``lam * ||theta - prior_means||``.

    Batches are the groups of ``data``. Non-finite predictions make the
    candidate infeasible (``1e300``).
    """
    theta = np.asarray(theta, dtype=float)
    reg = lam * float(np.linalg.norm(theta - np.asarray(prior_means, dtype=float)))
    with np.errstate(all="ignore"):
        pred = kernel_predict(model, data, theta, cats)
    if not np.all(np.isfinite(pred)):
        return INFEASIBLE
    return rmse(pred, data.a_f, data.group_index, data.group_ids)["overall"] + reg


def model_problem(model: str, data: BatchedData, prior_means, bounds, names=(), cats=None) -> DeProblem:
    """:class:`DeProblem` calibrating one shared parameter vector of ``model``."""
    prior_means = np.asarray(prior_means, dtype=float)

    def fitness(theta, lam):
        return de_fitness(theta, data, prior_means, lam, model, cats)

    return DeProblem(fitness, bounds, tuple(names))


def bounds_from_priors(means, sigmas, supports, width=4.0) -> np.ndarray:
    """``mean -/+ width * sigma`` clipped to each parameter's support."""
    means = np.asarray(means, dtype=float)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), means.shape)
    lo, hi = means - width * sigmas, means + width * sigmas
    for k, s in enumerate(supports):
        if s == "nonneg":
            lo[k] = max(lo[k], 0.0)
        elif s == "nonpos":
            hi[k] = min(hi[k], 0.0)
    return np.column_stack([lo, hi])


def _reflect(x, lo, hi, rng):
    x = np.where(x > hi, 2 * hi - x, x)
    x = np.where(x < lo, 2 * lo - x, x)
    bad = (x < lo) | (x > hi)
    if np.any(bad):
        x = np.where(bad, lo + rng.random(x.shape) * (hi - lo), x)
    return x


def de_optimize(problem: DeProblem, cfg: DeConfig = DeConfig(), rng=None) -> DeResult:
    """Minimise ``problem.fitness`` by rand/1/bin Differential Evolution.

    Stops when every parameter's population range falls below
    ``convergence_eps`` times its box width, or after ``max_generations``.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    d = problem.dim
    n_pop = cfg.population_size or 15 * d
    n_pop = max(n_pop, 4)
    pop = lo + gen.random((n_pop, d)) * (hi - lo)
    fit = np.array([problem.fitness(p, cfg.lam) for p in pop])
    if np.all(fit >= INFEASIBLE):
        raise InitializationError("every member of the initial population is infeasible")
    trace = [fit.min()]
    generations = 0
    for generations in range(1, cfg.max_generations + 1):
        idx = np.arange(n_pop)
        r = np.empty((n_pop, 3), dtype=np.int64)
        for i in idx:
            r[i] = gen.choice(np.delete(idx, i), 3, replace=False)
        mutant = pop[r[:, 0]] + cfg.differential_weight * (pop[r[:, 1]] - pop[r[:, 2]])
        mutant = _reflect(mutant, lo, hi, gen)
        cross = gen.random((n_pop, d)) < cfg.crossover_prob
        cross[idx, gen.integers(0, d, n_pop)] = True
        trial = np.where(cross, mutant, pop)
        trial_fit = np.array([problem.fitness(p, cfg.lam) for p in trial])
        better = trial_fit <= fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]
        trace.append(fit.min())
        if np.all(np.ptp(pop, axis=0) <= cfg.convergence_eps * (hi - lo)):
            break
    best = int(np.argmin(fit))
    return DeResult(pop[best].copy(), float(fit[best]), generations, np.array(trace), pop, fit, problem.names)


# --------------------------------------------------------------------------
# tuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TuneGrid:
    cr: tuple = tuple(np.round(np.arange(0.1, 0.91, 0.2), 10))
    f: tuple = tuple(np.round(np.arange(0.1, 1.91, 0.2), 10))
    lam: tuple = tuple(np.round(np.linspace(0.0, 1e-4, 41), 12))

    def __post_init__(self):
        if not (self.cr and self.f and self.lam):
            raise ValueError("grid must be non-empty")

    def cells(self):
        return [(cr, f, lam) for cr in self.cr for f in self.f for lam in self.lam]

    def __len__(self):
        return len(self.cr) * len(self.f) * len(self.lam)


@dataclass
class TuneResult:
    rows: list = field(default_factory=list)  # dicts ranked best first

    @property
    def best(self) -> dict:
        return self.rows[0]

    def to_csv(self, path):
        write_rows(path, self.rows, ["rank", "cr", "f", "lam", "fitness", "generations", "status"])


def write_rows(path, rows, header):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def tune_grid(problem: DeProblem, grid: TuneGrid = TuneGrid(), base: DeConfig = DeConfig(), rng=None) -> TuneResult:
    """One DE run per (CR, F, lambda) cell, ranked by terminal fitness.

    Every cell uses the same seed (common random numbers), so a singleton
    grid reproduces a plain :func:`de_optimize` call with that seed. Cells
    that raise are kept and ranked last.
    """
    rows = []
    for cr, f, lam in grid.cells():
        cfg = DeConfig(base.population_size, cr, f, lam, base.max_generations, base.convergence_eps)
        try:
            res = de_optimize(problem, cfg, rng)
            rows.append({"cr": cr, "f": f, "lam": lam, "fitness": res.fitness, "generations": res.generations, "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - a failed cell is a result, not an abort
            rows.append({"cr": cr, "f": f, "lam": lam, "fitness": float("inf"), "generations": 0, "status": f"error: {exc}"})
    rows.sort(key=lambda r: r["fitness"])
    for k, r in enumerate(rows, 1):
        r["rank"] = k
    return TuneResult(rows)


class _GP:
    """Zero-mean GP with a squared-exponential kernel on [0, 1]^d inputs."""

    def __init__(self, X, y, noise=1e-6, max_jitter_tries=5):
        self.X = X
        self.y_mean, self.y_std = y.mean(), y.std() if y.std() > 0 else 1.0
        self.y = (y - self.y_mean) / self.y_std
        self.noise = noise
        self.tries = max_jitter_tries
        self.log_ls = self._fit_lengthscale()
        self._factor()

    def _k(self, A, B, log_ls):
        d2 = np.sum(((A[:, None, :] - B[None, :, :]) / np.exp(log_ls)) ** 2, axis=-1)
        return np.exp(-0.5 * d2)

    def _chol(self, K):
        jitter = self.noise
        for _ in range(self.tries):
            try:
                return linalg.cho_factor(K + jitter * np.eye(len(K)), lower=True), jitter
            except linalg.LinAlgError:
                jitter *= 10.0
        raise linalg.LinAlgError("kernel matrix is singular even after jitter")

    def _nll(self, log_ls):
        try:
            (c, low), _ = self._chol(self._k(self.X, self.X, log_ls))
        except linalg.LinAlgError:
            return 1e10
        alpha = linalg.cho_solve((c, low), self.y)
        return 0.5 * self.y @ alpha + np.sum(np.log(np.diag(c)))

    def _fit_lengthscale(self):
        d = self.X.shape[1]
        starts = [np.full(d, np.log(s)) for s in (0.1, 0.3, 1.0)]
        best = min((optimize.minimize(self._nll, s, method="L-BFGS-B", bounds=[(-4.0, 1.5)] * d) for s in starts), key=lambda r: r.fun)
        return best.x

    def _factor(self):
        K = self._k(self.X, self.X, self.log_ls)
        self.cf, _ = self._chol(K)
        self.alpha = linalg.cho_solve(self.cf, self.y)

    def predict(self, Xs):
        Ks = self._k(Xs, self.X, self.log_ls)
        mu = Ks @ self.alpha
        v = linalg.solve_triangular(self.cf[0], Ks.T, lower=True)
        var = np.maximum(1.0 - np.sum(v * v, axis=0), 1e-12)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mu, sd, best):
    """EI for minimisation."""
    z = (best - mu) / sd
    return (best - mu) * norm.cdf(z) + sd * norm.pdf(z)


@dataclass
class BayesOptResult:
    x: np.ndarray
    y: float
    X: np.ndarray
    Y: np.ndarray


def bayes_opt(objective, bounds, n_evals: int, rng=None, n_init: int = 10, noise: float = 1e-6, n_candidates: int = 2000) -> BayesOptResult:
    """Minimise ``objective`` over a box with a GP surrogate and expected improvement.

    The first ``min(n_init, n_evals)`` evaluations form a Latin-hypercube
    design; the rest maximise EI over random and near-incumbent candidates.
    """
    if n_evals < 1:
        raise ValueError("n_evals must be positive")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    d = len(bounds)
    lo, width = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    n0 = min(n_init, n_evals)
    U = qmc.LatinHypercube(d=d, seed=gen).random(n0)
    Y = [float(objective(lo + u * width)) for u in U]
    for _ in range(n_evals - n0):
        y = np.asarray(Y)
        finite = np.isfinite(y)
        gp = _GP(U[finite], y[finite], noise=noise)
        inc = U[np.argmin(np.where(finite, y, np.inf))]
        cand = np.vstack([gen.random((n_candidates, d)), np.clip(inc + 0.05 * gen.standard_normal((n_candidates // 4, d)), 0, 1)])
        mu, sd = gp.predict(cand)
        ei = expected_improvement(mu, sd, np.min(y[finite]))
        u = cand[int(np.argmax(ei))]
        U = np.vstack([U, u])
        Y.append(float(objective(lo + u * width)))
    Y = np.asarray(Y)
    k = int(np.nanargmin(np.where(np.isfinite(Y), Y, np.nan)))
    X = lo + U * width
    return BayesOptResult(X[k], float(Y[k]), X, Y)


def tune_bayesopt(problem: DeProblem, bounds, n_evals: int = 30, rng=None, base: DeConfig = DeConfig(), de_seed=0) -> BayesOptResult:
    """Tune ``(CR, F, lambda)`` of DE on ``problem`` by Bayesian optimisation.

    Every DE run uses ``de_seed`` so that tuning compares settings, not seeds.
    """
    if n_evals < 5:
        raise ValueError("n_evals must be at least 5")

    def objective(h):
        cr, f, lam = float(h[0]), float(h[1]), float(h[2])
        cfg = DeConfig(base.population_size, min(max(cr, 0.0), 1.0), max(f, 1e-9), max(lam, 0.0), base.max_generations, base.convergence_eps)
        try:
            return de_optimize(problem, cfg, de_seed).fitness
        except InitializationError:
            warnings.warn("infeasible DE initial population during tuning", stacklevel=2)
            return INFEASIBLE

    return bayes_opt(objective, bounds, n_evals, rng)
