"""MCMC samplers and the incremental convergence protocol.

Samplers work on any *target* exposing

``dim``
    number of continuous latents
``log_density(x, z)``
    unnormalised log density; ``z`` holds categorical indices
``cat_sizes`` (optional)
    number of categories of each categorical latent
``grad(x, z)`` (optional)
    gradient of ``log_density`` with respect to ``x``

:class:`~cfcalib.probmodel.Posterior` satisfies this protocol, and so does
:class:`FunctionTarget` for plain callables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from cfcalib.errors import CapabilityError, InitializationError

OPTIMAL_ACCEPT = 0.234


class FunctionTarget:
    """Wrap a log-density callable ``f(x)`` (and optional gradient) as a target."""

    def __init__(self, log_density, dim, grad=None, cat_sizes=(), columns=None):
        self._f = log_density
        self._g = grad
        self.dim = int(dim)
        self.cat_sizes = tuple(cat_sizes)
        self.columns = columns

    def log_density(self, x, z=None):
        return float(self._f(x, z) if self.cat_sizes else self._f(x))

    def grad(self, x, z=None):
        if self._g is None:
            raise CapabilityError("target has no gradient")
        return np.asarray(self._g(x), dtype=float)


@dataclass(frozen=True)
class HmcConfig:
    """Leapfrog settings. ``mass`` is a scalar, a diagonal vector or a dense
    positive-definite matrix."""

    step_size: float = 0.1
    leapfrog_steps: int = 10
    mass: object = 1.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.leapfrog_steps) < 1:
            raise ValueError("leapfrog_steps must be at least 1")
        m = np.asarray(self.mass, dtype=float)
        if m.ndim == 2:
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
                raise ValueError("mass matrix must be square and symmetric")
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise ValueError("mass matrix must be positive definite") from None
        elif np.any(m <= 0):
            raise ValueError("mass must be positive")


@dataclass
class Chain:
    """Draws from one sampler run."""

    states: np.ndarray
    log_joints: np.ndarray
    accept_count: int
    n_proposals: int
    rng_seed: object
    config: dict = field(default_factory=dict)
    cats: np.ndarray | None = None
    energy_errors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.states) != len(self.log_joints):
            raise ValueError("states and log_joints differ in length")

    def __len__(self):
        return len(self.log_joints)

    @property
    def accept_rate(self) -> float:
        return self.accept_count / self.n_proposals if self.n_proposals else 0.0

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.states, rowvar=False))


def _rng(rng):
    """``(Generator, seed record)`` from a seed, SeedSequence or Generator."""
    if isinstance(rng, np.random.Generator):
        return rng, None
    if isinstance(rng, np.random.SeedSequence):
        return np.random.default_rng(rng), rng.entropy
    return np.random.default_rng(rng), rng


def _init(target, init):
    if hasattr(init, "x"):
        x, z = np.array(init.x, dtype=float), np.array(init.z, dtype=np.int64)
    else:
        x = np.array(init, dtype=float).reshape(-1)
        z = np.zeros(len(getattr(target, "cat_sizes", ())), dtype=np.int64)
    if x.shape != (target.dim,):
        raise InitializationError(f"initial state has {x.size} latents, target has {target.dim}")
    lp = target.log_density(x, z)
    if not np.isfinite(lp) or lp <= -1e299:
        raise InitializationError(f"initial log density is not finite ({lp})")
    return x, z, lp


def _cat_sweep(target, x, z, lp, rng):
    """Draw each categorical latent from its full conditional in turn."""
    for j, k in enumerate(target.cat_sizes):
        logs = np.empty(k)
        for c in range(k):
            if c == z[j]:
                logs[c] = lp
                continue
            z[j] = c
            logs[c] = target.log_density(x, z)
        w = np.exp(logs - logs.max())
        z[j] = rng.choice(k, p=w / w.sum())
        lp = logs[z[j]]
    return lp


def rwmh_sample(
    target,
    init,
    n: int,
    proposal_scale=1.0,
    rng=None,
    cov=None,
    burn_in: int = 0,
    cat_every: int = 10,
) -> Chain:
    """Random-walk Metropolis-Hastings.

    Parameters
    ----------
    proposal_scale : float
        Multiplies the proposal standard deviation (or the Cholesky factor of
        ``cov``).
    cov : array, optional
        Proposal covariance shape; identity when omitted.
    burn_in : int
        Extra leading iterations during which the scale is adapted toward
        0.234 acceptance with diminishing step sizes. They are not returned
        and do not count toward the acceptance rate.
    cat_every : int
        One conditional sweep over categorical latents per this many
        continuous proposals.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not proposal_scale > 0:
        raise ValueError("proposal_scale must be positive")
    gen, seed = _rng(rng)
    x, z, lp = _init(target, init)
    d = target.dim
    chol = np.linalg.cholesky(np.atleast_2d(cov)) if cov is not None else None
    has_cats = len(getattr(target, "cat_sizes", ())) > 0
    log_scale = np.log(proposal_scale)
    states = np.empty((n, d))
    lps = np.empty(n)
    cats = np.empty((n, len(z)), dtype=np.int64) if has_cats else None
    accepted = 0
    for t in range(burn_in + n):
        eps = gen.standard_normal(d)
        step = chol @ eps if chol is not None else eps
        prop = x + np.exp(log_scale) * step
        lp_prop = target.log_density(prop, z)
        log_u = np.log(gen.random())
        acc = log_u < lp_prop - lp
        if acc:
            x, lp = prop, lp_prop
        if t < burn_in:
            log_scale += (float(acc) - OPTIMAL_ACCEPT) / (t + 1) ** 0.6
        else:
            accepted += int(acc)
        if has_cats and (t + 1) % cat_every == 0:
            lp = _cat_sweep(target, x, z, lp, gen)
        if t >= burn_in:
            states[t - burn_in] = x
            lps[t - burn_in] = lp
            if has_cats:
                cats[t - burn_in] = z
    return Chain(
        states=states,
        log_joints=lps,
        accept_count=accepted,
        n_proposals=n,
        rng_seed=seed,
        config={"method": "rwmh", "proposal_scale": float(np.exp(log_scale)), "burn_in": burn_in, "cat_every": cat_every},
        cats=cats,
    )


def _grad(target, x, z):
    try:
        g = target.grad(x, z)
    except (AttributeError, NotImplementedError) as exc:
        raise CapabilityError("target has no gradient; use rwmh") from exc
    return np.asarray(g, dtype=float)


def hmc_sample(target, init, n: int, cfg: HmcConfig = HmcConfig(), rng=None, adapt: int = 0, target_accept=0.8) -> Chain:
    """Hamiltonian Monte Carlo with a fixed mass (``cfg.mass``).

    ``adapt`` leading iterations tune the step size by dual averaging toward
    ``target_accept``; they are discarded. ``energy_errors`` holds ``H_end -
    H_start`` for each kept trajectory.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if len(getattr(target, "cat_sizes", ())) > 0:
        raise CapabilityError("hmc cannot update categorical latents; use rwmh")
    gen, seed = _rng(rng)
    x, z, lp = _init(target, init)
    g = _grad(target, x, z)
    d = target.dim
    mass = np.asarray(cfg.mass, dtype=float)
    if mass.ndim == 2:
        chol = np.linalg.cholesky(mass)
        inv_mass = np.linalg.inv(mass)

        def draw_p():
            return chol @ gen.standard_normal(d)

        def velocity(p):
            return inv_mass @ p

    else:
        mass = np.broadcast_to(mass, (d,)).copy()
        inv_diag, sqrt_mass = 1.0 / mass, np.sqrt(mass)

        def draw_p():
            return sqrt_mass * gen.standard_normal(d)

        def velocity(p):
            return inv_diag * p

    L = int(cfg.leapfrog_steps)
    eps = float(cfg.step_size)

    # dual averaging state
    mu_da, log_eps_bar, h_bar = np.log(10 * eps), 0.0, 0.0

    states = np.empty((n, d))
    lps = np.empty(n)
    dh = np.empty(n)
    accepted = 0
    for t in range(adapt + n):
        p = draw_p()
        h0 = -lp + 0.5 * p @ velocity(p)
        xn, gn = x.copy(), g.copy()
        pn = p + 0.5 * eps * gn
        ok = True
        for i in range(L):
            xn = xn + eps * velocity(pn)
            gn = _grad(target, xn, z)
            if not np.all(np.isfinite(gn)):
                ok = False
                break
            if i < L - 1:
                pn = pn + eps * gn
        if ok:
            pn = pn + 0.5 * eps * gn
            lpn = target.log_density(xn, z)
            h1 = -lpn + 0.5 * pn @ velocity(pn)
            delta = h1 - h0
        else:
            delta = np.inf
        if not np.isfinite(delta):
            delta = np.inf
        acc_prob = 1.0 if delta <= 0 else float(np.exp(-delta))
        acc = gen.random() < acc_prob
        if acc:
            x, lp, g = xn, lpn, gn
        if t < adapt:
            m = t + 1
            h_bar = (1 - 1 / (m + 10)) * h_bar + (target_accept - acc_prob) / (m + 10)
            log_eps = mu_da - np.sqrt(m) / 0.05 * h_bar
            w = m**-0.75
            log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
            eps = float(np.exp(log_eps))
            if t == adapt - 1:
                eps = float(np.exp(log_eps_bar))
            continue
        k = t - adapt
        accepted += int(acc)
        states[k] = x
        lps[k] = lp
        dh[k] = delta
    return Chain(
        states=states,
        log_joints=lps,
        accept_count=accepted,
        n_proposals=n,
        rng_seed=seed,
        config={"method": "hmc", "step_size": eps, "leapfrog_steps": L, "mass": mass.tolist(), "adapt": adapt},
        energy_errors=dh,
    )


def gradient(target, x, z=None) -> np.ndarray:
    """Analytic gradient of the target's log density."""
    model = getattr(target, "model", None)
    if model is not None and not getattr(model, "differentiable", True):
        raise CapabilityError(f"no gradient for {model.model}; use rwmh")
    return _grad(target, np.asarray(x, dtype=float), z)


class Convergence(NamedTuple):
    chain: Chain
    runs_used: int


def converge_by_increments(
    target,
    init,
    increment: int = 2500,
    threshold: float = 0.5,
    max_runs: int = 20,
    rng=None,
    sampler: str = "rwmh",
    **sampler_kwargs,
) -> Convergence:
    """Repeat runs of length ``increment * k`` until the run means agree.

    Run ``k`` starts afresh from ``init`` with its own RNG stream. The
    protocol stops once the mean log density of a run differs from the
    previous run's by less than ``threshold``. When ``max_runs`` is reached
    first, the last chain is returned with ``meta["converged"] = False``.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if increment < 1 or max_runs < 1:
        raise ValueError("increment and max_runs must be positive")
    root = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
    streams = root.spawn(max_runs)
    means = []
    chain = None
    for k in range(1, max_runs + 1):
        if sampler == "rwmh":
            chain = rwmh_sample(target, init, increment * k, rng=streams[k - 1], **sampler_kwargs)
        elif sampler == "hmc":
            chain = hmc_sample(target, init, increment * k, rng=streams[k - 1], **sampler_kwargs)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        means.append(float(np.mean(chain.log_joints)))
        if k >= 2 and abs(means[-1] - means[-2]) < threshold:
            chain.meta.update(converged=True, run_means=means)
            return Convergence(chain, k)
    chain.meta.update(converged=False, run_means=means)
    return Convergence(chain, max_runs)


# --------------------------------------------------------------------------
# diagnostics and helpers
# --------------------------------------------------------------------------


def autocorr(x) -> np.ndarray:
    """Normalised autocorrelation of a 1-d series via FFT."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    f = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / ac[0] if ac[0] > 0 else np.zeros(n)


def effective_sample_size(x) -> float:
    """ESS from Geyer's initial positive sequence of paired autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return float(n)
    rho = autocorr(x)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def split_rhat(chains) -> np.ndarray:
    """Split-R-hat per coordinate for ``chains`` of shape (m, n, d) or (m, n)."""
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    half = arr.shape[1] // 2
    parts = np.concatenate([arr[:, :half], arr[:, half : 2 * half]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(w > 0, var_hat / w, 1.0))


def find_mode(target, x0, z=None, fixed=None, maxiter=20000, use_grad=False):
    """Maximise the log density by Powell's method.

    Coordinates listed in ``fixed`` keep their starting values. The
    likelihood has kinks (and, for a shape below one, integrable poles at
    zero residual), so a derivative-free search is the default;
    ``use_grad=True`` switches to L-BFGS with the analytic gradient.
    """
    x0 = np.array(getattr(x0, "x", x0), dtype=float)
    free = np.ones(len(x0), dtype=bool)
    if fixed is not None:
        free[np.asarray(fixed, dtype=np.int64)] = False

    def full(y):
        x = x0.copy()
        x[free] = y
        return x

    def nlp(y):
        return -target.log_density(full(y), z)

    if use_grad:

        def jac(y):
            g = -np.asarray(target.grad(full(y), z))[free]
            return np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)

        res = optimize.minimize(nlp, x0[free], jac=jac, method="L-BFGS-B", options={"maxiter": maxiter})
    else:
        res = optimize.minimize(nlp, x0[free], method="Powell", options={"maxiter": maxiter, "xtol": 1e-6, "ftol": 1e-10})
    return full(res.x), -float(res.fun)


def laplace_covariance(target, x, z=None, h=1e-4, floor=1e-8, scales=None) -> np.ndarray:
    """Inverse of the negative Hessian at ``x``, eigenvalues clipped positive.

    With ``scales`` (prior standard deviations) the Hessian is first
    standardised by them and its eigenvalues are clipped at one, so no
    direction gets a larger variance than the prior allows. This keeps
    flat or saddle directions from producing huge proposals.
    """
    x = np.asarray(x, dtype=float)
    d = len(x)
    H = np.empty((d, d))
    try:
        target.grad(x, z)
        use_grad = True
    except (CapabilityError, AttributeError):
        use_grad = False
    if use_grad:
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            H[i] = (target.grad(x + e, z) - target.grad(x - e, z)) / (2 * h)
        H = 0.5 * (H + H.T)
    else:
        f0 = target.log_density(x, z)
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            H[i, i] = (target.log_density(x + ei, z) - 2 * f0 + target.log_density(x - ei, z)) / h**2
            for j in range(i):
                ej = np.zeros(d)
                ej[j] = h
                H[i, j] = H[j, i] = (
                    target.log_density(x + ei + ej, z)
                    - target.log_density(x + ei - ej, z)
                    - target.log_density(x - ei + ej, z)
                    + target.log_density(x - ei - ej, z)
                ) / (4 * h**2)
    if scales is not None:
        D = np.asarray(scales, dtype=float)
        w, V = np.linalg.eigh(-H * np.outer(D, D))
        w = np.maximum(np.nan_to_num(w, nan=1.0), 1.0)
        return D[:, None] * ((V / w) @ V.T) * D[None, :]
    w, V = np.linalg.eigh(-H)
    w = np.maximum(w, floor)
    w = np.maximum(w, w.max() * 1e-10)
    return (V / w) @ V.T


def write_trace(chain: Chain, path, columns=None, cat_columns=None):
    """CSV with ``iteration, log_joint`` and one column per latent."""
    d = chain.states.shape[1]
    columns = list(columns) if columns is not None else [f"x{i}" for i in range(d)]
    header = ["iteration", "log_joint"] + columns
    if chain.cats is not None:
        header += list(cat_columns) if cat_columns is not None else [f"z{j}" for j in range(chain.cats.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(chain)):
            row = [i, repr(float(chain.log_joints[i]))] + [repr(float(v)) for v in chain.states[i]]
            if chain.cats is not None:
                row += [int(v) for v in chain.cats[i]]
            w.writerow(row)


def read_trace(path):
    """``(columns, log_joints, states)`` from :func:`write_trace` output (continuous columns only)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float) if len(rows) > 1 else np.zeros((0, len(rows[0])))
    return header[2:], body[:, 1], body[:, 2:]
