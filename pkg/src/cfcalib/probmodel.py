"""Probabilistic car-following models.

A :class:`ProbModel` combines a prior table, a pooling formulation and one of
the acceleration kernels. Binding it to a :class:`~cfcalib.data.BatchedData`
gives a :class:`Posterior`, the object samplers and optimisers work with.

Continuous latents live on the untransformed (real) side of the support
transforms. Rows are treated as i.i.d. given the parameters, with a Double
Gamma likelihood centred on the kernel prediction::

    log p = log prior(latents) + sum_i log DG(a_i | pred_i, beta, gamma)

Pooling modes
-------------
pooled
    one parameter vector shared by all rows
unpooled
    one independent vector per group
hierarchical
    non-centred two-level form ``u_g = mu + sigma * theta_norm_g`` with
    ``theta_norm ~ N(0, 1)``, ``mu ~ N(prior mean, prior sigma)`` and
    ``sigma ~ HalfNormal(hyper_sigma)`` per parameter

The likelihood scale ``beta`` and shape ``gamma`` are global latents.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, digamma

from cfcalib.data import GROUP_KEYS, BatchedData
from cfcalib.distributions import _dg_logpdf, half_normal_log_pdf, log_sigmoid, normal_log_pdf, softplus, softplus_inverse
from cfcalib.errors import CapabilityError, LayoutError
from cfcalib.models.idm import idm_accel_arrays, idm_accel_jacobian
from cfcalib.models.w99 import w99_sequence
from cfcalib.models.wzdm import PRT_CHOICES, PRT_NAMES, WzdmConstants, lag_indices, wzdm_accel_arrays
from cfcalib.priors import PriorSpec

POOLING_MODES = ("pooled", "unpooled", "hierarchical")
NAN_LOG_DENSITY = -1e300
N_REGIME_PARAMS = 6


@dataclass(frozen=True)
class PoolingSpec:
    mode: str = "pooled"
    key: str = "instance"

    def __post_init__(self):
        if self.mode not in POOLING_MODES:
            raise ValueError(f"pooling mode must be one of {POOLING_MODES}")
        if self.key not in GROUP_KEYS:
            raise ValueError(f"grouping key must be one of {GROUP_KEYS}")

    def check_groups(self, n_groups: int, min_groups: int = 2):
        if self.mode == "hierarchical" and n_groups < min_groups:
            raise ValueError(f"hierarchical pooling needs at least {min_groups} groups, got {n_groups}")


class Layout:
    """Ordered named blocks of a flat latent vector."""

    def __init__(self, entries, labels=None):
        self.entries = tuple((name, tuple(shape)) for name, shape in entries)
        self.labels = dict(labels or {})
        self.slices = {}
        start = 0
        for name, shape in self.entries:
            size = int(np.prod(shape)) if shape else 1
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def __eq__(self, other):
        return isinstance(other, Layout) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def unpack(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.size:
            raise LayoutError(f"expected {self.size} latents, got {x.shape[-1]}")
        return {name: x[..., self.slices[name]].reshape(x.shape[:-1] + shape) for name, shape in self.entries}

    def pack(self, parts: dict) -> np.ndarray:
        if set(parts) != set(self.slices):
            raise LayoutError(f"blocks {sorted(parts)} do not match layout {sorted(self.slices)}")
        out = np.empty(self.size)
        for name, shape in self.entries:
            block = np.asarray(parts[name], dtype=float)
            if block.shape != shape:
                raise LayoutError(f"block {name!r} has shape {block.shape}, expected {shape}")
            out[self.slices[name]] = block.ravel()
        return out

    def columns(self) -> list:
        """Flat column names such as ``theta[FW4].v0``."""
        cols = []
        for name, shape in self.entries:
            axes = self.labels.get(name)
            if not shape:
                cols.append(name)
            elif len(shape) == 1:
                labs = axes[0] if axes else range(shape[0])
                cols.extend(f"{name}.{a}" for a in labs)
            else:
                rows = axes[0] if axes else range(shape[0])
                params = axes[1] if axes else range(shape[1])
                cols.extend(f"{name}[{r}].{p}" for r in rows for p in params)
        return cols


@dataclass(frozen=True)
class CatSlot:
    """One categorical latent: a label, its allowed values and a group."""

    name: str
    values: tuple
    group: int = 0


@dataclass
class LatentState:
    """Continuous latents ``x`` (untransformed) plus categorical indices ``z``."""

    x: np.ndarray
    z: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.z = np.asarray(self.z, dtype=np.int64)
        if self.x.shape != (self.layout.size,):
            raise LayoutError(f"state has {self.x.shape} latents, layout needs {self.layout.size}")

    def unpack(self) -> dict:
        return self.layout.unpack(self.x)

    def copy(self) -> "LatentState":
        return LatentState(self.x.copy(), self.z.copy(), self.layout)


@dataclass(frozen=True)
class ProbModel:
    """A car-following model with priors and a pooling formulation."""

    model: str
    priors: PriorSpec
    pooling: PoolingSpec = field(default_factory=PoolingSpec)

    def __post_init__(self):
        if self.model not in ("idm", "w99", "wzdm"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.priors.model != self.model:
            raise ValueError(f"priors are for {self.priors.model}, model is {self.model}")

    @property
    def differentiable(self) -> bool:
        return self.model == "idm"

    def bind(self, data: BatchedData, min_groups: int = 2) -> "Posterior":
        return Posterior(self, data, min_groups=min_groups)


def _support_sign(priors: PriorSpec) -> np.ndarray:
    table = {"real": 0.0, "nonneg": 1.0, "nonpos": -1.0}
    return np.array([table[priors.supports[n]] for n in priors.names])


class Posterior:
    """Unnormalised posterior of a :class:`ProbModel` over fixed data.

    Exposes ``log_density(x, z)``, ``grad(x, z)`` (IDM only),
    ``pointwise_loglik`` and ``predict``. Categorical latents are described
    by ``cat_slots``; ``z`` holds an index into each slot's ``values``.
    """

    def __init__(self, model: ProbModel, data: BatchedData, min_groups: int = 2):
        self.model = model
        self.data = data
        pr = model.priors
        self.mode = model.pooling.mode
        model.pooling.check_groups(data.n_groups, min_groups)
        self.names = pr.names
        self.n_params = len(pr.names)
        self.c = pr.sharpness
        self.sign = _support_sign(pr)
        self.sigma = pr.sigma_vector()
        self.hyper_sigma = pr.hyper_sigma
        self.lik_mu = np.array([pr.likelihood["beta"]["mu"], pr.likelihood["gamma"]["mu"]])
        self.lik_sigma = np.array([pr.likelihood["beta"]["sigma"], pr.likelihood["gamma"]["sigma"]])
        self.n_pgroups = 1 if self.mode == "pooled" else data.n_groups
        self.group_frameworks = self._group_frameworks()
        self.mu_groups = np.array([pr.mu_vector(fw) for fw in self.group_frameworks])
        self.mu_hyper = pr.mu_vector(self.group_frameworks[0] if self.mode == "pooled" else None)
        if self.mode == "pooled":
            self.mu_groups = self.mu_hyper[None, :]
        self.nan_count = 0

        group_labels = [str(g) for g in data.group_ids] if self.mode != "pooled" else ["all"]
        names = list(self.names)
        if self.mode == "hierarchical":
            entries = [("theta_norm", (self.n_pgroups, self.n_params)), ("mu", (self.n_params,)), ("sigma_u", (self.n_params,))]
            labels = {"theta_norm": (group_labels, names), "mu": (names,), "sigma_u": (names,)}
        elif self.mode == "unpooled":
            entries = [("theta", (self.n_pgroups, self.n_params))]
            labels = {"theta": (group_labels, names)}
        else:
            entries = [("theta", (self.n_params,))]
            labels = {"theta": (names,)}
        entries.append(("lik_u", (2,)))
        labels["lik_u"] = (["beta", "gamma"],)
        self.layout = Layout(entries, labels)
        self.dim = self.layout.size
        self.group_labels = group_labels
        self._build_cat_slots()
        self._wzdm_const = WzdmConstants()

    # ------------------------------------------------------------------ setup
    def _group_frameworks(self):
        d = self.data
        if self.model.model != "wzdm":
            return [None] * self.n_pgroups
        if self.mode == "pooled":
            fws = np.unique(d.instance_framework)
            return [int(fws[0]) if len(fws) == 1 else None]
        out = []
        for g in range(d.n_groups):
            fws = np.unique(d.instance_framework[d.instance_group == g])
            out.append(int(fws[0]) if len(fws) == 1 else None)
        return out

    def _build_cat_slots(self):
        pr = self.model.priors
        slots, init = [], []
        self.cat_kind = None
        if self.model.model == "w99":
            self.cat_kind = "w99"
            probs = np.asarray(pr.categorical["initial_regime"], dtype=float)
            self.cat_logp = [np.log(probs / probs.sum())]
            for i, iid in enumerate(self.data.instance_ids):
                slots.append(CatSlot(f"init_regime[{iid}]", (0, 1, 2, 3), i))
                init.append(3)  # free flow
        elif self.model.model == "wzdm":
            self.cat_kind = "wzdm"
            self.dirichlet = np.array([pr.categorical[n] for n in PRT_NAMES], dtype=float)
            self.cat_logp = [np.log(a / a.sum()) for a in self.dirichlet]
            for g in range(self.n_pgroups):
                fw = self.group_frameworks[g]
                for k, name in enumerate(PRT_NAMES):
                    slots.append(CatSlot(f"{name}[{self.group_labels[g]}]", PRT_CHOICES, g))
                    if fw is not None and name in pr.framework_mu.get(fw, {}):
                        init.append(PRT_CHOICES.index(int(pr.framework_mu[fw][name])))
                    else:
                        init.append(int(np.argmax(self.dirichlet[k])))
        self.cat_slots = tuple(slots)
        self.cat_sizes = tuple(len(s.values) for s in slots)
        self._z0 = np.array(init, dtype=np.int64)

    # -------------------------------------------------------------- transforms
    def to_constrained(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self.sign == 0, u, self.sign * softplus(u, self.c))

    def group_latents(self, parts) -> np.ndarray:
        """Untransformed per-group parameters, shape ``(n_pgroups, n_params)``."""
        if self.mode == "hierarchical":
            return parts["mu"] + softplus(parts["sigma_u"], self.c) * parts["theta_norm"]
        return np.atleast_2d(parts["theta"])

    def constrained(self, x) -> dict:
        """Named constrained quantities at one latent vector."""
        parts = self.layout.unpack(x)
        out = {"theta": self.to_constrained(self.group_latents(parts))}
        if self.mode == "hierarchical":
            out["mu"] = self.to_constrained(parts["mu"])
            out["mu_latent"] = parts["mu"]
            out["sigma"] = softplus(parts["sigma_u"], self.c)
        out["beta"], out["gamma"] = softplus(parts["lik_u"], self.c)
        out["theta_latent"] = self.group_latents(parts)
        return out

    def initial_state(self) -> LatentState:
        """Prior-mean starting point."""
        if self.mode == "hierarchical":
            parts = {
                "theta_norm": np.zeros((self.n_pgroups, self.n_params)),
                "mu": self.mu_hyper.copy(),
                "sigma_u": np.full(self.n_params, softplus_inverse(0.5 * self.hyper_sigma, self.c)),
            }
        elif self.mode == "unpooled":
            parts = {"theta": self.mu_groups.copy()}
        else:
            parts = {"theta": self.mu_hyper.copy()}
        parts["lik_u"] = self.lik_mu.copy()
        return LatentState(self.layout.pack(parts), self._z0.copy(), self.layout)

    def cat_values(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.int64)
        if len(z) != len(self.cat_slots):
            raise LayoutError(f"expected {len(self.cat_slots)} categorical latents, got {len(z)}")
        return np.array([s.values[k] for s, k in zip(self.cat_slots, z)], dtype=np.int64)

    # ----------------------------------------------------------------- pieces
    def log_prior(self, x, z=None) -> float:
        parts = self.layout.unpack(x)
        if self.mode == "hierarchical":
            s = softplus(parts["sigma_u"], self.c)
            lp = np.sum(normal_log_pdf(parts["theta_norm"], 0.0, 1.0))
            lp += np.sum(normal_log_pdf(parts["mu"], self.mu_hyper, self.sigma))
            lp += np.sum(half_normal_log_pdf(s, self.hyper_sigma) + log_sigmoid(self.c * parts["sigma_u"]))
        else:
            th = np.atleast_2d(parts["theta"])
            lp = np.sum(normal_log_pdf(th, self.mu_groups, self.sigma))
        lp += np.sum(normal_log_pdf(parts["lik_u"], self.lik_mu, self.lik_sigma))
        return float(lp + self.log_prior_cat(z))

    def prior_scales(self) -> np.ndarray:
        """Rough prior standard deviation of every continuous latent."""
        if self.mode == "hierarchical":
            parts = {
                "theta_norm": np.ones((self.n_pgroups, self.n_params)),
                "mu": np.broadcast_to(self.sigma, (self.n_params,)),
                "sigma_u": np.full(self.n_params, max(self.hyper_sigma, 1.0)),
            }
        else:
            parts = {"theta": np.broadcast_to(self.sigma, np.shape(self.layout.unpack(np.zeros(self.dim))["theta"]))}
        parts["lik_u"] = np.broadcast_to(self.lik_sigma, (2,))
        return self.layout.pack({k: np.asarray(v, dtype=float) for k, v in parts.items()})

    def log_prior_cat(self, z=None) -> float:
        if not self.cat_slots:
            return 0.0
        z = self._z0 if z is None else np.asarray(z, dtype=np.int64)
        if self.cat_kind == "w99":
            return float(np.sum(self.cat_logp[0][z]))
        zz = z.reshape(self.n_pgroups, len(PRT_NAMES))
        if self.mode != "hierarchical":
            return float(sum(np.sum(self.cat_logp[k][zz[:, k]]) for k in range(len(PRT_NAMES))))
        # group choices share one Dirichlet-distributed probability vector,
        # integrated out analytically (Polya urn)
        lp = 0.0
        for k, alpha in enumerate(self.dirichlet):
            counts = np.bincount(zz[:, k], minlength=len(alpha))
            lp += gammaln(alpha.sum()) - gammaln(alpha.sum() + counts.sum())
            lp += np.sum(gammaln(alpha + counts) - gammaln(alpha))
        return float(lp)

    def row_params(self, theta_groups) -> np.ndarray:
        """Constrained parameters for every row (or one shared vector)."""
        if self.mode == "pooled":
            return theta_groups[0]
        return theta_groups[self.data.group_index]

    def predict(self, x, z=None) -> np.ndarray:
        parts = self.layout.unpack(x)
        theta = self.to_constrained(self.group_latents(parts))
        with np.errstate(all="ignore"):
            return self._predict_theta(theta, z)

    def _predict_theta(self, theta, z=None):
        if self.data.n_rows == 0:
            return np.zeros(0)
        prm = self.row_params(theta)
        if self.model.model == "idm":
            return kernel_predict("idm", self.data, prm)
        zv = self.cat_values(self._z0 if z is None else z)
        if self.model.model == "wzdm":
            prts = zv.reshape(self.n_pgroups, len(PRT_NAMES))
            zv = prts[0] if self.mode == "pooled" else prts[self.data.group_index]
        return kernel_predict(self.model.model, self.data, prm, zv, self._wzdm_const)

    def pointwise_loglik(self, x, z=None) -> np.ndarray:
        parts = self.layout.unpack(x)
        beta, gamma = softplus(parts["lik_u"], self.c)
        pred = self.predict(x, z)
        with np.errstate(all="ignore"):
            ll = _dg_logpdf(self.data.a_f, pred, beta, gamma)
        bad = ~np.isfinite(ll) | ~np.isfinite(pred)
        if np.any(bad):
            self.nan_count += int(np.count_nonzero(bad))
            ll = np.where(bad, NAN_LOG_DENSITY, ll)
        return ll

    def log_density(self, x, z=None) -> float:
        lp = self.log_prior(x, z)
        if self.data.n_rows:
            lp += float(np.sum(self.pointwise_loglik(x, z)))
        if not np.isfinite(lp):
            self.nan_count += 1
            return NAN_LOG_DENSITY
        return lp

    __call__ = log_density

    def smoothed_log_density(self, x, z=None, eps=None) -> float:
        """Log density with ``|r|`` replaced by ``sqrt(r^2 + eps^2)``.

        The exact likelihood has a kink at every zero residual, which stalls
        coordinate and quasi-Newton searches; this surrogate is smooth and
        shares its optimum up to O(eps). ``eps`` defaults to a tenth of the
        observed acceleration spread.
        """
        if eps is None:
            eps = 0.1 * float(np.std(self.data.a_f)) if self.data.n_rows else 1.0
        lp = self.log_prior(x, z)
        if self.data.n_rows:
            parts = self.layout.unpack(x)
            beta, gamma = softplus(parts["lik_u"], self.c)
            pred = self.predict(x, z)
            with np.errstate(all="ignore"):
                r = np.sqrt((self.data.a_f - pred) ** 2 + eps**2)
                lp += float(np.sum(_dg_logpdf(r, 0.0, beta, gamma)))
        return lp if np.isfinite(lp) else NAN_LOG_DENSITY

    # --------------------------------------------------------------- gradient
    def grad(self, x, z=None, smoothing=0.0) -> np.ndarray:
        """Analytic gradient of :meth:`log_density` (IDM only).

        With ``smoothing > 0`` it is the gradient of
        :meth:`smoothed_log_density` with ``eps = smoothing`` instead.
        """
        with np.errstate(all="ignore"):
            return self._grad(x, z, smoothing)

    def _grad(self, x, z=None, smoothing=0.0) -> np.ndarray:
        if not self.model.differentiable:
            raise CapabilityError(f"no gradient for {self.model.model}; use rwmh")
        parts = self.layout.unpack(x)
        c = self.c
        g = {k: np.zeros_like(v) for k, v in parts.items()}
        u = self.group_latents(parts)
        theta = self.to_constrained(u)
        dtheta_du = np.where(self.sign == 0, 1.0, self.sign * expit(c * u))

        beta, gamma = softplus(parts["lik_u"], c)
        d = self.data
        if d.n_rows:
            prm = self.row_params(theta)
            cols = prm.T if prm.ndim == 2 else prm
            with np.errstate(all="ignore"):
                pred, jac = idm_accel_jacobian(d.v_f, d.dv, d.dx, *cols)
            r = d.a_f - pred
            if smoothing > 0:
                r_abs = np.sqrt(r * r + smoothing**2)
                dabs = r / r_abs
            else:
                r_abs, dabs = np.abs(r), np.sign(r)
            z_ = r_abs / beta
            with np.errstate(divide="ignore", invalid="ignore"):
                dl_dz = np.where(z_ > 0, (gamma - 1.0) / z_, 0.0) - 1.0
                log_z = np.log(z_)
                dl_dpred = -dl_dz * dabs / beta
                contrib = dl_dpred[:, None] * jac
            if self.mode == "pooled":
                g_theta = contrib.sum(axis=0)[None, :]
            else:
                g_theta = np.zeros((self.n_pgroups, self.n_params))
                np.add.at(g_theta, d.group_index, contrib)
            g_u = g_theta * dtheta_du
            dl_dbeta = np.sum(z_ - gamma) / beta
            dl_dgamma = np.sum(log_z) - d.n_rows * digamma(gamma)
            g["lik_u"] += np.array([dl_dbeta, dl_dgamma]) * expit(c * parts["lik_u"])
        else:
            g_u = np.zeros((self.n_pgroups, self.n_params))

        g["lik_u"] += -(parts["lik_u"] - self.lik_mu) / self.lik_sigma**2
        if self.mode == "hierarchical":
            s = softplus(parts["sigma_u"], c)
            ds = expit(c * parts["sigma_u"])
            g["theta_norm"] = g_u * s - parts["theta_norm"]
            g["mu"] = g_u.sum(axis=0) - (parts["mu"] - self.mu_hyper) / self.sigma**2
            g_s = (g_u * parts["theta_norm"]).sum(axis=0) - s / self.hyper_sigma**2
            g["sigma_u"] = g_s * ds + c * (1.0 - ds)
        elif self.mode == "unpooled":
            g["theta"] = g_u - (parts["theta"] - self.mu_groups) / self.sigma**2
        else:
            g["theta"] = g_u[0] - (parts["theta"] - self.mu_hyper) / self.sigma**2
        return self.layout.pack(g)


def kernel_predict(model: str, data: BatchedData, theta, cats=None, const=WzdmConstants()) -> np.ndarray:
    """Kernel accelerations for every row of ``data``.

    ``theta`` holds constrained parameters, either one shared vector or one
    row per data row. ``cats`` carries the discrete inputs: one initial
    previous regime per instance for W99 (free flow when omitted) and the
    three PRT lags for WZDM (shared or per row; framework-table values
    ``(3, 1, 1)`` when omitted).
    """
    d = data
    if d.n_rows == 0:
        return np.zeros(0)
    prm = np.asarray(theta, dtype=float)
    if model == "idm":
        cols = prm.T if prm.ndim == 2 else prm
        return idm_accel_arrays(d.v_f, d.dv, d.dx, *cols)
    if model == "w99":
        init = np.full(d.n_instances, 3, dtype=np.int64) if cats is None else np.asarray(cats, dtype=np.int64)
        acc, _ = w99_sequence(d.v_f, d.a_prev, d.v_l, d.a_l, d.dv, d.dx, prm, d.starts, init)
        return acc
    if model != "wzdm":
        raise ValueError(f"unknown model {model!r}")
    prts = np.array([3, 1, 1]) if cats is None else np.asarray(cats, dtype=np.int64)
    rp = prm[..., :N_REGIME_PARAMS]
    fcont = prm[..., N_REGIME_PARAMS:]
    n = d.n_rows
    i_dv = lag_indices(n, d.starts, prts[..., 0])
    i_dx = lag_indices(n, d.starts, prts[..., 1])
    i_v = lag_indices(n, d.starts, prts[..., 2])
    cur = {"v_f": d.v_f, "v_l": d.v_l, "a_l": d.a_l, "dv": d.dv, "dx": d.dx}
    lag = {"v_l_dv": d.v_l[i_dv], "v_f_dv": d.v_f[i_dv], "dx_dx": d.dx[i_dx], "v_f_v": d.v_f[i_v]}
    acc, _ = wzdm_accel_arrays(cur, lag, fcont, rp, d.a_prev, const)
    return acc


# --------------------------------------------------------------------------
# functional front end
# --------------------------------------------------------------------------


def _target(model, data, state):
    post = model.bind(data, min_groups=1)
    if state.layout != post.layout:
        raise LayoutError("state layout does not match the model")
    return post


def log_joint(state: LatentState, model: ProbModel, data: BatchedData) -> float:
    """Log prior + log likelihood at ``state``.

    Binds the model on every call; hot loops should use
    :meth:`ProbModel.bind` once and call :meth:`Posterior.log_density`.
    """
    return _target(model, data, state).log_density(state.x, state.z)


def predict_batch(state: LatentState, model: ProbModel, data: BatchedData) -> np.ndarray:
    return _target(model, data, state).predict(state.x, state.z)


def rmse(predictions, observations, groups=None, group_ids=None) -> dict:
    """Per-group RMSE plus ``"overall"``, the mean of the group values.

    Parameters
    ----------
    groups : array of int, optional
        Group index of each row. All rows form one group when omitted.
    group_ids : sequence, optional
        Labels for the group indices; groups without rows are dropped with a
        warning.
    """
    pred = np.asarray(predictions, dtype=float)
    obs = np.asarray(observations, dtype=float)
    if pred.shape != obs.shape:
        raise ValueError("predictions and observations differ in length")
    groups = np.zeros(len(obs), dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)
    n_groups = len(group_ids) if group_ids is not None else (int(groups.max()) + 1 if len(groups) else 0)
    labels = list(group_ids) if group_ids is not None else list(range(n_groups))
    sq = (pred - obs) ** 2
    sums = np.bincount(groups, weights=sq, minlength=n_groups)
    counts = np.bincount(groups, minlength=n_groups)
    out = {}
    for g, lab in enumerate(labels):
        if counts[g] == 0:
            warnings.warn(f"group {lab!r} has no rows; excluded from RMSE", stacklevel=2)
            continue
        out[lab] = float(np.sqrt(sums[g] / counts[g]))
    out["overall"] = float(np.mean(list(out.values()))) if out else float("nan")
    return out
