"""Intelligent Driver Model."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from cfcalib.errors import DomainError
from cfcalib.models._util import scalar_or_array

IDM_PARAM_NAMES = ("v0", "T", "a", "b", "delta", "s0", "s1")


@dataclass(frozen=True)
class IdmParams:
    v0: float = 33.33
    T: float = 1.6
    a: float = 0.73
    b: float = 1.67
    delta: float = 4.0
    s0: float = 2.0
    s1: float = 0.0

    def __post_init__(self):
        positive = (self.v0, self.T, self.a, self.b, self.delta, self.s0)
        if min(positive) <= 0 or self.s1 < 0:
            raise DomainError(f"invalid IDM parameters {self}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x) -> "IdmParams":
        return cls(*(float(v) for v in x))

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))


def idm_accel(obs, p: IdmParams):
    """IDM acceleration for one observation (or arrays of them).

    ``obs`` needs ``v_f``, ``dv`` and ``dx``. The IDM interaction term uses
    the closing rate ``v_f - v_l``, which is ``-dv`` in this package's sign
    convention.
    """
    dx = np.asarray(obs.dx, dtype=float)
    if np.any(dx <= 0):
        raise DomainError("idm_accel requires dx > 0")
    out = idm_accel_arrays(obs.v_f, obs.dv, dx, *p.as_array())
    return scalar_or_array(out)


def desired_gap(v, closing, v0, T, a, b, s1_coef, s0):
    return s0 + s1_coef * np.sqrt(np.maximum(v, 0.0) / v0) + T * v + v * closing / (2.0 * np.sqrt(a * b))


def idm_accel_arrays(v, dv, dx, v0, T, a, b, delta, s0, s1):
    """Vectorised kernel; parameters may be scalars or per-row arrays."""
    v = np.asarray(v, dtype=float)
    closing = -np.asarray(dv, dtype=float)
    s_star = desired_gap(v, closing, v0, T, a, b, s1, s0)
    ratio = np.maximum(v, 0.0) / v0
    return a * (1.0 - ratio**delta - (s_star / dx) ** 2)


def idm_accel_jacobian(v, dv, dx, v0, T, a, b, delta, s0, s1):
    """Kernel value and its partial derivatives w.r.t. the seven parameters.

    Returns ``(accel, jac)`` with ``jac[..., k]`` the derivative with respect
    to ``IDM_PARAM_NAMES[k]``.
    """
    v = np.asarray(v, dtype=float)
    closing = -np.asarray(dv, dtype=float)
    dx = np.asarray(dx, dtype=float)
    vpos = np.maximum(v, 0.0)
    ratio = vpos / v0
    sq = np.sqrt(ratio)
    sab = np.sqrt(a * b)
    s_star = s0 + s1 * sq + T * v + v * closing / (2.0 * sab)
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.where(vpos > 0, np.log(np.where(vpos > 0, ratio, 1.0)), 0.0)
    powr = np.where(vpos > 0, ratio**delta, 0.0)
    inter = (s_star / dx) ** 2
    accel = a * (1.0 - powr - inter)

    # d accel / d s_star
    d_sstar = -2.0 * a * s_star / dx**2
    # s_star partials
    ds_v0 = -0.5 * s1 * sq / v0
    ds_T = v
    ds_a = -v * closing / (4.0 * sab * a)
    ds_b = -v * closing / (4.0 * sab * b)
    ds_s0 = np.ones_like(v)
    ds_s1 = sq

    j_v0 = a * delta * powr / v0 + d_sstar * ds_v0
    j_T = d_sstar * ds_T
    j_a = (1.0 - powr - inter) + d_sstar * ds_a
    j_b = d_sstar * ds_b
    j_delta = -a * powr * logr
    j_s0 = d_sstar * ds_s0
    j_s1 = d_sstar * ds_s1
    jac = np.stack(np.broadcast_arrays(j_v0, j_T, j_a, j_b, j_delta, j_s0, j_s1), axis=-1)
    return accel, jac


def idm_equilibrium_gap(v, p: IdmParams) -> float:
    """Gap at which a follower at speed ``v`` behind an equal-speed leader has zero acceleration."""
    free = 1.0 - (v / p.v0) ** p.delta
    if free <= 0:
        raise DomainError("no equilibrium gap at or above the desired speed")
    s_star = p.s0 + p.s1 * np.sqrt(v / p.v0) + p.T * v
    return float(s_star / np.sqrt(free))
