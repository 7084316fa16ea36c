"""FHWA Work Zone Driver Model (WZDM).

Regime geometry on the (dv, dx) plane, with ``V(dx)`` interpolating the
separating speed linearly from ``V_s,Gmin`` at ``G_min`` to ``V_s,Gmax`` at
``G_max`` (the approach side mirrors it):

====  ===========================================  ======
R7    dx <= G_c                                    case 4
R6    G_c < dx <= G_min, dv <  -V_s,Gmin           case 3
R5    G_c < dx <= G_min, dv >= -V_s,Gmin           case 2
R4    G_min < dx <= G_max, dv < -V(dx)             case 2
R3    G_min < dx <= G_max, |dv| <= V(dx)           case 2
R2    G_min < dx <= G_max, dv > V(dx)              case 1
R1    dx > G_max                                   case 1
====  ===========================================  ======

Forces read perception-lagged inputs: ``PRT_dv`` for the velocities in the
lead-velocity force, ``PRT_dx`` for the gap, ``PRT_v`` for the follower
speed in the desired-velocity force. Lags are counted in rows and clamp at
the start of an instance.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from cfcalib.errors import DomainError
from cfcalib.models._util import guard

REGIME_PARAM_NAMES = (
    "g_s",
    "g_c_delta_g_s",
    "g_min_delta_g_c",
    "g_max_delta_g_min",
    "v_s_g_min",
    "v_s_g_max_delta_v_s_g_min",
)
FRAMEWORK_CONT_NAMES = (
    "n",
    "c_v",
    "c_des",
    "c_prox",
    "c_gap",
    "t_safe",
    "c_bl",
    "v_des",
    "a_max",
    "d_max",
    "d_emr_delta_d_max",
)
PRT_NAMES = ("prt_dv", "prt_dx", "prt_v")
PRT_CHOICES = (1, 2, 3, 4)


@dataclass(frozen=True)
class WzdmConstants:
    leader_velocity_threshold: float = 2.2352
    ttc_extreme: float = 6.0
    extreme_approach_accel: float = -2.0


@dataclass(frozen=True)
class WzdmRegimeParams:
    g_s: float
    g_c_delta_g_s: float
    g_min_delta_g_c: float
    g_max_delta_g_min: float
    v_s_g_min: float
    v_s_g_max_delta_v_s_g_min: float

    def __post_init__(self):
        gaps = (self.g_s, self.g_c_delta_g_s, self.g_min_delta_g_c, self.g_max_delta_g_min, self.v_s_g_min)
        if min(gaps) <= 0 or self.v_s_g_max_delta_v_s_g_min < 0:
            raise DomainError(f"invalid WZDM regime parameters {self}")

    @property
    def g_c(self):
        return self.g_s + self.g_c_delta_g_s

    @property
    def g_min(self):
        return self.g_c + self.g_min_delta_g_c

    @property
    def g_max(self):
        return self.g_min + self.g_max_delta_g_min

    @property
    def v_s_g_max(self):
        return self.v_s_g_min + self.v_s_g_max_delta_v_s_g_min

    @property
    def v_a_g_min(self):
        return -self.v_s_g_min

    @property
    def v_a_g_max(self):
        return -self.v_s_g_max

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class WzdmFrameworkParams:
    n: float
    c_v: float
    c_des: float
    c_prox: float
    c_gap: float
    t_safe: float
    c_bl: float
    v_des: float
    a_max: float
    d_max: float
    d_emr_delta_d_max: float
    prt_dv: int = 1
    prt_dx: int = 1
    prt_v: int = 1

    def __post_init__(self):
        cont = (self.n, self.c_v, self.c_des, self.c_prox, self.c_gap, self.t_safe, self.c_bl, self.v_des, self.a_max)
        if min(cont) <= 0 or self.d_max >= 0 or self.d_emr_delta_d_max >= 0:
            raise DomainError(f"invalid WZDM framework parameters {self}")
        for name in PRT_NAMES:
            if getattr(self, name) not in PRT_CHOICES:
                raise DomainError(f"{name} must be one of {PRT_CHOICES}")

    @property
    def d_emr(self):
        return self.d_max + self.d_emr_delta_d_max

    def continuous_array(self):
        return np.array([getattr(self, n) for n in FRAMEWORK_CONT_NAMES], dtype=float)

    def prts(self):
        return (self.prt_dv, self.prt_dx, self.prt_v)

    @classmethod
    def from_arrays(cls, cont, prts):
        return cls(*(float(v) for v in cont), *(int(k) for k in prts))

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))


def reconstruct_regime(rp):
    """Absolute ``(g_s, g_c, g_min, g_max, v_s_min, v_s_max)`` from delta form.

    ``rp`` is a :class:`WzdmRegimeParams` or an array whose last axis follows
    ``REGIME_PARAM_NAMES``.
    """
    x = rp.as_array() if isinstance(rp, WzdmRegimeParams) else np.asarray(rp, dtype=float)
    g_s = x[..., 0]
    g_c = g_s + x[..., 1]
    g_min = g_c + x[..., 2]
    g_max = g_min + x[..., 3]
    v_min = x[..., 4]
    v_max = v_min + x[..., 5]
    return g_s, g_c, g_min, g_max, v_min, v_max


def separating_threshold(dx, g_min, g_max, v_min, v_max):
    frac = (dx - g_min) / (g_max - g_min)
    return v_min + (v_max - v_min) * frac


def wzdm_region_masks(dv, dx, rp):
    """One boolean mask per regime R1..R7, each written as its own predicate."""
    dv = np.asarray(dv, dtype=float)
    dx = np.asarray(dx, dtype=float)
    _, g_c, g_min, g_max, v_min, v_max = reconstruct_regime(rp)
    vt = separating_threshold(dx, g_min, g_max, v_min, v_max)
    mid = (dx > g_min) & (dx <= g_max)
    close = (dx > g_c) & (dx <= g_min)
    return [
        dx > g_max,
        mid & (dv > vt),
        mid & (dv >= -vt) & (dv <= vt),
        mid & (dv < -vt),
        close & (dv >= -v_min),
        close & (dv < -v_min),
        dx <= g_c,
    ]


def wzdm_regime_arrays(dv, dx, rp):
    dv = np.asarray(dv, dtype=float)
    dx = np.asarray(dx, dtype=float)
    _, g_c, g_min, g_max, v_min, v_max = reconstruct_regime(rp)
    vt = separating_threshold(dx, g_min, g_max, v_min, v_max)
    mid = np.where(dv > vt, 2, np.where(dv < -vt, 4, 3))
    close = np.where(dv < -v_min, 6, 5)
    return np.where(dx <= g_c, 7, np.where(dx <= g_min, close, np.where(dx <= g_max, mid, 1))).astype(np.int64)


def wzdm_regime(point, rp: WzdmRegimeParams) -> int:
    """Regime id 1..7 for a ``(dv, dx)`` point."""
    dv, dx = point
    if dx <= 0:
        raise DomainError("wzdm_regime requires dx > 0")
    return int(wzdm_regime_arrays(dv, dx, rp))


def wzdm_forces(cur, lag, fcont, rp, c: WzdmConstants = WzdmConstants()):
    """Force terms as a dict of arrays.

    ``cur`` maps ``v_f, v_l, a_l, dv, dx`` to current values; ``lag`` maps
    ``v_l_dv, v_f_dv, dx_dx, v_f_v`` to perception-lagged values. ``fcont``
    is the continuous framework vector (``FRAMEWORK_CONT_NAMES`` order).
    """
    f = np.asarray(fcont, dtype=float)
    n, c_v, c_des, c_prox, c_gap, t_safe, c_bl, v_des = (f[..., k] for k in range(8))
    g_s, g_c, _, _, _, _ = reconstruct_regime(rp)
    v_f, a_l, dv, dx = cur["v_f"], cur["a_l"], cur["dv"], cur["dx"]

    f_lead = c_v * (lag["v_l_dv"] - lag["v_f_dv"]) / guard(np.abs(lag["dx_dx"] - g_c))
    f_des_vel = c_des * (v_des - lag["v_f_v"])
    f_des_prox = -c_prox * n / guard(np.abs(lag["dx_dx"] - g_s))
    closing = -dv
    f_gap = np.where((closing > 0) & (v_f > 0) & (dx < t_safe * v_f), -c_gap * closing / dx, 0.0)
    f_bl = np.where(a_l < 0, c_bl * a_l / np.sqrt(dx), 0.0)
    f_ttc = np.where((closing > 0) & (dx < c.ttc_extreme * closing), c.extreme_approach_accel, 0.0)
    return {
        "lead_vel": f_lead,
        "des_vel": f_des_vel,
        "des_prox": f_des_prox,
        "gap": f_gap,
        "bl": f_bl,
        "ttc": f_ttc,
    }


def wzdm_accel_arrays(cur, lag, fcont, rp, a_prev, c: WzdmConstants = WzdmConstants()):
    """Vectorised acceleration; returns ``(accel, regime)``."""
    F = wzdm_forces(cur, lag, fcont, rp, c)
    f = np.asarray(fcont, dtype=float)
    d_max = f[..., 9]
    d_emr = d_max + f[..., 10]
    regime = wzdm_regime_arrays(cur["dv"], cur["dx"], rp)

    case1 = F["lead_vel"] + F["des_vel"] + F["des_prox"] + F["ttc"] + F["bl"] + F["gap"]
    case2 = 2.0 * (F["lead_vel"] + F["des_prox"]) + F["des_vel"] / 1.5 + F["ttc"] + F["bl"] + F["gap"]
    case3 = np.where(
        cur["v_l"] >= c.leader_velocity_threshold,
        d_max,
        2.0 * (F["lead_vel"] + F["des_prox"]),
    )
    case4 = d_emr * np.ones_like(case1)
    accel = np.select(
        [regime <= 2, regime <= 5, regime == 6, regime == 7],
        [case1, case2, case3, case4],
        default=a_prev,
    )
    return accel, regime


def lag_indices(n_rows, starts, lag):
    """Row index ``lag`` steps back, clamped at each instance's first row.

    ``lag`` may be a scalar or one value per row.
    """
    idx = np.arange(n_rows)
    first = np.repeat(np.asarray(starts), np.diff(np.append(starts, n_rows)))
    return np.maximum(idx - np.asarray(lag, dtype=np.int64), first)


def wzdm_accel(history, fp: WzdmFrameworkParams, rp: WzdmRegimeParams, c: WzdmConstants = WzdmConstants()):
    """Acceleration for the last observation in ``history`` (oldest first).

    ``history[-1].a_f`` is the follower's current acceleration. Lags longer
    than the history clamp to its oldest row.
    """
    if len(history) == 0:
        raise ValueError("history must contain at least one observation")
    rows = np.array([tuple(h) for h in history], dtype=float)
    n = len(rows)

    def back(col, k):
        return rows[max(n - 1 - k, 0), col]

    if rows[-1, 5] <= 0:
        raise DomainError("wzdm_accel requires dx > 0")
    cur = {"v_f": rows[-1, 0], "v_l": rows[-1, 2], "a_l": rows[-1, 3], "dv": rows[-1, 4], "dx": rows[-1, 5]}
    lag = {
        "v_l_dv": back(2, fp.prt_dv),
        "v_f_dv": back(0, fp.prt_dv),
        "dx_dx": back(5, fp.prt_dx),
        "v_f_v": back(0, fp.prt_v),
    }
    acc, _ = wzdm_accel_arrays(cur, lag, fp.continuous_array(), rp, rows[-1, 1], c)
    return float(acc)
