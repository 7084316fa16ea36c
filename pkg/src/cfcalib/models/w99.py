"""Wiedemann '99 psychophysical car-following model.

The regime at a step is a function of the current observation only; the
previous regime enters solely through the free-flow acceleration. That lets
the whole kernel run vectorised over rows once the regime sequence is known.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from enum import IntEnum

import numpy as np

from cfcalib.errors import DomainError
from cfcalib.models._util import guard

W99_PARAM_NAMES = ("cc0", "cc1", "cc2", "cc3", "cc4", "cc5", "cc6", "cc7", "cc8", "cc9", "v0")
V_UPPER = 22.22
DT = 0.1


class W99Regime(IntEnum):
    FOLLOWING = 0
    APPROACHING = 1
    DANGER = 2
    FREEFLOW = 3


@dataclass(frozen=True)
class W99Params:
    cc0: float = 1.5
    cc1: float = 1.3
    cc2: float = 4.0
    cc3: float = -12.0
    cc4: float = -0.25
    cc5: float = 0.35
    cc6: float = 0.0006
    cc7: float = 0.25
    cc8: float = 2.0
    cc9: float = 1.5
    v0: float = 33.3

    def __post_init__(self):
        pos = (self.cc0, self.cc1, self.cc2, self.cc5, self.cc6, self.cc7, self.cc8, self.cc9, self.v0)
        if min(pos) <= 0 or self.cc3 > 0 or self.cc4 > 0:
            raise DomainError(f"invalid W99 parameters {self}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x) -> "W99Params":
        return cls(*(float(v) for v in x))

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))


def _p(p):
    return p.as_array() if isinstance(p, W99Params) else np.asarray(p, dtype=float)


def w99_thresholds(v_f, v_l, a_l, dv, dx, p):
    """Return ``(sdv_o, sdv_c, sdxv, sdx_o, sdx_c)``."""
    prm = _p(p)
    cc0, cc1, cc2, cc3, cc4, cc5, cc6 = (prm[..., k] for k in range(7))
    dx2 = dx * dx
    sdv_o = np.where(v_f > cc5, cc5 + cc6 * dx2, cc6 * dx2)
    sdv_c = np.where(v_l > 0, cc4 - cc6 * dx2, 0.0)
    lead_ok = v_l >= 0
    sdx_c = np.where(
        lead_ok & ((dv >= 0) | (a_l < -1.0)),
        cc0 + cc1 * v_f,
        np.where(lead_ok & (dv < 0) & (a_l >= -1.0), cc0 + cc1 * (v_l - 0.5 * dv), cc0),
    )
    sdx_o = cc2 + sdx_c
    sdxv = sdx_o + cc3 * (dv - cc4)
    return sdv_o, sdv_c, sdxv, sdx_o, sdx_c


def w99_regime_arrays(v_f, v_l, a_l, dv, dx, p):
    v_f, v_l, a_l, dv, dx = (np.asarray(x, dtype=float) for x in (v_f, v_l, a_l, dv, dx))
    sdv_o, sdv_c, sdxv, sdx_o, sdx_c = w99_thresholds(v_f, v_l, a_l, dv, dx, p)
    following = (sdv_o >= dv) & (sdv_c <= dv) & (sdx_o >= dx) & (sdx_c < dx)
    approaching = (sdv_c > dv) & (sdxv > dx) & (sdx_c < dx)
    danger = (sdx_c >= dx) & (sdv_o >= dv)
    return np.select(
        [following, approaching, danger],
        [W99Regime.FOLLOWING, W99Regime.APPROACHING, W99Regime.DANGER],
        default=W99Regime.FREEFLOW,
    ).astype(np.int64)


def w99_accel_arrays(v_f, a_f, v_l, a_l, dv, dx, p, prev_regime, dt=DT):
    """Vectorised acceleration given each row's previous regime.

    ``a_f`` is the follower's current (most recent) acceleration. Returns
    ``(accel, regime)`` arrays.
    """
    v_f, a_f, v_l, a_l, dv, dx = (np.asarray(x, dtype=float) for x in (v_f, a_f, v_l, a_l, dv, dx))
    prm = _p(p)
    cc0, cc7, cc8, cc9, v0 = prm[..., 0], prm[..., 7], prm[..., 8], prm[..., 9], prm[..., 10]
    sdv_o, sdv_c, sdxv, sdx_o, sdx_c = w99_thresholds(v_f, v_l, a_l, dv, dx, prm)
    regime = w99_regime_arrays(v_f, v_l, a_l, dv, dx, prm)
    to_desired = (v0 - v_f) / dt

    a_fol = np.where(a_f > 0, np.minimum(np.maximum(a_f, cc7), to_desired), np.minimum(a_f, -cc7))

    a_app = np.maximum(0.5 * dv * dv / guard(sdx_c - dx - 0.1), -10.0)

    closing = (v_f > 0) & (dv < 0)
    a_d_star = np.where(
        v_f <= 0,
        0.0,
        np.where(
            closing & (dx > cc0),
            np.minimum(a_l + dv * dv / guard(cc0 - dx), a_f),
            np.where(closing & (dx <= cc0), np.minimum(a_l + 0.5 * (dv - sdv_o), a_f), a_f),
        ),
    )
    a_dan = np.where(
        a_d_star == 0,
        0.0,
        np.where(a_d_star > -cc7, -cc7, np.maximum(a_d_star, 0.5 * np.sqrt(np.maximum(v_f, 0.0)) - 10.0)),
    )

    a_u = cc8 + np.minimum(v_f, V_UPPER) * cc9
    prev_ff = np.asarray(prev_regime) == W99Regime.FREEFLOW
    a_ff_star = np.where(
        sdx_c >= dx,
        0.0,
        np.where(
            prev_ff,
            cc7,
            np.where(sdx_o > dx, np.minimum(dv * dv / guard(sdx_o - dx), a_u), a_u),
        ),
    )
    a_ff = np.where(a_ff_star == 0, 0.0, np.minimum(a_ff_star, to_desired))

    accel = np.choose(regime, [a_fol, a_app, a_dan, a_ff])
    return accel, regime


def w99_regime(obs, p: W99Params, prev=None) -> W99Regime:
    """Classify one observation; ``prev`` does not influence the regime."""
    r = w99_regime_arrays(obs.v_f, obs.v_l, obs.a_l, obs.dv, obs.dx, p)
    return W99Regime(int(r))


def w99_accel(obs, p: W99Params, prev: W99Regime, dt: float = DT):
    """Acceleration and new regime for one observation."""
    acc, reg = w99_accel_arrays(obs.v_f, obs.a_f, obs.v_l, obs.a_l, obs.dv, obs.dx, p, int(prev), dt)
    return float(acc), W99Regime(int(reg))


def w99_sequence(v_f, a_prev, v_l, a_l, dv, dx, p, starts, initial_prev, dt=DT):
    """Run the kernel over concatenated instances.

    ``starts`` marks the first row of each instance; ``initial_prev`` gives
    one initial previous regime per instance. ``p`` may be a single parameter
    vector or one row per data row.
    """
    v_f = np.asarray(v_f, dtype=float)
    prm = _p(p)
    regime = w99_regime_arrays(v_f, v_l, a_l, dv, dx, prm)
    prev = np.empty_like(regime)
    prev[1:] = regime[:-1]
    starts = np.asarray(starts, dtype=np.int64)
    prev[starts] = np.asarray(initial_prev, dtype=np.int64)
    return w99_accel_arrays(v_f, a_prev, v_l, a_l, dv, dx, prm, prev, dt)
