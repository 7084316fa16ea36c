"""Closed-loop rollout of a follower behind a prescribed leader."""

from __future__ import annotations

import numpy as np

from cfcalib.distributions import DoubleGammaParams, double_gamma_sample
from cfcalib.models.idm import IdmParams, idm_accel_arrays
from cfcalib.models.w99 import W99Params, W99Regime, w99_accel_arrays
from cfcalib.models.wzdm import WzdmConstants, WzdmFrameworkParams, WzdmRegimeParams, wzdm_accel
from cfcalib.records import CfInstance, CfObservation

MODELS = ("idm", "w99", "wzdm")


class _Controller:
    def __init__(self, model, params, initial_regime=W99Regime.FREEFLOW):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}")
        self.model = model
        self.params = params
        self.regime = W99Regime(initial_regime)
        self.history = []
        if model in ("idm", "w99"):
            self._theta = params.as_array()

    def __call__(self, obs: CfObservation) -> float:
        if self.model == "idm":
            return float(idm_accel_arrays(obs.v_f, obs.dv, obs.dx, *self._theta))
        if self.model == "w99":
            acc, reg = w99_accel_arrays(
                obs.v_f, obs.a_f, obs.v_l, obs.a_l, obs.dv, obs.dx, self._theta, int(self.regime)
            )
            self.regime = W99Regime(int(reg))
            return float(acc)
        fp, rp = self.params
        self.history.append(obs)
        return wzdm_accel(self.history[-5:], fp, rp, WzdmConstants())


def simulate_trajectory(
    model,
    params,
    leader_v,
    init=(30.0, 20.0),
    dt=0.1,
    noise: DoubleGammaParams | None = None,
    rng: np.random.Generator | None = None,
    instance_id="sim",
    driver_id="sim",
    framework_id=1,
    initial_regime=W99Regime.FREEFLOW,
) -> CfInstance:
    """Roll a follower forward behind a leader speed profile.

    Parameters
    ----------
    model : {"idm", "w99", "wzdm"}
    params : IdmParams, W99Params or ``(WzdmFrameworkParams, WzdmRegimeParams)``
    leader_v : array_like
        Leader speed at each step (m/s); at least two samples.
    init : (gap, speed)
        Initial bumper-to-bumper gap and follower speed.
    noise : DoubleGammaParams, optional
        Additive acceleration noise; the noisy value is both recorded and
        applied.

    The output has one row per leader sample unless the follower runs into
    the leader, in which case the rows stop before the collision and
    ``collided`` is set.
    """
    leader_v = np.asarray(leader_v, dtype=float)
    if len(leader_v) < 2:
        raise ValueError("leader profile needs at least two samples")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if model == "wzdm" and not (
        isinstance(params, tuple) and isinstance(params[0], WzdmFrameworkParams) and isinstance(params[1], WzdmRegimeParams)
    ):
        raise TypeError("wzdm params must be (WzdmFrameworkParams, WzdmRegimeParams)")
    n = len(leader_v)
    leader_a = np.empty(n)
    leader_a[:-1] = np.diff(leader_v) / dt
    leader_a[-1] = leader_a[-2]
    if noise is not None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = double_gamma_sample(noise, rng, n) - noise.mu
    else:
        eps = np.zeros(n)

    ctl = _Controller(model, params, initial_regime)
    gap, v_f = float(init[0]), float(init[1])
    a_prev = 0.0
    rows = []
    collided = False
    for i in range(n):
        if gap <= 0:
            collided = True
            break
        obs = CfObservation(v_f, a_prev, leader_v[i], leader_a[i], leader_v[i] - v_f, gap)
        a = ctl(obs) + eps[i]
        rows.append((v_f, a, leader_v[i], leader_a[i], leader_v[i] - v_f, gap))
        v_new = max(v_f + a * dt, 0.0)
        v_l_next = leader_v[min(i + 1, n - 1)]
        gap += 0.5 * (leader_v[i] + v_l_next) * dt - 0.5 * (v_f + v_new) * dt
        v_f = v_new
        a_prev = a
    cols = np.array(rows, dtype=float).reshape(-1, 6)
    return CfInstance(
        instance_id=instance_id,
        driver_id=driver_id,
        framework_id=framework_id,
        v_f=cols[:, 0],
        a_f=cols[:, 1],
        v_l=cols[:, 2],
        a_l=cols[:, 3],
        dv=cols[:, 4],
        dx=cols[:, 5],
        dt=dt,
        collided=collided,
    )
