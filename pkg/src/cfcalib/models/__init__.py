from cfcalib.models.idm import IDM_PARAM_NAMES, IdmParams, idm_accel, idm_equilibrium_gap
from cfcalib.models.simulate import MODELS, simulate_trajectory
from cfcalib.models.w99 import W99_PARAM_NAMES, W99Params, W99Regime, w99_accel, w99_regime
from cfcalib.models.wzdm import (
    WzdmConstants,
    WzdmFrameworkParams,
    WzdmRegimeParams,
    wzdm_accel,
    wzdm_regime,
)

__all__ = [
    "IDM_PARAM_NAMES",
    "IdmParams",
    "idm_accel",
    "idm_equilibrium_gap",
    "MODELS",
    "simulate_trajectory",
    "W99_PARAM_NAMES",
    "W99Params",
    "W99Regime",
    "w99_accel",
    "w99_regime",
    "WzdmConstants",
    "WzdmFrameworkParams",
    "WzdmRegimeParams",
    "wzdm_accel",
    "wzdm_regime",
]
