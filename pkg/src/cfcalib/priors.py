"""Prior tables and their config-file overrides.

Prior means for constrained parameters are given on the unconstrained side of
the softplus transform, the way a transformed Normal is parameterised.

Config files (YAML or JSON) may override any entry::

    sharpness: 1.0
    prior_sigma: 10.0
    hyper_sigma: 1.0          # HalfNormal scale of the level-2 std
    params:
      v0: {mu: 30.0, sigma: 5.0}
    likelihood:
      beta: {mu: 1.0, sigma: 1.0}
    frameworks:               # WZDM only: per-framework prior means
      FW4: {c_v: 12.0}
    hyperprior:               # WZDM only: level-2 / pooled prior means
      c_v: 11.0
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cfcalib.models.idm import IDM_PARAM_NAMES
from cfcalib.models.w99 import W99_PARAM_NAMES
from cfcalib.models.wzdm import FRAMEWORK_CONT_NAMES, PRT_NAMES, REGIME_PARAM_NAMES

IDM_PRIOR_MEANS = dict(zip(IDM_PARAM_NAMES, (33.33, 1.6, 0.73, 1.67, 4.0, 2.0, 0.0)))
# alternate IDM table with the lower desired speed
IDM_PRIOR_MEANS_ALT = dict(zip(IDM_PARAM_NAMES, (6.5, 1.6, 0.73, 1.67, 4.0, 2.0, 0.0)))
IDM_SUPPORTS = dict.fromkeys(IDM_PARAM_NAMES, "nonneg")

W99_PRIOR_MEANS = dict(zip(W99_PARAM_NAMES, (1.5, 1.3, 4.0, -12.0, -0.25, 0.35, 0.0006, 0.25, 2.0, 1.5, 33.3)))
W99_SUPPORTS = {n: ("nonpos" if n in ("cc3", "cc4") else "nonneg") for n in W99_PARAM_NAMES}
W99_INITIAL_REGIME_PROBS = (0.25, 0.25, 0.25, 0.25)

WZDM_PARAM_NAMES = REGIME_PARAM_NAMES + FRAMEWORK_CONT_NAMES
WZDM_SUPPORTS = {n: ("nonpos" if n in ("d_max", "d_emr_delta_d_max") else "nonneg") for n in WZDM_PARAM_NAMES}

# regime rows: g_max_delta_g_min, g_min_delta_g_c, g_c_delta_g_s, g_s, v_s_g_max_delta_v_s_g_min, v_s_g_min
_REGIME_A = (28.0, 4.0, 5.0, 3.0, 0.0, 2.0)
_REGIME_B = (55.0, 5.0, 7.0, 3.0, 0.0, 2.0)
_REGIME_C = (30.0, 4.0, 5.0, 3.0, 0.0, 2.0)
_REGIME_D = (25.0, 5.0, 4.0, 6.0, 3.0, 2.0)
_REGIME_ROWS = {1: _REGIME_A, 2: _REGIME_B, 3: _REGIME_C, 4: _REGIME_D}
_REGIME_ROWS.update({fw: (_REGIME_C if fw % 2 else _REGIME_D) for fw in range(5, 13)})
_REGIME_HYPER = (29.83, 4.5, 4.75, 4.25, 1.25, 2.0)

# framework rows: c_v, c_des, c_prox, c_gap, t_safe, c_bl, v_des, a_max, d_max, d_emr_delta_d_max
_FW_ODD = (8.0, 0.25, 8.0, 5.0, 0.85, 5.0, 20.0, 4.0, -2.0, -1.0)
_FW_TWO = (10.0, 0.25, 8.0, 5.0, 2.0, 10.0, 30.0, 4.0, -2.0, -1.0)
_FW_EVEN = (15.0, 0.5, 8.0, 5.0, 2.0, 10.0, 30.0, 4.0, -2.0, -1.0)
_FW_HYPER = (11.08, 0.3542, 8.0, 5.0, 1.425, 7.5, 25.0, 4.0, -2.0, -1.0)
# N has no tabulated prior
DEFAULT_N = 1.0

# PRT one-hot rows (categories 1..4 timesteps): prt_dv, prt_dx, prt_v
_PRT_ROWS = {
    1: (3, 1, 2),
    2: (4, 1, 2),
    3: (3, 1, 1),
    4: (4, 1, 2),
}
_PRT_ROWS.update({fw: ((3, 1, 1) if fw % 2 else (4, 1, 2)) for fw in range(5, 13)})
PRT_DIRICHLET = {
    "prt_dv": (0.917, 0.917, 4.0, 4.0),
    "prt_dx": (11.0, 0.917, 0.917, 0.917),
    "prt_v": (5.17, 6.83, 0.917, 0.917),
}


def _regime_dict(row):
    g_max_d, g_min_d, g_c_d, g_s, v_d, v_min = row
    return {
        "g_s": g_s,
        "g_c_delta_g_s": g_c_d,
        "g_min_delta_g_c": g_min_d,
        "g_max_delta_g_min": g_max_d,
        "v_s_g_min": v_min,
        "v_s_g_max_delta_v_s_g_min": v_d,
    }


def _framework_dict(row):
    out = {"n": DEFAULT_N}
    out.update(dict(zip(FRAMEWORK_CONT_NAMES[1:], row)))
    return out


def wzdm_framework_means(fw: int) -> dict:
    """Tabulated prior means for one framework (continuous + PRT values)."""
    fw_row = _FW_TWO if fw == 2 else (_FW_ODD if fw % 2 else _FW_EVEN)
    out = _regime_dict(_REGIME_ROWS[fw])
    out.update(_framework_dict(fw_row))
    out.update(dict(zip(PRT_NAMES, _PRT_ROWS[fw])))
    return out


def wzdm_hyper_means() -> dict:
    out = _regime_dict(_REGIME_HYPER)
    out.update(_framework_dict(_FW_HYPER))
    return out


def wzdm_params(fw: int):
    """``(WzdmFrameworkParams, WzdmRegimeParams)`` at the tabulated means."""
    from cfcalib.models.wzdm import WzdmFrameworkParams, WzdmRegimeParams

    m = wzdm_framework_means(fw)
    rp = WzdmRegimeParams(*(m[n] for n in REGIME_PARAM_NAMES))
    fp = WzdmFrameworkParams(*(m[n] for n in FRAMEWORK_CONT_NAMES), *(int(m[n]) for n in PRT_NAMES))
    return fp, rp


@dataclass
class PriorSpec:
    """Prior means/scales for one car-following model.

    ``mu`` holds the pooled (or level-2) prior means by parameter name;
    ``group_mu`` optionally holds per-framework means (WZDM).
    """

    model: str
    names: tuple
    supports: dict
    mu: dict
    sigma: dict
    sharpness: float = 1.0
    hyper_sigma: float = 1.0
    likelihood: dict = field(
        default_factory=lambda: {"beta": {"mu": 1.0, "sigma": 1.0}, "gamma": {"mu": 1.0, "sigma": 1.0}}
    )
    framework_mu: dict = field(default_factory=dict)
    categorical: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [n for n in self.names if n not in self.mu or n not in self.sigma]
        if missing:
            raise ValueError(f"prior entries missing for {missing}")
        if any(self.sigma[n] <= 0 for n in self.names):
            raise ValueError("prior sigma must be positive")

    def mu_vector(self, framework: int | None = None) -> np.ndarray:
        table = self.framework_mu.get(framework, self.mu) if framework is not None else self.mu
        return np.array([table[n] for n in self.names], dtype=float)

    def sigma_vector(self) -> np.ndarray:
        return np.array([self.sigma[n] for n in self.names], dtype=float)

    def with_sigma(self, sigma: float) -> "PriorSpec":
        out = copy.deepcopy(self)
        out.sigma = dict.fromkeys(self.names, float(sigma))
        return out


def default_priors(model: str, prior_sigma: float = 10.0, alt_idm: bool = False) -> PriorSpec:
    if model == "idm":
        mu = IDM_PRIOR_MEANS_ALT if alt_idm else IDM_PRIOR_MEANS
        return PriorSpec("idm", IDM_PARAM_NAMES, dict(IDM_SUPPORTS), dict(mu), dict.fromkeys(IDM_PARAM_NAMES, prior_sigma))
    if model == "w99":
        return PriorSpec(
            "w99",
            W99_PARAM_NAMES,
            dict(W99_SUPPORTS),
            dict(W99_PRIOR_MEANS),
            dict.fromkeys(W99_PARAM_NAMES, prior_sigma),
            categorical={"initial_regime": W99_INITIAL_REGIME_PROBS},
        )
    if model == "wzdm":
        fw_mu = {fw: wzdm_framework_means(fw) for fw in range(1, 13)}
        return PriorSpec(
            "wzdm",
            WZDM_PARAM_NAMES,
            dict(WZDM_SUPPORTS),
            wzdm_hyper_means(),
            dict.fromkeys(WZDM_PARAM_NAMES, prior_sigma),
            framework_mu=fw_mu,
            categorical={k: v for k, v in PRT_DIRICHLET.items()},
        )
    raise ValueError(f"unknown model {model!r}")


def read_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def load_priors(path, model: str, prior_sigma: float | None = None) -> PriorSpec:
    """Default priors for ``model`` with overrides from a config file."""
    cfg = read_config(path) if path else {}
    spec = default_priors(model, prior_sigma=float(cfg.get("prior_sigma", 10.0)), alt_idm=bool(cfg.get("alt_idm", False)))
    if prior_sigma is not None:
        spec = spec.with_sigma(prior_sigma)
    spec.sharpness = float(cfg.get("sharpness", spec.sharpness))
    spec.hyper_sigma = float(cfg.get("hyper_sigma", spec.hyper_sigma))
    for name, entry in (cfg.get("params") or {}).items():
        if name not in spec.names:
            raise ValueError(f"unknown parameter {name!r} for {model}")
        if "mu" in entry:
            spec.mu[name] = float(entry["mu"])
        if "sigma" in entry:
            spec.sigma[name] = float(entry["sigma"])
        if "support" in entry:
            spec.supports[name] = entry["support"]
    for k, entry in (cfg.get("likelihood") or {}).items():
        spec.likelihood[k].update({kk: float(vv) for kk, vv in entry.items()})
    for fw_key, entry in (cfg.get("frameworks") or {}).items():
        fw = int(str(fw_key).upper().replace("FW", ""))
        spec.framework_mu.setdefault(fw, dict(spec.mu)).update({k: float(v) for k, v in entry.items()})
    for name, val in (cfg.get("hyperprior") or {}).items():
        spec.mu[name] = float(val)
    spec.__post_init__()
    return spec
