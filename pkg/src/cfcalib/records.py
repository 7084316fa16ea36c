"""Observation and car-following instance records.

Sign convention: ``dv = v_l - v_f`` (negative while closing in on the
leader) and ``dx`` is the bumper-to-bumper gap in metres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from cfcalib.errors import DataError

COLUMNS = ("v_f", "a_f", "v_l", "a_l", "dv", "dx")
FRAMEWORK_IDS = tuple(range(1, 13))
DEFAULT_DT = 0.1


class CfObservation(NamedTuple):
    v_f: float
    a_f: float
    v_l: float
    a_l: float
    dv: float
    dx: float


@dataclass
class CfInstance:
    """One contiguous car-following episode sampled at ``1/dt`` Hz."""

    instance_id: str
    driver_id: str
    framework_id: int
    v_f: np.ndarray
    a_f: np.ndarray
    v_l: np.ndarray
    a_l: np.ndarray
    dv: np.ndarray
    dx: np.ndarray
    dt: float = DEFAULT_DT
    t0: float = 0.0
    collided: bool = False
    times: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.v_f)
        if any(len(getattr(self, c)) != n for c in COLUMNS):
            raise DataError(f"instance {self.instance_id}: columns differ in length")
        if self.framework_id not in FRAMEWORK_IDS:
            raise DataError(f"instance {self.instance_id}: framework_id {self.framework_id} not in 1..12")
        if not self.dt > 0:
            raise DataError("dt must be positive")

    def __len__(self):
        return len(self.v_f)

    @property
    def t(self) -> np.ndarray:
        if self.times is not None:
            return np.asarray(self.times, dtype=float)
        return self.t0 + self.dt * np.arange(len(self))

    def observation(self, i: int) -> CfObservation:
        return CfObservation(*(float(getattr(self, c)[i]) for c in COLUMNS))

    @property
    def rows(self) -> list:
        return [self.observation(i) for i in range(len(self))]

    def columns(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}

    def validate(self):
        if len(self) == 0:
            raise DataError(f"instance {self.instance_id} has no rows")
        if np.any(self.dx <= 0):
            raise DataError(f"instance {self.instance_id} has non-positive dx")
        for c in COLUMNS:
            if not np.all(np.isfinite(getattr(self, c))):
                raise DataError(f"instance {self.instance_id} has non-finite {c}")
