"""Car-following data: CSV ingestion, grouping into batches, synthetic generation.

CSV schema (UTF-8, LF line endings, ``.`` decimal separator)::

    instance_id,driver_id,framework_id,t,v_f,a_f,v_l,a_l,dv,dx

``t`` is in seconds at 10 Hz, ``dv = v_l - v_f`` and ``dx`` is the gap in
metres. Rows of one instance appear contiguously in time order.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cfcalib.distributions import DoubleGammaParams
from cfcalib.errors import DataError
from cfcalib.models.simulate import simulate_trajectory
from cfcalib.records import COLUMNS, DEFAULT_DT, CfInstance, CfObservation

log = logging.getLogger(__name__)

HEADER = ("instance_id", "driver_id", "framework_id", "t") + COLUMNS
GROUP_KEYS = ("framework", "driver", "framework_driver", "instance")
DV_CHECK_TOL = 0.5

__all__ = [
    "CfInstance",
    "CfObservation",
    "Dataset",
    "LoadReport",
    "BatchedData",
    "load_csv",
    "save_csv",
    "group_by",
    "synth_generate",
    "random_leader_profile",
    "write_ground_truth",
    "read_ground_truth",
]


class Dataset:
    """An immutable collection of instances with driver/framework indexes."""

    def __init__(self, instances=()):
        self.instances = tuple(instances)
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise DataError("instance ids must be unique")
        self.by_driver = OrderedDict()
        self.by_framework = OrderedDict()
        self.by_pair = OrderedDict()
        for inst in self.instances:
            self.by_driver.setdefault(inst.driver_id, []).append(inst)
            self.by_framework.setdefault(inst.framework_id, []).append(inst)
            self.by_pair.setdefault((inst.framework_id, inst.driver_id), []).append(inst)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def n_rows(self) -> int:
        return sum(len(i) for i in self.instances)


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped: int = 0
    diagnostics: list = field(default_factory=list)
    dv_flags: int = 0

    def summary(self) -> str:
        return (
            f"rows read {self.rows_read}, kept {self.rows_kept}, dropped {self.rows_dropped}, "
            f"dv/d(dx) mismatches {self.dv_flags}"
        )


def _parse_float(text, line, column):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"malformed number {text!r} in column {column}", line=line) from None


def load_csv(path) -> tuple[Dataset, LoadReport]:
    """Parse a dataset file, dropping invalid rows.

    Rows with ``dx <= 0`` or non-finite values are dropped and listed in the
    report. Missing columns and unparsable numbers raise :class:`DataError`.
    """
    report = LoadReport()
    buckets = OrderedDict()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file, header missing", line=1) from None
        missing = [c for c in HEADER if c not in header]
        if missing:
            raise DataError(f"missing columns {missing}", line=1)
        col = {name: header.index(name) for name in HEADER}
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) < len(header):
                raise DataError(f"expected {len(header)} fields, got {len(rec)}", line=line_no)
            report.rows_read += 1
            iid = rec[col["instance_id"]]
            driver = rec[col["driver_id"]]
            try:
                fw = int(rec[col["framework_id"]])
            except ValueError:
                raise DataError(f"malformed framework_id {rec[col['framework_id']]!r}", line=line_no) from None
            vals = [_parse_float(rec[col[c]], line_no, c) for c in ("t",) + COLUMNS]
            if not all(math.isfinite(v) for v in vals):
                report.rows_dropped += 1
                report.diagnostics.append((line_no, "non-finite value"))
                continue
            if vals[-1] <= 0:
                report.rows_dropped += 1
                report.diagnostics.append((line_no, f"dx={vals[-1]} <= 0"))
                continue
            b = buckets.setdefault(iid, {"driver": driver, "fw": fw, "rows": []})
            if b["driver"] != driver or b["fw"] != fw:
                raise DataError(f"instance {iid} changes driver/framework", line=line_no)
            b["rows"].append(vals)
            report.rows_kept += 1

    instances = []
    for iid, b in buckets.items():
        arr = np.array(b["rows"], dtype=float)
        t = arr[:, 0]
        dt = float(np.median(np.diff(t))) if len(t) > 1 else DEFAULT_DT
        if not dt > 0:
            dt = DEFAULT_DT
        inst = CfInstance(
            instance_id=iid,
            driver_id=b["driver"],
            framework_id=b["fw"],
            **{c: arr[:, k + 1] for k, c in enumerate(COLUMNS)},
            dt=dt,
            t0=float(t[0]),
            times=t,
        )
        report.dv_flags += check_dv_convention(inst)
        instances.append(inst)
    if report.dv_flags:
        log.warning("%d rows where d(dx)/dt disagrees with dv by more than %.1f m/s", report.dv_flags, DV_CHECK_TOL)
    return Dataset(instances), report


def check_dv_convention(inst: CfInstance, tol: float = DV_CHECK_TOL) -> int:
    """Count rows where the finite-difference gap rate disagrees with ``dv``."""
    if len(inst) < 2:
        return 0
    rate = np.diff(inst.dx) / np.diff(inst.t)
    mid = 0.5 * (inst.dv[1:] + inst.dv[:-1])
    return int(np.sum(np.abs(rate - mid) > tol))


def _fmt(x) -> str:
    return format(float(x), ".9g")


def save_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for inst in dataset:
            t = inst.t
            cols = [getattr(inst, c) for c in COLUMNS]
            for i in range(len(inst)):
                w.writerow([inst.instance_id, inst.driver_id, inst.framework_id, _fmt(t[i])] + [_fmt(c[i]) for c in cols])


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def group_label(inst: CfInstance, key: str) -> str:
    if key == "framework":
        return str(inst.framework_id)
    if key == "driver":
        return str(inst.driver_id)
    if key == "framework_driver":
        return f"{inst.framework_id}|{inst.driver_id}"
    if key == "instance":
        return str(inst.instance_id)
    raise ValueError(f"unknown grouping key {key!r}; expected one of {GROUP_KEYS}")


@dataclass(frozen=True)
class BatchedData:
    """Rows of a dataset concatenated group by group.

    ``a_f`` is the response; ``a_prev`` is the follower acceleration of the
    preceding row of the same instance (0 on an instance's first row).
    ``starts`` holds the first row of each instance and ``instance_group``
    the group index of each instance.
    """

    key: str
    group_ids: tuple
    v_f: np.ndarray
    a_f: np.ndarray
    a_prev: np.ndarray
    v_l: np.ndarray
    a_l: np.ndarray
    dv: np.ndarray
    dx: np.ndarray
    group_index: np.ndarray
    instance_index: np.ndarray
    starts: np.ndarray
    instance_ids: tuple
    instance_group: np.ndarray
    instance_framework: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.a_f)

    @property
    def n_groups(self) -> int:
        return len(self.group_ids)

    @property
    def n_instances(self) -> int:
        return len(self.starts)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.n_groups)

    def group_rows(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_index == g)

    def take(self, rows) -> "BatchedData":
        """Sub-batch made of whole instances covering ``rows``; used for permutation checks."""
        rows = np.asarray(rows)
        cols = {c: getattr(self, c)[rows] for c in ("v_f", "a_f", "a_prev", "v_l", "a_l", "dv", "dx", "group_index", "instance_index")}
        old_index = cols["instance_index"]
        boundary = np.r_[True, old_index[1:] != old_index[:-1]] if len(rows) else np.zeros(0, bool)
        starts = np.flatnonzero(boundary)
        cols["instance_index"] = np.cumsum(boundary) - 1
        return BatchedData(
            key=self.key,
            group_ids=self.group_ids,
            starts=starts,
            instance_ids=tuple(self.instance_ids[i] for i in old_index[starts]),
            instance_group=cols["group_index"][starts],
            instance_framework=self.instance_framework[old_index[starts]],
            **cols,
        )

    @classmethod
    def empty(cls, key: str = "instance", group_ids=("all",)) -> "BatchedData":
        """Batch with no rows (prior-only evaluation)."""
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(
            key=key,
            group_ids=tuple(group_ids),
            v_f=z, a_f=z, a_prev=z, v_l=z, a_l=z, dv=z, dx=z,
            group_index=zi,
            instance_index=zi,
            starts=zi,
            instance_ids=(),
            instance_group=zi,
            instance_framework=zi,
        )


def group_by(dataset, key: str = "instance") -> BatchedData:
    """Partition a dataset into one batch per group, preserving instance boundaries."""
    if len(dataset) == 0:
        raise DataError("no instances")
    groups = OrderedDict()
    for inst in dataset:
        groups.setdefault(group_label(inst, key), []).append(inst)
    parts = {c: [] for c in COLUMNS}
    a_prev, group_index, instance_index, starts = [], [], [], []
    inst_ids, inst_group, inst_fw = [], [], []
    row = 0
    for g, (gid, members) in enumerate(groups.items()):
        for inst in members:
            n = len(inst)
            if n == 0:
                continue
            for c in COLUMNS:
                parts[c].append(getattr(inst, c))
            prev = np.empty(n)
            prev[0] = 0.0
            prev[1:] = inst.a_f[:-1]
            a_prev.append(prev)
            group_index.append(np.full(n, g))
            instance_index.append(np.full(n, len(inst_ids)))
            starts.append(row)
            inst_ids.append(inst.instance_id)
            inst_group.append(g)
            inst_fw.append(inst.framework_id)
            row += n
    cat = {c: np.concatenate(parts[c]) for c in COLUMNS}
    return BatchedData(
        key=key,
        group_ids=tuple(groups.keys()),
        a_prev=np.concatenate(a_prev),
        group_index=np.concatenate(group_index).astype(np.int64),
        instance_index=np.concatenate(instance_index).astype(np.int64),
        starts=np.array(starts, dtype=np.int64),
        instance_ids=tuple(inst_ids),
        instance_group=np.array(inst_group, dtype=np.int64),
        instance_framework=np.array(inst_fw, dtype=np.int64),
        **cat,
    )


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


def random_leader_profile(rng, n_steps, dt=DEFAULT_DT, v_start=None, v_max=33.0, accel_sd=0.8):
    """Leader speed trace built from piecewise-constant accelerations of 1-5 s."""
    v = float(rng.uniform(3.0, 28.0) if v_start is None else v_start)
    out = np.empty(n_steps)
    i = 0
    while i < n_steps:
        seg = int(rng.integers(10, 51))
        acc = float(np.clip(rng.normal(0.0, accel_sd), -3.0, 2.0))
        for _ in range(min(seg, n_steps - i)):
            out[i] = v
            v = min(max(v + acc * dt, 0.0), v_max)
            i += 1
    return out


@dataclass
class InstanceSpec:
    instance_id: str
    driver_id: str
    framework_id: int
    param_key: str


def instance_specs(n_groups, per_group, key="driver", framework_id=4):
    """Build specs for ``n_groups`` groups of ``per_group`` instances each.

    ``per_group`` may be a single count or one count per group.
    """
    counts = [per_group] * n_groups if np.isscalar(per_group) else list(per_group)
    specs = []
    for g, n in enumerate(counts):
        for j in range(n):
            if key == "framework":
                driver, fw = f"d{j}", (g % 12) + 1
            else:
                driver, fw = f"d{g}", framework_id
            specs.append(InstanceSpec(f"g{g}_i{j}", driver, fw, f"g{g}"))
    return specs


def synth_generate(
    model,
    true_params,
    specs,
    noise: DoubleGammaParams | None,
    rng: np.random.Generator,
    n_steps=300,
    dt=DEFAULT_DT,
    leader_profiles=None,
    max_retries=5,
):
    """Simulate a dataset with known parameters.

    Parameters
    ----------
    true_params : mapping
        ``param_key -> params`` as accepted by ``simulate_trajectory``.
    specs : sequence of InstanceSpec
    noise : DoubleGammaParams or None
        Additive acceleration noise; ``None`` gives noiseless data.
    leader_profiles : sequence of arrays, optional
        One leader speed trace per spec; random profiles otherwise.

    Returns
    -------
    (Dataset, dict)
        The dataset and a ground-truth record.
    """
    instances = []
    for k, spec in enumerate(specs):
        params = true_params[spec.param_key]
        lead = leader_profiles[k] if leader_profiles is not None else random_leader_profile(rng, n_steps, dt)
        v0 = float(np.clip(lead[0] + rng.normal(0.0, 2.0), 0.0, None))
        gap = float(rng.uniform(8.0, 20.0) + 1.5 * v0)
        for attempt in range(max_retries + 1):
            inst = simulate_trajectory(
                model,
                params,
                lead,
                init=(gap, v0),
                dt=dt,
                noise=noise,
                rng=rng,
                instance_id=spec.instance_id,
                driver_id=spec.driver_id,
                framework_id=spec.framework_id,
            )
            if not inst.collided:
                break
            gap *= 1.5
        else:
            raise DataError(f"instance {spec.instance_id} collided after {max_retries} retries")
        instances.append(inst)
    truth = {"model": model, "noise": noise, "params": dict(true_params)}
    return Dataset(instances), truth


def _flatten_params(params):
    if isinstance(params, tuple):
        out = {}
        for part in params:
            out.update(_flatten_params(part))
        return out
    return {k: v for k, v in vars(params).items()}


def write_ground_truth(path, truth):
    """Write a ground-truth record as sorted ``key=value`` lines."""
    lines = [f"model={truth['model']}"]
    noise = truth.get("noise")
    if noise is not None:
        lines += [f"noise.mu={_fmt(noise.mu)}", f"noise.beta={_fmt(noise.beta)}", f"noise.gamma={_fmt(noise.gamma)}"]
    for key in sorted(truth["params"]):
        for name, val in _flatten_params(truth["params"][key]).items():
            lines.append(f"{key}.{name}={_fmt(val)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ground_truth(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out
