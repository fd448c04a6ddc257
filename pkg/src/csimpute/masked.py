"""Sparse observation matrices, treatment step matrices, and the entrywise
projections onto observed / unobserved cells.

Observed values live in an N x T array with NaN sentinels at unobserved
cells; the boolean mask is the ground truth for what is observed.  Numeric
code must never read a masked-out cell except through `project_complement`.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import TimeGrid
from ._util import fmt_float

__all__ = [
    "PatientRecord",
    "ObservationSet",
    "MaskedMatrix",
    "TreatmentMatrix",
    "CollisionError",
    "grid_observations",
    "project",
    "project_complement",
    "read_observations_csv",
    "write_observations_csv",
    "read_wide_csv",
    "write_wide_csv",
]

NO_TREATMENT = np.inf


class CollisionError(ValueError):
    """Two observations of one patient map to the same grid cell."""


@dataclass
class PatientRecord:
    """Irregular time/value pairs for one patient, plus optional treatment time."""

    id: str
    times: np.ndarray
    values: np.ndarray
    treatment_time: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError(f"patient {self.id}: times and values must be equal-length 1-D")
        if self.times.size < 1:
            raise ValueError(f"patient {self.id}: needs at least one observation")


@dataclass
class ObservationSet:
    """Per-patient irregular observations, before gridding."""

    patients: list

    @property
    def ids(self) -> list:
        return [p.id for p in self.patients]


@dataclass
class MaskedMatrix:
    """N x T values with a boolean observation mask; NaN marks unobserved cells."""

    values: np.ndarray
    mask: np.ndarray
    n_collisions: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("observed entries must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Dense copy with masked-out cells replaced by `fill`."""
        return np.where(self.mask, self.values, fill)

    def restrict(self, keep_mask: np.ndarray) -> "MaskedMatrix":
        """New matrix observed only on `mask & keep_mask` (e.g. a training split)."""
        keep = self.mask & np.asarray(keep_mask, dtype=bool)
        return MaskedMatrix(np.where(keep, self.values, np.nan), keep)


@dataclass
class TreatmentMatrix:
    """Zero-one step matrix: row i turns on at column onset[i] (inf = never)."""

    onset: np.ndarray
    dense: np.ndarray = field(default=None)
    n_cols: int = None

    def __post_init__(self):
        self.onset = np.asarray(self.onset, dtype=float)
        if self.dense is None:
            if self.n_cols is None:
                raise ValueError("need dense or n_cols")
            cols = np.arange(self.n_cols)
            self.dense = (cols[None, :] >= self.onset[:, None]).astype(float)
        else:
            self.dense = np.asarray(self.dense, dtype=float)
            self.n_cols = self.dense.shape[1]

    @property
    def shape(self):
        return self.dense.shape


def project(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep entries on the mask, zero elsewhere."""
    a = np.asarray(a, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != mask.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {mask.shape}")
    return np.where(mask, a, 0.0)


def project_complement(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero entries on the mask, keep elsewhere; project + project_complement == a."""
    a = np.asarray(a, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != mask.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {mask.shape}")
    return np.where(mask, 0.0, a)


def _nearest_index(t: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Index of the nearest grid point, ties broken upward (round half up)."""
    pos = (np.asarray(t, dtype=float) - grid.t_min) / grid.spacing
    idx = np.floor(pos + 0.5).astype(int)
    return np.clip(idx, 0, grid.n_points - 1)


def grid_observations(obs: ObservationSet, grid: TimeGrid, collision_policy: str = "error"):
    """Round irregular observations onto the grid.

    Returns (MaskedMatrix, TreatmentMatrix).  Each observation lands in the
    column of its nearest grid point.  Two observations of one patient in
    the same cell either raise CollisionError (policy "error") or are
    averaged with a warning counter (policy "average").  Treatment onsets
    are the nearest grid index to the treatment time; patients without one
    get an all-zero row.
    """
    if collision_policy not in ("error", "average"):
        raise ValueError(f"unknown collision policy {collision_policy!r}")
    n, t = len(obs.patients), grid.n_points
    total = np.zeros((n, t))
    count = np.zeros((n, t), dtype=int)
    onset = np.full(n, NO_TREATMENT)
    n_collisions = 0
    eps = 1e-9 * max(1.0, abs(grid.t_min), abs(grid.t_max))
    for i, pat in enumerate(obs.patients):
        if np.any(pat.times < grid.t_min - eps) or np.any(pat.times > grid.t_max + eps):
            raise ValueError(
                f"patient {pat.id}: observation time outside grid range "
                f"[{grid.t_min}, {grid.t_max}]"
            )
        cols = _nearest_index(pat.times, grid)
        for j, v in zip(cols, pat.values):
            if count[i, j] and collision_policy == "error":
                raise CollisionError(
                    f"patient {pat.id}: multiple observations round to grid index {j}"
                )
            n_collisions += int(count[i, j] > 0)
            total[i, j] += v
            count[i, j] += 1
        if pat.treatment_time is not None and np.isfinite(pat.treatment_time):
            onset[i] = _nearest_index(np.array([pat.treatment_time]), grid)[0]
    mask = count > 0
    values = np.where(mask, total / np.maximum(count, 1), np.nan)
    if n_collisions:
        warnings.warn(f"{n_collisions} colliding observation(s) were averaged", stacklevel=2)
    return (
        MaskedMatrix(values, mask, n_collisions=n_collisions),
        TreatmentMatrix(onset=onset, n_cols=t),
    )


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def read_observations_csv(obs_path, treatments_path=None) -> ObservationSet:
    """Read long-format observations (patient_id,time,value) and optional
    treatments (patient_id,treatment_time).  Patients keep first-appearance
    order; a patient absent from the treatments file has no treatment.
    """
    order: list = []
    times: dict = {}
    values: dict = {}
    with open(obs_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != [
            "patient_id",
            "time",
            "value",
        ]:
            raise ValueError(f"{obs_path}: expected header patient_id,time,value")
        for row in reader:
            pid = row["patient_id"]
            if pid not in times:
                order.append(pid)
                times[pid] = []
                values[pid] = []
            times[pid].append(float(row["time"]))
            values[pid].append(float(row["value"]))
    treatment: dict = {}
    if treatments_path is not None:
        with open(treatments_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != [
                "patient_id",
                "treatment_time",
            ]:
                raise ValueError(f"{treatments_path}: expected header patient_id,treatment_time")
            for row in reader:
                pid = row["patient_id"]
                raw = (row["treatment_time"] or "").strip()
                if pid not in times:
                    warnings.warn(f"treatments file: unknown patient {pid!r} ignored", stacklevel=2)
                    continue
                if raw:
                    treatment[pid] = float(raw)
    patients = [
        PatientRecord(
            id=pid,
            times=np.array(times[pid]),
            values=np.array(values[pid]),
            treatment_time=treatment.get(pid),
        )
        for pid in order
    ]
    return ObservationSet(patients=patients)


def write_observations_csv(obs: ObservationSet, obs_path, treatments_path=None) -> None:
    """Write long-format observations and (optionally) the treatments file."""
    with open(obs_path, "w", newline="") as fh:
        fh.write("patient_id,time,value\n")
        for pat in obs.patients:
            for t, v in zip(pat.times, pat.values):
                fh.write(f"{pat.id},{fmt_float(t)},{fmt_float(v)}\n")
    if treatments_path is not None:
        with open(treatments_path, "w", newline="") as fh:
            fh.write("patient_id,treatment_time\n")
            for pat in obs.patients:
                if pat.treatment_time is not None and np.isfinite(pat.treatment_time):
                    fh.write(f"{pat.id},{fmt_float(pat.treatment_time)}\n")


def write_wide_csv(values: np.ndarray, mask: np.ndarray, grid: TimeGrid, ids, path) -> None:
    """Write an N x T matrix as wide CSV: patient_id column then one column
    per grid time; cells off the mask are left empty.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    with open(path, "w", newline="") as fh:
        fh.write("patient_id," + ",".join(fmt_float(t) for t in grid.points) + "\n")
        for i, pid in enumerate(ids):
            cells = [fmt_float(values[i, j]) if mask[i, j] else "" for j in range(values.shape[1])]
            fh.write(f"{pid}," + ",".join(cells) + "\n")


def read_wide_csv(path):
    """Read a wide CSV written by `write_wide_csv`.

    Returns (ids, values, mask) where empty cells are NaN with mask False.
    """
    ids = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "patient_id":
            raise ValueError(f"{path}: expected wide CSV with leading patient_id column")
        width = len(header) - 1
        for rec in reader:
            if not rec:
                continue
            if len(rec) != width + 1:
                raise ValueError(f"{path}: row for {rec[0]!r} has {len(rec) - 1} cells, expected {width}")
            ids.append(rec[0])
            rows.append([float(c) if c.strip() != "" else np.nan for c in rec[1:]])
    values = np.array(rows, dtype=float)
    mask = np.isfinite(values)
    return ids, values, mask
