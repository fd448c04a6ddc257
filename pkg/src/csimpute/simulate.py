"""Synthetic data generation.

`generate_dataset` draws grid-native datasets from the additive model

    Y = W B' + mu * S + noise,    observed cells ~ Bernoulli(rho),

where rows of W come from a two-component mixture of low-rank Gaussians,
and treatment onsets are uniform over an interval extending past the grid
(so a controlled fraction of patients is treated inside the window).

`gdi_like_observations` builds an irregular-visit ObservationSet shaped
like a pediatric gait-index registry (values near 70, a handful of visits
per patient at arbitrary ages, one optional surgery date) for exercising
the ingestion path end to end.

All draws go through numpy's PCG64 generator seeded from the config seed;
`derived_seed` gives order-independent child seeds for replications.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import Basis, make_grid, make_spline_basis
from .masked import MaskedMatrix, ObservationSet, PatientRecord, TreatmentMatrix

__all__ = [
    "SimConfig",
    "SimOutput",
    "default_spectrum",
    "derived_seed",
    "generate_w",
    "generate_treatments",
    "generate_dataset",
    "gdi_like_observations",
]


def default_spectrum(k: int, head=(1.0, 0.4, 0.005)) -> np.ndarray:
    """Component variances [head..., 0.1*e^-3, 0.1*e^-4, ...] truncated to k."""
    tail = [0.1 * math.exp(-(m + 1)) for m in range(2, k - 1)]
    return np.array(list(head) + tail)[:k]


def derived_seed(seed: int, *key: int) -> int:
    """Order-independent 64-bit child seed for (seed, key) via SeedSequence."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SimConfig:
    """Generator parameters; the defaults put one simulation cell at
    N=500 patients, T=51 grid points, K=7 basis functions, 80% of onsets
    inside the grid, and noise sd 0.5.
    """

    mu: float
    rho: float
    seed: int
    n_patients: int = 500
    n_grid: int = 51
    n_basis: int = 7
    kappa: float = 0.33
    r1: float = 1.0
    r2: float = 2.0
    s1: np.ndarray = None
    s2: np.ndarray = None
    p_treat: float = 0.8
    noise_sd: float = 0.5
    t_min: float = 0.0
    t_max: float = None

    def __post_init__(self):
        if self.s1 is None:
            self.s1 = default_spectrum(self.n_basis, head=(1.0, 0.4, 0.005))
        if self.s2 is None:
            self.s2 = default_spectrum(self.n_basis, head=(1.3, 0.2, 0.005))
        self.s1 = np.asarray(self.s1, dtype=float)
        self.s2 = np.asarray(self.s2, dtype=float)
        if self.t_max is None:
            self.t_max = self.t_min + self.n_grid - 1.0
        self.validate()

    def validate(self):
        if min(self.n_patients, self.n_grid, self.n_basis) < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must be in (0, 1], got {self.kappa}")
        if not 0.0 < self.p_treat < 1.0:
            raise ValueError(f"p_treat must be in (0, 1), got {self.p_treat}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.s1.shape != (self.n_basis,) or self.s2.shape != (self.n_basis,):
            raise ValueError("s1/s2 must have one entry per basis function")
        if np.any(self.s1 < 0) or np.any(self.s2 < 0):
            raise ValueError("s1/s2 must be entrywise nonnegative")

    def to_dict(self) -> dict:
        return {
            "mu": self.mu, "rho": self.rho, "seed": self.seed,
            "n_patients": self.n_patients, "n_grid": self.n_grid,
            "n_basis": self.n_basis, "kappa": self.kappa,
            "r1": self.r1, "r2": self.r2,
            "s1": [float(v) for v in self.s1], "s2": [float(v) for v in self.s2],
            "p_treat": self.p_treat, "noise_sd": self.noise_sd,
            "t_min": self.t_min, "t_max": self.t_max,
        }


@dataclass
class SimOutput:
    """A drawn dataset plus everything needed to score an estimator on it."""

    y_observed: MaskedMatrix
    y_complete: np.ndarray
    w_true: np.ndarray
    i_s: TreatmentMatrix
    mu_true: float
    config: SimConfig
    basis: Basis

    def ground_truth_dict(self) -> dict:
        return {
            "mu_true": float(self.mu_true),
            "w_true": [[float(v) for v in row] for row in self.w_true],
            "onset_index": [None if not np.isfinite(o) else int(o) for o in self.i_s.onset],
            "config": self.config.to_dict(),
        }


def generate_w(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw coefficient rows from the two-component low-rank mixture.

    Component c has mean r_c * gamma_c (a random unit direction) and
    covariance V_c' diag(s_c) V_c with V_c a Haar-orthogonal factor from
    the SVD of a standard normal matrix.
    """
    k, n = config.n_basis, config.n_patients
    v1 = np.linalg.svd(rng.standard_normal((k, k)))[2]
    v2 = np.linalg.svd(rng.standard_normal((k, k)))[2]
    g1 = rng.standard_normal(k)
    g1 /= np.linalg.norm(g1)
    g2 = rng.standard_normal(k)
    g2 /= np.linalg.norm(g2)
    t = (rng.random(n) < config.kappa).astype(float)
    u1 = rng.standard_normal((n, k))
    u2 = rng.standard_normal((n, k))
    comp1 = config.r1 * g1[None, :] + (u1 * np.sqrt(config.s1)) @ v1
    comp2 = config.r2 * g2[None, :] + (u2 * np.sqrt(config.s2)) @ v2
    return t[:, None] * comp1 + (1.0 - t)[:, None] * comp2


def generate_treatments(config: SimConfig, rng: np.random.Generator) -> TreatmentMatrix:
    """Uniform onsets over {1, ..., floor(T / p_treat)} (1-based); onsets
    past the grid become never-treated all-zero rows.
    """
    t = config.n_grid
    hi = int(math.floor(t / config.p_treat))
    draws = rng.integers(1, hi + 1, size=config.n_patients)
    onset = np.where(draws <= t, draws - 1.0, np.inf)
    return TreatmentMatrix(onset=onset, n_cols=t)


def generate_dataset(config: SimConfig) -> SimOutput:
    """Draw one dataset; bit-reproducible for a fixed config.

    Draw order (single PCG64 stream): W mixture, onsets, noise, mask.
    """
    rng = np.random.default_rng(config.seed)
    grid = make_grid(config.t_min, config.t_max, config.n_grid)
    basis = make_spline_basis(grid, config.n_basis)
    w = generate_w(config, rng)
    i_s = generate_treatments(config, rng)
    noise = rng.normal(0.0, config.noise_sd, size=(config.n_patients, config.n_grid))
    y_complete = w @ basis.values.T + config.mu * i_s.dense + noise
    mask = rng.random((config.n_patients, config.n_grid)) < config.rho
    y_observed = MaskedMatrix(np.where(mask, y_complete, np.nan), mask)
    return SimOutput(
        y_observed=y_observed,
        y_complete=y_complete,
        w_true=w,
        i_s=i_s,
        mu_true=config.mu,
        config=config,
        basis=basis,
    )


def gdi_like_observations(
    n_patients: int = 3000,
    seed: int = 0,
    t_min: float = 4.0,
    t_max: float = 19.0,
    mu: float = 20.0,
    noise_sd: float = 6.0,
    treated_frac: float = 0.55,
):
    """Irregular-visit synthetic registry on an age axis.

    Each patient gets 1-8 visits (roughly half have the >= 4 needed to
    qualify for held-out evaluation) at uniform ages, and values from a
    smooth rank-3 patient curve near 70.  Patients with at least 3 visits
    spanning more than a year may get a surgery (probability
    `treated_frac`) at an age strictly inside their own visit span, which
    adds `mu` to every later value; surgical follow-up on both sides is
    what anchors the offset in such sparse data.

    Returns (ObservationSet, info_dict); info records mu and per-patient
    treatment ages.
    """
    rng = np.random.default_rng(seed)
    visit_probs = np.array([0.10, 0.16, 0.20, 0.18, 0.14, 0.10, 0.07, 0.05])
    span = t_max - t_min
    patients = []
    treatment_ages = {}
    for i in range(n_patients):
        pid = f"p{i:05d}"
        n_visits = int(rng.choice(np.arange(1, 9), p=visit_probs))
        times = np.sort(rng.uniform(t_min, t_max, size=n_visits))
        base = rng.normal(70.0, 9.0)
        slope = rng.normal(5.0, 3.0)
        wobble = rng.normal(0.0, 4.0)
        x = (times - t_min) / span
        curve = base + slope * (x - 0.5) + wobble * np.sin(np.pi * x)
        treat_age = None
        if (
            n_visits >= 3
            and times.max() - times.min() > 1.0
            and rng.random() < treated_frac
        ):
            treat_age = float(rng.uniform(times.min() + 0.1, times.max() - 0.1))
            curve = curve + mu * (times >= treat_age)
        values = curve + rng.normal(0.0, noise_sd, size=n_visits)
        patients.append(
            PatientRecord(id=pid, times=times, values=values, treatment_time=treat_age)
        )
        treatment_ages[pid] = treat_age
    info = {
        "mu": mu,
        "noise_sd": noise_sd,
        "t_min": t_min,
        "t_max": t_max,
        "treatment_ages": treatment_ages,
    }
    return ObservationSet(patients=patients), info
