"""Scoring, entrywise cross-validation, mean baselines, principal-component
curves, and the simulation sweep that averages test errors over replications.
"""

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .basis import Basis
from .masked import MaskedMatrix
from .shrinkage import thin_svd
from .simulate import SimConfig, derived_seed, generate_dataset
from .solver import SolverConfig, fit_csi, fit_sli, predict
from ._util import fmt_float

__all__ = [
    "SplitSpec",
    "CvResult",
    "SweepResult",
    "mse",
    "rse_mu",
    "make_splits",
    "cross_validate",
    "baseline_pmean",
    "baseline_rmean",
    "principal_components",
    "run_sweep",
]


def mse(y: MaskedMatrix, y_hat: np.ndarray, eval_mask: np.ndarray) -> float:
    """Mean squared error over the cells of eval_mask (must be observed)."""
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if eval_mask.shape != y.shape or np.asarray(y_hat).shape != y.shape:
        raise ValueError("shape mismatch")
    if np.any(eval_mask & ~y.mask):
        raise ValueError("eval_mask contains unobserved cells")
    if not eval_mask.any():
        raise ValueError("eval_mask is empty")
    diff = y.values[eval_mask] - np.asarray(y_hat)[eval_mask]
    return float(np.mean(diff**2))


def rse_mu(mu_hat: float, mu_true: float) -> float:
    """Relative squared error (mu_hat - mu_true)^2 / mu_true^2.

    With mu_true == 0 the relative error is undefined; the absolute squared
    error is returned instead, with a warning.
    """
    if mu_true == 0.0:
        warnings.warn("mu_true is 0; returning absolute squared error", stacklevel=2)
        return float(mu_hat) ** 2
    return (float(mu_hat) - float(mu_true)) ** 2 / float(mu_true) ** 2


@dataclass
class SplitSpec:
    """Disjoint entrywise partition of the observed cells: a common training
    block, one validation block per fold, and a test block.
    """

    train_mask: np.ndarray
    validation_masks: list
    test_mask: np.ndarray

    @property
    def n_folds(self) -> int:
        return len(self.validation_masks)

    def fold_train_mask(self, fold: int) -> np.ndarray:
        """Everything except the test block and the given validation fold."""
        out = self.train_mask.copy()
        for f, vm in enumerate(self.validation_masks):
            if f != fold:
                out |= vm
        return out

    def full_train_mask(self) -> np.ndarray:
        """Everything except the test block."""
        out = self.train_mask.copy()
        for vm in self.validation_masks:
            out |= vm
        return out


def make_splits(
    y: MaskedMatrix,
    folds: int,
    test_frac: float,
    seed: int,
    eligible_mask: np.ndarray = None,
    fold_frac: float = None,
) -> SplitSpec:
    """Uniform random entrywise split of the observed cells.

    floor(test_frac * n_observed) cells go to the test block and the rest
    is divided into `folds` near-equal validation folds.  When `fold_frac`
    is given, each fold instead gets floor(fold_frac * n_observed) cells
    and everything left over becomes the common training block.  With
    `eligible_mask`, held-out cells (test and validation) are drawn only
    from eligible rows/cells; ineligible observed cells always train.
    """
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if not 0.0 <= test_frac < 1.0:
        raise ValueError(f"test_frac must be in [0, 1), got {test_frac}")
    n_obs = y.n_observed
    pool_mask = y.mask if eligible_mask is None else (y.mask & np.asarray(eligible_mask, dtype=bool))
    flat_pool = np.flatnonzero(pool_mask.ravel())
    n_test = int(np.floor(test_frac * n_obs))
    n_fold = None if fold_frac is None else int(np.floor(fold_frac * n_obs))
    need = n_test + (folds * n_fold if n_fold is not None else folds)
    if flat_pool.size < max(need, folds):
        raise ValueError(
            f"not enough eligible observed cells ({flat_pool.size}) for the requested split"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(flat_pool)
    shape = y.shape

    def unflatten(idx):
        m = np.zeros(shape, dtype=bool).ravel()
        m[idx] = True
        return m.reshape(shape)

    test_idx = perm[:n_test]
    rest = perm[n_test:]
    if n_fold is None:
        fold_chunks = np.array_split(rest, folds)
        leftover = np.array([], dtype=int)
    else:
        fold_chunks = [rest[f * n_fold : (f + 1) * n_fold] for f in range(folds)]
        leftover = rest[folds * n_fold :]
    train = unflatten(leftover)
    if eligible_mask is not None:
        train |= y.mask & ~pool_mask
    return SplitSpec(
        train_mask=train,
        validation_masks=[unflatten(c) for c in fold_chunks],
        test_mask=unflatten(test_idx),
    )


@dataclass
class CvResult:
    """Selected penalty, the per-(lambda, fold) table, and the refit."""

    lambda_star: float
    table: list
    fit: object


def _fit_method(method: str, y: MaskedMatrix, i_s, basis: Basis, config: SolverConfig):
    if method == "csi":
        return fit_csi(y, i_s, basis, config)
    if method == "sli":
        return fit_sli(y, basis, config)
    raise ValueError(f"unknown method {method!r}")


def cross_validate(
    y: MaskedMatrix,
    i_s,
    basis: Basis,
    lambda_grid,
    folds: int = 5,
    seed: int = 0,
    method: str = "csi",
    splits: SplitSpec = None,
    solver_kwargs: dict = None,
) -> CvResult:
    """Entrywise k-fold cross-validation over the penalty grid.

    Each fold is scored by MSE after fitting on the remaining observed
    cells; the winner (ties to the smallest lambda) is refit on all of
    `y`'s observed cells.  `y` should already exclude any test block.
    """
    lambda_grid = sorted(float(l) for l in lambda_grid)
    if not lambda_grid:
        raise ValueError("lambda_grid is empty")
    if splits is None:
        splits = make_splits(y, folds=folds, test_frac=0.0, seed=seed)
    kwargs = dict(solver_kwargs or {})
    table = []
    means = []
    for lam in lambda_grid:
        fold_scores = []
        for f in range(splits.n_folds):
            y_f = y.restrict(splits.fold_train_mask(f))
            fit = _fit_method(method, y_f, i_s, basis, SolverConfig(lam=lam, **kwargs))
            y_hat = predict(fit.w, fit.mu, i_s if method == "csi" else None, basis)
            score = mse(y, y_hat, splits.validation_masks[f] & y.mask)
            fold_scores.append(score)
            table.append({"lambda": lam, "fold": f, "mse": score})
        means.append(float(np.mean(fold_scores)))
    lambda_star = lambda_grid[int(np.argmin(means))]
    refit = _fit_method(method, y, i_s, basis, SolverConfig(lam=lambda_star, **kwargs))
    return CvResult(lambda_star=lambda_star, table=table, fit=refit)


def baseline_pmean(y: MaskedMatrix, eval_mask: np.ndarray = None) -> np.ndarray:
    """Predict the global mean of the observed (training) cells everywhere."""
    if y.n_observed == 0:
        raise ValueError("no training observations")
    if eval_mask is not None and np.any(np.asarray(eval_mask, dtype=bool) & y.mask):
        raise ValueError("eval_mask overlaps the training cells")
    return np.full(y.shape, float(y.values[y.mask].mean()))


def baseline_rmean(y: MaskedMatrix, eval_mask: np.ndarray = None) -> np.ndarray:
    """Predict each cell by the patient's running mean of strictly earlier
    training observations, falling back to the global mean when none exist.
    """
    if y.n_observed == 0:
        raise ValueError("no training observations")
    if eval_mask is not None and np.any(np.asarray(eval_mask, dtype=bool) & y.mask):
        raise ValueError("eval_mask overlaps the training cells")
    filled = y.filled()
    counts = y.mask.astype(float)
    # exclusive prefix sums along the time axis
    csum = np.cumsum(filled, axis=1) - filled
    ccnt = np.cumsum(counts, axis=1) - counts
    global_mean = float(y.values[y.mask].mean())
    with np.errstate(invalid="ignore"):
        out = np.where(ccnt > 0, csum / np.maximum(ccnt, 1.0), global_mean)
    return out


def principal_components(w: np.ndarray, basis: Basis, top: int) -> list:
    """Top singular-vector curves of the fit, scaled by singular value.

    Curve m is d_m * (B v_m) with sign fixed so the largest-magnitude entry
    is positive.  Requires top <= rank(w).
    """
    if top < 0:
        raise ValueError("top must be nonnegative")
    svd = thin_svd(np.asarray(w, dtype=float))
    rank = int(np.sum(svd.d > svd.d[0] * max(w.shape) * np.finfo(float).eps)) if svd.d.size else 0
    if top > rank:
        raise ValueError(f"top={top} exceeds rank {rank}")
    curves = []
    for m in range(top):
        curve = svd.d[m] * (basis.values @ svd.v[:, m])
        if curve[np.argmax(np.abs(curve))] < 0:
            curve = -curve
        curves.append(curve)
    return curves


@dataclass
class SweepResult:
    """Per-replication records of the simulation sweep plus aggregation and
    CSV export helpers.
    """

    records: list = field(default_factory=list)

    def aggregate(self) -> list:
        """Mean mse / rse per (method, mu, rho), sorted."""
        keys = sorted({(r["method"], r["mu"], r["rho"]) for r in self.records})
        out = []
        for method, mu, rho in keys:
            sel = [r for r in self.records if (r["method"], r["mu"], r["rho"]) == (method, mu, rho)]
            out.append(
                {
                    "method": method,
                    "mu": mu,
                    "rho": rho,
                    "mean_mse": float(np.mean([r["mse"] for r in sel])),
                    "mean_rse_mu": float(np.mean([r["rse_mu"] for r in sel])),
                    "n": len(sel),
                }
            )
        return out

    def cell_mean(self, method: str, mu: float, rho: float, metric: str = "mse") -> float:
        sel = [
            r[metric]
            for r in self.records
            if r["method"] == method and r["mu"] == mu and r["rho"] == rho
        ]
        if not sel:
            raise KeyError(f"no records for ({method}, mu={mu}, rho={rho})")
        return float(np.mean(sel))

    def write_records_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("method,mu,rho,lambda,replication,mse,rse_mu\n")
            for r in sorted(
                self.records, key=lambda r: (r["method"], r["mu"], r["rho"], r["replication"])
            ):
                fh.write(
                    f"{r['method']},{fmt_float(r['mu'])},{fmt_float(r['rho'])},"
                    f"{fmt_float(r['lambda'])},{r['replication']},"
                    f"{fmt_float(r['mse'])},{fmt_float(r['rse_mu'])}\n"
                )

    def write_aggregate_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("method,rho,mu,mean_mse,mean_rse_mu,replications\n")
            for a in sorted(self.aggregate(), key=lambda a: (a["method"], a["rho"], a["mu"])):
                fh.write(
                    f"{a['method']},{fmt_float(a['rho'])},{fmt_float(a['mu'])},"
                    f"{fmt_float(a['mean_mse'])},{fmt_float(a['mean_rse_mu'])},{a['n']}\n"
                )

    def write_plotdata_csv(self, path) -> None:
        """Long-format (mu, rho, metric, value) rows for external plotting."""
        with open(path, "w") as fh:
            fh.write("mu,rho,metric,value\n")
            for a in sorted(self.aggregate(), key=lambda a: (a["method"], a["rho"], a["mu"])):
                fh.write(
                    f"{fmt_float(a['mu'])},{fmt_float(a['rho'])},"
                    f"mse_{a['method']},{fmt_float(a['mean_mse'])}\n"
                )
                if a["method"] == "csi":
                    fh.write(
                        f"{fmt_float(a['mu'])},{fmt_float(a['rho'])},"
                        f"rse_mu_csi,{fmt_float(a['mean_rse_mu'])}\n"
                    )


def _sweep_one(args) -> list:
    """One (cell, replication) unit of the sweep; top level so it pickles."""
    ci, rep, mu, rho, lambda_grid, folds, test_frac, methods, overrides, solver_kwargs, seed = args
    sim = generate_dataset(
        SimConfig(mu=mu, rho=rho, seed=derived_seed(seed, ci, rep, 0), **overrides)
    )
    splits = make_splits(
        sim.y_observed, folds=folds, test_frac=test_frac,
        seed=derived_seed(seed, ci, rep, 1),
    )
    y_train = sim.y_observed.restrict(splits.full_train_mask())
    records = []
    for method in methods:
        cv = cross_validate(
            y_train, sim.i_s, sim.basis, lambda_grid,
            method=method, splits=splits, solver_kwargs=solver_kwargs,
        )
        y_hat = predict(cv.fit.w, cv.fit.mu, sim.i_s if method == "csi" else None, sim.basis)
        test_mse = mse(sim.y_observed, y_hat, splits.test_mask)
        with warnings.catch_warnings():
            if mu == 0.0:
                warnings.simplefilter("ignore")
            rse = rse_mu(cv.fit.mu, mu)
        records.append(
            {
                "method": method,
                "mu": float(mu),
                "rho": float(rho),
                "lambda": cv.lambda_star,
                "replication": rep,
                "mse": test_mse,
                "rse_mu": rse,
            }
        )
    return records


def run_sweep(
    mu_values,
    rho_values,
    lambda_grid,
    replications: int = 10,
    seed: int = 0,
    folds: int = 5,
    test_frac: float = 0.1,
    methods=("csi", "sli"),
    sim_overrides: dict = None,
    solver_kwargs: dict = None,
    n_jobs: int = 1,
) -> SweepResult:
    """Simulate / cross-validate / refit / score over a (mu, rho) grid.

    For each cell and replication: draw a dataset (child seed), hold out a
    test block, CV-select lambda per method on the rest, refit, and record
    test MSE and the relative squared error of the fitted offset.  Results
    are deterministic in `seed` and independent of execution order; with
    n_jobs > 1 the (cell, replication) units run in worker processes.
    """
    mu_values = list(mu_values)
    rho_values = list(rho_values)
    if not mu_values or not rho_values or not list(lambda_grid):
        raise ValueError("mu_values, rho_values and lambda_grid must be nonempty")
    overrides = dict(sim_overrides or {})
    units = [
        (ci, rep, mu, rho, list(lambda_grid), folds, test_frac, tuple(methods),
         overrides, solver_kwargs, seed)
        for ci, (mu, rho) in enumerate(product(mu_values, rho_values))
        for rep in range(replications)
    ]
    result = SweepResult()
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for recs in pool.map(_sweep_one, units):
                result.records.extend(recs)
    else:
        for unit in units:
            result.records.extend(_sweep_one(unit))
    result.records.sort(key=lambda r: (r["method"], r["mu"], r["rho"], r["replication"]))
    return result
