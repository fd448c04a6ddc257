"""Command-line entry points: simulate, fit, sweep, eval.

Every command is a pure function of its input files, flags, and seed; each
run writes a manifest.json recording the flag snapshot and SHA-256 digests
of inputs and outputs, so reruns can be checked byte for byte.

Exit codes: 0 success, 2 bad input (files or flag values), 3 solver did
not converge (outputs are still written).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import evaluate as ev
from .basis import make_grid, make_spline_basis, write_basis_csv
from .masked import (
    MaskedMatrix,
    ObservationSet,
    PatientRecord,
    grid_observations,
    read_observations_csv,
    read_wide_csv,
    write_observations_csv,
    write_wide_csv,
)
from .simulate import SimConfig, generate_dataset
from .solver import SolverConfig, fit_csi, fit_sli, predict
from ._util import file_digest, fmt_float

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_CONVERGENCE = 3


def _outdir(args) -> str:
    out = args.out or os.environ.get("CSIMPUTE_OUTDIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir, command, config, seed, inputs, outputs) -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: file_digest(p) for p in inputs},
        "outputs": {p: file_digest(p) for p in outputs},
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad numeric list {text!r}: {exc}")


def _sim_output_to_observations(sim) -> ObservationSet:
    """Long-format view of a simulated dataset; patients with no observed
    cell cannot be represented in long format and are skipped (their row
    index stays visible in the ground-truth sidecar).
    """
    grid = sim.basis.grid
    patients = []
    for i in range(sim.config.n_patients):
        cols = np.flatnonzero(sim.y_observed.mask[i])
        if cols.size == 0:
            continue
        onset = sim.i_s.onset[i]
        patients.append(
            PatientRecord(
                id=f"p{i:05d}",
                times=grid.points[cols],
                values=sim.y_observed.values[i, cols],
                treatment_time=float(grid.points[int(onset)]) if np.isfinite(onset) else None,
            )
        )
    return ObservationSet(patients=patients)


def cmd_simulate(args) -> int:
    config = SimConfig(
        mu=args.mu, rho=args.rho, seed=args.seed,
        n_patients=args.n, n_grid=args.t, n_basis=args.k,
        p_treat=args.p_treat, noise_sd=args.noise_sd,
    )
    sim = generate_dataset(config)
    obs = _sim_output_to_observations(sim)
    outdir = _outdir(args)
    obs_path = os.path.join(outdir, "observations.csv")
    tr_path = os.path.join(outdir, "treatments.csv")
    gt_path = os.path.join(outdir, "ground_truth.json")
    write_observations_csv(obs, obs_path, tr_path)
    truth = sim.ground_truth_dict()
    truth["dropped_empty_patients"] = int((~sim.y_observed.mask.any(axis=1)).sum())
    with open(gt_path, "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "simulate", config.to_dict(), args.seed, [],
                    [obs_path, tr_path, gt_path])
    print(f"wrote {obs_path} ({sim.y_observed.n_observed} observations)")
    return EXIT_OK


def _build_grid_basis(args, times_min, times_max):
    t_min = args.t_min if args.t_min is not None else times_min
    t_max = args.t_max if args.t_max is not None else times_max
    grid = make_grid(t_min, t_max, args.t_grid)
    return grid, make_spline_basis(grid, args.k)


def cmd_fit(args) -> int:
    if (args.lam is None) == (not args.cv):
        raise ValueError("choose exactly one of --lambda or --cv")
    obs = read_observations_csv(args.observations, args.treatments)
    all_times = np.concatenate([p.times for p in obs.patients])
    grid, basis = _build_grid_basis(args, all_times.min(), all_times.max())
    y, i_s = grid_observations(obs, grid, collision_policy=args.collision_policy)
    solver_kwargs = {"tol": args.tol, "max_iter": args.max_iter}
    if args.cv:
        cv = ev.cross_validate(
            y, i_s, basis, args.lambda_grid, folds=args.folds, seed=args.seed,
            method=args.method, solver_kwargs=solver_kwargs,
        )
        fit, lam_star = cv.fit, cv.lambda_star
    else:
        config = SolverConfig(lam=args.lam, **solver_kwargs)
        fit = fit_csi(y, i_s, basis, config) if args.method == "csi" else fit_sli(y, basis, config)
        lam_star = args.lam

    y_hat = predict(fit.w, fit.mu, i_s if args.method == "csi" else None, basis)
    outdir = _outdir(args)
    fit_path = os.path.join(outdir, "fit.json")
    pred_path = os.path.join(outdir, "predictions.csv")
    basis_path = os.path.join(outdir, "basis.csv")
    fit.save_json(fit_path)
    write_wide_csv(y_hat, np.ones_like(y_hat, dtype=bool), grid, obs.ids, pred_path)
    write_basis_csv(basis, basis_path)
    outputs = [fit_path, pred_path, basis_path]
    if args.top_pc:
        curves = ev.principal_components(fit.w, basis, args.top_pc)
        pc_path = os.path.join(outdir, "pcs.csv")
        with open(pc_path, "w") as fh:
            fh.write("time," + ",".join(f"pc{m + 1}" for m in range(len(curves))) + "\n")
            for j, t in enumerate(grid.points):
                fh.write(fmt_float(t) + "," + ",".join(fmt_float(c[j]) for c in curves) + "\n")
        outputs.append(pc_path)
    config_snapshot = {
        "method": args.method, "lambda": lam_star, "cv": bool(args.cv),
        "lambda_grid": list(args.lambda_grid) if args.cv else None,
        "k": args.k, "t_grid": args.t_grid,
        "t_min": grid.t_min, "t_max": grid.t_max,
        "tol": args.tol, "max_iter": args.max_iter, "folds": args.folds,
        "collision_policy": args.collision_policy,
    }
    _write_manifest(outdir, "fit", config_snapshot, args.seed,
                    [args.observations] + ([args.treatments] if args.treatments else []),
                    outputs)
    print(f"method={args.method} lambda={lam_star} mu={fit.mu:.6g} "
          f"iterations={fit.iterations} converged={fit.converged}")
    return EXIT_OK if fit.converged else EXIT_NO_CONVERGENCE


def cmd_sweep(args) -> int:
    overrides = {"n_patients": args.n, "n_grid": args.t, "n_basis": args.k,
                 "noise_sd": args.noise_sd}
    result = ev.run_sweep(
        args.mu, args.rho, args.lambda_grid,
        replications=args.replications, seed=args.seed, folds=args.folds,
        test_frac=args.test_frac, sim_overrides=overrides, n_jobs=args.n_jobs,
    )
    outdir = _outdir(args)
    rec_path = os.path.join(outdir, "sweep.csv")
    agg_path = os.path.join(outdir, "table.csv")
    plot_path = os.path.join(outdir, "figure_data.csv")
    result.write_records_csv(rec_path)
    result.write_aggregate_csv(agg_path)
    result.write_plotdata_csv(plot_path)
    config_snapshot = {
        "mu": args.mu, "rho": args.rho, "lambda_grid": args.lambda_grid,
        "replications": args.replications, "folds": args.folds,
        "test_frac": args.test_frac, "n": args.n, "t": args.t, "k": args.k,
        "noise_sd": args.noise_sd,
    }
    _write_manifest(outdir, "sweep", config_snapshot, args.seed, [],
                    [rec_path, agg_path, plot_path])
    for a in result.aggregate():
        print(f"{a['method']} rho={a['rho']} mu={a['mu']}: "
              f"mse={a['mean_mse']:.4f} rse_mu={a['mean_rse_mu']:.3g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ids_pred, pred, pred_mask = read_wide_csv(args.predictions)
    if not pred_mask.all():
        raise ValueError(f"{args.predictions}: predictions must be dense")
    obs = read_observations_csv(args.observations)
    n_grid = pred.shape[1]
    # the grid is carried by the predictions header
    with open(args.predictions) as fh:
        header = fh.readline().strip().split(",")[1:]
    grid_times = np.array([float(h) for h in header])
    grid = make_grid(grid_times[0], grid_times[-1], n_grid)
    y, _ = grid_observations(obs, grid, collision_policy=args.collision_policy)
    row_of = {pid: i for i, pid in enumerate(ids_pred)}
    missing = [p.id for p in obs.patients if p.id not in row_of]
    if missing:
        raise ValueError(f"predictions lack rows for {len(missing)} patient(s), e.g. {missing[0]!r}")
    order = [row_of[p.id] for p in obs.patients]
    pred = pred[order]

    if args.eval_mask:
        ids_m, mvals, mmask = read_wide_csv(args.eval_mask)
        if ids_m != [p.id for p in obs.patients]:
            raise ValueError("eval mask patient ids do not match the observations")
        eval_mask = mmask & (np.nan_to_num(mvals) != 0.0)
    elif args.test_frac is not None:
        rng = np.random.default_rng(args.seed)
        flat = np.flatnonzero(y.mask.ravel())
        take = rng.permutation(flat)[: int(np.floor(args.test_frac * flat.size))]
        eval_mask = np.zeros(y.shape, dtype=bool).ravel()
        eval_mask[take] = True
        eval_mask = eval_mask.reshape(y.shape)
    else:
        raise ValueError("need --eval-mask or --test-frac")
    if np.any(eval_mask & ~y.mask):
        raise ValueError("eval mask contains cells with no observation")
    if not eval_mask.any():
        raise ValueError("eval mask is empty")

    rows = [("model", ev.mse(y, pred, eval_mask))]
    if args.baselines:
        y_train = y.restrict(~eval_mask)
        rows.append(("pmean", ev.mse(y, ev.baseline_pmean(y_train, eval_mask), eval_mask)))
        rows.append(("rmean", ev.mse(y, ev.baseline_rmean(y_train, eval_mask), eval_mask)))
    outdir = _outdir(args)
    metrics_path = os.path.join(outdir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("method,mse\n")
        for name, value in rows:
            fh.write(f"{name},{fmt_float(value)}\n")
    config_snapshot = {
        "eval_mask": args.eval_mask, "test_frac": args.test_frac,
        "baselines": bool(args.baselines), "collision_policy": args.collision_policy,
    }
    inputs = [args.predictions, args.observations] + ([args.eval_mask] if args.eval_mask else [])
    _write_manifest(outdir, "eval", config_snapshot, args.seed, inputs, [metrics_path])
    for name, value in rows:
        print(f"{name}: mse={value:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csimpute",
        description="Sparse longitudinal trajectory completion with a treatment offset.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset and write it as CSV")
    p.add_argument("--n", type=int, default=500, help="number of patients")
    p.add_argument("--t", type=int, default=51, help="number of grid points")
    p.add_argument("--k", type=int, default=7, help="number of basis functions")
    p.add_argument("--mu", type=float, required=True, help="treatment effect")
    p.add_argument("--rho", type=float, required=True, help="observation rate")
    p.add_argument("--p-treat", type=float, default=0.8, dest="p_treat")
    p.add_argument("--noise-sd", type=float, default=0.5, dest="noise_sd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default $CSIMPUTE_OUTDIR or .)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit CSI or SLI to an observations file")
    p.add_argument("--observations", required=True)
    p.add_argument("--treatments", default=None)
    p.add_argument("--method", choices=["csi", "sli"], required=True)
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--cv", action="store_true", help="select lambda by cross-validation")
    p.add_argument("--lambda-grid", type=_float_list, default=[0, 1, 2, 3, 4],
                   dest="lambda_grid")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--t-grid", type=int, default=51, dest="t_grid")
    p.add_argument("--t-min", type=float, default=None, dest="t_min")
    p.add_argument("--t-max", type=float, default=None, dest="t_max")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=500, dest="max_iter")
    p.add_argument("--collision-policy", choices=["error", "average"], default="error",
                   dest="collision_policy")
    p.add_argument("--top-pc", type=int, default=0, dest="top_pc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="reproduce the simulation study table")
    p.add_argument("--mu", type=_float_list, default=[1.0, 2.0, 5.0])
    p.add_argument("--rho", type=_float_list, default=[0.1, 0.3, 0.5])
    p.add_argument("--lambda-grid", type=_float_list, default=[0, 1, 2, 3, 4],
                   dest="lambda_grid")
    p.add_argument("--replications", type=int, default=10)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--test-frac", type=float, default=0.1, dest="test_frac")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--t", type=int, default=51)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--noise-sd", type=float, default=0.5, dest="noise_sd")
    p.add_argument("--n-jobs", type=int, default=1, dest="n_jobs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score predictions against held-out observations")
    p.add_argument("--predictions", required=True, help="wide CSV from `csimpute fit`")
    p.add_argument("--observations", required=True, help="long CSV of all observations")
    p.add_argument("--eval-mask", default=None, dest="eval_mask",
                   help="wide 0/1 CSV marking the cells to score")
    p.add_argument("--test-frac", type=float, default=None, dest="test_frac",
                   help="sample this fraction of observed cells instead")
    p.add_argument("--baselines", action="store_true",
                   help="also score population-mean and running-mean baselines")
    p.add_argument("--collision-policy", choices=["error", "average"], default="error",
                   dest="collision_policy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
