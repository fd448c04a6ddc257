import json

import numpy as np
import pytest

from csimpute.basis import make_grid, make_spline_basis
from csimpute.masked import MaskedMatrix, TreatmentMatrix
from csimpute.shrinkage import nuclear_norm, soft_threshold
from csimpute.solver import (
    FitResult,
    SolverConfig,
    fit_csi,
    fit_sli,
    loss,
    predict,
    surrogate,
    update_mu,
    update_w,
)

from oracles import grid_search_mu, loss_entrywise


def random_instance(rng, n=12, t=9, k=3, rho=0.5, mu=2.0, noise=0.3):
    basis = make_spline_basis(make_grid(0, t - 1, t), k)
    w = rng.standard_normal((n, k))
    onset = rng.integers(0, t + 4, n).astype(float)
    onset[onset > t - 1] = np.inf
    i_s = TreatmentMatrix(onset=onset, n_cols=t)
    full = w @ basis.values.T + mu * i_s.dense + noise * rng.standard_normal((n, t))
    mask = rng.random((n, t)) < rho
    if not mask.any():
        mask[0, 0] = True
    y = MaskedMatrix(np.where(mask, full, np.nan), mask)
    return y, i_s, basis


def test_loss_zero_model_is_masked_energy():
    rng = np.random.default_rng(0)
    y, i_s, basis = random_instance(rng)
    w0 = np.zeros((y.shape[0], basis.n_funcs))
    expected = 0.5 * np.sum(y.values[y.mask] ** 2)
    assert loss(y, i_s, basis, w0, 0.0, 0.0) == pytest.approx(expected, rel=1e-12)


def test_loss_zero_at_perfect_fit():
    rng = np.random.default_rng(1)
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    w = rng.standard_normal((5, 3))
    i_s = TreatmentMatrix(onset=np.array([0.0, 3.0, np.inf, 5.0, 1.0]), n_cols=9)
    mu = 1.7
    full = w @ basis.values.T + mu * i_s.dense
    y = MaskedMatrix(full, np.ones_like(full, dtype=bool))
    assert loss(y, i_s, basis, w, mu, 0.0) == pytest.approx(0.0, abs=1e-18)


def test_loss_matches_entrywise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        y, i_s, basis = random_instance(rng)
        w = rng.standard_normal((y.shape[0], basis.n_funcs))
        mu = float(rng.standard_normal())
        lam = float(rng.uniform(0, 2))
        ours = loss(y, i_s, basis, w, mu, lam)
        assert ours == pytest.approx(loss_entrywise(y, i_s, basis, w, mu, lam), rel=1e-10)


def test_surrogate_touches_loss_at_reference():
    rng = np.random.default_rng(3)
    y, i_s, basis = random_instance(rng)
    w = rng.standard_normal((y.shape[0], basis.n_funcs))
    mu = 0.8
    lam = 0.5
    q = surrogate(y, i_s, basis, w, w, mu, lam)
    assert abs(q - loss(y, i_s, basis, w, mu, lam)) < 1e-10


def test_surrogate_full_mask_ignores_reference():
    rng = np.random.default_rng(4)
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    w = rng.standard_normal((5, 3))
    full = rng.standard_normal((5, 9))
    y = MaskedMatrix(full, np.ones_like(full, dtype=bool))
    i_s = TreatmentMatrix(onset=np.full(5, np.inf), n_cols=9)
    q1 = surrogate(y, i_s, basis, w, rng.standard_normal((5, 3)), 0.3, 0.5)
    q2 = surrogate(y, i_s, basis, w, rng.standard_normal((5, 3)), 0.3, 0.5)
    assert q1 == pytest.approx(q2, rel=1e-14)


def test_surrogate_majorizes_loss():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y, i_s, basis = random_instance(rng)
        w = rng.standard_normal((y.shape[0], basis.n_funcs))
        w_ref = rng.standard_normal((y.shape[0], basis.n_funcs))
        mu = float(rng.standard_normal())
        lam = float(rng.uniform(0, 2))
        assert surrogate(y, i_s, basis, w, w_ref, mu, lam) >= loss(y, i_s, basis, w, mu, lam) - 1e-10


def test_update_w_unpenalized_full_mask():
    rng = np.random.default_rng(6)
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    full = rng.standard_normal((5, 9))
    y = MaskedMatrix(full, np.ones_like(full, dtype=bool))
    i_s = TreatmentMatrix(onset=np.array([2.0, np.inf, 0.0, 4.0, np.inf]), n_cols=9)
    mu = 1.3
    w_any = rng.standard_normal((5, 3))
    out = update_w(y, i_s, basis, w_any, mu, 0.0)
    assert np.allclose(out, (full - mu * i_s.dense) @ basis.values, atol=1e-10)


def test_update_w_empty_mask_refits_previous():
    rng = np.random.default_rng(7)
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    y = MaskedMatrix(np.full((5, 9), np.nan), np.zeros((5, 9), dtype=bool))
    i_s = TreatmentMatrix(onset=np.full(5, np.inf), n_cols=9)
    w_old = rng.standard_normal((5, 3))
    out = update_w(y, i_s, basis, w_old, 0.0, 0.4)
    assert np.allclose(out, soft_threshold(w_old, 0.4), atol=1e-9)


def test_update_w_minimizes_surrogate():
    rng = np.random.default_rng(8)
    y, i_s, basis = random_instance(rng)
    w_old = rng.standard_normal((y.shape[0], basis.n_funcs))
    mu, lam = 0.9, 0.6
    w_new = update_w(y, i_s, basis, w_old, mu, lam)
    q0 = surrogate(y, i_s, basis, w_new, w_old, mu, lam)
    for _ in range(100):
        delta = rng.standard_normal(w_new.shape)
        delta *= 1e-3 / np.linalg.norm(delta)
        assert q0 <= surrogate(y, i_s, basis, w_new + delta, w_old, mu, lam) + 1e-12


def test_update_mu_constant_residual():
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    i_s = TreatmentMatrix(onset=np.array([0.0, 4.0]), n_cols=9)
    w = np.zeros((2, 3))
    c = 2.5
    vals = c * i_s.dense + 0.0
    mask = i_s.dense > 0
    y = MaskedMatrix(np.where(mask, vals, np.nan), mask)
    assert update_mu(y, i_s, basis, w) == pytest.approx(c, abs=1e-14)


def test_update_mu_single_cell():
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    i_s = TreatmentMatrix(onset=np.array([8.0]), n_cols=9)
    mask = np.zeros((1, 9), dtype=bool)
    mask[0, 8] = True
    y = MaskedMatrix(np.where(mask, 2.5, np.nan), mask)
    assert update_mu(y, i_s, basis, np.zeros((1, 3))) == 2.5


def test_update_mu_degenerate_warns_and_returns_zero():
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    i_s = TreatmentMatrix(onset=np.full(2, np.inf), n_cols=9)
    mask = np.ones((2, 9), dtype=bool)
    y = MaskedMatrix(np.ones((2, 9)), mask)
    with pytest.warns(UserWarning, match="pinned"):
        assert update_mu(y, i_s, basis, np.zeros((2, 3))) == 0.0


def test_update_mu_matches_grid_search():
    rng = np.random.default_rng(9)
    for _ in range(10):
        y, i_s, basis = random_instance(rng)
        if not (y.mask & (i_s.dense > 0)).any():
            continue
        w = rng.standard_normal((y.shape[0], basis.n_funcs))
        ours = update_mu(y, i_s, basis, w)
        assert abs(ours - grid_search_mu(y, i_s, basis, w)) <= 1e-4


def test_csi_equals_sli_when_no_treatment():
    rng = np.random.default_rng(10)
    y, _, basis = random_instance(rng)
    zeros = TreatmentMatrix(onset=np.full(y.shape[0], np.inf), n_cols=y.shape[1])
    config = SolverConfig(lam=0.5, record_iterates=True)
    with pytest.warns(UserWarning, match="pinned"):
        a = fit_csi(y, zeros, basis, config)
    b = fit_sli(y, basis, config)
    assert a.degenerate_treatment and not b.degenerate_treatment
    assert len(a.w_iterates) == len(b.w_iterates)
    for wa, wb in zip(a.w_iterates, b.w_iterates):
        assert np.array_equal(wa, wb)
    assert a.mu == 0.0 and b.mu == 0.0


def test_full_mask_unpenalized_projects_in_one_step():
    rng = np.random.default_rng(11)
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    full = rng.standard_normal((5, 9))
    y = MaskedMatrix(full, np.ones_like(full, dtype=bool))
    res = fit_sli(y, basis, SolverConfig(lam=0.0))
    assert res.converged
    assert np.allclose(res.w, full @ basis.values, atol=1e-12)


def test_sli_zero_matrix_collapses_to_zero():
    basis = make_spline_basis(make_grid(0, 8, 9), 3)
    y = MaskedMatrix(np.zeros((4, 9)), np.ones((4, 9), dtype=bool))
    res = fit_sli(y, basis, SolverConfig(lam=1.0))
    assert res.converged
    assert np.array_equal(res.w, np.zeros((4, 3)))


def test_loss_trace_non_increasing():
    rng = np.random.default_rng(12)
    for _ in range(5):
        y, i_s, basis = random_instance(rng)
        res = fit_csi(y, i_s, basis, SolverConfig(lam=0.7))
        assert np.all(np.diff(res.loss_trace) <= 1e-8)


def test_descent_chain_recorded_and_ordered():
    rng = np.random.default_rng(13)
    y, i_s, basis = random_instance(rng, n=20, t=12, k=4)
    res = fit_csi(y, i_s, basis, SolverConfig(lam=0.5, check_monotonicity=True))
    assert len(res.descent_chain) == res.iterations
    for f_new, f_mid, q, f_old in res.descent_chain:
        assert f_new <= f_mid + 1e-8 <= q + 2e-8 <= f_old + 3e-8


def test_iterate_differences_monotone():
    rng = np.random.default_rng(14)
    y, i_s, basis = random_instance(rng)
    res = fit_csi(y, i_s, basis, SolverConfig(lam=0.5, record_iterates=True))
    diffs = [
        float(np.sum((a - b) ** 2))
        for a, b in zip(res.w_iterates[1:], res.w_iterates[:-1])
    ]
    assert all(d2 <= d1 + 1e-9 for d1, d2 in zip(diffs, diffs[1:]))


def test_fixed_point_residual_small_on_convergence():
    rng = np.random.default_rng(15)
    y, i_s, basis = random_instance(rng, rho=0.7)
    config = SolverConfig(lam=0.5)
    res = fit_csi(y, i_s, basis, config)
    assert res.converged
    r_w, r_mu = res.fixed_point_residual
    assert r_w**2 < 10 * config.tol
    assert r_mu**2 < 10 * config.tol


def test_objective_agrees_across_random_starts():
    rng = np.random.default_rng(16)
    y, i_s, basis = random_instance(rng, n=10, t=8, k=3, rho=0.8)
    lam = 0.6
    finals = []
    for s in range(5):
        r2 = np.random.default_rng(100 + s)
        init = (r2.standard_normal((y.shape[0], basis.n_funcs)), float(r2.standard_normal()))
        res = fit_csi(y, i_s, basis, SolverConfig(lam=lam, max_iter=2000), init=init)
        assert res.converged
        finals.append(loss(y, i_s, basis, res.w, res.mu, lam))
    spread = (max(finals) - min(finals)) / max(1e-12, abs(min(finals)))
    assert spread < 1e-5


def test_degenerate_treatment_flagged_and_pinned():
    rng = np.random.default_rng(17)
    y, _, basis = random_instance(rng)
    zeros = TreatmentMatrix(onset=np.full(y.shape[0], np.inf), n_cols=y.shape[1])
    with pytest.warns(UserWarning, match="pinned"):
        res = fit_csi(y, zeros, basis, SolverConfig(lam=0.5))
    assert res.degenerate_treatment
    assert res.mu == 0.0 and res.fixed_point_residual[1] == 0.0


def test_non_convergence_still_returns_result():
    rng = np.random.default_rng(18)
    y, i_s, basis = random_instance(rng, rho=0.2)
    res = fit_csi(y, i_s, basis, SolverConfig(lam=0.1, max_iter=3))
    assert not res.converged
    assert res.iterations == 3
    assert res.w.shape == (y.shape[0], basis.n_funcs)


def test_predict_examples():
    basis = make_spline_basis(make_grid(0, 8, 9), 4)
    i_s = TreatmentMatrix(onset=np.array([3.0]), n_cols=9)
    assert np.array_equal(predict(np.zeros((1, 4)), 0.0, i_s, basis), np.zeros((1, 9)))
    w = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert np.array_equal(predict(w, 0.0, i_s, basis), basis.values[:, [0]].T)
    out = predict(w, 2.0, i_s, basis)
    expected = basis.values[:, 0] + 2.0 * (np.arange(9) >= 3)
    assert np.allclose(out[0], expected, atol=1e-12)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(lam=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(lam=0.0, tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(lam=0.0, max_iter=0)


def test_fit_result_json_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    y, i_s, basis = random_instance(rng)
    res = fit_csi(y, i_s, basis, SolverConfig(lam=0.5))
    path = tmp_path / "fit.json"
    res.save_json(path)
    back = json.loads(path.read_text())
    assert np.array_equal(np.array(back["W"]), res.w)
    assert back["mu"] == res.mu
    assert back["lambda"] == res.lam
    assert back["converged"] == res.converged
    assert len(back["loss_trace"]) == res.iterations
    assert tuple(back["fixed_point_residual"]) == res.fixed_point_residual
    assert isinstance(res, FitResult)
