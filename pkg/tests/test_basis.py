import numpy as np
import pytest

from csimpute.basis import make_grid, make_spline_basis, write_basis_csv
from csimpute.basis import _raw_spline_design


def test_make_grid_endpoints_only():
    g = make_grid(0, 1, 2)
    assert np.array_equal(g.points, [0.0, 1.0])


def test_make_grid_unit_spacing():
    g = make_grid(0, 50, 51)
    assert np.array_equal(g.points, np.arange(51.0))


def test_make_grid_fractional_spacing():
    # (19 - 4) / 50 = 0.3
    g = make_grid(4, 19, 51)
    assert g.spacing == pytest.approx(0.3, abs=1e-15)
    assert np.allclose(np.diff(g.points), 0.3, atol=1e-12)
    assert g.points[0] == 4.0 and g.points[-1] == 19.0


@pytest.mark.parametrize("bad", [(1, 1, 5), (2, 1, 5), (0, 1, 1), (0, 1, 0)])
def test_make_grid_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        make_grid(*bad)


def test_basis_orthonormal_51x7():
    b = make_spline_basis(make_grid(0, 50, 51), 7)
    assert b.values.shape == (51, 7)
    assert np.abs(b.values.T @ b.values - np.eye(7)).max() < 1e-10


def test_basis_square_case():
    b = make_spline_basis(make_grid(0, 9, 10), 10)
    assert b.values.shape == (10, 10)
    assert np.abs(b.values.T @ b.values - np.eye(10)).max() < 1e-10


def test_basis_preserves_raw_span():
    g = make_grid(0, 50, 51)
    b = make_spline_basis(g, 7)
    raw = _raw_spline_design(g, 7)
    for j in range(raw.shape[1]):
        c = raw[:, j]
        resid = c - b.values @ (b.values.T @ c)
        assert np.linalg.norm(resid) / np.linalg.norm(c) < 1e-9


def test_basis_deterministic():
    a = make_spline_basis(make_grid(0, 50, 51), 7)
    b = make_spline_basis(make_grid(0, 50, 51), 7)
    assert np.array_equal(a.values, b.values)


def test_basis_small_k_drops_degree():
    b = make_spline_basis(make_grid(0, 1, 8), 2)
    assert b.values.shape == (8, 2)
    assert np.abs(b.values.T @ b.values - np.eye(2)).max() < 1e-10


@pytest.mark.parametrize("k", [1, 52])
def test_basis_rejects_bad_k(k):
    with pytest.raises(ValueError):
        make_spline_basis(make_grid(0, 50, 51), k)


def test_basis_affine_grid_invariance():
    # uniform splines only see relative position within the range
    a = make_spline_basis(make_grid(0, 50, 51), 7)
    b = make_spline_basis(make_grid(4, 19, 51), 7)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_basis_csv_round_trip(tmp_path):
    b = make_spline_basis(make_grid(0, 50, 51), 7)
    path = tmp_path / "basis.csv"
    write_basis_csv(b, path)
    back = np.loadtxt(path, delimiter=",")
    assert np.array_equal(back, b.values)
