import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdkslearn.grid import (FS_PER_AU, apply_stencil, au_to_fs, build_grid,
                            external_potential, first_derivative, fs_to_au,
                            interaction_matrix, laplacian4, simpson_pattern, simpson_weights)


def test_build_grid_spacing():
    assert build_grid(-80, 40, 1200, 1.0, 10).dx == pytest.approx(0.1, rel=1e-14)
    assert build_grid(-80, 40, 600, 1.0, 10).dx == pytest.approx(0.2, rel=1e-14)
    g = build_grid(0, 1, 4, 1, 1)
    assert (g.dx, g.dt) == (0.25, 1.0)


@pytest.mark.parametrize("args, match", [
    ((0, 1, 5, 1, 1), "Simpson"),
    ((1, 0, 4, 1, 1), "L_max"),
    ((0, 1, 4, 0, 1), "T > 0"),
    ((0, 1, 4, 1, 0), "K >= 1"),
    ((0, 1, 2, 1, 1), "J >= 4"),
])
def test_build_grid_rejects(args, match):
    with pytest.raises(ValueError, match=match):
        build_grid(*args)


@settings(max_examples=60, deadline=None)
@given(lo=st.floats(-100, 0), width=st.floats(0.5, 200), half_J=st.integers(2, 2000),
       T=st.floats(1e-3, 1e3), K=st.integers(1, 50000))
def test_grid_extents_consistent(lo, width, half_J, T, K):
    g = build_grid(lo, lo + width, 2 * half_J, T, K)
    span = g.L_max - g.L_min
    assert abs(g.J * g.dx - span) <= 1e-12 * span
    assert abs(g.K * g.dt - g.T) <= 1e-12 * g.T
    assert g.x[0] == g.L_min and len(g.x) == g.J + 1
    assert np.array_equal(g.x, g.L_min + np.arange(g.J + 1) * g.dx)


def test_subsample_and_dict_round_trip():
    g = build_grid(-80, 40, 1200, 3.0, 300)
    c = g.subsample(2, 100)
    assert (c.J, c.K) == (600, 3)
    assert c.dx == pytest.approx(0.2) and c.dt == pytest.approx(g.dt * 100)
    with pytest.raises(ValueError):
        g.subsample(7, 1)
    assert type(g).from_dict(g.to_dict()) == g


def test_unit_conversion():
    assert fs_to_au(FS_PER_AU) == 1.0
    assert au_to_fs(fs_to_au(2.4e-5)) == pytest.approx(2.4e-5, rel=1e-15)
    assert fs_to_au(2.4e-5) == pytest.approx(9.921929898e-4, rel=1e-9)


def test_external_potential_values():
    g = build_grid(-80, 40, 1200, 1.0, 1)
    v = external_potential(g)
    i10, i0 = 700, 800
    assert g.x[i10] == pytest.approx(-10.0, abs=1e-12)
    assert v[i10] == pytest.approx(-1.0, abs=1e-12)
    assert v[i0] == pytest.approx(-1.0 / np.sqrt(101.0), rel=1e-12)
    assert int(np.argmin(v)) == i10


def test_laplacian_rows():
    g = build_grid(0, 1.2, 12, 1.0, 1)
    A = laplacian4(g).toarray()
    s = 12.0 * g.dx**2
    assert np.allclose(A[0, :4] * s, [-30, 16, -1, 0], rtol=0, atol=1e-10)
    assert np.allclose(A[6, 4:9] * s, [-1, 16, -30, 16, -1], rtol=0, atol=1e-10)
    assert np.array_equal(A, A.T)


def test_banded_storage_matches_dense():
    from scipy.linalg import eig_banded
    g = build_grid(-2, 2, 16, 1.0, 1)
    L = laplacian4(g)
    w_banded = eig_banded(L.upper_bands(), lower=False, eigvals_only=True)
    assert np.allclose(np.sort(w_banded), np.linalg.eigvalsh(L.toarray()), atol=1e-9)
    f = np.sin(g.x)
    assert np.allclose(L.matvec(f), L.toarray() @ f, atol=1e-12)


def test_laplacian_exact_on_quadratics():
    g = build_grid(-3, 3, 60, 1.0, 1)
    lap = laplacian4(g).matvec(g.x**2)
    assert np.max(np.abs(lap[2:-2] - 2.0)) < 1e-10


def _interior_error(J):
    g = build_grid(0.0, 2 * np.pi, J, 1.0, 1)
    lap = laplacian4(g).matvec(np.sin(g.x))
    inner = slice(J // 4, 3 * J // 4 + 1)
    return np.max(np.abs(lap[inner] + np.sin(g.x[inner])))


def test_laplacian_fourth_order():
    e1, e2 = _interior_error(40), _interior_error(80)
    order = np.log2(e1 / e2)
    assert order >= 3.7, order


def test_first_derivative_fourth_order():
    errs = []
    for J in (40, 80):
        g = build_grid(0.0, 2 * np.pi, J, 1.0, 1)
        d = first_derivative(np.sin(g.x), g.dx)
        inner = slice(J // 4, 3 * J // 4 + 1)
        errs.append(np.max(np.abs(d[inner] - np.cos(g.x[inner]))))
    assert np.log2(errs[0] / errs[1]) >= 3.7


def test_apply_stencil_axis():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((9, 7))
    c = (1.0, 2.0, 3.0)
    assert np.allclose(apply_stencil(f, c, axis=1), apply_stencil(f.T, c, axis=0).T)


def test_simpson_weights_examples():
    g = build_grid(0, 4, 4, 1.0, 1)
    assert np.allclose(simpson_weights(g), np.array([1, 4, 2, 4, 1]) / 3.0, atol=1e-15)
    g = build_grid(0, 2, 4, 1.0, 1)
    assert abs(simpson_weights(g) @ g.x**3 - 4.0) < 1e-14
    with pytest.raises(ValueError, match="Simpson"):
        simpson_pattern(5)


@settings(max_examples=60, deadline=None)
@given(coef=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
       a=st.floats(-5, 5), width=st.floats(0.1, 10), half_J=st.integers(2, 200))
def test_simpson_exact_for_cubics(coef, a, width, half_J):
    b = a + width
    g = build_grid(a, b, 2 * half_J, 1.0, 1)
    f = np.polyval(coef, g.x)
    anti = np.polyint(coef)
    exact = np.polyval(anti, b) - np.polyval(anti, a)
    scale = max(1.0, np.sum(np.abs(f)) * g.dx)
    assert abs(simpson_weights(g) @ f - exact) < 1e-12 * scale


@settings(max_examples=30, deadline=None)
@given(half_J=st.integers(2, 500), width=st.floats(0.5, 200))
def test_simpson_pattern_sums_to_extent(half_J, width):
    g = build_grid(-width / 3, 2 * width / 3, 2 * half_J, 1.0, 1)
    span = g.L_max - g.L_min
    assert abs(simpson_weights(g).sum() - span) < 1e-12 * span


def test_interaction_matrix():
    g = build_grid(-80, 40, 600, 1.0, 1)
    W = interaction_matrix(g)
    assert np.array_equal(W, W.T)
    assert np.all(np.diag(W) == g.dx)
    assert np.all(W > 0) and np.all(W <= g.dx)
    assert W[0, -1] == pytest.approx(0.2 / np.sqrt(120.0**2 + 1), rel=1e-12)


def test_interaction_quadrature_counts_dx_once():
    # W (f * pattern) must equal the Simpson integral of kernel * f
    g = build_grid(-5, 5, 40, 1.0, 1)
    f = np.exp(-g.x**2)
    got = interaction_matrix(g) @ (f * simpson_pattern(g.J))
    want = np.array([simpson_weights(g) @ (f / np.sqrt((g.x - xj) ** 2 + 1)) for xj in g.x])
    assert np.allclose(got, want, rtol=1e-13, atol=0)
