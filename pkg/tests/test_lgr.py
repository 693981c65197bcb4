import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as L

from lunardescent.lgr import (compute_differentiation_matrix, compute_lgr_nodes, compute_quadrature_weights,
                              interpolate, lagrange_basis, lgr_grid, time_map)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13, 30, 60])
def test_nodes_are_radau_roots_plus_endpoint(n):
    nodes = compute_lgr_nodes(n)
    assert nodes.shape == (n + 1,)
    assert nodes[0] == -1.0 and nodes[-1] == 1.0
    assert np.all(np.diff(nodes) > 0)
    c = np.zeros(n + 1)
    c[n - 1] += 1
    c[n] += 1
    assert np.max(np.abs(L.legval(nodes[:-1], c))) < 1e-12 * n * n


@pytest.mark.parametrize("n", range(1, 16))
def test_weights(n):
    w = compute_quadrature_weights(compute_lgr_nodes(n))
    assert w.shape == (n,)
    assert np.all(w > 0)
    assert abs(w.sum() - 2.0) < 1e-13
    assert abs(w[0] - 2.0 / n**2) < 1e-13


def test_weights_n3_closed_form():
    w = lgr_grid(3).weights
    expected = [2 / 9, (16 + np.sqrt(6)) / 18, (16 - np.sqrt(6)) / 18]
    assert np.allclose(w, expected, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 14), seed=st.integers(0, 2**31 - 1))
def test_quadrature_exact_to_degree_2n_minus_2(n, seed):
    c = np.random.default_rng(seed).uniform(-1, 1, 2 * n - 1)
    g = lgr_grid(n)
    exact = L.legval(1.0, L.legint(c)) - L.legval(-1.0, L.legint(c))
    assert abs(g.weights @ L.legval(g.collocation_nodes, c) - exact) < 1e-12


def test_quadrature_not_exact_beyond():
    n = 4
    g = lgr_grid(n)
    tau = g.collocation_nodes
    approx = g.weights @ tau ** (2 * n - 1 + 1)
    assert abs(approx - 2.0 / (2 * n + 1)) > 1e-6


@pytest.mark.parametrize("n", [1, 4, 10, 25])
def test_differentiation_exact_for_degree_n(n, rng):
    nodes = compute_lgr_nodes(n)
    D = compute_differentiation_matrix(nodes)
    assert D.shape == (n, n + 1)
    assert np.max(np.abs(D.sum(axis=1))) < 1e-11 * n * n
    c = rng.normal(size=n + 1)
    p = np.polynomial.Polynomial(c)
    err = D @ p(nodes) - p.deriv()(nodes[:-1])
    assert np.max(np.abs(err)) < 1e-9 * max(1, n) ** 2


def test_interpolation_reproduces_polynomials(rng):
    g = lgr_grid(6)
    p = np.polynomial.Polynomial(rng.normal(size=7))
    for tau in (-1.0, -0.3, 0.0, 0.77, 1.0):
        assert abs(interpolate(g, p(g.nodes), tau) - p(tau)) < 1e-12
    vals = np.column_stack([p(g.nodes), 2 * p(g.nodes)])
    assert np.allclose(interpolate(g, vals, 0.1), [p(0.1), 2 * p(0.1)])


def test_lagrange_basis_partition_of_unity():
    g = lgr_grid(9)
    for tau in np.linspace(-1, 1, 11):
        assert abs(lagrange_basis(g.nodes, tau).sum() - 1) < 1e-12
    b = lagrange_basis(g.nodes, g.nodes[3])
    assert b[3] == 1.0 and np.count_nonzero(b) == 1


def test_control_extrapolation_is_lagrange_at_plus_one(rng):
    g = lgr_grid(7)
    p = np.polynomial.Polynomial(rng.normal(size=7))
    assert abs(g.control_extrapolation() @ p(g.collocation_nodes) - p(1.0)) < 1e-10


def test_grid_is_cached_and_read_only():
    a, b = lgr_grid(5), lgr_grid(5)
    assert a is b
    with pytest.raises(ValueError):
        a.nodes[0] = 3.0


@pytest.mark.parametrize("bad", [0, -2, 2.5])
def test_invalid_n(bad):
    with pytest.raises(ValueError):
        lgr_grid(bad)


def test_interpolate_rejects_bad_input():
    g = lgr_grid(3)
    with pytest.raises(ValueError):
        interpolate(g, np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        interpolate(g, np.zeros(4), 1.5)


def test_time_map():
    assert np.allclose(time_map(2.0, 6.0, [-1, 0, 1]), [2, 4, 6])
    with pytest.raises(ValueError):
        time_map(1.0, 1.0, 0.0)
