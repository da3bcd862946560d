import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from specvol import graph
from specvol.errors import Disconnected, IsolatedNode


def circle(n, noise=0.0, seed=0):
    t = 2 * np.pi * np.arange(n) / n
    p = np.column_stack([np.cos(t), np.sin(t)])
    if noise:
        p += noise * np.random.default_rng(seed).standard_normal(p.shape)
    return p


def cycle_laplacian(n):
    w = sp.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1], format="lil")
    w[0, n - 1] = w[n - 1, 0] = 1
    return graph.normalized_laplacian(graph.AffinityGraph(sp.csr_matrix(w), "cycle"))


def test_gaussian_formula():
    b = np.array([[0.0, 0.0], [0.0, 0.0], [np.sqrt(2.0) * 0.3, 0.0]])
    g = graph.gaussian_weights(b, 0.3)
    w = g.weights.toarray()
    assert w[0, 1] == 1.0
    assert w[0, 2] == pytest.approx(np.exp(-1.0), rel=1e-14)
    np.testing.assert_array_equal(np.diag(w), 0.0)
    assert (g.weights != g.weights.T).nnz == 0


def test_gaussian_monotone_on_circle():
    w = graph.gaussian_weights(circle(100), 0.2).weights.toarray()
    for i in range(100):
        assert w[i, (i + 1) % 100] > w[i, (i + 2) % 100]


def test_gaussian_sparsifies_and_detects_disconnection():
    b = np.array([[0.0], [0.1], [50.0], [50.1]])
    with pytest.raises(Disconnected):
        graph.gaussian_weights(b, 0.1)
    with pytest.raises(ValueError):
        graph.gaussian_weights(b, 0.0)


def test_knn_collinear():
    g = graph.knn_weights(np.array([[0.0], [1.0], [2.0]]), 1)
    edges = {tuple(e) for e in np.argwhere(np.triu(g.weights.toarray()))}
    assert edges == {(0, 1), (1, 2)}


def test_knn_ties_go_to_smaller_index():
    b = np.array([[0.0], [-1.0], [1.0], [5.0]])
    nn = graph.nearest_neighbors(b, 1, method="brute")
    assert nn[0, 0] == 1
    np.testing.assert_array_equal(graph.nearest_neighbors(b, 1, method="tree"), nn)


def test_knn_complete_graph():
    b = np.random.default_rng(1).standard_normal((12, 3))
    w = graph.knn_weights(b, 11).weights.toarray()
    np.testing.assert_array_equal(w, 1.0 - np.eye(12))


def test_knn_circle_degrees():
    g = graph.knn_weights(circle(200), 2)
    assert set(g.degrees().astype(int)) <= {2, 3, 4}


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_tree_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    # integer coordinates create many exact ties
    b = rng.integers(0, 4, size=(60, 2)).astype(float)
    np.testing.assert_array_equal(graph.nearest_neighbors(b, k, "tree"),
                                  graph.nearest_neighbors(b, k, "brute"))


def test_knn_bad_k():
    with pytest.raises(ValueError):
        graph.knn_weights(np.zeros((3, 1)) + np.arange(3)[:, None], 3)


def test_laplacian_k3():
    g = graph.knn_weights(np.array([[0.0], [1.0], [3.0]]), 2)
    lap = graph.normalized_laplacian(g).toarray()
    np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0.0, 1.5, 1.5], atol=1e-14)


def test_laplacian_null_vector_and_bounds():
    b = np.random.default_rng(3).standard_normal((80, 2))
    g = graph.knn_weights(b, 6)
    lap = graph.normalized_laplacian(g)
    assert (lap != lap.T).nnz == 0
    d = np.sqrt(g.degrees())
    np.testing.assert_allclose(lap @ d, 0.0, atol=1e-12)
    ev = np.linalg.eigvalsh(lap.toarray())
    assert ev.min() > -1e-12 and ev.max() <= 2 + 1e-8


def test_isolated_node():
    w = sp.csr_matrix(np.array([[0.0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    with pytest.raises(IsolatedNode):
        graph.normalized_laplacian(graph.AffinityGraph(w, "x"))


def test_cycle_spectrum_pairs():
    basis = graph.smallest_eigenpairs(cycle_laplacian(64), 5)
    expect = 1 - np.cos(2 * np.pi * np.array([0, 1, 1, 2, 2]) / 64)
    np.testing.assert_allclose(basis.eigvals, expect, atol=1e-12)
    assert abs(basis.eigvals[1] - basis.eigvals[2]) <= 1e-6


def test_r1_is_degree_vector():
    g = graph.knn_weights(np.random.default_rng(4).standard_normal((50, 2)), 5)
    basis = graph.smallest_eigenpairs(graph.normalized_laplacian(g), 1)
    assert basis.eigvals[0] <= 1e-10
    d = np.sqrt(g.degrees())
    np.testing.assert_allclose(basis.eigvecs[:, 0], d / np.linalg.norm(d), atol=1e-10)


@pytest.mark.parametrize("method", ["dense", "lanczos"])
def test_matches_dense_oracle(method):
    b = np.random.default_rng(5).standard_normal((200, 3))
    lap = graph.normalized_laplacian(graph.knn_weights(b, 8))
    basis = graph.smallest_eigenpairs(lap, 8, method=method)
    ref = np.linalg.eigvalsh(lap.toarray())[:8]
    np.testing.assert_allclose(basis.eigvals, ref, atol=1e-7)
    np.testing.assert_allclose(basis.eigvecs.T @ basis.eigvecs, np.eye(8), atol=1e-8)
    res = np.linalg.norm(lap @ basis.eigvecs - basis.eigvecs * basis.eigvals, axis=0)
    assert res.max() <= 1e-8


def test_lanczos_repeated_eigenvalues():
    # complete graph: eigenvalue n/(n-1) with multiplicity n-1
    n = 300
    lap = graph.normalized_laplacian(graph.knn_weights(np.arange(n, dtype=float)[:, None], n - 1))
    basis = graph.smallest_eigenpairs(lap, 6, method="lanczos")
    np.testing.assert_allclose(basis.eigvals, [0] + [n / (n - 1)] * 5, atol=1e-9)


def test_sign_convention():
    v = np.array([[0.0, 1e-12], [-2.0, -1.0], [1.0, 3.0]])
    out = graph.apply_sign_convention(v)
    np.testing.assert_array_equal(out[:, 0], [0.0, 2.0, -1.0])
    np.testing.assert_array_equal(out[:, 1], [-1e-12, 1.0, -3.0])


def test_embedding_of_circle():
    basis = graph.embed(circle(400, 0.01), 5, "sym-knn", 10)
    assert basis.meta == {"graph": "sym-knn", "k": 10}
    np.testing.assert_allclose(np.sum(basis.eigvecs**2, axis=0), 1.0, atol=1e-8)
    rad = np.hypot(basis.eigvecs[:, 1], basis.eigvecs[:, 2])
    assert np.std(rad) / np.mean(rad) <= 0.15


def test_basis_save_load(tmp_path):
    basis = graph.embed(circle(50), 4, "sym-knn", 4)
    basis.save(tmp_path / "b.csv", tmp_path / "b.json")
    back = graph.SpectralBasis.load(tmp_path / "b.csv", tmp_path / "b.json")
    np.testing.assert_array_equal(back.eigvals, basis.eigvals)
    np.testing.assert_array_equal(back.eigvecs, basis.eigvecs)
    assert back.meta == basis.meta
    assert back.prefix(2).r == 2


def test_density_normalization_formula():
    b = np.random.default_rng(3).standard_normal((30, 2))
    plain = graph.gaussian_weights(b, 0.8).weights.toarray()
    d = plain.sum(axis=1) + 1.0  # degrees include the unit self-affinity
    expect = plain / np.outer(d, d)
    np.fill_diagonal(expect, 0.0)
    got = graph.gaussian_weights(b, 0.8, alpha=1.0)
    np.testing.assert_allclose(got.weights.toarray(), expect, rtol=1e-12)
    assert got.params["alpha"] == 1.0
    with pytest.raises(ValueError):
        graph.gaussian_weights(b, 0.8, alpha=-1.0)


def test_density_normalization_pairs_circle_eigenvalues():
    # circle sampled at the quantiles of the density 1 + 0.5 cos(2t)
    grid = np.linspace(0, 2 * np.pi, 20001)
    cdf = (grid + 0.25 * np.sin(2 * grid)) / (2 * np.pi)
    t = np.interp((np.arange(1500) + 0.5) / 1500, cdf, grid)
    p = np.column_stack([np.cos(t), np.sin(t)])
    gaps = {}
    for alpha in (0.0, 1.0):
        lam = graph.embed(p, 3, "gaussian", sigma_w=0.05, alpha=alpha).eigvals
        gaps[alpha] = abs(lam[1] - lam[2]) / lam[2]
    assert gaps[1.0] < 0.05 and gaps[0.0] > 0.5


def test_gaussian_weights_high_dimensional_points():
    b = np.random.default_rng(1).standard_normal((40, 4096))
    w = graph.gaussian_weights(b, 60.0).weights.toarray()
    i, j = 3, 17
    assert w[i, j] == pytest.approx(np.exp(-np.sum((b[i] - b[j]) ** 2) / (2 * 60.0**2)), rel=1e-12)
