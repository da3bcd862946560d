"""Affinity graphs on PCA coordinates and their normalized Laplacian spectra."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import io
from .errors import Disconnected, EigNoConvergence, IsolatedNode, SizeMismatch

log = logging.getLogger(__name__)

GAUSSIAN_CUTOFF = 1e-12
DENSE_LIMIT = 2000
BRUTE_FORCE_LIMIT = 5000
EIG_RESIDUAL = 1e-8
SIGN_THRESHOLD = 1e-9


@dataclass
class AffinityGraph:
    weights: sp.csr_matrix
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()


def _finish(w: sp.spmatrix, kind: str, params: dict) -> AffinityGraph:
    w = sp.csr_matrix(w)
    w.setdiag(0.0)
    w.eliminate_zeros()
    w.sort_indices()
    g = AffinityGraph(w, kind, params)
    if g.n > 1:
        ncomp, _ = connected_components(w, directed=False)
        if ncomp > 1:
            raise Disconnected(f"{kind} graph has {ncomp} connected components")
    return g


def _as_points(betas) -> np.ndarray:
    b = np.asarray(betas, dtype=float)
    return b[:, None] if b.ndim == 1 else b


def gaussian_weights(betas, sigma_w: float, chunk: int = 1024, alpha: float = 0.0) -> AffinityGraph:
    """``W_ij = exp(-|b_i - b_j|^2 / (2 sigma_w^2))``; entries below 1e-12 dropped.

    ``alpha > 0`` applies the diffusion-map density normalization
    ``W <- D^-alpha W D^-alpha``, where ``D`` counts the unit self-affinity.  With ``alpha = 1`` the Laplacian no longer
    depends on how unevenly the points sample the manifold.
    """
    if not sigma_w > 0:
        raise ValueError("sigma_w must be positive")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    b = _as_points(betas)
    n = len(b)
    rows, cols, vals = [], [], []
    for a in range(0, n, chunk):
        d2 = cdist(b[a : a + chunk], b, "sqeuclidean")
        w = np.exp(-d2 / (2.0 * sigma_w**2))
        i, j = np.nonzero(w >= GAUSSIAN_CUTOFF)
        rows.append(i + a)
        cols.append(j)
        vals.append(w[i, j])
    w = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    # the kernel is symmetric in exact arithmetic; enforce it bitwise
    w = sp.csr_matrix(w)
    w = (w + w.T) * 0.5
    params = {"sigma_w": float(sigma_w)}
    if alpha:
        d = sp.diags(np.asarray(w.sum(axis=1)).ravel() ** -alpha)
        w = d @ w @ d
        params["alpha"] = float(alpha)
    return _finish(w, "gaussian", params)


def _knn_brute(b: np.ndarray, k: int, rows=None, chunk: int = 256) -> np.ndarray:
    n = len(b)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    out = np.empty((len(rows), k), dtype=np.int64)
    for a in range(0, len(rows), chunk):
        idx = rows[a : a + chunk]
        d2 = cdist(b[idx], b, "sqeuclidean")
        d2[np.arange(len(idx)), idx] = np.inf
        # stable sort: equal distances keep ascending index order
        out[a : a + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def _knn_tree(b: np.ndarray, k: int) -> np.ndarray:
    n = len(b)
    kk = min(n, k + 2)
    dist, nbr = cKDTree(b).query(b, k=kk)
    out = np.empty((n, k), dtype=np.int64)
    redo = []
    for i in range(n):
        keep = nbr[i] != i
        d, j = dist[i][keep], nbr[i][keep]
        order = np.lexsort((j, d))
        d, j = d[order], j[order]
        if len(j) > k and d[k - 1] == d[k]:
            redo.append(i)
            continue
        out[i] = j[:k]
    if redo:
        out[redo] = _knn_brute(b, k, redo)
    return out


def nearest_neighbors(betas, k: int, method: str = "auto") -> np.ndarray:
    """Exact ``k`` nearest neighbors (self excluded), ties broken by smaller index."""
    b = _as_points(betas)
    n = len(b)
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    if method == "brute" or (method == "auto" and n <= BRUTE_FORCE_LIMIT):
        return _knn_brute(b, k)
    return _knn_tree(b, k)


def knn_weights(betas, k: int, method: str = "auto") -> AffinityGraph:
    """Binary symmetric KNN graph: ``W_ij = 1`` if either point is among the other's k nearest."""
    nbr = nearest_neighbors(betas, k, method)
    n = len(nbr)
    rows = np.repeat(np.arange(n), k)
    a = sp.csr_matrix((np.ones(n * k), (rows, nbr.ravel())), shape=(n, n))
    w = ((a + a.T) > 0).astype(float)
    return _finish(w, "sym-knn", {"k": int(k)})


def median_knn_distance(betas, k: int = 10) -> float:
    """Median distance to the k-th neighbor; a scale for choosing ``sigma_w``."""
    b = _as_points(betas)
    nbr = nearest_neighbors(b, k)
    return float(np.median(np.linalg.norm(b - b[nbr[:, -1]], axis=1)))


def normalized_laplacian(g: AffinityGraph) -> sp.csr_matrix:
    """``L = I - D^-1/2 W D^-1/2``."""
    deg = g.degrees()
    if np.any(deg <= 0):
        raise IsolatedNode(f"{int(np.sum(deg <= 0))} nodes have zero degree")
    dinv = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(g.n, format="csr") - dinv @ g.weights @ dinv
    lap = sp.csr_matrix(lap)
    return sp.csr_matrix((lap + lap.T) * 0.5)


@dataclass
class SpectralBasis:
    """The ``r`` lowest Laplacian eigenpairs; ``eigvecs[:, l]`` is ``phi^(l)``."""

    eigvals: np.ndarray
    eigvecs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eigvals = np.asarray(self.eigvals, dtype=float)
        self.eigvecs = np.asarray(self.eigvecs, dtype=float)
        if self.eigvecs.ndim != 2 or self.eigvecs.shape[1] != len(self.eigvals):
            raise SizeMismatch("eigvecs must be (n, r) with r = len(eigvals)")

    @property
    def n(self) -> int:
        return self.eigvecs.shape[0]

    @property
    def r(self) -> int:
        return self.eigvecs.shape[1]

    def prefix(self, r: int) -> "SpectralBasis":
        if not 1 <= r <= self.r:
            raise ValueError(f"prefix length {r} outside 1..{self.r}")
        return SpectralBasis(self.eigvals[:r].copy(), self.eigvecs[:, :r].copy(), dict(self.meta))

    def save(self, csv_path, json_path=None) -> None:
        io.write_matrix_csv(csv_path, self.eigvecs, header=["%.17g" % v for v in self.eigvals])
        if json_path is not None:
            io.write_json(json_path, {"n": self.n, "r": self.r, **self.meta})

    @classmethod
    def load(cls, csv_path, json_path=None) -> "SpectralBasis":
        head, data = io.read_matrix_csv(csv_path)
        vals = np.array([float(h) for h in head])
        meta = {}
        if json_path is not None and Path(json_path).exists():
            meta = io.read_json(json_path)
            meta.pop("n", None)
            meta.pop("r", None)
        return cls(vals, data.reshape(-1, len(vals)), meta)


def apply_sign_convention(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its first entry with magnitude above 1e-9 is positive."""
    vecs = np.array(vecs, dtype=float)
    for c in range(vecs.shape[1]):
        big = np.nonzero(np.abs(vecs[:, c]) > SIGN_THRESHOLD)[0]
        if len(big) and vecs[big[0], c] < 0:
            vecs[:, c] = -vecs[:, c]
    return vecs


def _lanczos(op, n: int, steps: int, locked: np.ndarray, rng) -> tuple:
    """Lanczos with full reorthogonalization against its basis and ``locked``."""
    q = np.zeros((n, steps + 1))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    v = rng.standard_normal(n)
    for _ in range(2):
        v -= locked @ (locked.T @ v)
    q[:, 0] = v / np.linalg.norm(v)
    m = steps
    for j in range(steps):
        w = op(q[:, j])
        alpha[j] = q[:, j] @ w
        for _ in range(2):
            w -= q[:, : j + 1] @ (q[:, : j + 1].T @ w)
            w -= locked @ (locked.T @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] < 1e-12 * max(1.0, abs(alpha[j])):
            m = j + 1
            break
        q[:, j + 1] = w / beta[j]
    theta, s = scipy.linalg.eigh_tridiagonal(alpha[:m], beta[: m - 1])
    return theta, q[:, :m] @ s


def _lanczos_smallest(lap: sp.csr_matrix, r: int, shift: float = 1e-6, max_runs: int = 60):
    """Shift-invert Lanczos with locking.

    Each run works in the orthogonal complement of the locked vectors, so
    repeated eigenvalues are recovered one copy per run.  Once ``r`` pairs are
    locked, a further run must find nothing below the ``r``-th value.
    """
    n = lap.shape[0]
    lu = splu(sp.csc_matrix(lap + shift * sp.identity(n)))
    rng = np.random.default_rng(0)
    locked = np.zeros((n, 0))
    lvals = np.zeros(0)
    steps = min(n, max(2 * r + 20, 40))
    for _ in range(max_runs):
        free = n - locked.shape[1]
        if free <= 0:
            break
        theta, y = _lanczos(lu.solve, n, min(steps, free), locked, rng)
        new_vecs, new_vals = [], []
        for i in np.argsort(theta)[::-1]:
            vec = y[:, i] / np.linalg.norm(y[:, i])
            lam = float(vec @ (lap @ vec))
            if np.linalg.norm(lap @ vec - lam * vec) > EIG_RESIDUAL:
                break
            new_vecs.append(vec)
            new_vals.append(lam)
        if not new_vecs:
            steps = min(n, 2 * steps)
            continue
        if len(lvals) >= r and new_vals[0] >= np.sort(lvals)[r - 1] - EIG_RESIDUAL:
            break
        locked = np.column_stack([locked] + new_vecs)
        lvals = np.concatenate([lvals, new_vals])
    else:
        raise EigNoConvergence("Lanczos did not converge")
    if len(lvals) < r:
        raise EigNoConvergence(f"only {len(lvals)} of {r} eigenpairs converged")
    idx = np.argsort(lvals, kind="stable")[:r]
    return lvals[idx], locked[:, idx]


def smallest_eigenpairs(lap, r: int, method: str = "auto") -> SpectralBasis:
    """The ``r`` smallest eigenpairs of a symmetric Laplacian.

    Dense ``eigh`` for ``n <= 2000``; shift-invert Lanczos with full
    reorthogonalization and deflation otherwise.
    """
    n = lap.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    if method == "dense" or (method == "auto" and n <= DENSE_LIMIT):
        dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap, dtype=float)
        vals, vecs = np.linalg.eigh(dense)
        vals, vecs = vals[:r], vecs[:, :r]
    else:
        vals, vecs = _lanczos_smallest(sp.csr_matrix(lap), r)
    vecs = apply_sign_convention(vecs)
    res = np.linalg.norm(lap @ vecs - vecs * vals, axis=0)
    if np.any(res > EIG_RESIDUAL):
        raise EigNoConvergence(f"eigen-residual {res.max():.2e} above {EIG_RESIDUAL}")
    vals = np.where((vals < 0) & (vals > -EIG_RESIDUAL), 0.0, vals)
    return SpectralBasis(vals, vecs)


def build_graph(betas, kind: str = "sym-knn", k: int = 10, sigma_w=None, alpha: float = 0.0) -> AffinityGraph:
    if kind in ("knn", "sym-knn"):
        return knn_weights(betas, k)
    if kind == "gaussian":
        if sigma_w is None:
            raise ValueError("gaussian graph needs sigma_w")
        return gaussian_weights(betas, sigma_w, alpha=alpha)
    raise ValueError(f"unknown graph kind {kind!r}")


def embed(betas, r: int, kind: str = "sym-knn", k: int = 10, sigma_w=None,
          alpha: float = 0.0) -> SpectralBasis:
    """Graph construction followed by the ``r`` lowest Laplacian eigenvectors."""
    g = build_graph(betas, kind, k, sigma_w, alpha)
    basis = smallest_eigenpairs(normalized_laplacian(g), r)
    basis.meta = {"graph": g.kind, **g.params}
    return basis
