"""Low-resolution mean, covariance and PCA coordinates.

Each downsampled image is represented by its coefficients in an orthonormal
real Fourier basis of the retained frequency disc.  In those coordinates the
imaging operator is a dense ``M x D`` matrix ``W_s`` (``D`` voxels) with
``P_s = H W_s`` for a fixed image-space basis ``H`` with orthonormal columns,
so every least-squares objective below is unchanged by the reduction.

Volumes seen through projections are further restricted to the band-limited
ball ``|j| < m / 2`` (orthonormal real Fourier basis ``B``).  Frequencies
outside the ball are never sampled by a central slice, so dropping them only
removes the near-null space of the normal equations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import core
from .cg import CgOptions, conjugate_gradient
from .core import CtfParams
from .errors import InvalidSize, SingularSystem
from .simulate import Dataset

log = logging.getLogger(__name__)

MEAN_RIDGE = 1e-6
COV_RIDGE = 1e-4


@dataclass
class LowResDataset:
    images: np.ndarray  # (n, m, m) or (n, m, m, m) without projections
    quats: np.ndarray
    ctfs: list
    sigma2: float
    size: int
    full_size: int
    use_projections: bool = True

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def scale(self) -> float:
        """Ratio between full-size projections and projections of downsampled volumes."""
        return self.full_size / self.size if self.use_projections else 1.0

    @property
    def volume_shape(self) -> tuple:
        if self.use_projections:
            return (self.size,) * 3
        return self.images.shape[1:]


@dataclass
class CovarianceModel:
    mean: np.ndarray
    covariance: np.ndarray
    eigvecs: np.ndarray  # (D, q) orthonormal columns
    eigvals: np.ndarray  # (q,) descending, nonnegative
    clamped: int = 0
    info: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.eigvals)

    def eigvolume(self, i: int) -> np.ndarray:
        return self.eigvecs[:, i].reshape(self.mean.shape)


def fourier_crop(signal: np.ndarray, m: int) -> np.ndarray:
    """Keep the central ``m**d`` frequencies; constants are preserved."""
    n = signal.shape[0]
    if m == n:
        return np.array(signal, dtype=float)
    f = core.dft_forward(signal)
    lo = n // 2 - m // 2
    sl = tuple(slice(lo, lo + m) for _ in range(signal.ndim))
    crop = f[sl] * (m / n) ** signal.ndim
    return core.dft_inverse(crop).real


def fourier_pad(signal: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad the spectrum of ``signal`` to size ``n``; inverse of :func:`fourier_crop` on band-limited input."""
    m = signal.shape[0]
    f = core.dft_forward(signal)
    out = np.zeros((n,) * signal.ndim, dtype=complex)
    lo = n // 2 - m // 2
    out[tuple(slice(lo, lo + m) for _ in range(signal.ndim))] = f * (n / m) ** signal.ndim
    return core.dft_inverse(out).real


def downsample(ds: Dataset, m: int) -> LowResDataset:
    """Fourier-crop every image to ``m x m`` and rescale operators and noise."""
    n = ds.size
    if m > n or m < 2 or m % 2:
        raise InvalidSize(f"downsampled size must be even and in [2, {n}], got {m}")
    images = np.stack([fourier_crop(np.asarray(im, dtype=float), m) for im in ds.images]) \
        if ds.n_images else np.zeros((0,) + (m,) * (ds.images.ndim - 1))
    dim = ds.images.ndim - 1
    sigma2 = ds.sigma2 * (m / n) ** dim
    ctfs = []
    for s in range(ds.n_images):
        c = ds.operator(s).ctf
        ctfs.append(replace(c, pixel_size_A=c.pixel_size_A * n / m))
    return LowResDataset(images, np.asarray(ds.quats), ctfs, sigma2, m, n, ds.use_projections)


# ---------------------------------------------------------------------------
# reduced operators


def _half_disc(m: int):
    """DC index and the lexicographically positive half of the frequency disc."""
    j = core.image_freqs(m)[core.image_mask(m).ravel()]
    pos = (j[:, 0] > 0) | ((j[:, 0] == 0) & (j[:, 1] > 0))
    return j[pos]


def image_basis(m: int) -> np.ndarray:
    """Orthonormal real basis ``H`` (pixels x M) of the retained image spectrum."""
    jp = _half_disc(m)
    u = core.spatial_points(m)
    ux, uy = np.meshgrid(u, u, indexing="ij")
    ph = np.pi * (np.outer(jp[:, 0], ux.ravel()) + np.outer(jp[:, 1], uy.ravel()))
    cols = [np.full(m * m, 1.0 / m)]
    cols += list(np.sqrt(2.0) / m * np.cos(ph))
    cols += list(np.sqrt(2.0) / m * np.sin(ph))
    return np.array(cols).T


def ball_basis(m: int) -> np.ndarray:
    """Orthonormal real basis ``B`` (m**3 x D_b) of volumes band-limited to ``|j| < m/2``."""
    j = core.freq_indices(m)
    jj = np.array(np.meshgrid(j, j, j, indexing="ij")).reshape(3, -1).T
    jj = jj[(jj**2).sum(axis=1) < (m / 2.0) ** 2]
    pos = (jj[:, 0] > 0) | ((jj[:, 0] == 0) & (jj[:, 1] > 0)) | (
        (jj[:, 0] == 0) & (jj[:, 1] == 0) & (jj[:, 2] > 0)
    )
    jp = jj[pos]
    u = core.spatial_points(m)
    uu = np.array(np.meshgrid(u, u, u, indexing="ij")).reshape(3, -1)
    ph = np.pi * (jp @ uu)
    c = m**-1.5
    cols = [np.full(m**3, c)] + list(np.sqrt(2.0) * c * np.cos(ph)) + list(np.sqrt(2.0) * c * np.sin(ph))
    return np.array(cols).T


def reduced_operator(quat, ctf: CtfParams, m: int, scale: float = 1.0) -> np.ndarray:
    """Matrix ``W`` (M x m**3) with ``project(v) = scale * H @ W @ v.ravel()``."""
    rot = core.Rotation(tuple(quat))
    jp = _half_disc(m)
    j = np.vstack([np.zeros((1, 2)), jp])
    k = np.hstack([j / 2.0, np.zeros((len(j), 1))]) @ rot.matrix
    u = core.spatial_points(m)
    ex, ey, ez = (np.exp(-2j * np.pi * np.outer(k[:, i], u)) for i in range(3))
    a = (ex[:, :, None, None] * ey[:, None, :, None] * ez[:, None, None, :]).reshape(len(k), -1)
    if ctf.enabled:
        c = core.ctf_eval(ctf, np.sqrt((j**2).sum(axis=1)) / (m * ctf.pixel_size_A))
    else:
        c = np.ones(len(j))
    a = a * c[:, None]
    rows = [a[:1].real, np.sqrt(2.0) * a[1:].real, -np.sqrt(2.0) * a[1:].imag]
    return np.vstack(rows) * (scale / m)


@dataclass
class ReducedProblem:
    """Per-image data ``yhat_s`` and operators ``W_s B`` in reduced coordinates.

    ``basis`` maps reduced volume coordinates to voxels (``None`` means the
    identity).
    """

    data: np.ndarray  # (n, M)
    ops: Optional[np.ndarray]  # (n, M, D_b) or None for identity operators
    sigma2: float
    shape: tuple
    basis: Optional[np.ndarray] = None

    def to_voxels(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs if self.basis is None else self.basis @ coeffs

    def to_coeffs(self, vol: np.ndarray) -> np.ndarray:
        return vol if self.basis is None else self.basis.T @ vol

    @property
    def n_images(self) -> int:
        return len(self.data)

    @property
    def dim(self) -> int:
        """Number of reduced volume coordinates."""
        return int(np.prod(self.shape)) if self.basis is None else self.basis.shape[1]

    def forward(self, v: np.ndarray) -> np.ndarray:
        """``W_s v`` for every image; ``v`` is flat."""
        if self.ops is None:
            return np.broadcast_to(v, self.data.shape)
        return self.ops @ v

    def gram_apply(self, v: np.ndarray) -> np.ndarray:
        """``(1/n) sum_s W_s^T W_s v``."""
        if self.ops is None:
            return v.copy()
        wv = self.ops @ v
        return np.einsum("smd,sm->d", self.ops, wv) / self.n_images


def reduce(lds: LowResDataset) -> ReducedProblem:
    n = lds.n_images
    if not lds.use_projections:
        return ReducedProblem(lds.images.reshape(n, -1).astype(float), None, lds.sigma2,
                              lds.volume_shape)
    m = lds.size
    h = image_basis(m)
    b = ball_basis(m)
    data = lds.images.reshape(n, -1) @ h
    ops = np.zeros((n, h.shape[1], b.shape[1]))
    for s in range(n):
        ops[s] = reduced_operator(lds.quats[s], lds.ctfs[s], m, lds.scale) @ b
    return ReducedProblem(data, ops, lds.sigma2, lds.volume_shape, b)


def _as_problem(x) -> ReducedProblem:
    return x if isinstance(x, ReducedProblem) else reduce(x)


# ---------------------------------------------------------------------------
# estimators


def estimate_mean(lds, cg_opts: Optional[CgOptions] = None, ridge: float = MEAN_RIDGE):
    """Least-squares mean volume from the normal equations, solved by CG."""
    prob = _as_problem(lds)
    if prob.n_images < 1:
        raise ValueError("need at least one image")
    cg_opts = cg_opts or CgOptions(tol=1e-6, maxiter=200)
    if prob.ops is None:
        scale = 1.0
        rhs = prob.data.mean(axis=0)
    else:
        scale = np.einsum("smd,smd->", prob.ops, prob.ops) / prob.n_images / prob.dim
        rhs = np.einsum("smd,sm->d", prob.ops, prob.data) / prob.n_images
    tau = ridge * scale
    mu, info = conjugate_gradient(lambda v: prob.gram_apply(v) + tau * v, rhs, cg_opts)
    log.info("mean: %d CG iterations, residual %.2e", info.iterations, info.residual)
    return prob.to_voxels(mu).reshape(prob.shape)


def covariance_rhs(prob: ReducedProblem, mean: np.ndarray) -> np.ndarray:
    """``(1/n) sum_s W_s^T [(y_s - W_s mu)(y_s - W_s mu)^T - sigma2 I] W_s``."""
    mu = prob.to_coeffs(np.asarray(mean, dtype=float).ravel())
    res = prob.data - prob.forward(mu)
    if prob.ops is None:
        return (res.T @ res) / prob.n_images - prob.sigma2 * np.eye(prob.dim)
    bp = np.einsum("smd,sm->sd", prob.ops, res)
    gram = np.einsum("smd,sme->de", prob.ops, prob.ops)
    return (bp.T @ bp - prob.sigma2 * gram) / prob.n_images


def covariance_operator(prob: ReducedProblem, sigma: np.ndarray, chunk: int = 256) -> np.ndarray:
    """``(1/n) sum_s W_s^T W_s Sigma W_s^T W_s``."""
    if prob.ops is None:
        return sigma.copy()
    out = np.zeros_like(sigma)
    n, mm, d = prob.ops.shape
    for a in range(0, n, chunk):
        w = prob.ops[a : a + chunk]
        x = (w.reshape(-1, d) @ sigma).reshape(len(w), mm, d)
        y = np.matmul(x, w.transpose(0, 2, 1))
        z = np.matmul(y, w)
        out += w.reshape(-1, d).T @ z.reshape(-1, d)
    return out / n


def estimate_covariance(
    lds, mean, cg_opts: Optional[CgOptions] = None, ridge: float = COV_RIDGE
) -> np.ndarray:
    """Least-squares covariance in reduced coordinates (``D_b x D_b``), symmetrized.

    Use :func:`covariance_voxels` to expand it to a voxel-space matrix.
    """
    prob = _as_problem(lds)
    cg_opts = cg_opts or CgOptions(tol=1e-6, maxiter=200)
    rhs = covariance_rhs(prob, mean)
    if prob.ops is None:
        scale = 1.0
    else:
        g = np.einsum("smd,smd->s", prob.ops, prob.ops)
        scale = float(np.mean(g**2)) / prob.dim**2
    tau = ridge * scale
    precond = None
    if prob.ops is not None:
        # Kronecker approximation G (x) G of the operator, G the mean Gram matrix
        gram = np.einsum("smd,sme->de", prob.ops, prob.ops) / prob.n_images
        ev, evec = np.linalg.eigh(gram)
        inv = 1.0 / np.maximum(ev, ev.max() * 1e-8)
        pinv = (evec * inv) @ evec.T
        precond = lambda r: pinv @ r @ pinv  # noqa: E731
    sig, info = conjugate_gradient(
        lambda s: covariance_operator(prob, s) + tau * s, rhs, cg_opts, precond=precond
    )
    log.info("covariance: %d CG iterations, residual %.2e", info.iterations, info.residual)
    return 0.5 * (sig + sig.T)


def covariance_voxels(prob: ReducedProblem, cov: np.ndarray) -> np.ndarray:
    return cov if prob.basis is None else prob.basis @ cov @ prob.basis.T


def top_eigenvolumes(cov: np.ndarray, q: int):
    """Leading ``q`` eigenpairs; negative eigenvalues are clamped to zero.

    Returns ``(vecs, vals, n_clamped)`` with orthonormal columns in ``vecs``.
    """
    cov = np.asarray(cov, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1][:q]
    vals, vecs = vals[order], vecs[:, order]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(vecs.shape[1])])
    neg = vals < 0
    if neg.any():
        log.warning("clamping %d negative covariance eigenvalues", int(neg.sum()))
    return vecs, np.where(neg, 0.0, vals), int(neg.sum())


def fit_model(lds, q: int, cg_opts: Optional[CgOptions] = None, cov_cg_opts=None) -> CovarianceModel:
    prob = _as_problem(lds)
    mean = estimate_mean(prob, cg_opts)
    cov = estimate_covariance(prob, mean, cov_cg_opts or cg_opts)
    vecs, vals, clamped = top_eigenvolumes(cov, q)
    vecs = prob.to_voxels(vecs)
    return CovarianceModel(mean, covariance_voxels(prob, cov), vecs, vals, clamped)


def pca_coordinates(lds, model: CovarianceModel) -> np.ndarray:
    """Wiener-filtered coordinates ``beta_s`` (n x q) of every image.

    Minimizes ``||y_s - P_s(mu + V beta)||**2 / sigma2 + ||Lambda**-1/2 beta||**2``.
    Components with zero eigenvalue are dropped (their coordinate is 0).  With
    ``sigma2 == 0`` the unregularized least-squares solution is returned.
    """
    prob = _as_problem(lds)
    keep = model.eigvals > 0
    v = prob.to_coeffs(model.eigvecs[:, keep])
    lam = model.eigvals[keep]
    betas = np.zeros((prob.n_images, model.q))
    if not keep.any():
        return betas
    res = prob.data - prob.forward(prob.to_coeffs(np.asarray(model.mean).ravel()))
    for s in range(prob.n_images):
        a = v if prob.ops is None else prob.ops[s] @ v
        if prob.sigma2 > 0:
            lhs = a.T @ a / prob.sigma2 + np.diag(1.0 / lam)
            rhs = a.T @ res[s] / prob.sigma2
            try:
                beta = np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError as exc:  # pragma: no cover
                raise SingularSystem(str(exc)) from exc
        else:
            beta = np.linalg.lstsq(a, res[s], rcond=None)[0]
        betas[s, keep] = beta
    return betas


def pca_objective(lds, model: CovarianceModel, s: int, beta: np.ndarray) -> float:
    prob = _as_problem(lds)
    keep = model.eigvals > 0
    vol = np.asarray(model.mean).ravel() + model.eigvecs[:, keep] @ np.asarray(beta)[keep]
    vol = prob.to_coeffs(vol)
    fwd = vol if prob.ops is None else prob.ops[s] @ vol
    data = np.sum((prob.data[s] - fwd) ** 2) / prob.sigma2
    return float(data + np.sum(np.asarray(beta)[keep] ** 2 / model.eigvals[keep]))
