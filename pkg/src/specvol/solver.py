"""Spectral volumes: weighted backprojections, kernel blocks and the block CG solve.

With a Laplacian basis ``phi`` (n x r) the reconstruction of image ``s`` is
``x_s = sqrt(n) sum_l phi_s^l alpha^l``.  The normal equations ``K alpha = b``
have

    b^l      = n**-1/2 sum_s phi_s^l P_s^T y_s
    K^{l,m}  = sum_s phi_s^l phi_s^m P_s^T P_s

and each ``P_s^T P_s`` is a convolution with a kernel sampled on a ``2N``
grid, which is what makes applying ``K`` cheap.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import core, io
from .cg import CgInfo, CgOptions, conjugate_gradient
from .errors import (
    FormatVersionMismatch,
    IndexOutOfRange,
    MissingArtifacts,
    OperatorsNotIdentity,
    ShapeMismatch,
    SizeMismatch,
)
from .graph import SpectralBasis

log = logging.getLogger(__name__)

KERNEL_EPS = 1e-8
KERNEL_FORMAT_VERSION = 1


def _phi(basis) -> np.ndarray:
    return basis.eigvecs if isinstance(basis, SpectralBasis) else np.atleast_2d(np.asarray(basis, float).T).T


def _check_lengths(ds, phi: np.ndarray) -> None:
    if phi.shape[0] != ds.n_images:
        raise SizeMismatch(f"basis has {phi.shape[0]} entries, dataset {ds.n_images} images")


def _pair_index(r: int):
    return [(a, b) for a in range(r) for b in range(a, r)]


# ---------------------------------------------------------------------------
# right-hand side


def build_backprojections(ds, basis) -> np.ndarray:
    """``b^l = n**-1/2 sum_s phi_s^l P_s^T y_s`` stacked as ``(r, N, N, N)``.

    Identity-operator datasets give volumes shaped like the images.
    """
    phi = _phi(basis)
    _check_lengths(ds, phi)
    n = ds.n_images
    w = phi.T / np.sqrt(n)
    images = np.asarray(ds.images, dtype=float)
    if not ds.use_projections:
        return np.tensordot(w, images, axes=(1, 0))
    return core.backproject_many(images, ds.operators, w)


# ---------------------------------------------------------------------------
# kernels


@dataclass
class KernelSet:
    """Real-valued Fourier data of the convolution kernels ``K^{l,m}`` (l <= m).

    ``fourier[(l, m)]`` is the ``rfftn`` of the kernel on the ``2N`` grid
    laid out for circular convolution.  Kernels are even, so their transforms
    are real and only the real part is kept.  ``gram`` replaces the kernels
    for identity-operator data (``P^T P = I``); ``shared`` holds the single
    kernel of the diagonal approximation.
    """

    n: int
    r: Optional[int]
    fourier: dict = field(default_factory=dict)
    diagonal_only: bool = False
    shared: Optional[np.ndarray] = None
    gram: Optional[np.ndarray] = None
    image_shape: tuple = ()

    @property
    def is_identity(self) -> bool:
        return self.gram is not None

    def block(self, a: int, b: int) -> Optional[np.ndarray]:
        if self.shared is not None:
            return self.shared if a == b else None
        if self.diagonal_only and a != b:
            return None
        return self.fourier[(min(a, b), max(a, b))]

    def prefix(self, r: int) -> "KernelSet":
        """Blocks of the leading ``r`` basis vectors (the same as building with ``r``)."""
        if self.r is not None and not 1 <= r <= self.r:
            raise ValueError(f"prefix length {r} outside 1..{self.r}")
        return KernelSet(
            self.n,
            r if self.r is not None else None,
            {k: v for k, v in self.fourier.items() if max(k) < r},
            self.diagonal_only,
            self.shared,
            None if self.gram is None else self.gram[:r, :r].copy(),
            self.image_shape,
        )

    def save(self, path) -> None:
        arrays = {"shared": self.shared} if self.shared is not None else {}
        if self.gram is not None:
            arrays["gram"] = self.gram
        for (a, b), v in self.fourier.items():
            arrays[f"k_{a}_{b}"] = v
        meta = {
            "version": KERNEL_FORMAT_VERSION,
            "n": self.n,
            "r": self.r,
            "diagonal_only": self.diagonal_only,
            "image_shape": list(self.image_shape),
        }
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "KernelSet":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != KERNEL_FORMAT_VERSION:
                raise FormatVersionMismatch(f"kernel file version {meta.get('version')}")
            fourier = {}
            for name in z.files:
                if name.startswith("k_"):
                    _, a, b = name.split("_")
                    fourier[(int(a), int(b))] = z[name]
            shared = z["shared"] if "shared" in z.files else None
            gram = z["gram"] if "gram" in z.files else None
        return cls(meta["n"], meta["r"], fourier, meta["diagonal_only"], shared, gram,
                   tuple(meta["image_shape"]))


def _kernel_points(ds):
    """Slice points of all images and their squared CTF weights scaled by ``1/N^2``."""
    n = ds.size
    pts, ctfs = core.stack_slices(ds.operators, n)
    return pts, ctfs**2 / n**2


def _kernels_to_fourier(grids: np.ndarray) -> np.ndarray:
    # offset 0 sits at the grid center; move it to the origin for circular use
    shifted = np.fft.ifftshift(grids.real, axes=(-3, -2, -1))
    return np.fft.rfftn(shifted, axes=(-3, -2, -1)).real


def _weighted_kernels(pts, w2, weights: np.ndarray, n: int, oversample: int) -> np.ndarray:
    """Kernels for every row of ``weights`` (T x n_images), as Fourier data."""
    vals = (weights[:, :, None] * w2[None]).reshape(len(weights), -1)
    grids = core.nudft_adjoint(pts, vals, n, oversample=oversample, eps=KERNEL_EPS)
    return _kernels_to_fourier(grids)


def identity_kernels(ds, phi: np.ndarray, diagonal_only: bool = False) -> KernelSet:
    r = phi.shape[1]
    gram = phi.T @ phi
    if diagonal_only:
        gram = np.eye(r)
    return KernelSet(ds.size, r, {}, diagonal_only, None, gram, tuple(ds.images.shape[1:]))


def build_kernels(ds, basis, oversample: int = 2) -> KernelSet:
    """Fourier data of ``K^{l,m} = sum_s phi_s^l phi_s^m P_s^T P_s`` for ``l <= m``."""
    if oversample != 2:
        raise ValueError("linear convolution needs oversample=2")
    phi = _phi(basis)
    _check_lengths(ds, phi)
    r = phi.shape[1]
    if not ds.use_projections:
        return identity_kernels(ds, phi)
    n = ds.size
    pairs = _pair_index(r)
    weights = np.stack([phi[:, a] * phi[:, b] for a, b in pairs])
    pts, w2 = _kernel_points(ds)
    four = _weighted_kernels(pts, w2, weights, n, oversample)
    return KernelSet(n, r, {p: four[i] for i, p in enumerate(pairs)}, image_shape=(n, n))


def diagonal_approximation(ds) -> KernelSet:
    """One kernel ``(1/n) sum_s P_s^T P_s`` shared by every channel; cross terms dropped."""
    if not ds.use_projections:
        k = identity_kernels(ds, np.ones((ds.n_images, 1)), diagonal_only=True)
        return KernelSet(k.n, None, {}, True, None, np.eye(1), k.image_shape)
    n = ds.size
    pts, w2 = _kernel_points(ds)
    weights = np.full((1, ds.n_images), 1.0 / ds.n_images)
    four = _weighted_kernels(pts, w2, weights, n, 2)[0]
    return KernelSet(n, None, {}, True, four, None, (n, n))


# ---------------------------------------------------------------------------
# applying K


def _pad_fft(alphas: np.ndarray, n: int) -> np.ndarray:
    m = 2 * n
    return np.fft.rfftn(alphas, s=(m, m, m), axes=(-3, -2, -1))


def _crop_ifft(spec: np.ndarray, n: int) -> np.ndarray:
    m = 2 * n
    return np.fft.irfftn(spec, s=(m, m, m), axes=(-3, -2, -1))[..., :n, :n, :n]


def apply_kernels(kernels: KernelSet, alphas: np.ndarray) -> np.ndarray:
    """``(K alpha)^l = sum_m conv(kernel^{l,m}, alpha^m)`` (linear convolution)."""
    alphas = np.asarray(alphas, dtype=float)
    r = alphas.shape[0]
    if kernels.r is not None and r != kernels.r:
        raise ShapeMismatch(f"{r} channels given, kernels built for {kernels.r}")
    if kernels.is_identity:
        if alphas.shape[1:] != kernels.image_shape:
            raise ShapeMismatch(f"volumes {alphas.shape[1:]} vs {kernels.image_shape}")
        gram = kernels.gram if kernels.r is not None else np.eye(r) * kernels.gram[0, 0]
        return np.tensordot(gram, alphas, axes=(1, 0))
    n = kernels.n
    if alphas.shape[1:] != (n, n, n):
        raise ShapeMismatch(f"volumes {alphas.shape[1:]} vs kernel grid {n}")
    spec = _pad_fft(alphas, n)
    out = np.empty_like(spec)
    for a in range(r):
        acc = np.zeros_like(spec[0])
        for b in range(r):
            k = kernels.block(a, b)
            if k is not None:
                acc += k * spec[b]
        out[a] = acc
    return _crop_ifft(out, n)


def diagonal_preconditioner(kernels: KernelSet, floor: float = 1e-3):
    """Block-Jacobi preconditioner dividing each channel by ``|kernel^{l,l}|`` in Fourier space."""
    if kernels.is_identity:
        return None
    n = kernels.n
    def inv(a):
        k = np.abs(kernels.block(a, a))
        return 1.0 / np.maximum(k, floor * k.max())
    cache: dict = {}

    def apply(x):
        spec = _pad_fft(x, n)
        for a in range(len(x)):
            if a not in cache:
                cache[a] = inv(a)
            spec[a] *= cache[a]
        return _crop_ifft(spec, n)

    return apply


def ball_projector(n: int):
    """Orthogonal projector onto volumes whose DFT lives in the ball ``|j| < n/2``.

    Central slices of in-disc image frequencies never leave this ball, so its
    complement is (up to grid leakage) unobserved.
    """
    j = np.fft.fftfreq(n) * n
    r2 = j[:, None, None] ** 2 + j[None, :, None] ** 2 + j[None, None, :] ** 2
    mask = r2 < (n / 2.0) ** 2

    def apply(x):
        return np.fft.ifftn(np.fft.fftn(x, axes=(-3, -2, -1)) * mask, axes=(-3, -2, -1)).real

    return apply


# ---------------------------------------------------------------------------
# solving


@dataclass
class SpectralVolumes:
    volumes: np.ndarray  # (r, ...)
    info: CgInfo = field(default_factory=CgInfo)

    @property
    def r(self) -> int:
        return len(self.volumes)

    def save(self, directory, prefix: str = "alpha") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for l, v in enumerate(self.volumes):
            name = f"{prefix}_{l:03d}.svol"
            io.write_svol(d / name, v)
            files.append(name)
        io.write_json(d / f"{prefix}.json", {
            "r": self.r,
            "shape": list(self.volumes.shape[1:]),
            "files": files,
            "cg_iterations": self.info.iterations,
            "cg_residual": self.info.residual,
            "cg_converged": self.info.converged,
        })

    @classmethod
    def load(cls, directory, prefix: str = "alpha") -> "SpectralVolumes":
        d = Path(directory)
        idx = d / f"{prefix}.json"
        if not idx.exists():
            raise MissingArtifacts(f"{idx} not found")
        meta = io.read_json(idx)
        shape = tuple(meta["shape"])
        vols = []
        for name in meta["files"]:
            if not (d / name).exists():
                raise MissingArtifacts(f"{d / name} not found")
            vols.append(io.read_svol(d / name).astype(float).reshape(shape))
        info = CgInfo(meta["cg_iterations"], meta["cg_residual"], meta["cg_converged"])
        return cls(np.array(vols), info)


def solve_spectral_volumes(
    kernels: KernelSet,
    b: np.ndarray,
    cg_opts: Optional[CgOptions] = None,
    tau: float = 0.0,
    precondition: bool = False,
    band_limit: bool = True,
) -> SpectralVolumes:
    """CG on ``(K + tau I) alpha = b``.

    With ``band_limit`` the unknowns are restricted to the Fourier ball
    (:func:`ball_projector`), which removes the near-null space outside it.
    """
    b = np.asarray(b, dtype=float)
    if kernels.r is not None and len(b) != kernels.r:
        raise ShapeMismatch(f"{len(b)} right-hand sides for {kernels.r} channels")
    cg_opts = cg_opts or CgOptions()
    pre = diagonal_preconditioner(kernels) if precondition else None
    if band_limit and not kernels.is_identity:
        q = ball_projector(kernels.n)
        b = q(b)

        def op(a):
            return q(apply_kernels(kernels, q(a))) + tau * a

        if pre is not None:
            pre0 = pre
            pre = lambda x: q(pre0(q(x)))  # noqa: E731
    else:
        def op(a):
            return apply_kernels(kernels, a) + tau * a

    x, info = conjugate_gradient(op, b, cg_opts, precond=pre)
    log.info("spectral volumes: %d CG iterations, residual %.2e", info.iterations, info.residual)
    return SpectralVolumes(x, info)


def solve_identity(ds, basis) -> SpectralVolumes:
    """Closed form ``alpha^l = n**-1/2 sum_s phi_s^l y_s`` for identity operators."""
    if ds.use_projections:
        raise OperatorsNotIdentity("closed form needs use_projections=False")
    return SpectralVolumes(build_backprojections(ds, basis))


def reconstruct(sv: SpectralVolumes, basis, s: int) -> np.ndarray:
    """``x_s = sqrt(n) sum_l phi_s^l alpha^l`` (``s`` is 0-based)."""
    phi = _phi(basis)
    n = phi.shape[0]
    if not 0 <= s < n:
        raise IndexOutOfRange(f"image index {s} outside 0..{n - 1}")
    if phi.shape[1] != sv.r:
        raise SizeMismatch(f"basis has {phi.shape[1]} vectors, {sv.r} spectral volumes")
    return np.sqrt(n) * np.tensordot(phi[s], sv.volumes, axes=(0, 0))


def data_residual(ds, basis, sv: SpectralVolumes, kernels: Optional[KernelSet] = None,
                  b: Optional[np.ndarray] = None) -> float:
    """``sum_s ||y_s - sqrt(n) sum_l phi_s^l P_s alpha^l||^2 / sum_s ||y_s||^2``.

    Expanded through the normal equations when ``kernels`` are given:
    ``||y||^2 - 2 n <alpha, b> + n <alpha, K alpha>``.
    """
    phi = _phi(basis)
    n = ds.n_images
    y = np.asarray(ds.images, dtype=float)
    yy = float(np.sum(y**2))
    if kernels is not None and kernels.r is not None:
        b = build_backprojections(ds, phi) if b is None else b
        a = sv.volumes
        val = yy - 2 * n * np.vdot(a, b) + n * np.vdot(a, apply_kernels(kernels, a))
        return float(val / yy)
    total = 0.0
    for s in range(n):
        x = reconstruct(sv, phi, s)
        fwd = core.project(x, ds.operator(s)) if ds.use_projections else x
        total += float(np.sum((y[s] - fwd) ** 2))
    return total / yy


def solve_many(ds, basis, r_values: Sequence[int], cg_opts=None, tau=0.0, precondition=False,
               diagonal=False, band_limit=True):
    """Solve for each basis prefix in ``r_values`` reusing one kernel build.

    Returns ``(kernels, backprojections, {r: SpectralVolumes})``.
    """
    phi = _phi(basis)
    rmax = max(r_values)
    phi = phi[:, :rmax]
    if not ds.use_projections:
        full = identity_kernels(ds, phi, diagonal)
    elif diagonal:
        full = diagonal_approximation(ds)
    else:
        full = build_kernels(ds, phi)
    b = build_backprojections(ds, phi)
    out = {}
    for r in r_values:
        k = full.prefix(r) if full.r is not None else full
        if not ds.use_projections and not diagonal:
            out[r] = SpectralVolumes(b[:r].copy())
        else:
            out[r] = solve_spectral_volumes(k, b[:r], cg_opts, tau, precondition, band_limit)
    return full, b, out

