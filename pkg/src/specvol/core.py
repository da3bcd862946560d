"""Grids, centered transforms, rotations and the tomographic imaging operator.

Conventions
-----------
Arrays are indexed ``[x, y]`` for images and ``[x, y, z]`` for volumes.  The
spatial grid along every axis is ``-1, -1 + 2/N, ..., 1 - 2/N`` and the
frequency grid is ``k = j / 2`` for integer ``j`` in
``-(N // 2), ..., (N + 1) // 2 - 1``.  With these conventions the transform

    F(k) = sum_u exp(-2 pi i <k, u>) s[u]

evaluated on the frequency grid is a standard FFT up to a ``(-1)**j`` phase.

Images keep only frequencies strictly inside the disc ``|j| < N / 2``.  This
keeps every rotated slice point inside the band of the volume and makes the
projection of a real volume exactly real.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import LengthMismatch, NumericalError, PointOutOfBand

try:  # pragma: no cover - exercised implicitly
    import finufft
except ImportError:  # pragma: no cover
    finufft = None

#: requested accuracy of the gridding (finufft) path
NUFFT_EPS = 1e-12
_NTHREADS = 1


def set_threads(n: int) -> None:
    """Set the worker count used by the gridding transforms."""
    global _NTHREADS
    _NTHREADS = max(1, int(n))


@dataclass(frozen=True)
class Grid:
    n: int
    dim: int = 3

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid size must be positive")
        if self.dim not in (2, 3):
            raise ValueError("grid dimension must be 2 or 3")

    @property
    def spacing(self) -> float:
        return 2.0 / self.n

    @property
    def points(self) -> np.ndarray:
        """Spatial sample positions along one axis."""
        return spatial_points(self.n)

    @property
    def indices(self) -> np.ndarray:
        """Centered integer frequency indices along one axis."""
        return freq_indices(self.n)

    @property
    def frequencies(self) -> np.ndarray:
        return self.indices / 2.0

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim


def spatial_points(n: int) -> np.ndarray:
    return -1.0 + 2.0 * np.arange(n) / n


def freq_indices(n: int) -> np.ndarray:
    return np.arange(-(n // 2), (n + 1) // 2)


def _sign_grid(shape) -> np.ndarray:
    """(-1)**(j_1 + ... + j_d) over the centered frequency grid."""
    out = np.ones(shape)
    for ax, n in enumerate(shape):
        s = (-1.0) ** np.abs(freq_indices(n))
        out = out * s.reshape([-1 if a == ax else 1 for a in range(len(shape))])
    return out


def dft_forward(signal: np.ndarray) -> np.ndarray:
    """Centered DFT of a 2D image or 3D volume on the grid ``M_N``.

    Entry ``[j_x, j_y, ...]`` of the result (offset by ``N // 2``) holds
    ``F(j / 2)``.
    """
    signal = np.asarray(signal)
    f = np.fft.fftshift(np.fft.fftn(signal))
    return f * _sign_grid(signal.shape)


def dft_inverse(fourier: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft_forward`; returns a complex array."""
    fourier = np.asarray(fourier)
    return np.fft.ifftn(np.fft.ifftshift(fourier * _sign_grid(fourier.shape)))


def dft_literal(signal: np.ndarray) -> np.ndarray:
    """Literal O(N^(2d)) evaluation of the centered DFT; used as an oracle."""
    signal = np.asarray(signal, dtype=float)
    out = signal.astype(complex)
    for ax, n in enumerate(signal.shape):
        u = spatial_points(n)
        k = freq_indices(n) / 2.0
        mat = np.exp(-2j * np.pi * np.outer(k, u))
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [ax])), 0, ax)
    return out


# ---------------------------------------------------------------------------
# rotations


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Rotation:
    """Rotation stored as a unit quaternion ``(w, x, y, z)``."""

    quat: tuple

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        nrm = np.linalg.norm(q)
        if q.shape != (4,) or not np.isfinite(nrm) or nrm == 0:
            raise ValueError("quaternion must be a finite nonzero 4-vector")
        object.__setattr__(self, "quat", tuple(float(v) for v in q / nrm))

    @property
    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(np.asarray(self.quat))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def about_axis(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls((np.cos(angle / 2), *(np.sin(angle / 2) * axis)))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Uniform sample on SO(3) by normalizing a 4D Gaussian."""
        return cls(tuple(rng.standard_normal(4)))


# ---------------------------------------------------------------------------
# contrast transfer function


def electron_wavelength(voltage_kV: float) -> float:
    """Relativistic electron wavelength in Angstrom."""
    v = voltage_kV * 1e3
    return 12.2643247 / np.sqrt(v * (1.0 + 0.978466e-6 * v))


@dataclass(frozen=True)
class CtfParams:
    defocus_um: float = 2.0
    voltage_kV: float = 300.0
    cs_mm: float = 2.0
    amplitude_contrast: float = 0.07
    pixel_size_A: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not self.defocus_um > 0:
            raise ValueError("defocus must be positive when the CTF is enabled")


def ctf_eval(ctf: CtfParams, radial_freq):
    """Radial weak-phase CTF at spatial frequency ``radial_freq`` (1/Angstrom).

    ``-(sqrt(1 - w**2) sin(gamma) + w cos(gamma))`` with
    ``gamma = -pi lam z f**2 + pi/2 Cs lam**3 f**4``.
    """
    f = np.asarray(radial_freq, dtype=float)
    if not ctf.enabled:
        return np.ones_like(f) if f.ndim else 1.0
    lam = electron_wavelength(ctf.voltage_kV)
    z = ctf.defocus_um * 1e4
    cs = ctf.cs_mm * 1e7
    w = ctf.amplitude_contrast
    f2 = f * f
    gamma = -np.pi * lam * z * f2 + 0.5 * np.pi * cs * lam**3 * f2 * f2
    out = -(np.sqrt(1.0 - w * w) * np.sin(gamma) + w * np.cos(gamma))
    return out if f.ndim else float(out)


@dataclass(frozen=True)
class ImagingOperator:
    rotation: Rotation = field(default_factory=Rotation.identity)
    ctf: CtfParams = field(default_factory=lambda: CtfParams(enabled=False))


# ---------------------------------------------------------------------------
# non-uniform transforms


def _check_band(points: np.ndarray, n: int) -> None:
    if points.size and np.max(np.abs(points)) > n / 4.0 * (1 + 1e-12):
        raise PointOutOfBand(f"frequency points must satisfy |k| <= {n / 4} per axis")


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (M, 3)")
    return pts


def _use_finufft(method: str, n: int) -> bool:
    if method == "direct":
        return False
    if method == "finufft":
        if finufft is None or n % 2:
            raise ValueError("finufft path needs the finufft package and even N")
        return True
    return finufft is not None and n % 2 == 0


def _direct_eval(vol: np.ndarray, pts: np.ndarray, chunk: int = 2048) -> np.ndarray:
    n = vol.shape[0]
    u = spatial_points(n)
    out = np.empty(len(pts), dtype=complex)
    for a in range(0, len(pts), chunk):
        p = pts[a : a + chunk]
        ex, ey, ez = (np.exp(-2j * np.pi * np.outer(p[:, i], u)) for i in range(3))
        t = np.einsum("mz,xyz->mxy", ez, vol)
        t = np.einsum("my,mxy->mx", ey, t)
        out[a : a + chunk] = np.einsum("mx,mx->m", ex, t)
    return out


def _direct_adjoint(pts, vals, n, m, chunk: int = 1024) -> np.ndarray:
    u = 2.0 * (np.arange(m) - m / 2.0) / n
    out = np.zeros((vals.shape[0], m, m, m), dtype=complex)
    for a in range(0, len(pts), chunk):
        p = pts[a : a + chunk]
        ex, ey, ez = (np.exp(2j * np.pi * np.outer(p[:, i], u)) for i in range(3))
        for t in range(vals.shape[0]):
            w = vals[t, a : a + chunk]
            tmp = np.einsum("mx,my->mxy", ex * w[:, None], ey)
            out[t] += np.tensordot(tmp, ez, axes=([0], [0]))
    return out


def nudft_eval(volume: np.ndarray, points, method: str = "auto", eps: float = NUFFT_EPS):
    """Evaluate the 3D transform of ``volume`` at arbitrary frequency points.

    ``points`` has shape ``(M, 3)`` in the same units as the grid frequencies
    ``k = j / 2``.  ``method`` is ``"direct"`` (literal sum), ``"finufft"`` or
    ``"auto"``.
    """
    vol = np.asarray(volume)
    n = vol.shape[0]
    pts = _as_points(points)
    _check_band(pts, n)
    if len(pts) == 0:
        return np.zeros(0, dtype=complex)
    if not _use_finufft(method, n):
        return _direct_eval(vol, pts)
    x, y, z = (4.0 * np.pi / n * pts[:, i] for i in range(3))
    return finufft.nufft3d2(
        x, y, z, vol.astype(complex), eps=eps, isign=-1, nthreads=_NTHREADS
    )


def nudft_adjoint(
    points,
    values,
    n: int,
    oversample: int = 1,
    method: str = "auto",
    eps: float = NUFFT_EPS,
) -> np.ndarray:
    """Adjoint of :func:`nudft_eval`.

    Returns ``sum_m values[m] exp(2 pi i <k_m, u>)`` on a cubic grid of
    ``oversample * n`` points per axis with the spacing ``2 / n`` of the base
    grid, so ``oversample=1`` reproduces the volume grid exactly.  ``values``
    may carry a leading batch axis of independent weight vectors.
    """
    pts = _as_points(points)
    vals = np.asarray(values, dtype=complex)
    batched = vals.ndim == 2
    vals2 = vals if batched else vals[None, :]
    if vals2.shape[-1] != len(pts):
        raise LengthMismatch("points and values differ in length")
    if oversample < 1 or int(oversample) != oversample:
        raise ValueError("oversample must be an integer >= 1")
    m = int(oversample) * n
    _check_band(pts, n)
    if len(pts) == 0:
        out = np.zeros((vals2.shape[0], m, m, m), dtype=complex)
    elif not _use_finufft(method, n):
        out = _direct_adjoint(pts, vals2, n, m)
    else:
        x, y, z = (4.0 * np.pi / n * pts[:, i] for i in range(3))
        c = vals2 if vals2.shape[0] > 1 else vals2[0]
        out = finufft.nufft3d1(
            x, y, z, c, (m, m, m), eps=eps, isign=1, nthreads=_NTHREADS
        )
        out = out.reshape(vals2.shape[0], m, m, m)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# slices and the imaging operator


def slice_points(rotation: Rotation, n: int) -> np.ndarray:
    """Rotated central-slice points ``R^-1 [k1, k2, 0]`` for all image frequencies.

    Returns an ``(n*n, 3)`` array ordered like ``image_freqs(n)``.
    """
    k = image_freqs(n) / 2.0
    k3 = np.concatenate([k, np.zeros((len(k), 1))], axis=1)
    return k3 @ rotation.matrix  # rows of R^T k


def image_freqs(n: int) -> np.ndarray:
    """Integer frequency pairs ``(j_x, j_y)`` in C order of the centered grid."""
    j = freq_indices(n)
    jx, jy = np.meshgrid(j, j, indexing="ij")
    return np.stack([jx.ravel(), jy.ravel()], axis=1).astype(float)


def image_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask of retained image frequencies, ``|j| < n/2``."""
    j = freq_indices(n)
    r2 = j[:, None] ** 2 + j[None, :] ** 2
    return r2 < (n / 2.0) ** 2


def operator_slice(op: ImagingOperator, n: int):
    """Masked slice points and CTF weights of one operator."""
    mask = image_mask(n).ravel()
    pts = slice_points(op.rotation, n)[mask]
    return pts, ctf_weights(op.ctf, n)


def ctf_weights(ctf: CtfParams, n: int) -> np.ndarray:
    """CTF values on the masked image frequencies."""
    mask = image_mask(n).ravel()
    j = image_freqs(n)[mask]
    if not ctf.enabled:
        return np.ones(len(j))
    radius = np.sqrt((j**2).sum(axis=1)) / (n * ctf.pixel_size_A)
    return ctf_eval(ctf, radius)


def _spectrum_to_image(vals: np.ndarray, n: int, check: bool = True) -> np.ndarray:
    spec = np.zeros((n, n), dtype=complex)
    spec[image_mask(n)] = vals
    img = dft_inverse(spec)
    if check:
        re = np.linalg.norm(img.real)
        im = np.linalg.norm(img.imag)
        if im > 1e-9 * max(re, 1e-300) and im > 1e-300:
            raise NumericalError(f"projection has imaginary residue {im / re:.2e}")
    return img.real


def image_spectrum(image: np.ndarray) -> np.ndarray:
    """Adjoint of the masked inverse DFT: ``dft_forward(image) / N**2`` on the mask."""
    n = image.shape[0]
    return (dft_forward(image) / n**2)[image_mask(n)]


def project(volume: np.ndarray, op: ImagingOperator, method: str = "auto") -> np.ndarray:
    """Tomographic projection along z after rotation, filtered by the CTF."""
    vol = np.asarray(volume, dtype=float)
    n = vol.shape[0]
    pts, c = operator_slice(op, n)
    vals = nudft_eval(vol, pts, method=method) * c
    return _spectrum_to_image(vals, n)


def backproject(image: np.ndarray, op: ImagingOperator, method: str = "auto") -> np.ndarray:
    """Exact adjoint of :func:`project`."""
    img = np.asarray(image, dtype=float)
    n = img.shape[0]
    pts, c = operator_slice(op, n)
    w = image_spectrum(img) * c
    return nudft_adjoint(pts, w, n, method=method).real


def stack_slices(ops: Sequence[ImagingOperator], n: int):
    """Concatenated slice points ``(len(ops) * M, 3)`` and CTF weights ``(len(ops), M)``."""
    if len(ops) == 0:
        return np.zeros((0, 3)), np.zeros((0, int(image_mask(n).sum())))
    pts = np.concatenate([operator_slice(op, n)[0] for op in ops])
    ctfs = np.stack([ctf_weights(op.ctf, n) for op in ops])
    return pts, ctfs


def backproject_many(images: np.ndarray, ops, weights: Optional[np.ndarray] = None):
    """``sum_s weights[t, s] * backproject(images[s], ops[s])`` for every row ``t``.

    All contributions are accumulated in a single adjoint transform.
    """
    images = np.asarray(images, dtype=float)
    n = images.shape[-1]
    if weights is None:
        weights = np.ones((1, len(ops)))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    pts, ctfs = stack_slices(ops, n)
    spec = np.stack([image_spectrum(im) for im in images]) * ctfs
    vals = (weights[:, :, None] * spec[None]).reshape(weights.shape[0], -1)
    return nudft_adjoint(pts, vals, n).real


def with_ctf(op: ImagingOperator, **changes) -> ImagingOperator:
    return replace(op, ctf=replace(op.ctf, **changes))
