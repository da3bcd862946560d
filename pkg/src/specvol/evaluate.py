"""Fourier shell correlation, mean-subtracted FSC and embedding diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import io
from .errors import GridMismatch, TruthUnavailable

EIG_RANK_TOL = 1e-10


@dataclass
class FscCurve:
    """Correlation per integer shell; ``degenerate`` marks zero-denominator shells."""

    shells: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    degenerate: np.ndarray
    n: int

    @property
    def freq(self) -> np.ndarray:
        """Cycles per unit length (the grid spans two units)."""
        return self.shells / 2.0

    @property
    def wavelength_px(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.shells > 0, self.n / np.maximum(self.shells, 1e-300), np.inf)

    def band_mean(self, fraction: float = 0.25) -> float:
        """Mean FSC over shells ``1 .. fraction * N/2`` (the DC shell is skipped)."""
        top = fraction * self.n / 2.0
        sel = (self.shells >= 1) & (self.shells <= top)
        return float(np.mean(self.values[sel]))

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.shells, self.freq, self.wavelength_px, self.values])
        with open(path, "w") as fh:
            fh.write("shell,freq,wavelength_px,fsc\n")
            for s, f, w, v in rows:
                fh.write(f"{int(s)},{f:.17g},{'inf' if np.isinf(w) else '%.17g' % w},{v:.17g}\n")


def shell_index(shape) -> np.ndarray:
    """``floor(|j| + 0.5)`` for every entry of an unshifted FFT grid."""
    axes = [np.fft.fftfreq(s) * s for s in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.floor(np.sqrt(sum(g**2 for g in grids)) + 0.5).astype(int)


def _shell_sums(f1, f2, shells, nshell):
    cross = np.bincount(shells.ravel(), (f1 * np.conj(f2)).real.ravel(), nshell)
    p1 = np.bincount(shells.ravel(), (np.abs(f1) ** 2).ravel(), nshell)
    p2 = np.bincount(shells.ravel(), (np.abs(f2) ** 2).ravel(), nshell)
    return cross, p1, p2


def fsc(v1: np.ndarray, v2: np.ndarray) -> FscCurve:
    """FSC on shells ``0 .. N//2``; zero-denominator shells are reported as 0 and flagged."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape:
        raise GridMismatch(f"volumes differ in shape: {v1.shape} vs {v2.shape}")
    n = v1.shape[0]
    nshell = n // 2 + 1
    shells = shell_index(v1.shape)
    keep = shells < nshell
    f1, f2 = np.fft.fftn(v1), np.fft.fftn(v2)
    cross, p1, p2 = _shell_sums(f1[keep], f2[keep], shells[keep], nshell)
    counts = np.bincount(shells[keep], minlength=nshell)
    denom = np.sqrt(p1 * p2)
    degenerate = denom <= 1e-300
    vals = np.where(degenerate, 0.0, cross / np.where(degenerate, 1.0, denom))
    return FscCurve(np.arange(nshell), np.clip(vals, -1.0, 1.0), counts, degenerate, n)


def average_curves(curves: Sequence[FscCurve]) -> FscCurve:
    c0 = curves[0]
    vals = np.mean([c.values for c in curves], axis=0)
    deg = np.all([c.degenerate for c in curves], axis=0)
    return FscCurve(c0.shells, vals, c0.counts, deg, c0.n)


def subsample_indices(n: int, m: int = 256) -> np.ndarray:
    """``min(n, m)`` evenly spaced image indices."""
    if n <= m:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, m).round().astype(int))


def mean_subtracted_fsc(
    truth: Optional[Callable[[int], np.ndarray]],
    alphas: Dict[int, np.ndarray],
    phi: np.ndarray,
    mean: np.ndarray,
    indices: Optional[Sequence[int]] = None,
) -> Dict[int, FscCurve]:
    """Per ``r``: average over images of ``FSC(x_s - mean, sum_{l>=1} phi_s^l alpha^l)``.

    ``truth(s)`` returns the clean volume of image ``s``; ``alphas[r]`` holds
    the ``r`` spectral volumes solved with the first ``r`` basis vectors.
    """
    if truth is None:
        raise TruthUnavailable("mean-subtracted FSC needs ground-truth volumes")
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    idx = subsample_indices(n) if indices is None else np.asarray(indices)
    curves: Dict[int, list] = {r: [] for r in alphas}
    for s in idx:
        target = truth(int(s)) - mean
        for r, a in alphas.items():
            var = np.tensordot(phi[s, 1:r], a[1:r], axes=(0, 0)) if r > 1 else np.zeros_like(target)
            curves[r].append(fsc(target, var))
    return {r: average_curves(c) for r, c in curves.items()}


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingReport:
    winding: Optional[int] = None
    winding_raw: Optional[float] = None
    radius_cv: Optional[float] = None
    rank: Optional[int] = None
    condition: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "extra" and v is not None}
        out.update(self.extra)
        return out


WINDING_BINS = 64


def winding_number(angles_param: np.ndarray, e1: np.ndarray, e2: np.ndarray,
                   bins: Optional[int] = WINDING_BINS) -> float:
    """Signed number of turns of ``atan2(e2, e1)`` as the parameter runs once around.

    With ``bins`` the embedding is first averaged (as unit phasors) over
    equal-width parameter bins, so that per-sample noise cannot add spurious
    turns; ``bins=None`` sums the wrapped steps between consecutive samples.
    """
    t = np.asarray(angles_param, dtype=float) % (2 * np.pi)
    z = np.exp(1j * np.arctan2(np.asarray(e2, dtype=float), np.asarray(e1, dtype=float)))
    if bins is None or len(t) <= bins:
        order = np.argsort(t, kind="stable")
        psi = np.angle(z[order])
    else:
        which = np.minimum((t / (2 * np.pi) * bins).astype(int), bins - 1)
        sums = np.bincount(which, z.real, bins) + 1j * np.bincount(which, z.imag, bins)
        psi = np.angle(sums[np.abs(sums) > 0])
    d = np.diff(np.concatenate([psi, psi[:1]]))
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return float(d.sum() / (2 * np.pi))


def phase_coherence(angles_param, e1, e2, c: int) -> float:
    """``|mean exp(i (psi - c theta))|``: 1 when the embedding angle is exactly ``c theta``."""
    psi = np.arctan2(np.asarray(e2, dtype=float), np.asarray(e1, dtype=float))
    return float(np.abs(np.mean(np.exp(1j * (psi - c * np.asarray(angles_param))))))


def embedding_covariance(e: np.ndarray):
    """Rank and condition number of the covariance of 2D embedding points."""
    cov = np.cov(np.asarray(e, dtype=float).T)
    ev = np.linalg.eigvalsh(np.atleast_2d(cov))
    rank = int(np.sum(ev > EIG_RANK_TOL * max(ev.max(), 1e-300)))
    cond = float(ev.max() / ev.min()) if ev.min() > 0 else float("inf")
    return rank, cond


def embedding_diagnostics(phi: np.ndarray, truth: Optional[dict]) -> EmbeddingReport:
    """Diagnostics of ``(phi^1, phi^2)``.

    Angle-parameterized truth (key ``theta``) gives the winding number and
    the radius coefficient of variation; otherwise the covariance rank and
    condition of the 2D point cloud are reported.
    """
    if truth is None or not truth:
        raise TruthUnavailable("embedding diagnostics need conformation parameters")
    phi = np.asarray(phi, dtype=float)
    if phi.shape[1] < 3:
        raise ValueError("need at least three basis vectors")
    e = phi[:, 1:3]
    rank, cond = embedding_covariance(e)
    rep = EmbeddingReport(rank=rank, condition=cond)
    if "theta" in truth:
        theta = np.asarray(truth["theta"])
        w = winding_number(theta, e[:, 0], e[:, 1])
        rad = np.hypot(e[:, 0], e[:, 1])
        rep.winding = int(round(abs(w)))
        rep.winding_raw = winding_number(theta, e[:, 0], e[:, 1], bins=None)
        rep.extra["coherence"] = phase_coherence(theta, e[:, 0], e[:, 1], int(round(w)))
        rep.radius_cv = float(np.std(rad) / np.mean(rad))
    return rep


# ---------------------------------------------------------------------------
# angular Fourier coefficients (clock limit)


def angular_fourier_images(image_fn: Callable[[float], np.ndarray], orders: Sequence[int],
                           n_angles: int = 720) -> Dict[int, np.ndarray]:
    """``c_m = (1/2pi) int x(theta) exp(-i m theta) dtheta`` by the rectangle rule."""
    thetas = 2 * np.pi * np.arange(n_angles) / n_angles
    out = {m: 0.0 for m in orders}
    for t in thetas:
        img = image_fn(t)
        for m in orders:
            out[m] = out[m] + img * np.exp(-1j * m * t)
    return {m: v / n_angles for m, v in out.items()}


def pair_correlation(pair: Sequence[np.ndarray], target: Sequence[np.ndarray],
                     mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Correlations of ``pair`` with ``target`` after the best orthogonal 2x2 mixing.

    The mixing solves the orthogonal Procrustes problem on the masked,
    mean-free, unit-normalized images.
    """
    def prep(v):
        x = np.asarray(v, dtype=float)
        x = x[mask] if mask is not None else x.ravel()
        return x - x.mean()

    a = np.stack([prep(v) for v in pair], axis=1)
    t = np.stack([prep(v) for v in target], axis=1)
    a = a / np.linalg.norm(a, axis=0)
    t = t / np.linalg.norm(t, axis=0)
    u, _, vt = np.linalg.svd(a.T @ t)
    rot = a @ (u @ vt)
    return np.array([np.corrcoef(rot[:, i], t[:, i])[0, 1] for i in range(t.shape[1])])


# ---------------------------------------------------------------------------
# plotting without extra dependencies


def write_fsc_svg(path, curves: Dict[int, FscCurve], width: int = 480, height: int = 320) -> None:
    """Minimal SVG line plot of FSC curves against shell index."""
    pad = 40
    smax = max(int(c.shells.max()) for c in curves.values()) or 1

    def xy(s, v):
        return (pad + (width - 2 * pad) * s / smax, height - pad - (height - 2 * pad) * (v + 1) / 2)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="black"/>',
    ]
    y0 = xy(0, 0)[1]
    parts.append(f'<line x1="{pad}" y1="{y0:.1f}" x2="{width - pad}" y2="{y0:.1f}" stroke="#aaa"/>')
    for i, (r, c) in enumerate(sorted(curves.items())):
        pts = " ".join("%.1f,%.1f" % xy(s, v) for s, v in zip(c.shells, c.values))
        hue = int(300 * i / max(len(curves) - 1, 1))
        parts.append(f'<polyline fill="none" stroke="hsl({hue},70%,40%)" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 12 * i + 10}" font-size="10">r={r}</text>')
    parts.append(f'<text x="{width / 2 - 30}" y="{height - 8}" font-size="11">shell</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def read_fsc_csv(path) -> FscCurve:
    head, data = io.read_matrix_csv(path)
    shells = data[:, 0].astype(int)
    n = int(round(2 * shells.max())) if shells.max() > 0 else 1
    return FscCurve(shells, data[:, 3], np.zeros_like(shells), np.zeros(len(shells), bool), n)
