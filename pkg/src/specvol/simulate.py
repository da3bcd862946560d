"""Synthetic phantoms and noisy tomographic datasets.

Four phantom families are provided: a 2D clock face with one rotating hand,
its 3D analog, a channel-like molecule whose c-fold symmetric top spins about
the z axis, and the same kind of molecule whose bottom half is stretched in
the x-y plane.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erf

from . import core
from .core import CtfParams, ImagingOperator, Rotation
from .errors import ChecksumMismatch, FormatVersionMismatch, InvalidSpec
from .io import read_json, write_json, write_svol

KINDS = ("clock2d", "clock3d", "spin", "stretch")
PAPER_DEFOCI_UM = (1.50, 1.67, 1.83, 2.00, 2.17, 2.33, 2.50)
MANIFEST_VERSION = 1

SMOOTH_STEPS = 1.5  # gaussian edge smoothing in grid steps
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    n: int
    theta: float = 0.0
    shift: tuple = (0, 0)
    symmetry: int = 4
    delta_max: Optional[int] = None
    # clock geometry (grid units, the grid spans [-1, 1))
    rim_radius: float = 0.8
    rim_width: float = 0.06
    hand_length: float = 0.6
    hand_width: float = 0.06
    # channel geometry
    base_radius: float = 0.35
    top_radius: float = 0.8
    arm_width: float = 0.08
    base_density: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown phantom kind {self.kind!r}")
        if self.n < 4:
            raise InvalidSpec("phantoms need n >= 4")
        if self.symmetry < 1:
            raise InvalidSpec("symmetry order must be >= 1")
        if self.kind == "stretch":
            dm = default_delta_max(self.n) if self.delta_max is None else self.delta_max
            if len(self.shift) != 2 or max(abs(int(d)) for d in self.shift) > dm:
                raise InvalidSpec(f"stretch displacements must lie in [-{dm}, {dm}]")


def default_delta_max(n: int) -> int:
    """Maximal stretch displacement; 4 at n = 32, scaled linearly."""
    return max(1, int(round(4 * n / 32)))


def bottom_slice(n: int) -> int:
    """Slice index z0 of the molecule bottom (16 at n = 108)."""
    return int(round(16 * n / 108))


def _supersampled_axis(n: int) -> np.ndarray:
    step = 2.0 / n
    sub = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    return (core.spatial_points(n)[:, None] + sub[None, :] * step).ravel()


def _block_mean(a: np.ndarray, n: int) -> np.ndarray:
    s = _SUPERSAMPLE
    return a.reshape(n, s, n, s).mean(axis=(1, 3))


def _smooth(a: np.ndarray) -> np.ndarray:
    return gaussian_filter(a, SMOOTH_STEPS, mode="constant")


def _clock_rim(n: int, spec: PhantomSpec) -> np.ndarray:
    t = _supersampled_axis(n)
    x, y = np.meshgrid(t, t, indexing="ij")
    rim = np.abs(np.hypot(x, y) - spec.rim_radius) <= spec.rim_width / 2
    return _smooth(_block_mean(rim.astype(float), n))


def _blurred_box(t: np.ndarray, lo: float, hi: float, sigma: float) -> np.ndarray:
    """Indicator of ``[lo, hi]`` convolved with a unit gaussian of width ``sigma``."""
    s = np.sqrt(2.0) * sigma
    return 0.5 * (erf((t - lo) / s) - erf((t - hi) / s))


def _clock_face(n: int, spec: PhantomSpec) -> np.ndarray:
    # The hand is evaluated in closed form so the image varies smoothly with theta;
    # a rasterized hand only changes when an edge crosses a subpixel.
    u = core.spatial_points(n)
    x, y = np.meshgrid(u, u, indexing="ij")
    c, s = np.cos(spec.theta), np.sin(spec.theta)
    sigma = SMOOTH_STEPS * 2.0 / n
    w = spec.hand_width / 2
    hand = (_blurred_box(x * c + y * s, 0.0, spec.hand_length, sigma)
            * _blurred_box(-x * s + y * c, -w, w, sigma))
    return _clock_rim(n, spec) + hand


def _slab(n: int, lo: float, hi: float) -> np.ndarray:
    t = _supersampled_axis(n)
    ind = ((t >= lo) & (t <= hi)).astype(float)
    prof = ind.reshape(n, _SUPERSAMPLE).mean(axis=1)
    return gaussian_filter(prof, SMOOTH_STEPS, mode="constant")


@lru_cache(maxsize=8)
def _channel_base(n: int, base_radius: float) -> np.ndarray:
    """Static cylindrical body occupying the lower-middle part of the box."""
    t = _supersampled_axis(n)
    x, y = np.meshgrid(t, t, indexing="ij")
    disc = _smooth(_block_mean((np.hypot(x, y) <= base_radius).astype(float), n))
    ring = _smooth(_block_mean((np.abs(np.hypot(x, y) - 0.5) <= 0.05).astype(float), n))
    vol = disc[:, :, None] * _slab(n, -0.55, 0.0)[None, None, :]
    vol += 0.5 * ring[:, :, None] * _slab(n, -0.2, 0.0)[None, None, :]
    vol.setflags(write=False)
    return vol


def _spin_top(n: int, spec: PhantomSpec) -> np.ndarray:
    """c radial arms at angles theta + 2 pi i / c, as smooth gaussian tubes."""
    u = core.spatial_points(n)
    x, y = np.meshgrid(u, u, indexing="ij")
    w2 = 2.0 * spec.arm_width**2
    r0, r1 = 0.1, spec.top_radius
    top = np.zeros((n, n))
    for i in range(spec.symmetry):
        a = spec.theta + 2.0 * np.pi * i / spec.symmetry
        along = x * np.cos(a) + y * np.sin(a)
        across = -x * np.sin(a) + y * np.cos(a)
        clipped = np.clip(along, r0, r1)
        d2 = (along - clipped) ** 2 + across**2
        top += np.exp(-d2 / w2)
    zc, zw = 0.3, 0.12
    prof = np.exp(-((u - zc) ** 2) / (2 * zw**2))
    return top[:, :, None] * prof[None, None, :]


@lru_cache(maxsize=8)
def _stretch_base(n: int, base_radius: float) -> np.ndarray:
    """Unstretched molecule: static top plus an asymmetric bottom part."""
    u = core.spatial_points(n)
    x, y, z = np.meshgrid(u, u, u, indexing="ij")
    t = _supersampled_axis(n)
    xs, ys = np.meshgrid(t, t, indexing="ij")
    disc = _smooth(_block_mean((np.hypot(xs, ys) <= base_radius).astype(float), n))
    vol = disc[:, :, None] * _slab(n, 0.0, 0.6)[None, None, :]
    z_bottom = core.spatial_points(n)[bottom_slice(n)]
    lobes = [(0.3, 0.0, 1.0), (-0.15, 0.26, 0.8), (-0.15, -0.26, 0.6), (0.0, 0.0, 0.5)]
    zc = 0.5 * z_bottom
    for cx, cy, amp in lobes:
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        vol += amp * np.exp(-r2 / (2 * 0.1**2)) * np.exp(-((z - zc) ** 2) / (2 * 0.18**2))
    vol.setflags(write=False)
    return vol


def stretch_volume(base: np.ndarray, shift, z0: int) -> np.ndarray:
    """Shift every slice ``z <= N/2`` of ``base`` by ``shift * s_z`` pixels.

    ``v'[x, y, z] = v[x + dx s_z, y + dy s_z, z]`` with
    ``s_z = ((N/2 - z) / (N/2 - z0))**2``, applied as a Fourier phase ramp.
    """
    n = base.shape[0]
    dx, dy = (float(d) for d in shift)
    out = np.array(base, dtype=float)
    if dx == 0 and dy == 0:
        return out
    j = np.fft.fftfreq(n) * n
    for z in range(0, n // 2 + 1):
        sz = ((n / 2 - z) / (n / 2 - z0)) ** 2
        if sz == 0:
            continue
        ramp = np.exp(2j * np.pi * (j[:, None] * dx * sz + j[None, :] * dy * sz) / n)
        out[:, :, z] = np.fft.ifft2(np.fft.fft2(base[:, :, z]) * ramp).real
    return out


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Density of the phantom described by ``spec`` on its grid."""
    n = spec.n
    if spec.kind == "clock2d":
        return _clock_face(n, spec)
    if spec.kind == "clock3d":
        face = _clock_face(n, spec)
        return face[:, :, None] * _slab(n, -0.1, 0.1)[None, None, :]
    if spec.kind == "spin":
        return spec.base_density * _channel_base(n, spec.base_radius) + _spin_top(n, spec)
    base = _stretch_base(n, spec.base_radius)
    return stretch_volume(base, spec.shift, bottom_slice(n))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    n_images: int = 100
    n: int = 32
    kind: str = "spin"
    symmetry: int = 4
    delta_max: Optional[int] = None
    defocus_um: tuple = PAPER_DEFOCI_UM
    noise_ratio: float = 0.0
    seed: int = 0
    use_projections: bool = True
    ctf_enabled: bool = True
    pixel_size_A: float = 1.0
    voltage_kV: float = 300.0
    cs_mm: float = 2.0
    amplitude_contrast: float = 0.07

    def __post_init__(self):
        if self.n_images < 0:
            raise InvalidSpec("n_images must be >= 0")
        if self.noise_ratio < 0:
            raise InvalidSpec("noise_ratio must be >= 0")
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown phantom kind {self.kind!r}")
        if self.kind == "clock2d" and self.use_projections:
            raise InvalidSpec("clock2d images are observed without projections")
        self.defocus_um = tuple(float(d) for d in self.defocus_um)

    @property
    def max_shift(self) -> int:
        return default_delta_max(self.n) if self.delta_max is None else self.delta_max

    def ctf_template(self) -> CtfParams:
        return CtfParams(
            defocus_um=self.defocus_um[0] if self.defocus_um else 2.0,
            voltage_kV=self.voltage_kV,
            cs_mm=self.cs_mm,
            amplitude_contrast=self.amplitude_contrast,
            pixel_size_A=self.pixel_size_A,
            enabled=self.ctf_enabled and self.use_projections,
        )


@dataclass
class Dataset:
    """Noisy observations together with their imaging operators.

    ``images`` has shape ``(n, N, N)`` (or ``(n, N, N, N)`` for 3D data
    observed without projections) and is stored in float32.
    """

    images: np.ndarray
    quats: np.ndarray
    defocus_um: np.ndarray
    sigma2: float
    config: DatasetConfig
    conformations: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if len(self.quats) != n or len(self.defocus_um) != n:
            raise ValueError("images and operators differ in count")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.config.n

    @property
    def use_projections(self) -> bool:
        return self.config.use_projections

    def operator(self, s: int) -> ImagingOperator:
        tmpl = self.config.ctf_template()
        ctf = CtfParams(**{**asdict(tmpl), "defocus_um": float(self.defocus_um[s])})
        return ImagingOperator(Rotation(tuple(self.quats[s])), ctf)

    @property
    def operators(self) -> list:
        return [self.operator(s) for s in range(self.n_images)]

    def phantom_spec(self, s: int) -> PhantomSpec:
        return _spec_for(self.config, {k: v[s] for k, v in self.conformations.items()})

    def clean_volume(self, s: int) -> np.ndarray:
        return make_phantom(self.phantom_spec(s))


def _spec_for(cfg: DatasetConfig, conf: dict) -> PhantomSpec:
    if cfg.kind == "stretch":
        return PhantomSpec(
            "stretch", cfg.n, shift=(int(conf["dx"]), int(conf["dy"])),
            delta_max=cfg.max_shift,
        )
    return PhantomSpec(cfg.kind, cfg.n, theta=float(conf["theta"]), symmetry=cfg.symmetry)


def _draw_conformation(cfg: DatasetConfig, rng: np.random.Generator) -> dict:
    if cfg.kind == "stretch":
        d = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
        return {"dx": int(d[0]), "dy": int(d[1])}
    return {"theta": float(rng.uniform(0.0, 2.0 * np.pi))}


def sample_dataset(cfg: DatasetConfig) -> Dataset:
    """Simulate ``y_s = P_s x_s + e_s`` for ``cfg.n_images`` random conformations.

    The noise variance is ``noise_ratio * mean_s ||P_s x_s||**2 / pixels``, so
    the expected noise energy is ``noise_ratio`` times the mean clean energy.
    Every image draws from its own stream seeded by ``(seed, s)``.
    """
    n_img = cfg.n_images
    clean = []
    quats = np.zeros((n_img, 4))
    defocus = np.zeros(n_img)
    confs: dict = {}
    for s in range(n_img):
        rng = np.random.default_rng([cfg.seed, s])
        conf = _draw_conformation(cfg, rng)
        for k, v in conf.items():
            confs.setdefault(k, []).append(v)
        if cfg.use_projections:
            rot = Rotation.random(rng)
            defocus[s] = cfg.defocus_um[rng.integers(len(cfg.defocus_um))]
        else:
            rot = Rotation.identity()
            defocus[s] = cfg.ctf_template().defocus_um
        quats[s] = rot.quat
        vol = make_phantom(_spec_for(cfg, conf))
        if cfg.use_projections:
            tmpl = cfg.ctf_template()
            op = ImagingOperator(rot, CtfParams(**{**asdict(tmpl), "defocus_um": defocus[s]}))
            clean.append(core.project(vol, op))
        else:
            clean.append(vol)
    shape = (cfg.n, cfg.n) if cfg.use_projections or cfg.kind == "clock2d" else (cfg.n,) * 3
    clean = np.array(clean).reshape((n_img,) + shape)
    energy = np.mean(np.sum(clean.reshape(n_img, -1) ** 2, axis=1)) if n_img else 0.0
    sigma2 = float(cfg.noise_ratio * energy / np.prod(shape))
    images = clean.copy()
    if sigma2 > 0:
        for s in range(n_img):
            rng = np.random.default_rng([cfg.seed, s, 1])
            images[s] += np.sqrt(sigma2) * rng.standard_normal(shape)
    conformations = {k: np.asarray(v) for k, v in confs.items()}
    return Dataset(images.astype(np.float32), quats, defocus, sigma2, cfg, conformations)


# ---------------------------------------------------------------------------
# manifests


def _stack_bytes(images: np.ndarray) -> bytes:
    # x fastest within every image
    axes = (0,) + tuple(range(images.ndim - 1, 0, -1))
    return np.ascontiguousarray(images.transpose(axes)).astype("<f4").tobytes()


def write_manifest(ds: Dataset, path, truth: bool = False) -> None:
    """Write ``manifest.json`` and ``images.f32`` (and optionally ``truth/``)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = _stack_bytes(np.asarray(ds.images, dtype=np.float32))
    (path / "images.f32").write_bytes(payload)
    cfg = asdict(ds.config)
    cfg["defocus_um"] = list(cfg["defocus_um"])
    per_image = []
    for s in range(ds.n_images):
        per_image.append(
            {
                "quaternion": [float(q) for q in ds.quats[s]],
                "defocus_um": float(ds.defocus_um[s]),
                "conformation": {k: v[s].item() for k, v in ds.conformations.items()},
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "n": ds.n_images,
        "N": ds.size,
        "image_shape": list(ds.images.shape[1:]) if ds.n_images else None,
        "sigma2": float(ds.sigma2),
        "config": cfg,
        "ctf": asdict(ds.config.ctf_template()),
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
        "images": per_image,
    }
    write_json(path / "manifest.json", manifest)
    if truth:
        (path / "truth").mkdir(exist_ok=True)
        for s in range(ds.n_images):
            write_svol(path / "truth" / f"vol_{s:06d}.svol", ds.clean_volume(s))


def read_manifest(path) -> Dataset:
    path = Path(path)
    man = read_json(path / "manifest.json")
    if man.get("version") != MANIFEST_VERSION:
        raise FormatVersionMismatch(f"manifest version {man.get('version')}")
    raw = (path / "images.f32").read_bytes()
    if zlib.crc32(raw) & 0xFFFFFFFF != man["crc32"]:
        raise ChecksumMismatch("images.f32 does not match the manifest checksum")
    cfg = DatasetConfig(**{**man["config"], "defocus_um": tuple(man["config"]["defocus_um"])})
    n_img = man["n"]
    shape = tuple(man["image_shape"]) if n_img else (cfg.n, cfg.n)
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size != n_img * int(np.prod(shape)):
        raise ChecksumMismatch("image stack size does not match the manifest")
    rev = flat.reshape((n_img,) + shape[::-1])
    images = np.ascontiguousarray(rev.transpose((0,) + tuple(range(len(shape), 0, -1))))
    recs = man["images"]
    quats = np.array([r["quaternion"] for r in recs]).reshape(n_img, 4)
    defocus = np.array([r["defocus_um"] for r in recs], dtype=float)
    confs: dict = {}
    for r in recs:
        for k, v in r["conformation"].items():
            confs.setdefault(k, []).append(v)
    confs = {k: np.asarray(v) for k, v in confs.items()}
    return Dataset(images.astype(np.float32), quats, defocus, float(man["sigma2"]), cfg, confs)
