import numpy as np
import pytest
from hypothesis import given, strategies as st

from specvol import core
from specvol.errors import LengthMismatch, PointOutOfBand

from conftest import random_ops


def _inner(a, b):
    return np.vdot(a, b)


# --- grids and centered DFT -------------------------------------------------


def test_grid_points_and_indices():
    g = core.Grid(8)
    assert len(g.points) == 8
    assert g.spacing == pytest.approx(0.25)
    assert g.points[0] == -1.0 and g.points[-1] == pytest.approx(0.75)
    assert list(g.indices) == list(range(-4, 4))
    assert g.frequencies[4] == 0.0
    assert list(core.Grid(5).indices) == [-2, -1, 0, 1, 2]


def test_constant_volume_is_dc_only():
    c = 2.5
    f = core.dft_forward(np.full((6, 6, 6), c))
    dc = f[3, 3, 3]
    assert dc == pytest.approx(c * 6**3)
    f[3, 3, 3] = 0
    assert np.abs(f).max() <= 1e-10 * c * 6**3


def test_cosine_image_matches_literal_and_peaks():
    n = 8
    u = core.spatial_points(n)
    img = np.cos(np.pi * u)[:, None] * np.ones(n)[None, :]
    f = core.dft_forward(img)
    np.testing.assert_allclose(f, core.dft_literal(img), atol=1e-12)
    # cos(pi u) = cos(2 pi (1/2) u): frequency k = 1/2, i.e. index j = 1
    j = core.freq_indices(n)
    mag = np.abs(f)
    peaks = {(int(j[a]), int(j[b])) for a, b in zip(*np.nonzero(mag > 1e-8))}
    assert peaks == {(-1, 0), (1, 0)}


@pytest.mark.parametrize("shape", [(4, 4, 4), (5, 5, 5), (6, 6)])
def test_dft_matches_literal(rng, shape):
    s = rng.standard_normal(shape)
    f = core.dft_forward(s)
    ref = core.dft_literal(s)
    assert np.linalg.norm(f - ref) <= 1e-12 * np.linalg.norm(ref)


@given(st.integers(1, 16), st.integers(2, 3), st.integers(0, 2**32 - 1))
def test_dft_roundtrip_and_parseval(n, dim, seed):
    s = np.random.default_rng(seed).standard_normal((n,) * dim)
    f = core.dft_forward(s)
    back = core.dft_inverse(f)
    assert np.linalg.norm(back - s) <= 1e-12 * max(np.linalg.norm(s), 1e-300)
    assert np.sum(s**2) == pytest.approx(np.sum(np.abs(f) ** 2) / n**dim, rel=1e-10)


def test_hermitian_symmetry_of_real_transform(rng):
    n = 7  # odd: the grid is symmetric about DC
    f = core.dft_forward(rng.standard_normal((n, n, n)))
    flipped = f[::-1, ::-1, ::-1]
    assert np.linalg.norm(f - np.conj(flipped)) <= 1e-10 * np.linalg.norm(f)


# --- rotations --------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_random_rotation_is_orthogonal(seed):
    r = core.Rotation.random(np.random.default_rng(seed))
    m = r.matrix
    assert np.linalg.norm(r.quat) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-10)
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-10)


def test_rotation_mean_matrix_vanishes():
    rng = np.random.default_rng(0)
    n = 4000
    mean = np.mean([core.Rotation.random(rng).matrix for _ in range(n)], axis=0)
    assert np.abs(mean).max() <= 3 / np.sqrt(n)


# --- CTF --------------------------------------------------------------------


def test_ctf_disabled_is_one():
    c = core.CtfParams(enabled=False)
    np.testing.assert_array_equal(core.ctf_eval(c, np.linspace(0, 0.5, 7)), 1.0)
    assert core.ctf_eval(c, 0.2) == 1.0


def test_ctf_at_zero_frequency():
    assert core.ctf_eval(core.CtfParams(amplitude_contrast=0.07), 0.0) == pytest.approx(-0.07, abs=1e-12)


def test_ctf_larger_defocus_crosses_zero_earlier():
    f = np.linspace(1e-4, 0.3, 20000)

    def first_zero(defocus):
        v = core.ctf_eval(core.CtfParams(defocus_um=defocus), f)
        return f[np.nonzero(np.sign(v[1:]) != np.sign(v[:-1]))[0][0]]

    assert first_zero(2.0) < first_zero(1.5)


def test_electron_wavelength_300kv():
    assert core.electron_wavelength(300.0) == pytest.approx(0.019687, rel=1e-4)


# --- non-uniform transforms -------------------------------------------------


def test_nudft_empty_points():
    vol = np.ones((4, 4, 4))
    assert core.nudft_eval(vol, np.zeros((0, 3))).shape == (0,)
    np.testing.assert_array_equal(core.nudft_adjoint(np.zeros((0, 3)), [], 4), 0)


def test_nudft_delta_at_center():
    n = 8
    vol = np.zeros((n, n, n))
    vol[n // 2, n // 2, n // 2] = 1.0  # u = 0
    pts = np.random.default_rng(1).uniform(-n / 4, n / 4, (50, 3))
    np.testing.assert_allclose(core.nudft_eval(vol, pts), 1.0, atol=1e-12)


@pytest.mark.parametrize("n", [8, 7])
def test_nudft_fast_path_matches_literal(rng, n):
    vol = rng.standard_normal((n, n, n))
    pts = rng.uniform(-n / 4, n / 4, (100, 3))
    direct = core.nudft_eval(vol, pts, method="direct")
    fast = core.nudft_eval(vol, pts)
    assert np.linalg.norm(fast - direct) <= 1e-6 * np.linalg.norm(direct)
    # the literal sum itself
    u = core.spatial_points(n)
    uu = np.array(np.meshgrid(u, u, u, indexing="ij")).reshape(3, -1)
    lit = np.exp(-2j * np.pi * pts @ uu) @ vol.ravel()
    np.testing.assert_allclose(direct, lit, atol=1e-10)


def test_nudft_on_grid_equals_dft(rng):
    n = 8
    vol = rng.standard_normal((n, n, n))
    f = core.dft_forward(vol)
    j = core.freq_indices(n)
    idx = rng.integers(0, n, (40, 3))
    pts = j[idx] / 2.0
    np.testing.assert_allclose(core.nudft_eval(vol, pts), f[idx[:, 0], idx[:, 1], idx[:, 2]], atol=1e-10)


def test_nudft_rejects_out_of_band():
    with pytest.raises(PointOutOfBand):
        core.nudft_eval(np.zeros((8, 8, 8)), [[2.5, 0, 0]])


def test_nudft_adjoint_length_mismatch():
    with pytest.raises(LengthMismatch):
        core.nudft_adjoint(np.zeros((3, 3)), np.ones(2), 8)


def test_adjoint_of_dc_is_constant():
    grid = core.nudft_adjoint([[0.0, 0.0, 0.0]], [1.0], 6)
    np.testing.assert_allclose(grid, 1.0, atol=1e-12)


@pytest.mark.parametrize("method", ["direct", "auto"])
def test_nudft_adjoint_identity(rng, method):
    n = 8
    for _ in range(5):
        v = rng.standard_normal((n, n, n))
        pts = rng.uniform(-n / 4, n / 4, (60, 3))
        w = rng.standard_normal(60) + 1j * rng.standard_normal(60)
        lhs = _inner(w, core.nudft_eval(v, pts, method=method))
        rhs = _inner(core.nudft_adjoint(pts, w, n, method=method), v)
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(w) * 60


def test_oversampled_adjoint_matches_literal(rng):
    n = 6
    pts = rng.uniform(-n / 4, n / 4, (20, 3))
    w = rng.standard_normal(20)
    fast = core.nudft_adjoint(pts, w, n, oversample=2)
    direct = core.nudft_adjoint(pts, w, n, oversample=2, method="direct")
    u = 2.0 * (np.arange(2 * n) - n) / n
    uu = np.array(np.meshgrid(u, u, u, indexing="ij")).reshape(3, -1)
    lit = (np.exp(2j * np.pi * uu.T @ pts.T) @ w).reshape(2 * n, 2 * n, 2 * n)
    np.testing.assert_allclose(direct, lit, atol=1e-10)
    assert np.linalg.norm(fast - lit) <= 1e-9 * np.linalg.norm(lit)


# --- slices and the imaging operator ----------------------------------------


def test_slice_points_identity_and_half_turn():
    n = 8
    k = core.image_freqs(n) / 2
    p = core.slice_points(core.Rotation.identity(), n)
    np.testing.assert_array_equal(p[:, :2], k)
    np.testing.assert_array_equal(p[:, 2], 0)
    p = core.slice_points(core.Rotation.about_axis([0, 0, 1], np.pi), n)
    np.testing.assert_allclose(p[:, :2], -k, atol=1e-12)
    assert len(p) == n * n


@given(st.integers(0, 2**32 - 1))
def test_slice_points_preserve_norm(seed):
    n = 8
    p = core.slice_points(core.Rotation.random(np.random.default_rng(seed)), n)
    k = core.image_freqs(n) / 2
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), np.linalg.norm(k, axis=1), atol=1e-12)


def test_project_zero_volume():
    op = core.ImagingOperator(core.Rotation.random(np.random.default_rng(0)))
    np.testing.assert_array_equal(core.project(np.zeros((8, 8, 8)), op), 0)
    np.testing.assert_array_equal(core.backproject(np.zeros((8, 8)), op), 0)


def test_project_identity_is_line_integral():
    n = 8
    rng = np.random.default_rng(3)
    # band-limited in-plane content (inside the retained disc), arbitrary z profile
    mask = core.image_mask(n)
    plane = core.dft_inverse(core.dft_forward(rng.standard_normal((n, n))) * mask).real
    prof = rng.uniform(0.5, 1.5, n)
    vol = plane[:, :, None] * prof[None, None, :]
    img = core.project(vol, core.ImagingOperator())
    np.testing.assert_allclose(img, vol.sum(axis=2), atol=1e-6 * np.abs(vol).sum())


def test_project_rotation_invariance_of_blob():
    # width chosen so both the spatial tail at the box edge and the spectral
    # tail at the disc edge are far below the tolerance
    n = 32
    u = core.spatial_points(n)
    x, y, z = np.meshgrid(u, u, u, indexing="ij")
    blob = np.exp(-(x**2 + y**2 + z**2) / (2 * 0.15**2))
    rng = np.random.default_rng(5)
    a = core.project(blob, core.ImagingOperator(core.Rotation.random(rng)))
    b = core.project(blob, core.ImagingOperator(core.Rotation.random(rng)))
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_backproject_center_content_is_constant_along_z():
    n = 8
    img = np.zeros((n, n))
    img[n // 2, n // 2] = 1.0
    vol = core.backproject(img, core.ImagingOperator())
    # every z-slice equals the first: the slice lies in the k_z = 0 plane
    for k in range(n):
        np.testing.assert_allclose(vol[:, :, k], vol[:, :, 0], atol=1e-12)


def test_projection_adjoint_100_trials():
    rng = np.random.default_rng(2024)
    n = 8
    worst = 0.0
    for op in random_ops(rng, 100):
        v = rng.standard_normal((n, n, n))
        y = rng.standard_normal((n, n))
        pv = core.project(v, op)
        err = abs(np.vdot(pv, y) - np.vdot(v, core.backproject(y, op)))
        worst = max(worst, err / (np.linalg.norm(pv) * np.linalg.norm(y)))
    assert worst <= 1e-10


def test_backproject_many_matches_loop(rng):
    n = 8
    ops = random_ops(rng, 6)
    imgs = rng.standard_normal((6, n, n))
    w = rng.standard_normal((2, 6))
    got = core.backproject_many(imgs, ops, w)
    for t in range(2):
        ref = sum(w[t, s] * core.backproject(imgs[s], ops[s], method="direct") for s in range(6))
        np.testing.assert_allclose(got[t], ref, atol=1e-10)


def test_projection_is_real_for_odd_and_even(rng):
    for n in (7, 8):
        v = rng.standard_normal((n, n, n))
        img = core.project(v, random_ops(rng, 1)[0])
        assert img.dtype == float and img.shape == (n, n)
