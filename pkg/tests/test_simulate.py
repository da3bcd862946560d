import numpy as np
import pytest
from scipy import stats

from specvol import core, simulate
from specvol.errors import ChecksumMismatch, InvalidSpec
from specvol.simulate import DatasetConfig, PhantomSpec, make_phantom, sample_dataset


def test_spin_symmetry():
    a = make_phantom(PhantomSpec("spin", 32, theta=0.3))
    b = make_phantom(PhantomSpec("spin", 32, theta=0.3 + 2 * np.pi / 4))
    assert np.abs(a - b).max() <= 1e-6 * np.abs(a).max()
    c = make_phantom(PhantomSpec("spin", 32, theta=0.3 + np.pi / 4))
    assert np.abs(a - c).max() > 1e-2


def test_spin_other_symmetry_order():
    a = make_phantom(PhantomSpec("spin", 16, theta=0.1, symmetry=3))
    b = make_phantom(PhantomSpec("spin", 16, theta=0.1 + 2 * np.pi / 3, symmetry=3))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_stretch_zero_shift_is_base():
    n = 32
    base = simulate._stretch_base(n, 0.35)
    np.testing.assert_array_equal(make_phantom(PhantomSpec("stretch", n, shift=(0, 0))), base)


def test_stretch_slice_displacements():
    n = 32
    z0 = simulate.bottom_slice(n)
    base = simulate._stretch_base(n, 0.35)
    v = make_phantom(PhantomSpec("stretch", n, shift=(3, -2)))
    # s_z = 0 at z = N/2: unchanged
    np.testing.assert_allclose(v[:, :, n // 2], base[:, :, n // 2], atol=1e-12)
    # s_z = 1 at z = z0: exact integer shift v'[x, y] = v[x + 3, y - 2]
    expect = np.roll(base[:, :, z0], shift=(-3, 2), axis=(0, 1))
    np.testing.assert_allclose(v[:, :, z0], expect, atol=1e-10)
    # upper half untouched
    np.testing.assert_array_equal(v[:, :, n // 2 + 1 :], base[:, :, n // 2 + 1 :])


def test_stretch_rejects_large_shift():
    with pytest.raises(InvalidSpec):
        PhantomSpec("stretch", 32, shift=(5, 0))
    with pytest.raises(InvalidSpec):
        PhantomSpec("blob", 32)


def test_phantom_is_pure():
    s = PhantomSpec("clock3d", 16, theta=1.0)
    np.testing.assert_array_equal(make_phantom(s), make_phantom(s))


def test_clock_hand_rotates():
    a = make_phantom(PhantomSpec("clock2d", 32, theta=0.0))
    b = make_phantom(PhantomSpec("clock2d", 32, theta=np.pi / 2))
    neg = (-np.arange(32)) % 32
    # b(x, y) = a(R^-1 (x, y)) = a(y, -x) about the grid centre
    np.testing.assert_allclose(a.T[neg, :], b, atol=1e-12)


def test_noiseless_dataset_is_clean():
    cfg = DatasetConfig(n_images=5, n=16, pixel_size_A=3.0)
    ds = sample_dataset(cfg)
    assert ds.sigma2 == 0.0
    for s in range(5):
        clean = core.project(ds.clean_volume(s), ds.operator(s))
        np.testing.assert_allclose(ds.images[s], clean.astype(np.float32), atol=1e-6)


def test_noise_calibration():
    cfg = DatasetConfig(n_images=100, n=32, noise_ratio=30.0, seed=4, pixel_size_A=3.0)
    ds = sample_dataset(cfg)
    clean = np.array([core.project(ds.clean_volume(s), ds.operator(s)) for s in range(100)])
    noise = ds.images - clean
    ratio = np.sum(noise**2) / np.sum(clean**2)
    assert 27 <= ratio <= 33
    assert ds.sigma2 == pytest.approx(30 * np.mean(np.sum(clean**2, axis=(1, 2))) / 32**2, rel=1e-5)


def test_same_seed_bit_identical():
    cfg = DatasetConfig(n_images=8, n=16, noise_ratio=2.0, seed=11)
    a, b = sample_dataset(cfg), sample_dataset(cfg)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.quats, b.quats)


def test_identity_path_and_defocus_law():
    ds = sample_dataset(DatasetConfig(n_images=4, n=16, kind="clock2d", use_projections=False))
    assert ds.images.shape == (4, 16, 16)
    np.testing.assert_array_equal(ds.quats[:, 0], 1.0)
    ds = sample_dataset(DatasetConfig(n_images=200, n=8))
    assert set(np.round(ds.defocus_um, 2)) <= set(simulate.PAPER_DEFOCI_UM)


def test_theta_is_uniform():
    cfg = DatasetConfig(n_images=10000, n=4, kind="clock2d", use_projections=False)
    thetas = np.array([simulate._draw_conformation(cfg, np.random.default_rng([0, s]))["theta"]
                       for s in range(10000)])
    assert stats.kstest(thetas / (2 * np.pi), "uniform").statistic <= 0.05


def test_stretch_displacement_law():
    ds = sample_dataset(DatasetConfig(n_images=300, n=8, kind="stretch", use_projections=False))
    dm = simulate.default_delta_max(8)
    assert ds.conformations["dx"].min() >= -dm and ds.conformations["dx"].max() <= dm


def test_manifest_roundtrip(tmp_path):
    ds = sample_dataset(DatasetConfig(n_images=6, n=16, noise_ratio=1.0, kind="stretch"))
    simulate.write_manifest(ds, tmp_path / "d", truth=True)
    back = simulate.read_manifest(tmp_path / "d")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_allclose(back.quats, ds.quats)
    np.testing.assert_array_equal(back.defocus_um, ds.defocus_um)
    assert back.sigma2 == ds.sigma2 and back.config == ds.config
    for k in ds.conformations:
        np.testing.assert_array_equal(back.conformations[k], ds.conformations[k])
    assert len(list((tmp_path / "d" / "truth").glob("*.svol"))) == 6


def test_manifest_truncated_stack(tmp_path):
    ds = sample_dataset(DatasetConfig(n_images=3, n=8))
    simulate.write_manifest(ds, tmp_path / "d")
    p = tmp_path / "d" / "images.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ChecksumMismatch):
        simulate.read_manifest(tmp_path / "d")


def test_manifest_empty_dataset(tmp_path):
    ds = sample_dataset(DatasetConfig(n_images=0, n=8))
    simulate.write_manifest(ds, tmp_path / "d")
    back = simulate.read_manifest(tmp_path / "d")
    assert back.n_images == 0 and back.sigma2 == 0.0


def test_config_validation():
    with pytest.raises(InvalidSpec):
        DatasetConfig(kind="clock2d", use_projections=True)
    with pytest.raises(InvalidSpec):
        DatasetConfig(noise_ratio=-1)
