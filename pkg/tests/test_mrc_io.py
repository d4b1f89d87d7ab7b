import numpy as np
import pytest

import mrc_io
import numcore
from errors import ArtifactError


def cosine_grid(n: int, cycles: int) -> np.ndarray:
    p = numcore.pixel_offsets(n)
    wave = np.cos(2.0 * np.pi * cycles * p / n)
    return np.broadcast_to(wave[None, None, :], (n, n, n)).copy()


def test_mrc_keeps_data_and_voxel_size(tmp_path):
    grid = np.random.default_rng(0).standard_normal((6, 6, 6))
    path = mrc_io.save_mrc(tmp_path / "map.mrc", grid, voxel_size=1.5)
    density = mrc_io.load_mrc(path)
    assert density.n == 6
    assert density.voxel_size == pytest.approx(1.5)
    assert np.allclose(density.data, grid, atol=1e-6)


def test_non_cubic_maps_are_rejected(tmp_path):
    path = mrc_io.save_mrc(tmp_path / "slab.mrc", np.zeros((4, 6, 6)))
    with pytest.raises(ArtifactError, match="cubic"):
        mrc_io.load_mrc(path)


def test_fourier_crop_resamples_band_limited_maps():
    small = mrc_io.fourier_crop(cosine_grid(16, 2), 8)
    assert small.shape == (8, 8, 8)
    assert np.allclose(small, cosine_grid(8, 2), atol=1e-12)
    assert np.allclose(mrc_io.fourier_crop(np.full((6, 6, 6), 3.0), 3), 3.0)


def test_fourier_crop_bounds():
    grid = cosine_grid(8, 1)
    assert np.array_equal(mrc_io.fourier_crop(grid, 8), grid)
    with pytest.raises(ValueError):
        mrc_io.fourier_crop(grid, 9)


def test_prepare_map_scales_norm_and_voxel_size():
    prepared = mrc_io.prepare_map(mrc_io.DensityMap(cosine_grid(16, 1) + 1.0, 1.2), 8)
    assert prepared.n == 8
    assert np.linalg.norm(prepared.data) == pytest.approx(1.0)
    assert prepared.voxel_size == pytest.approx(2.4)
    with pytest.raises(ArtifactError, match="zero"):
        mrc_io.prepare_map(mrc_io.DensityMap(np.zeros((4, 4, 4)), 1.0), 2)


def test_load_volume_by_suffix(tmp_path):
    grid = cosine_grid(5, 1)
    omt, mrc = mrc_io.save_volume(tmp_path, "volume", grid, voxel_size=2.0, meta={"source": "test"})
    assert omt.suffix == ".omt" and mrc.suffix == ".mrc"
    from_omt = mrc_io.load_volume(omt)
    from_mrc = mrc_io.load_volume(mrc)
    assert from_omt.voxel_size == from_mrc.voxel_size == pytest.approx(2.0)
    assert np.array_equal(from_omt.data, grid)
    assert np.allclose(from_mrc.data, grid, atol=1e-6)


def test_load_volume_rejects_non_volumes(tmp_path):
    numcore.write_tensor(tmp_path / "complex.omt", np.ones((3, 3, 3), dtype=complex))
    numcore.write_tensor(tmp_path / "flat.omt", np.ones((3, 3)))
    with pytest.raises(ArtifactError, match="complex"):
        mrc_io.load_volume(tmp_path / "complex.omt")
    with pytest.raises(ArtifactError, match="cubic"):
        mrc_io.load_volume(tmp_path / "flat.omt")
