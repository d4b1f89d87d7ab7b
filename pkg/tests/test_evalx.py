import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import cryo_forward as cf
import evalx


def blob_volume(n: int = 9) -> np.ndarray:
    return cf.rasterize_volume(cf.default_gaussian_volume(), n)


def quarter_turn() -> np.ndarray:
    return Rotation.from_euler("z", 90, degrees=True).as_matrix()


# ==================== ROTATION AND ALIGNMENT ====================

def test_rotate_volume_identity_and_quarter_turns():
    v = blob_volume()
    assert np.allclose(evalx.rotate_volume(v, np.eye(3)), v)
    R = quarter_turn()
    turned = v
    for _ in range(4):
        turned = evalx.rotate_volume(turned, R)
    assert np.allclose(turned, v, atol=1e-10)
    assert not np.allclose(evalx.rotate_volume(v, R), v)


def test_alignment_grid_starts_with_identity():
    grid = evalx.alignment_grid(7, 3)
    assert grid.shape == (22, 3, 3)
    assert np.array_equal(grid[0], np.eye(3))


def test_align_volumes_recovers_a_grid_rotation():
    v = blob_volume()
    search = evalx.alignment_grid(7, 3)
    u = evalx.rotate_volume(v, search[5])
    alignment = evalx.align_volumes(u, v, search)
    assert alignment.grid_index == 5
    assert alignment.error < 1e-12
    assert not alignment.refined


def test_align_volumes_takes_the_grid_minimum():
    gen = np.random.default_rng(0)
    u, v = gen.standard_normal((2, 7, 7, 7))
    search = evalx.alignment_grid(5, 2)
    alignment = evalx.align_volumes(u, v, search, refine=False, workers=2)
    rescan = [np.linalg.norm(evalx.rotate_volume(v, R) - u) / np.linalg.norm(v) for R in search]
    assert alignment.error == pytest.approx(min(rescan))
    assert alignment.grid_index == int(np.argmin(rescan))


def test_relative_error_volume_of_identical_volumes_is_zero():
    v = blob_volume()
    assert evalx.relative_error_volume(v, v, evalx.alignment_grid(5, 2)) == 0.0


def test_align_volumes_validation():
    v = blob_volume()
    with pytest.raises(ValueError):
        evalx.align_volumes(v, v[:-1, :-1, :-1])
    with pytest.raises(ValueError):
        evalx.align_volumes(v, np.zeros_like(v))
    with pytest.raises(ValueError):
        evalx.align_volumes(v, v, np.zeros((0, 3, 3)))


# ==================== FSC ====================

def test_fsc_of_a_volume_with_itself_reaches_nyquist():
    v = blob_volume(11)
    curve = evalx.fsc(v, v, voxel_size=1.5)
    assert np.allclose(curve.correlation, 1.0)
    assert evalx.resolution(curve) == pytest.approx(3.0)
    assert curve.shell_freq[-1] == pytest.approx(5 / (11 * 1.5))
    assert list(curve.to_frame().columns) == ["shell_freq", "correlation"]


def test_fsc_is_symmetric_and_bounded():
    gen = np.random.default_rng(1)
    u, v = gen.standard_normal((2, 9, 9, 9))
    a, b = evalx.fsc(u, v), evalx.fsc(v, u)
    assert np.allclose(a.correlation, b.correlation, atol=1e-12)
    assert np.all(np.abs(a.correlation) <= 1.0 + 1e-9)


def test_fsc_of_independent_noise_is_small():
    gen = np.random.default_rng(2)
    u, v = gen.standard_normal((2, 32, 32, 32))
    curve = evalx.fsc(u, v)
    assert np.all(np.abs(curve.correlation[5:]) <= 0.2)


def test_fsc_is_invariant_to_a_joint_rotation():
    gen = np.random.default_rng(3)
    u = blob_volume() + 0.1 * gen.standard_normal((9, 9, 9))
    v = blob_volume()
    R = quarter_turn()
    rotated = evalx.fsc(evalx.rotate_volume(u, R), evalx.rotate_volume(v, R))
    assert np.allclose(rotated.correlation, evalx.fsc(u, v).correlation, atol=1e-2)


def test_resolution_interpolates_the_crossing():
    curve = evalx.FscCurve(np.array([0.0, 0.1, 0.2]), np.array([1.0, 0.6, 0.4]), 1.0)
    assert evalx.resolution(curve, 0.5) == pytest.approx(1 / 0.15)
    first = evalx.FscCurve(np.array([0.0, 0.1]), np.array([0.2, 0.1]), 1.0)
    assert evalx.resolution(first, 0.5) == float("inf")


def test_aligned_fsc_undoes_the_rotation():
    v = blob_volume()
    search = evalx.alignment_grid(7, 3)
    rotated = evalx.rotate_volume(v, search[9])
    curve, alignment = evalx.aligned_fsc(rotated, v, 1.0, search)
    assert alignment.grid_index == 9
    assert np.allclose(curve.correlation, 1.0)


def test_fsc_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        evalx.fsc(np.zeros((5, 5, 5)), np.zeros((7, 7, 7)))
