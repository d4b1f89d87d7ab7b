import json
import struct

import numpy as np
import pytest

import numcore
from errors import ArtifactError, NumericalError


# ==================== GRIDS AND TRANSFORMS ====================

def test_frequency_grid_is_centered():
    k = numcore.frequency_grid(4)
    assert np.allclose(k, [-np.pi, -np.pi / 2, 0.0, np.pi / 2])
    assert numcore.frequency_grid(5)[2] == 0.0


def test_fft_of_centered_delta_is_flat():
    for n in (4, 5):
        x = np.zeros(n)
        x[n // 2] = 1.0
        assert np.allclose(numcore.fft(x), np.full(n, 1.0 / np.sqrt(n)))


def test_fft_of_first_index_delta_alternates():
    # index 0 is offset -2 on a centered 4-grid
    assert np.allclose(numcore.fft(np.array([1.0, 0.0, 0.0, 0.0])), [0.5, -0.5, 0.5, -0.5], atol=1e-12)
    assert np.allclose(numcore.fft(np.array([0.0, 0.0, 1.0, 0.0])), [0.5, 0.5, 0.5, 0.5], atol=1e-12)


def test_fft_of_constant_and_direct_sum():
    out = numcore.fft(np.full(6, 2.0))
    assert np.isclose(out[3], 2.0 * np.sqrt(6)) and np.allclose(np.delete(out, 3), 0.0, atol=1e-12)
    n = 8
    x = np.random.default_rng(3).standard_normal(n) + 1j * np.random.default_rng(4).standard_normal(n)
    p = numcore.pixel_offsets(n)
    k = numcore.frequency_grid(n)
    direct = np.exp(-1j * np.outer(k, p)) @ x / np.sqrt(n)
    assert np.allclose(numcore.fft(x), direct, atol=1e-12)


def test_fft_is_unitary_and_inverted_by_ifft():
    x = np.random.default_rng(0).standard_normal((6, 5))
    y = numcore.fft(x, dims=(0, 1))
    assert np.isclose(np.linalg.norm(y), np.linalg.norm(x))
    assert np.allclose(numcore.ifft(y, dims=(0, 1)), x)


def test_dft_matrix_matches_fft():
    n = 7
    F = numcore.dft_matrix(n)
    v = np.random.default_rng(1).standard_normal(n)
    assert np.allclose(F @ v, numcore.fft(v))
    assert np.allclose(F.conj().T @ F, np.eye(n))


def test_real_signal_transform_is_hermitian_symmetric():
    for n in (7, 8):
        v = np.random.default_rng(n).standard_normal(n)
        y = numcore.fft(v)
        neg = numcore.negated_index(n)
        assert np.allclose(y[neg], y.conj())


def test_frequency_grid_nd_puts_x_first():
    grid = numcore.frequency_grid_nd(3, 2)
    assert grid.shape == (9, 2)
    # x varies fastest along the flattened layout
    assert np.allclose(grid[:3, 0], numcore.frequency_grid(3))
    assert np.allclose(grid[:3, 1], numcore.frequency_grid(3)[0])


def test_fft_rejects_non_finite_input():
    with pytest.raises(NumericalError):
        numcore.fft(np.array([0.0, np.nan, 1.0]))


def test_ensure_finite_counts_bad_entries():
    with pytest.raises(NumericalError, match="2 non-finite"):
        numcore.ensure_finite(np.array([np.inf, 1.0, np.nan]), "weights")


# ==================== RANDOMNESS ====================

def test_seeded_rng_is_reproducible_per_chunk():
    a = numcore.SeededRng(7, "noise")
    b = numcore.SeededRng(7, "noise")
    assert np.array_equal(a.generator(3).standard_normal(5), b.generator(3).standard_normal(5))
    assert not np.array_equal(a.generator(0).standard_normal(5), a.generator(1).standard_normal(5))


def test_seeded_rng_labels_separate_streams():
    base = numcore.SeededRng(7, "run")
    x = base.child("signal").generator().standard_normal(4)
    y = base.child("density").generator().standard_normal(4)
    assert base.child("signal").stream_label == "run/signal"
    assert not np.array_equal(x, y)


def test_rng_draw_validates_arguments():
    rng = numcore.SeededRng(0)
    assert numcore.rng_draw(rng, "uniform", (3,), low=2.0, high=3.0).min() >= 2.0
    with pytest.raises(ValueError):
        numcore.rng_draw(rng, "gaussian", 3, sigma=-1.0)
    with pytest.raises(ValueError):
        numcore.rng_draw(rng, "uniform", 3, low=1.0, high=0.0)
    with pytest.raises(ValueError, match="unknown distribution"):
        numcore.rng_draw(rng, "cauchy", 3)


# ==================== REDUCTION ====================

def test_reduce_sum_is_identical_across_worker_counts():
    gen = np.random.default_rng(3)
    chunks = [gen.standard_normal((4, 4)) * 10.0 ** gen.integers(-8, 8) for _ in range(3000)]
    one = numcore.reduce_sum(chunks, workers=1)
    four = numcore.reduce_sum(chunks, workers=4)
    assert np.array_equal(one, four)
    assert np.allclose(one, np.sum(chunks, axis=0))


def test_reduce_sum_rejects_bad_input():
    with pytest.raises(ValueError):
        numcore.reduce_sum([])
    with pytest.raises(ValueError, match="chunk 1"):
        numcore.reduce_sum([np.zeros(2), np.zeros(3)])


def test_parallel_map_keeps_order():
    assert numcore.parallel_map(lambda x: x * x, range(20), workers=4) == [i * i for i in range(20)]


def test_chunk_sizes():
    assert numcore.chunk_sizes(10, 4) == [4, 4, 2]
    assert numcore.chunk_sizes(0, 4) == []
    with pytest.raises(ValueError):
        numcore.chunk_sizes(5, 0)


# ==================== OMT1 CONTAINER ====================

def test_tensor_file_keeps_dtype_shape_and_metadata(tmp_path):
    x = (np.arange(6) + 1j * np.arange(6)).reshape(2, 3)
    path = numcore.write_tensor(tmp_path / "x.omt", x, {"sigma": 0.5})
    data, meta = numcore.read_tensor(path)
    assert data.dtype == np.complex128 and data.shape == (2, 3)
    assert np.array_equal(data, x)
    assert meta == {"sigma": 0.5}
    assert json.loads((tmp_path / "x.omt.json").read_text())["sigma"] == 0.5


def test_tensor_header_layout(tmp_path):
    path = numcore.write_tensor(tmp_path / "r.omt", np.zeros((2, 5)))
    raw = path.read_bytes()
    assert raw[:4] == b"OMT1"
    assert struct.unpack_from("<III", raw, 4) == (1, 0, 2)
    assert struct.unpack_from("<2Q", raw, 16) == (2, 5)
    assert len(raw) == 32 + 10 * 8


def test_read_tensor_without_sidecar_has_empty_metadata(tmp_path):
    path = numcore.write_tensor(tmp_path / "r.omt", np.ones(3))
    assert numcore.read_tensor(path)[1] == {}


@pytest.mark.parametrize("mutate, message", [
    (lambda raw: b"XXXX" + raw[4:], "not an OMT1"),
    (lambda raw: raw[:-8], "payload"),
    (lambda raw: raw[:4] + struct.pack("<I", 9) + raw[8:], "version"),
    (lambda raw: raw[:8] + struct.pack("<I", 5) + raw[12:], "dtype code"),
])
def test_read_tensor_rejects_corrupt_files(tmp_path, mutate, message):
    path = numcore.write_tensor(tmp_path / "x.omt", np.ones(4))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(ArtifactError, match=message):
        numcore.read_tensor(path)


def test_read_tensor_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        numcore.read_tensor(tmp_path / "absent.omt")


def test_content_hash_tracks_bytes(tmp_path):
    a = numcore.write_tensor(tmp_path / "a.omt", np.ones(3))
    b = numcore.write_tensor(tmp_path / "b.omt", np.ones(3))
    c = numcore.write_tensor(tmp_path / "c.omt", np.zeros(3))
    assert numcore.content_hash(a) == numcore.content_hash(b)
    assert numcore.content_hash(a) != numcore.content_hash(c)
    assert len(numcore.content_hash(a)) == 64
