from dataclasses import replace

import numpy as np
import pytest

import autonn as nn
import cryo_forward as cf
import cryo_recon as cr
import evalx
import numcore
import spherical_design as sd


def small_quadrature(q1=4, q2=2) -> cf.QuadratureSet:
    return cf.build_quadrature(sd.fibonacci_sphere(q1), q2)


def tiny_volume(n=5, seed=0) -> cf.NeuralVolume:
    return cf.build_neural_volume(n, order=2, width=8, depth=1, seed=seed)


def tiny_config(**kw) -> cr.CryoReconConfig:
    base = cr.CryoReconConfig(schedule=((1e-3, 3),), order=2, width=8, depth=1,
                              stagnation_window=0)
    return replace(base, **kw)


# ==================== DENSITIES ====================

def test_quadrature_density_validation():
    with pytest.raises(ValueError):
        cr.QuadratureDensity(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        cr.QuadratureDensity(np.array([1.5, -0.5]))
    assert np.allclose(cr.QuadratureDensity.project(np.array([-1.0, 1.0, 3.0])).mass, [0, 0.25, 0.75])
    assert np.allclose(cr.QuadratureDensity.project(np.array([-1.0, -1.0])).mass, [0.5, 0.5])
    assert len(cr.QuadratureDensity.uniform(6)) == 6


def test_ground_truth_density_lives_on_the_quadrature():
    quad = small_quadrature(6, 3)
    z = cr.ground_truth_density(cf.default_vmf_mixture(), quad)
    assert len(z) == 18 and np.isclose(z.mass.sum(), 1.0)


# ==================== QUADRATURE MOMENTS ====================

def test_quadrature_moments_equal_exhaustive_enumeration():
    n = 15
    quad = small_quadrature(36, 8)
    evaluator = cf.GaussianEvaluator(cf.default_gaussian_volume(), n)
    z = cr.ground_truth_density(cf.default_vmf_mixture(), quad)
    pair = cr.quadrature_moments(evaluator, z, quad, n, workers=2)
    m1 = np.zeros(n * n, dtype=complex)
    m2 = np.zeros((n * n, n * n), dtype=complex)
    for R, w in zip(quad.rotations, z.mass):
        s = cf.slice_volume(evaluator, R, n)
        m1 += w * s
        m2 += w * np.outer(s, s.conj())
    assert len(quad) == 288
    assert np.allclose(pair.m1, m1, atol=1e-10)
    assert np.allclose(pair.m2, m2, atol=1e-10)


def test_quadrature_moments_are_hermitian_psd():
    n = 5
    quad = small_quadrature()
    pair = cr.quadrature_moments(cf.GaussianEvaluator(cf.default_gaussian_volume(), n),
                                 cr.QuadratureDensity.uniform(len(quad)), quad, n)
    assert np.allclose(pair.m2, pair.m2.conj().T)
    assert np.linalg.eigvalsh(pair.m2).min() > -1e-8


def test_quadrature_moments_invariant_to_rotating_volume_and_quadrature():
    n = 7
    quad = small_quadrature(5, 3)
    spec = cf.default_gaussian_volume()
    evaluator = cf.GaussianEvaluator(spec, n)
    R0 = cf.compose(np.array([[0.0, 0.6, 0.8]]), np.array([0.4]))[0]

    def rotated(k):
        return evaluator(np.atleast_2d(k) @ R0)

    moved = cf.QuadratureSet(quad.rotations @ R0.T, quad.directions, quad.q1, quad.q2, None)
    z = cr.QuadratureDensity(np.linspace(1.0, 2.0, len(quad)) / np.linspace(1.0, 2.0, len(quad)).sum())
    a = cr.quadrature_moments(evaluator, z, quad, n)
    b = cr.quadrature_moments(rotated, z, moved, n)
    assert np.allclose(a.m1, b.m1, atol=1e-10) and np.allclose(a.m2, b.m2, atol=1e-10)


def test_quadrature_moments_size_mismatch():
    quad = small_quadrature()
    with pytest.raises(ValueError, match="entries"):
        cr.quadrature_moments(cf.GaussianEvaluator(cf.default_gaussian_volume(), 5),
                              cr.QuadratureDensity.uniform(3), quad, 5)


def test_tape_moments_match_evaluator_moments():
    n = 5
    quad = small_quadrature()
    vol = tiny_volume(n)
    z = cr.QuadratureDensity(np.arange(1.0, 9.0) / 36.0)
    ref = cr.quadrature_moments(cf.NeuralEvaluator(vol), z, quad, n)
    tape = nn.Tape()
    slices = cr.neural_slices_node(vol, quad, tape, [tape.constant(t) for t in vol.flat()])
    m1, m2 = cr.quadrature_moments_node(slices, tape.constant(z.mass))
    assert np.allclose(m1.value, ref.m1, atol=1e-12)
    assert np.allclose(m2.value, ref.m2, atol=1e-12)


# ==================== NEURAL GROUND TRUTH ====================

def test_fit_neural_gt_lowers_the_loss():
    n = 5
    target = cf.rasterize_volume(cf.default_gaussian_volume(), n)
    result = cr.fit_neural_gt(target, tiny_volume(n), schedule=((1e-2, 30),))
    assert len(result.trace) == 30
    assert result.trace["loss"].iloc[-1] < result.trace["loss"].iloc[0]
    assert np.isfinite(result.error)


def test_fit_neural_gt_rejects_empty_target():
    with pytest.raises(ValueError, match="zero"):
        cr.fit_neural_gt(np.zeros((5, 5, 5)), tiny_volume(5), schedule=((1e-3, 1),))


def test_relative_error_at_identity():
    v = np.ones((3, 3, 3))
    assert cr.relative_error_at_identity(2 * v, v) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cr.relative_error_at_identity(v, 0 * v)


@pytest.mark.slow
def test_desk_scale_neural_fit():
    n = 15
    evaluator = cf.GaussianEvaluator(cf.default_gaussian_volume(), n)
    result = cr.fit_neural_gt(evaluator, cf.build_neural_volume(n, seed=0))
    assert result.error <= 0.02


# ==================== RECONSTRUCTION ====================

def test_reconstruct_runs_and_records_a_trace():
    n = 5
    quad = small_quadrature()
    truth = tiny_volume(n, seed=1)
    moments = cr.quadrature_moments(cf.NeuralEvaluator(truth), cr.QuadratureDensity.uniform(len(quad)), quad, n)
    encoder = cr.build_cryo_encoder(n, len(quad), hidden=16, seed=0)
    result = cr.reconstruct(moments, tiny_config(), quad, encoder=encoder)
    assert list(result.trace.columns) == ["epoch", "loss", "m1_rel_err", "m2_rel_err"]
    assert len(result.trace) == 4
    assert len(result.z_rho) == len(quad) and result.z_v is None
    assert result.encoder is not None and not result.stagnated
    assert result.final_loss == result.trace["loss"].iloc[-1]


def test_reconstruct_with_latent_volume():
    n = 5
    quad = small_quadrature()
    moments = cr.quadrature_moments(cf.NeuralEvaluator(tiny_volume(n)), cr.QuadratureDensity.uniform(len(quad)),
                                    quad, n)
    cfg = tiny_config(use_latent_zv=True, latent_width=3, schedule=((1e-3, 1),))
    encoder = cr.build_cryo_encoder(n, len(quad), use_latent_zv=True, latent_width=3, hidden=16)
    result = cr.reconstruct(moments, cfg, quad, encoder=encoder)
    assert result.z_v.shape == (3,)
    assert result.volume.latent_width == 3


def test_ground_truth_is_a_fixed_point():
    n = 5
    quad = small_quadrature()
    vol = tiny_volume(n, seed=2)
    z = cr.ground_truth_density(cf.default_vmf_mixture(), quad)
    moments = cr.quadrature_moments(cf.NeuralEvaluator(vol), z, quad, n)
    result = cr.reconstruct(moments, tiny_config(schedule=((1e-7, 20),)), quad, volume=vol, fixed_density=z)
    assert result.trace["loss"].iloc[0] < 1e-5
    assert result.trace["m1_rel_err"].max() < 1e-3
    assert result.trace["m2_rel_err"].max() < 1e-3
    assert result.encoder is None
    assert np.allclose(result.z_rho.mass, z.mass)


def test_tiny_step_does_not_increase_the_loss():
    n = 5
    quad = small_quadrature()
    moments = cr.quadrature_moments(cf.GaussianEvaluator(cf.default_gaussian_volume(), n),
                                    cr.QuadratureDensity.uniform(len(quad)), quad, n)
    encoder = cr.build_cryo_encoder(n, len(quad), hidden=16, seed=1)
    result = cr.reconstruct(moments, tiny_config(schedule=((1e-9, 1),)), quad, encoder=encoder)
    first, second = result.trace["loss"].iloc[:2]
    assert second <= first * (1 + 1e-12)


def test_reconstruct_flags_stagnation():
    n = 5
    quad = small_quadrature()
    moments = cr.quadrature_moments(cf.NeuralEvaluator(tiny_volume(n)), cr.QuadratureDensity.uniform(len(quad)),
                                    quad, n)
    cfg = tiny_config(stagnation_window=1, stagnation_tol=1.0)
    result = cr.reconstruct(moments, cfg, quad, fixed_density=cr.QuadratureDensity.uniform(len(quad)))
    assert result.stagnated


def test_reconstruct_validates_sizes():
    n = 5
    quad = small_quadrature()
    moments = cr.quadrature_moments(cf.NeuralEvaluator(tiny_volume(n)), cr.QuadratureDensity.uniform(len(quad)),
                                    quad, n)
    with pytest.raises(ValueError, match="does not match"):
        cr.reconstruct(moments, tiny_config(), quad, volume=tiny_volume(7))
    with pytest.raises(ValueError, match="weights"):
        cr.reconstruct(moments, tiny_config(), quad, encoder=cr.build_cryo_encoder(n, 3, hidden=8))
    with pytest.raises(ValueError, match="entries"):
        cr.reconstruct(moments, tiny_config(), quad, fixed_density=cr.QuadratureDensity.uniform(3))


def test_recon_config_validation():
    with pytest.raises(ValueError):
        cr.CryoReconConfig(lam=-1.0)
    with pytest.raises(ValueError):
        cr.CryoReconConfig(schedule=((0.0, 5),))
    with pytest.raises(ValueError):
        cr.CryoReconConfig(q1=0)
    with pytest.raises(ValueError):
        cr.build_cryo_encoder(3, 4)


@pytest.mark.slow
def test_desk_scale_reconstruction():
    n = 15
    spec = cf.default_vmf_mixture()
    quad = cf.build_quadrature(36, 8)
    evaluator = cf.GaussianEvaluator(cf.default_gaussian_volume(), n)
    moments = cf.simulate_moments_2d(evaluator, spec, 200000, 0.5, n, numcore.SeededRng(0, "sim"), workers=4)
    result = cr.reconstruct(moments, cr.CryoReconConfig(), quad)
    last = result.trace.iloc[-1]
    assert last["m1_rel_err"] <= 0.02
    assert last["m2_rel_err"] <= 0.05
    truth = cf.rasterize_evaluator(evaluator, n)
    estimate = cf.rasterize_evaluator(cf.NeuralEvaluator(result.volume, result.z_v), n)
    curve, _ = evalx.aligned_fsc(truth, estimate, 1.0, evalx.alignment_grid(36, 8), workers=4)
    assert evalx.resolution(curve) <= 3.0
