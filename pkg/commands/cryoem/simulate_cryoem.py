"""
Simulate cryo-EM images of a volume under a vMF-mixture viewing distribution.
"""
import logging
from pathlib import Path

import numpy as np

import autonn as nn
import cryo_forward as cf
import cryo_recon as cr
import mrc_io
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import SimulateCryoParams
from errors import ArtifactError

logger = logging.getLogger(__name__)

PARAMS_SUFFIX = ".params"


def load_evaluator(path: Path | None, n: int) -> tuple[cf.VolumeEvaluator, float]:
    """
    Volume source: None for the gaussian test volume, a fitted `.params`
    file, or an OMT1/MRC grid (Fourier-cropped when larger than n).
    """
    if path is None:
        return cf.GaussianEvaluator(cf.default_gaussian_volume(), n), 1.0
    if path.suffix == PARAMS_SUFFIX:
        extra = nn.params_extra(path)
        if extra.get("n") != n:
            raise ArtifactError(f"{path} was fitted at n={extra.get('n')}, simulation uses n={n}")
        vol = cf.volume_from_nets(nn.load_params(path), n, int(extra["order"]))
        return cf.NeuralEvaluator(vol), float(extra.get("voxel_size", 1.0))
    density = mrc_io.load_volume(path)
    if density.n < n:
        raise ArtifactError(f"{path} has n={density.n}, smaller than the simulation grid n={n}")
    grid = mrc_io.fourier_crop(density.data, n)
    return cf.GridEvaluator(grid), density.voxel_size * density.n / n


@CommandFactory.register('simulate-cryoem')
class SimulateCryoem(BaseCommand):
    """
    Writes images.omt and rotations.omt, or m1/m2 directly with
    `moments_only` (images are then never held in memory). Ground truth
    goes to truth_volume.{omt,mrc} and truth_density.omt on the quadrature.
    """

    params_class = SimulateCryoParams

    def get_name(self) -> str:
        return "simulate-cryoem"

    def get_description(self) -> str:
        return "Simulate noisy projection images (or their moments) of a volume"

    def get_outputs(self, params=None) -> list[str]:
        moments_only = params is not None and params.moments_only
        data = ["m1.omt", "m2.omt"] if moments_only else ["images.omt", "rotations.omt"]
        return data + ["truth_volume.omt", "truth_volume.mrc", "truth_density.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: SimulateCryoParams = ctx.params
        source = ctx.input(p.volume) if p.volume is not None else None
        evaluator, voxel = load_evaluator(source, p.n)
        spec = cf.default_vmf_mixture(p.kappa)
        rng = ctx.rng("images")

        if p.moments_only:
            pair = cf.simulate_moments_2d(evaluator, spec, p.images, p.sigma, p.n, rng,
                                          ctx.workers, ctx.progress)
            ctx.record(cf.save_moments_2d(pair, ctx.out_dir, ctx.meta(vmf=spec.to_dict(), voxel_size=voxel)))
        else:
            rotations = cf.sample_rotations(spec, p.images, rng.child("rotations"), ctx.workers)
            images = cf.simulate_images(evaluator, rotations, p.sigma, p.n, rng.child("noise"), ctx.workers)
            ctx.write_tensor("images.omt", images, n=p.n, sigma=p.sigma, voxel_size=voxel)
            ctx.write_tensor("rotations.omt", rotations, n=p.n, vmf=spec.to_dict())

        quadrature = cf.build_quadrature(p.q1, p.q2)
        truth_density = cr.ground_truth_density(spec, quadrature)
        ctx.write_volume("truth_volume", cf.rasterize_evaluator(evaluator, p.n), voxel)
        ctx.write_tensor("truth_density.omt", truth_density.mass, q1=p.q1, q2=p.q2, vmf=spec.to_dict())

        signal_power = float(np.mean(np.abs(cf.slice_volume(evaluator, np.eye(3)[None], p.n)) ** 2))
        snr = signal_power / p.sigma ** 2 if p.sigma > 0 else float("inf")
        logger.info("Simulated %d images at n=%d (sigma=%g, SNR %.3g)", p.images, p.n, p.sigma, snr)
        return {"n": p.n, "images": p.images, "sigma": p.sigma, "snr": snr,
                "moments_only": p.moments_only, "voxel_size": voxel}
