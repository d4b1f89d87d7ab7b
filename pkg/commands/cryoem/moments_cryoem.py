"""
Unbiased 2D moments of an image stack.
"""
import logging

import numpy as np

import cryo_forward as cf
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import MomentsCryoParams
from errors import ArtifactError, ConfigError

logger = logging.getLogger(__name__)


@CommandFactory.register('moments-cryoem')
class MomentsCryoem(BaseCommand):

    params_class = MomentsCryoParams

    def get_name(self) -> str:
        return "moments-cryoem"

    def get_description(self) -> str:
        return "Estimate image moments m1 (n^2) and m2 (n^2 x n^2)"

    def get_outputs(self, params=None) -> list[str]:
        return ["m1.omt", "m2.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: MomentsCryoParams = ctx.params
        images, meta = numcore.read_tensor(ctx.input(p.images))
        if np.iscomplexobj(images) or images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise ArtifactError(f"{p.images} must hold real (count, n, n) images, got {images.shape}")
        sigma = p.sigma if p.sigma is not None else meta.get("sigma")
        if sigma is None:
            raise ConfigError("required when the image file records no sigma", "$.sigma")

        pair = cf.empirical_moments_2d(images, sigma, ctx.workers)
        ctx.record(cf.save_moments_2d(pair, ctx.out_dir, ctx.meta(voxel_size=meta.get("voxel_size", 1.0))))
        logger.info("Moments of %d images (n=%d, sigma=%g)", pair.count, pair.n, sigma)
        return {"n": pair.n, "count": pair.count, "sigma": sigma}
