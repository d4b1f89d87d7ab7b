"""
Unbiased first and second moments of an MRA observation matrix.
"""
import logging

import numpy as np

import mra
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import MomentsMraParams
from errors import ArtifactError, ConfigError

logger = logging.getLogger(__name__)


@CommandFactory.register('moments-mra')
class MomentsMra(BaseCommand):

    params_class = MomentsMraParams

    def get_name(self) -> str:
        return "moments-mra"

    def get_description(self) -> str:
        return "Estimate m1 and m2 from observations (sigma^2 I bias removed)"

    def get_outputs(self, params=None) -> list[str]:
        return ["m1.omt", "m2.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: MomentsMraParams = ctx.params
        rows, meta = numcore.read_tensor(ctx.input(p.observations))
        if np.iscomplexobj(rows) or rows.ndim != 2:
            raise ArtifactError(f"{p.observations} must hold a real (count, n) matrix, got {rows.shape}")
        sigma = p.sigma if p.sigma is not None else meta.get("sigma")
        if sigma is None:
            raise ConfigError("required when the observation file records no sigma", "$.sigma")

        pair = mra.empirical_moments(rows, sigma, ctx.workers)
        ctx.record(mra.save_moments(pair, ctx.out_dir, ctx.meta()))
        logger.info("Moments of %d observations (n=%d, sigma=%g)", pair.count, pair.n, sigma)
        return {"n": pair.n, "count": pair.count, "sigma": sigma}
