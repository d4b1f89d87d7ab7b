"""
Simulate MRA observations: draw a random signal and shift density from
gaussian mixtures, then noisy cyclically shifted copies of the signal.
"""
import logging

import numpy as np

import mra
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import SimulateMraParams
from mra import MixtureSpec1D

logger = logging.getLogger(__name__)


@CommandFactory.register('simulate-mra')
class SimulateMra(BaseCommand):
    """
    Writes the ground truth (signal.omt, density.omt), the observation matrix
    and the drawn shifts. The mixture specs go to the sidecars.
    """

    params_class = SimulateMraParams

    def get_name(self) -> str:
        return "simulate-mra"

    def get_description(self) -> str:
        return "Draw a mixture signal and density, then noisy shifted observations"

    def get_outputs(self, params=None) -> list[str]:
        return ["signal.omt", "density.omt", "observations.omt", "shifts.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: SimulateMraParams = ctx.params
        signal_spec = MixtureSpec1D.random(p.signal_components, ctx.rng("signal").generator(0), p.stddev_range)
        density_spec = MixtureSpec1D.random(p.density_components, ctx.rng("density").generator(0), p.stddev_range)
        signal = mra.sample_mixture(signal_spec, p.n, "signal")
        density = mra.sample_mixture(density_spec, p.n, "density")

        batch = mra.simulate_observations(signal, density, p.observations, p.sigma,
                                          ctx.rng("observations"), ctx.workers)
        ctx.write_tensor("signal.omt", signal.values_real, n=p.n, mixture=signal_spec.to_dict())
        ctx.write_tensor("density.omt", density.mass, n=p.n, mixture=density_spec.to_dict())
        ctx.write_tensor("observations.omt", batch.rows, n=p.n, sigma=p.sigma)
        ctx.write_tensor("shifts.omt", batch.shifts.astype(np.float64), n=p.n)

        snr = float(np.sum(signal.values_real ** 2) / (p.n * p.sigma ** 2)) if p.sigma > 0 else float("inf")
        logger.info("Simulated %d observations at n=%d, SNR %.3g", p.observations, p.n, snr)
        return {"n": p.n, "observations": p.observations, "sigma": p.sigma, "snr": snr}
