"""
Closed-form inversion of the second moment for unit-modulus signals.
"""
import logging
from pathlib import Path

import numpy as np

import mra
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import InvertSpectralParams

logger = logging.getLogger(__name__)

MOMENT_FILES = ("m1.omt", "m2.omt")


@CommandFactory.register('invert-spectral')
class InvertSpectral(BaseCommand):

    params_class = InvertSpectralParams

    def get_name(self) -> str:
        return "invert-spectral"

    def get_description(self) -> str:
        return "Recover signal and density from m2 by eigendecomposition (|v_hat| = 1)"

    def get_outputs(self, params=None) -> list[str]:
        return ["v_hat.omt", "signal.omt", "density.omt", "eigenvalues.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: InvertSpectralParams = ctx.params
        pair = mra.load_moments(ctx.input_dir(p.moments, MOMENT_FILES))
        result = mra.spectral_invert(pair.m2, assume_unit_modulus=True, m1=pair.m1,
                                     method=p.method, tol=p.tol)

        ctx.write_tensor("v_hat.omt", result.v_hat, n=pair.n, method=result.method)
        ctx.write_tensor("signal.omt", np.real(numcore.ifft(result.v_hat)), n=pair.n)
        ctx.write_tensor("density.omt", result.rho, n=pair.n)
        ctx.write_tensor("eigenvalues.omt", result.eigenvalues, n=pair.n)

        summary = {"n": pair.n, "method": result.method, "degenerate": bool(result.degenerate)}
        if p.truth is not None:
            truth = Path(p.truth)
            signal, _ = numcore.read_tensor(ctx.input(truth / "signal.omt"))
            density, _ = numcore.read_tensor(ctx.input(truth / "density.omt"))
            summary["signal_rel_err"] = mra.relative_error_fourier(result.v_hat, numcore.fft(signal))
            summary["density_rel_err"] = mra.relative_error_signal(result.rho, density)
            logger.info("Spectral inversion errors: signal %.3e, density %.3e",
                        summary["signal_rel_err"], summary["density_rel_err"])
        return summary
