"""
Reconstruct an MRA signal and density from measured moments by refining
(pre-trained or fresh) encoders against the moment-matching loss.
"""
import logging
from pathlib import Path

import numpy as np

import autonn as nn
import mra
import mra_encoder as enc
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import ReconMraParams
from errors import ConfigError
from mra import MraDensity, MraSignal

logger = logging.getLogger(__name__)

MOMENT_FILES = ("m1.omt", "m2.omt")


def load_encoders(path: Path | None, n: int, seed: int) -> tuple[enc.MraEncoder, enc.MraEncoder, bool]:
    """Both heads from a parameter file; heads missing from it start random."""
    if path is None:
        return enc.build_encoder(n, "v", seed=seed), enc.build_encoder(n, "rho", seed=seed), False
    nets = nn.load_params(path)
    heads = []
    for head in ("v", "rho"):
        try:
            heads.append(enc.encoder_from_nets(nets, head))
        except ValueError:
            logger.warning("%s has no %s encoder; starting that head from random weights", path, head)
            heads.append(enc.build_encoder(n, head, seed=seed))
    return heads[0], heads[1], True


@CommandFactory.register('recon-mra')
class ReconMra(BaseCommand):
    """
    Outputs the latents (z_v.omt in Fourier, signal.omt in real space,
    density.omt), the refined encoders and trace.csv. With study.instances > 0
    a warm-start study against fresh encoders is run as well.
    """

    params_class = ReconMraParams

    def get_name(self) -> str:
        return "recon-mra"

    def get_description(self) -> str:
        return "Fit encoders to measured moments and output the signal and density"

    def get_outputs(self, params=None) -> list[str]:
        return ["z_v.omt", "signal.omt", "density.omt", "trace.csv", "refined.params"]

    def run(self, ctx: RunContext) -> dict:
        p: ReconMraParams = ctx.params
        if p.study.instances > 0 and p.encoder is None:
            raise ConfigError("the warm-start study needs a trained encoder", "$.study.instances")
        moments = mra.load_moments(ctx.input_dir(p.moments, MOMENT_FILES))
        enc_path = ctx.input(p.encoder) if p.encoder is not None else None
        enc_v, enc_rho, trained = load_encoders(enc_path, moments.n, ctx.seed)

        truth = None
        if p.truth is not None:
            signal, _ = numcore.read_tensor(ctx.input(Path(p.truth) / "signal.omt"))
            density, _ = numcore.read_tensor(ctx.input(Path(p.truth) / "density.omt"))
            truth = (MraSignal(signal), MraDensity(density))

        result = enc.refine(enc_v, enc_rho, moments, p.recon, truth, ctx.progress)
        ctx.write_tensor("z_v.omt", result.z_v, n=moments.n, shift=result.shift)
        ctx.write_tensor("signal.omt", np.real(numcore.ifft(result.z_v)), n=moments.n)
        ctx.write_tensor("density.omt", result.z_rho, n=moments.n)
        trace = result.trace.assign(log10_moment_rel_err=np.log10(result.trace["moment_rel_err"]))
        ctx.write_csv("trace.csv", trace)
        refined = {**enc.encoder_nets(result.encoders[0]), **enc.encoder_nets(result.encoders[1])}
        ctx.write_params("refined.params", refined, n=moments.n, heads=["v", "rho"])

        last = result.trace.iloc[-1]
        summary = {
            "n": moments.n,
            "warm_start": trained,
            "shift": result.shift,
            "final_loss": result.final_loss,
            "moment_rel_err": float(last["moment_rel_err"]),
            "signal_rel_err": float(last["signal_rel_err"]),
            "density_rel_err": float(last["density_rel_err"]),
        }

        if p.study.instances > 0:
            report = enc.warm_start_study(enc_v, enc_rho, p.study.instances, p.study.components,
                                          p.study.observations, p.study.sigma, p.recon, ctx.seed,
                                          ctx.workers)
            ctx.write_csv("study_curves.csv", report.curves)
            ctx.write_csv("study_instances.csv", report.instances)
            summary["study_wins"] = report.wins
            summary["study_instances"] = p.study.instances
        return summary
