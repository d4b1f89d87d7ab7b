"""
Reconstruct a volume and viewing density from 2D image moments.
"""
import dataclasses
import logging
from pathlib import Path

import numpy as np

import cryo_forward as cf
import cryo_recon as cr
import evalx
import mrc_io
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import ReconCryoParams
from errors import ArtifactError

logger = logging.getLogger(__name__)

MOMENT_FILES = ("m1.omt", "m2.omt")


@CommandFactory.register('recon-cryoem')
class ReconCryoem(BaseCommand):
    """
    Joint encoder + neural volume fit. With `truth` (a simulate-cryoem output
    directory) the volume error after rotational alignment is reported.
    `fixed_density` pins z_rho to a stored quadrature density.
    """

    params_class = ReconCryoParams

    def get_name(self) -> str:
        return "recon-cryoem"

    def get_description(self) -> str:
        return "Fit encoder and neural volume to image moments"

    def get_outputs(self, params=None) -> list[str]:
        return ["volume.params", "volume.omt", "volume.mrc", "density.omt", "trace.csv"]

    def run(self, ctx: RunContext) -> dict:
        p: ReconCryoParams = ctx.params
        moments_dir = ctx.input_dir(p.moments, MOMENT_FILES)
        moments = cf.load_moments_2d(moments_dir)
        voxel = float(numcore.read_tensor(moments_dir / "m1.omt")[1].get("voxel_size", 1.0))
        cfg = dataclasses.replace(p.recon, seed=ctx.seed)
        quadrature = cf.build_quadrature(cfg.q1, cfg.q2)

        fixed = None
        if p.fixed_density is not None:
            mass, _ = numcore.read_tensor(ctx.input(p.fixed_density))
            if mass.shape != (len(quadrature),):
                raise ArtifactError(f"{p.fixed_density} has shape {mass.shape}, "
                                    f"quadrature has {len(quadrature)} rotations")
            fixed = cr.QuadratureDensity(np.real(mass))

        result = cr.reconstruct(moments, cfg, quadrature, fixed_density=fixed, progress=ctx.progress)
        nets = result.volume.nets()
        if result.encoder is not None:
            nets.update(result.encoder.named_nets())
        ctx.write_params("volume.params", nets, n=moments.n, order=cfg.order, voxel_size=voxel)
        grid = cf.rasterize_evaluator(cf.NeuralEvaluator(result.volume, result.z_v), moments.n)
        ctx.write_volume("volume", grid, voxel)
        ctx.write_tensor("density.omt", result.z_rho.mass, q1=cfg.q1, q2=cfg.q2)
        if result.z_v is not None:
            ctx.write_tensor("z_v.omt", np.asarray(result.z_v, dtype=np.float64))
        trace = result.trace.assign(log10_loss=np.log10(result.trace["loss"]))
        ctx.write_csv("trace.csv", trace)

        last = result.trace.iloc[-1]
        summary = {
            "n": moments.n,
            "final_loss": result.final_loss,
            "m1_rel_err": float(last["m1_rel_err"]),
            "m2_rel_err": float(last["m2_rel_err"]),
            "stagnated": bool(result.stagnated),
            "fixed_density": fixed is not None,
        }
        if p.truth is not None:
            truth = mrc_io.load_volume(ctx.input(Path(p.truth) / "truth_volume.omt"))
            if truth.n != moments.n:
                raise ArtifactError(f"truth volume has n={truth.n}, reconstruction n={moments.n}")
            search = evalx.alignment_grid(p.align_q1, p.align_q2)
            alignment = evalx.align_volumes(grid, truth.data, search, workers=ctx.workers)
            summary["volume_rel_err"] = alignment.error
            summary["volume_rel_err_unaligned"] = cr.relative_error_at_identity(grid, truth.data)
            logger.info("Volume error after alignment: %.4f", alignment.error)
        return summary
