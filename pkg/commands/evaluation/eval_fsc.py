"""
Fourier shell correlation between two volumes and the 0.5-crossing resolution.
"""
import logging

import evalx
import mrc_io
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import EvalFscParams
from errors import ArtifactError

logger = logging.getLogger(__name__)


@CommandFactory.register('eval-fsc')
class EvalFsc(BaseCommand):

    params_class = EvalFscParams

    def get_name(self) -> str:
        return "eval-fsc"

    def get_description(self) -> str:
        return "FSC curve and resolution of an estimate against a reference"

    def get_outputs(self, params=None) -> list[str]:
        return ["fsc.csv", "resolution.json"]

    def run(self, ctx: RunContext) -> dict:
        p: EvalFscParams = ctx.params
        reference = mrc_io.load_volume(ctx.input(p.reference))
        estimate = mrc_io.load_volume(ctx.input(p.estimate))
        if reference.n != estimate.n:
            raise ArtifactError(f"volumes differ in size: {reference.n} vs {estimate.n}")
        voxel = p.voxel_size if p.voxel_size is not None else reference.voxel_size

        summary = {"n": reference.n, "voxel_size": voxel, "threshold": p.threshold, "aligned": p.align}
        if p.align:
            search = evalx.alignment_grid(p.q1, p.q2)
            curve, alignment = evalx.aligned_fsc(reference.data, estimate.data, voxel, search, ctx.workers)
            summary["alignment_error"] = alignment.error
            summary["rotation"] = alignment.rotation.tolist()
        else:
            curve = evalx.fsc(reference.data, estimate.data, voxel)
        res = evalx.resolution(curve, p.threshold)
        summary["resolution"] = res
        summary["nyquist"] = 2.0 * voxel

        ctx.write_csv("fsc.csv", curve.to_frame())
        ctx.write_json("resolution.json", summary)
        logger.info("Resolution at FSC=%.3g: %.3f A (Nyquist %.3f A)", p.threshold, res, 2.0 * voxel)
        return summary
