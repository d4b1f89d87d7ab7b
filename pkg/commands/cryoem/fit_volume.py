"""
Fit a neural ground-truth volume to a gaussian test volume or an MRC map.
"""
import logging

import cryo_forward as cf
import cryo_recon as cr
import mrc_io
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import FitVolumeParams

logger = logging.getLogger(__name__)

GAUSSIAN_SOURCE = "gaussian"


@CommandFactory.register('fit-volume')
class FitVolume(BaseCommand):
    """
    `source` is "gaussian" for the built-in four-gaussian volume or a path
    to an MRC map, which is Fourier-cropped to n and scaled to unit norm.
    """

    params_class = FitVolumeParams

    def get_name(self) -> str:
        return "fit-volume"

    def get_description(self) -> str:
        return "Fit a neural volume to a gaussian test volume or an MRC map"

    def get_outputs(self, params=None) -> list[str]:
        return ["volume.params", "volume.omt", "volume.mrc", "target.omt", "target.mrc", "fit_trace.csv"]

    def run(self, ctx: RunContext) -> dict:
        p: FitVolumeParams = ctx.params
        if p.source == GAUSSIAN_SOURCE:
            spec = cf.default_gaussian_volume()
            target = cf.GaussianEvaluator(spec, p.n)
            target_grid = cf.rasterize_evaluator(target, p.n)
            voxel = 1.0
        else:
            density = mrc_io.prepare_map(mrc_io.load_mrc(ctx.input(p.source)), p.n)
            target = target_grid = density.data
            voxel = density.voxel_size

        vol = cf.build_neural_volume(p.n, p.order, p.width, p.depth, seed=ctx.seed)
        result = cr.fit_neural_gt(target, vol, p.schedule, ctx.progress)

        ctx.write_params("volume.params", result.volume.nets(), n=p.n, order=p.order, voxel_size=voxel)
        fitted = cf.rasterize_evaluator(cf.NeuralEvaluator(result.volume), p.n)
        ctx.write_volume("volume", fitted, voxel, source=p.source)
        ctx.write_volume("target", target_grid, voxel, source=p.source)
        ctx.write_csv("fit_trace.csv", result.trace)
        return {"n": p.n, "source": p.source, "relative_error": result.error, "voxel_size": voxel}
