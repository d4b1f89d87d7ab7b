"""
Relative error of an estimate, minimized over the model's symmetry:
rotations for volumes, cyclic shifts for MRA signals.
"""
import logging

import cryo_recon as cr
import evalx
import mra
import mrc_io
import numcore
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import EvalErrorParams
from errors import ArtifactError

logger = logging.getLogger(__name__)


@CommandFactory.register('eval-error')
class EvalError(BaseCommand):

    params_class = EvalErrorParams

    def get_name(self) -> str:
        return "eval-error"

    def get_description(self) -> str:
        return "Aligned relative error of a volume or MRA signal against a reference"

    def get_outputs(self, params=None) -> list[str]:
        return ["error.json"]

    def run(self, ctx: RunContext) -> dict:
        p: EvalErrorParams = ctx.params
        if p.kind == "signal":
            ref, _ = numcore.read_tensor(ctx.input(p.reference))
            est, _ = numcore.read_tensor(ctx.input(p.estimate))
            if ref.ndim != 1 or est.shape != ref.shape:
                raise ArtifactError(f"expected two signals of equal length, got {est.shape} and {ref.shape}")
            summary = {
                "kind": "signal",
                "n": len(ref),
                "relative_error": mra.relative_error_signal(est.real, ref.real),
            }
        else:
            ref = mrc_io.load_volume(ctx.input(p.reference))
            est = mrc_io.load_volume(ctx.input(p.estimate))
            if ref.n != est.n:
                raise ArtifactError(f"volumes differ in size: {est.n} vs {ref.n}")
            alignment = evalx.align_volumes(est.data, ref.data, evalx.alignment_grid(p.q1, p.q2),
                                            workers=ctx.workers)
            summary = {
                "kind": "volume",
                "n": ref.n,
                "relative_error": alignment.error,
                "relative_error_unaligned": cr.relative_error_at_identity(est.data, ref.data),
                "rotation": alignment.rotation.tolist(),
                "refined": alignment.refined,
            }
        ctx.write_json("error.json", summary)
        logger.info("Relative error (%s): %.4f", p.kind, summary["relative_error"])
        return summary
