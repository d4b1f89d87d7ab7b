"""
Supervised training pairs: random mixture (signal, density) pairs and their
analytic moments.
"""
import logging

import mra_encoder as enc
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import MakeDatasetParams

logger = logging.getLogger(__name__)


@CommandFactory.register('make-dataset')
class MakeDataset(BaseCommand):

    params_class = MakeDatasetParams

    def get_name(self) -> str:
        return "make-dataset"

    def get_description(self) -> str:
        return "Generate (moments, signal, density) training pairs from random mixtures"

    def get_outputs(self, params=None) -> list[str]:
        return ["m1.omt", "m2.omt", "rho.omt", "v_hat.omt"]

    def run(self, ctx: RunContext) -> dict:
        p: MakeDatasetParams = ctx.params
        ds = enc.make_dataset(p.components, p.count, p.n, ctx.rng("pairs"), p.stddev_range, ctx.workers)
        ctx.record(enc.save_dataset(ds, ctx.out_dir, ctx.meta(n=p.n, components=p.components,
                                                              stddev_range=list(p.stddev_range))))
        logger.info("Dataset of %d pairs (n=%d, %d component%s)", len(ds), p.n, p.components,
                    "" if p.components == 1 else "s")
        return {"n": p.n, "count": len(ds), "components": p.components}
