"""
Supervised pre-training of the MRA encoders on a generated dataset.
"""
import dataclasses
import logging

import pandas as pd

import mra_encoder as enc
from commands.base_command import BaseCommand, RunContext
from commands.command_factory import CommandFactory
from config import TrainEncoderParams

logger = logging.getLogger(__name__)

DATASET_FILES = ("m1.omt", "m2.omt", "rho.omt", "v_hat.omt")


@CommandFactory.register('train-encoder')
class TrainEncoder(BaseCommand):
    """
    Trains one encoder per requested head and stores them together in
    encoder.params; per-epoch losses go to train_<head>.csv.
    """

    params_class = TrainEncoderParams

    def get_name(self) -> str:
        return "train-encoder"

    def get_description(self) -> str:
        return "Train the density and/or signal encoder on a dataset"

    def get_outputs(self, params=None) -> list[str]:
        return ["encoder.params", "errors.csv"]

    def run(self, ctx: RunContext) -> dict:
        p: TrainEncoderParams = ctx.params
        ds = enc.load_dataset(ctx.input_dir(p.dataset, DATASET_FILES))
        if p.train.dataset_size < len(ds):
            ds = ds.subset(slice(0, p.train.dataset_size))
        # the run seed drives both initialization and batch order
        train = dataclasses.replace(p.train, seed=ctx.seed)

        nets, rows = {}, []
        for head in dict.fromkeys(p.heads):
            model = enc.build_encoder(ds.n, head, seed=ctx.seed)
            result = enc.train_supervised(model, ds, train, ctx.progress)
            nets.update(enc.encoder_nets(result.encoder))
            ctx.write_csv(f"train_{head}.csv", result.trace)
            rows.append({"head": head, "train_error": result.train_error, "test_error": result.test_error})

        ctx.write_params("encoder.params", nets, n=ds.n, heads=list(dict.fromkeys(p.heads)))
        errors = pd.DataFrame(rows, columns=["head", "train_error", "test_error"])
        ctx.write_csv("errors.csv", errors)
        return {"n": ds.n, "pairs": len(ds), "errors": rows}
