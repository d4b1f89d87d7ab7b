"""
Abstract base class for all pipeline commands.
Each command declares its parameter dataclass and implements run().
"""
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

import autonn as nn
import mrc_io
import numcore
from config import RunConfig, to_jsonable
from errors import ArtifactError, NumericalError
from numcore import SeededRng

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DIAGNOSTIC = "diagnostic.json"


def package_version() -> str:
    try:
        return metadata.version("orbit-moments")
    except metadata.PackageNotFoundError:
        return "0.1.0"


@dataclass
class CommandResult:
    """Outcome of one command run"""
    command: str
    outputs: list[Path]
    inputs: list[Path]
    summary: dict[str, Any]
    manifest: Path


@dataclass
class RunContext:
    """
    What a command sees while running: resolved config, output directory and
    bookkeeping of every artifact read or written (for the manifest).
    """
    config: RunConfig
    progress: bool = False
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)

    @property
    def params(self):
        return self.config.params

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def workers(self) -> int:
        return self.config.workers

    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    def rng(self, label: str) -> SeededRng:
        return SeededRng(self.seed, f"{self.config.command}/{label}")

    def input(self, path: str | Path) -> Path:
        """Record an input artifact; missing paths raise ArtifactError."""
        path = Path(path)
        if not path.exists():
            raise ArtifactError(f"input {path} does not exist")
        if path.is_file() and path not in self.inputs:
            self.inputs.append(path)
        return path

    def input_dir(self, path: str | Path, names: tuple[str, ...]) -> Path:
        """Record the named files inside an input directory."""
        path = self.input(path)
        for name in names:
            self.input(path / name)
        return path

    def record(self, paths: list[Path] | Path) -> list[Path]:
        paths = [paths] if isinstance(paths, Path) else list(paths)
        self.outputs.extend(p for p in paths if p not in self.outputs)
        return paths

    def meta(self, **extra) -> dict:
        return {"command": self.config.command, "seed": self.seed, **extra}

    # ---- writers ----

    def write_tensor(self, name: str, x: np.ndarray, **meta) -> Path:
        return self.record(numcore.write_tensor(self.out_dir / name, x, self.meta(**meta)))[0]

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return self.record(path)[0]

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(to_jsonable(payload), indent=2, sort_keys=True))
        return self.record(path)[0]

    def write_params(self, name: str, nets: dict[str, nn.NetworkParams], **extra) -> Path:
        return self.record(nn.save_params(nets, self.out_dir / name, extra))[0]

    def write_volume(self, stem: str, grid: np.ndarray, voxel_size: float = 1.0, **meta) -> list[Path]:
        return self.record(mrc_io.save_volume(self.out_dir, stem, grid, voxel_size, self.meta(**meta)))


class BaseCommand(ABC):
    """
    Abstract base class for commands.
    Each command defines its own:
    - Parameter dataclass (validated from JSON by config.py)
    - Inputs it reads and artifacts it writes
    - Summary values recorded in the manifest
    """

    params_class: type = None

    def __init__(self):
        self.name = self.get_name()
        self.description = self.get_description()

    @abstractmethod
    def get_name(self) -> str:
        """Return the command id as typed on the command line"""
        pass

    @abstractmethod
    def get_description(self) -> str:
        """Return the one-line description shown by `list` and --help"""
        pass

    @abstractmethod
    def run(self, ctx: RunContext) -> dict[str, Any]:
        """
        Do the work, writing artifacts through ctx.

        Returns:
            Summary values (errors, sizes, flags) stored in the manifest
        """
        pass

    def get_outputs(self, params=None) -> list[str]:
        """
        Artifacts every run writes into the output directory, shown by
        `list <command>` and checked by execute(). `params` lets a command
        vary the list with its mode.
        """
        return []

    def execute(self, config: RunConfig, progress: bool = False) -> CommandResult:
        """
        Run the command and write manifest.json.

        A NumericalError leaves diagnostic.json in the output directory
        before propagating. A declared output that was not written raises
        ArtifactError.
        """
        ctx = RunContext(config, progress)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Running %s (seed %d, %d worker%s) -> %s", self.name, config.seed,
                    config.workers, "" if config.workers == 1 else "s", config.out_dir)
        try:
            summary = self.run(ctx)
        except NumericalError as e:
            path = config.out_dir / DIAGNOSTIC
            path.write_text(json.dumps(to_jsonable({
                "command": self.name,
                "message": str(e),
                "diagnostics": e.diagnostics,
            }), indent=2, sort_keys=True, default=str))
            logger.error("Numerical failure in %s, diagnostics written to %s", self.name, path)
            raise
        written = {p.name for p in ctx.outputs}
        missing = [name for name in self.get_outputs(config.params) if name not in written]
        if missing:
            raise ArtifactError(f"{self.name} did not write {', '.join(missing)}")
        manifest = write_manifest(ctx, summary)
        return CommandResult(self.name, list(ctx.outputs), list(ctx.inputs), summary, manifest)


def write_manifest(ctx: RunContext, summary: dict[str, Any]) -> Path:
    """Config, version and SHA-256 of every input and output artifact."""
    path = ctx.out_dir / MANIFEST
    doc = {
        **ctx.config.to_dict(),
        "version": package_version(),
        "inputs": {str(p): numcore.content_hash(p) for p in ctx.inputs},
        "outputs": {str(p): numcore.content_hash(p) for p in ctx.outputs},
        "summary": summary,
    }
    path.write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True, default=float))
    return path
