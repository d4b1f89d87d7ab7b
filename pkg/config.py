"""
Run configuration: one frozen dataclass per subcommand, parsed from JSON.

Every value is checked against the dataclass annotations and a small table
of range rules; failures raise ConfigError naming the JSON path, e.g.
`$.train.schedule[1][0]`. Defaults are desk scale.
"""
import dataclasses
import json
import logging
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from cryo_recon import CryoReconConfig
from errors import ConfigError
from mra_encoder import ReconConfig, TrainConfig

logger = logging.getLogger(__name__)

OUT_ENV = "ORBIT_MOMENTS_OUT"
DEFAULT_OUT = "runs"


# ==================== COMMAND PARAMETERS ====================

@dataclass(frozen=True)
class SimulateMraParams:
    n: int = 41
    observations: int = 100000
    sigma: float = 1.0
    signal_components: int = 2
    density_components: int = 2
    stddev_range: tuple[float, float] = (0.05, 0.2)


@dataclass(frozen=True)
class MomentsMraParams:
    observations: str = "observations.omt"
    sigma: float | None = None


@dataclass(frozen=True)
class InvertSpectralParams:
    moments: str = "moments"
    method: Literal["eigh", "power"] = "eigh"
    tol: float = 1e-6
    truth: str | None = None


@dataclass(frozen=True)
class MakeDatasetParams:
    n: int = 21
    count: int = 60000
    components: int = 1
    stddev_range: tuple[float, float] = (0.05, 0.2)


@dataclass(frozen=True)
class TrainEncoderParams:
    dataset: str = "dataset"
    heads: tuple[Literal["rho", "v"], ...] = ("rho", "v")
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class StudyParams:
    instances: int = 0
    components: int = 2
    observations: int = 100000
    sigma: float = 1.0


@dataclass(frozen=True)
class ReconMraParams:
    moments: str = "moments"
    encoder: str | None = None
    truth: str | None = None
    recon: ReconConfig = field(default_factory=ReconConfig)
    study: StudyParams = field(default_factory=StudyParams)


@dataclass(frozen=True)
class FitVolumeParams:
    n: int = 15
    source: str = "gaussian"
    order: int = 8
    width: int = 64
    depth: int = 3
    schedule: tuple[tuple[float, int], ...] = ((1e-3, 3000), (1e-4, 1000))


@dataclass(frozen=True)
class SimulateCryoParams:
    n: int = 15
    images: int = 200000
    sigma: float = 0.5
    volume: str | None = None
    kappa: float = 20.0
    q1: int = 36
    q2: int = 8
    moments_only: bool = False


@dataclass(frozen=True)
class MomentsCryoParams:
    images: str = "images.omt"
    sigma: float | None = None


@dataclass(frozen=True)
class ReconCryoParams:
    moments: str = "moments"
    truth: str | None = None
    fixed_density: str | None = None
    align_q1: int = 100
    align_q2: int = 12
    recon: CryoReconConfig = field(default_factory=CryoReconConfig)


@dataclass(frozen=True)
class EvalFscParams:
    reference: str = "reference.mrc"
    estimate: str = "estimate.mrc"
    voxel_size: float | None = None
    align: bool = True
    threshold: float = 0.5
    q1: int = 100
    q2: int = 12


@dataclass(frozen=True)
class EvalErrorParams:
    reference: str = "reference.omt"
    estimate: str = "estimate.omt"
    kind: Literal["volume", "signal"] = "volume"
    q1: int = 100
    q2: int = 12


# ==================== RANGE RULES ====================

def _at_least(lo):
    return lambda v: v >= lo, f"must be >= {lo}"


FIELD_RULES: dict[str, tuple[typing.Callable[[Any], bool], str]] = {
    "n": _at_least(3),
    "observations": _at_least(1),
    "images": _at_least(1),
    "count": _at_least(1),
    "components": _at_least(1),
    "signal_components": _at_least(1),
    "density_components": _at_least(1),
    "sigma": _at_least(0),
    "lam": _at_least(0),
    "iterations": _at_least(0),
    "batch_size": _at_least(1),
    "dataset_size": _at_least(1),
    "kappa": _at_least(0),
    "q1": _at_least(1),
    "q2": _at_least(1),
    "align_q1": _at_least(1),
    "align_q2": _at_least(1),
    "order": _at_least(1),
    "width": _at_least(1),
    "depth": _at_least(1),
    "instances": _at_least(0),
    "lr": (lambda v: v > 0, "must be > 0"),
    "tol": (lambda v: v > 0, "must be > 0"),
    "test_fraction": (lambda v: 0 <= v < 1, "must be in [0, 1)"),
    "threshold": (lambda v: -1 < v < 1, "must be in (-1, 1)"),
}


def _check_schedule(value, path: str) -> None:
    for i, (lr, steps) in enumerate(value):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0", f"{path}[{i}][0]")
        if steps < 0:
            raise ConfigError("step count must be >= 0", f"{path}[{i}][1]")


# ==================== PARSING ====================

def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value: Any, tp, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for arm in (a for a in args if a is not type(None)):
            try:
                return _coerce(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(f"expected {' or '.join(_type_name(a) for a in args)}, got {value!r}", path)
    if origin is Literal:
        if value not in args:
            raise ConfigError(f"expected one of {list(args)}, got {value!r}", path)
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"expected {len(args)} entries, got {len(value)}", path)
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if dataclasses.is_dataclass(tp):
        return parse_section(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {tp}", path)


def parse_section(cls, doc: Any, path: str = "$"):
    """
    Build dataclass `cls` from a JSON object; missing keys take defaults.

    Raises:
        ConfigError: unknown key, wrong type, or range violation
    """
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object, got {type(doc).__name__}", path)
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown key '{key}'", f"{path}.{key}")
    values = {}
    for name in (n for n in names if n in doc):
        sub = f"{path}.{name}"
        value = _coerce(doc[name], hints[name], sub)
        rule = FIELD_RULES.get(name)
        if rule is not None and value is not None and not isinstance(value, tuple) and not rule[0](value):
            raise ConfigError(rule[1], sub)
        if name == "schedule":
            _check_schedule(value, sub)
        if name == "stddev_range" and not 0 < value[0] <= value[1]:
            raise ConfigError("must satisfy 0 < low <= high", sub)
        values[name] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path) from e


# ==================== RUN CONFIG ====================

@dataclass(frozen=True)
class RunConfig:
    command: str
    params: Any
    seed: int = 0
    out_dir: Path = Path(DEFAULT_OUT)
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "params": to_jsonable(self.params),
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "workers": self.workers,
        }


def to_jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def default_out_dir(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / command


def load_run_config(command: str,
                    params_cls,
                    config_path: str | Path | None = None,
                    seed: int | None = None,
                    out_dir: str | Path | None = None,
                    workers: int | None = None) -> RunConfig:
    """
    Read the JSON document (if any) and merge the command-line flags.

    The document holds the command parameters plus optional top-level
    `seed` and `workers`; flags win over the document.

    Raises:
        ConfigError: unreadable JSON or invalid fields
    """
    doc: dict = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config document must be an object")
    doc = dict(doc)
    doc_seed = doc.pop("seed", 0)
    doc_workers = doc.pop("workers", 1)
    if isinstance(doc_seed, bool) or not isinstance(doc_seed, int) or doc_seed < 0:
        raise ConfigError("seed must be a non-negative integer", "$.seed")
    if isinstance(doc_workers, bool) or not isinstance(doc_workers, int) or doc_workers < 1:
        raise ConfigError("workers must be an integer >= 1", "$.workers")
    if workers is not None and workers < 1:
        raise ConfigError("--workers must be >= 1")
    if seed is not None and seed < 0:
        raise ConfigError("--seed must be >= 0")
    params = parse_section(params_cls, doc)
    return RunConfig(
        command=command,
        params=params,
        seed=doc_seed if seed is None else seed,
        out_dir=Path(out_dir) if out_dir is not None else default_out_dir(command),
        workers=doc_workers if workers is None else workers,
    )
