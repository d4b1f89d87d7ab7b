import argparse
import json
import logging
import sys
import warnings

from commands.command_factory import CommandFactory
from config import load_run_config
from errors import ArtifactError, ConfigError, NumericalError, OrbitMomentsError

logger = logging.getLogger("orbit_moments")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    """
    One subparser per registered command, all sharing the run flags:
      --config FILE   JSON document with the command parameters
      --seed / --out / --workers
      --log-level / --quiet
    """
    parser = argparse.ArgumentParser(
        prog="orbit-moments",
        description="Method-of-moments reconstruction for multireference alignment and cryo-EM",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    listing = sub.add_parser("list", help="list available commands by category")
    listing.add_argument("command_id", nargs="?", metavar="COMMAND", help="describe one command")

    for command_id, description in CommandFactory.get_available_commands().items():
        cmd = sub.add_parser(command_id, help=description, description=description)
        cmd.add_argument("--config", metavar="FILE", help="JSON parameters (desk-scale defaults otherwise)")
        cmd.add_argument("--seed", type=int, help="global seed (overrides the config file)")
        cmd.add_argument("--out", metavar="DIR", help="output directory (default $ORBIT_MOMENTS_OUT/<command>)")
        cmd.add_argument("--workers", type=int, help="worker threads; outputs do not depend on it")
        cmd.add_argument("--log-level", default="INFO",
                         choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        cmd.add_argument("--quiet", action="store_true", help="no progress bars")
    return parser


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr, force=True)
    logging.captureWarnings(True)
    warnings.simplefilter("default")


def run(argv: list[str] | None = None) -> int:
    """
    Parse arguments, run one command and map failures to exit codes:
    0 success, 1 configuration, 2 artifact I/O, 3 numerical failure.
    """
    args = build_parser().parse_args(argv)

    if args.command == "list":
        if args.command_id is None:
            print(CommandFactory.list_all())
            return 0
        try:
            print(CommandFactory.describe(args.command_id))
        except ValueError as e:
            print(e, file=sys.stderr)
            return ConfigError.exit_code
        return 0

    setup_logging(args.log_level)
    command = CommandFactory.create(args.command)
    try:
        cfg = load_run_config(args.command, command.params_class, args.config,
                              args.seed, args.out, args.workers)
        progress = not args.quiet and sys.stderr.isatty()
        result = command.execute(cfg, progress)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return e.exit_code
    except ArtifactError as e:
        logger.error("Artifact error: %s", e)
        return e.exit_code
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return e.exit_code
    except OrbitMomentsError as e:
        logger.error("%s", e)
        return e.exit_code
    except ValueError as e:
        # precondition violations on inputs (mismatched sizes, bad arguments)
        logger.error("Invalid input: %s", e)
        return ConfigError.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return ArtifactError.exit_code

    print(json.dumps({"command": result.command, "manifest": str(result.manifest),
                      "summary": result.summary}, indent=2, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
