import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config import load_config, validate_for
from constants import CLI_COMMANDS, EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_VALIDATION_ERROR, LOG_FORMAT, LOG_LEVEL
from errors import ConfigError, PipelineError
from handlers import COMMANDS
from jobs import JobPool

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spine-mr2ct", description="MR to CT translation for spine imaging")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in CLI_COMMANDS:
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", help="key=value config file")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sub.add_argument("--jobs", type=int, help="worker threads")
        sub.add_argument("--seed", type=int, help="base random seed")
    return parser


def _fail(error: PipelineError, code: int) -> int:
    print(json.dumps(error.to_dict()), file=sys.stderr)
    return code


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set, seed=args.seed, jobs=args.jobs)
        validate_for(config, args.command)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return _fail(e, EXIT_VALIDATION_ERROR)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return _fail(ConfigError(str(e)), EXIT_VALIDATION_ERROR)

    logger.info(f"Running '{args.command}' with seed {config.seed} on {config.jobs} worker(s)")
    try:
        written = COMMANDS[args.command](config, JobPool(config.jobs, args.command))
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return _fail(e, EXIT_VALIDATION_ERROR)
    except PipelineError as e:
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        return _fail(e, EXIT_RUNTIME_ERROR)
    except Exception as e:
        logger.error(f"Unexpected error in '{args.command}': {e}", exc_info=True)
        return _fail(PipelineError(f"{type(e).__name__}: {e}", "internal-error"), EXIT_RUNTIME_ERROR)

    for key, path in written.items():
        logger.debug(f"{key}: {path}")
    logger.info(f"'{args.command}' wrote {len(written)} file(s)")
    return EXIT_OK


def main() -> None:
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, LOG_LEVEL.upper(), logging.INFO))
    sys.exit(run())


if __name__ == "__main__":
    main()
