"""
Main entry point for the damrs command line
Loads the environment, configures logging and dispatches the subcommand.
"""

import logging
import sys
from typing import List, Optional

import torch
from dotenv import load_dotenv

from .cli import build_parser
from .config import get_runtime_settings
from .errors import DamrsError
from .utils.logging_config import setup_logging

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = get_runtime_settings()
        setup_logging(settings.log_level)
        torch.set_num_threads(settings.threads)
        logger.info(f"damrs {args.command} started")
        return args.func(args)
    except DamrsError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
