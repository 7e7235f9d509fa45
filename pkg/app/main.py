from __future__ import annotations

import argparse
import logging
import sys

from .cli.commands import (
    COMMANDS,
    EXIT_BRACKET,
    EXIT_CONFIG,
    EXIT_INFRASTRUCTURE,
    BracketError,
    CommandError,
)
from .config import MODES, ConfigError, load_config
from .dynamics import ConfigurationError
from .models import ParameterError
from .resources import preset_names
from .store import StoreError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pksflow",
        description="Multi-species chemotaxis near Poiseuille flow: simulation and linear analysis.",
    )
    parser.add_argument("verb", choices=MODES, help="experiment to run")
    parser.add_argument(
        "--config",
        required=True,
        help=f"TOML config path or bundled preset name ({', '.join(preset_names()) or 'none'})",
    )
    parser.add_argument("--out", default=None, help="output directory (default: runs/<verb>)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for sweep/scan cells")
    parser.add_argument("--seed", type=int, default=None, help="override initial.seed")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    if args.threads < 1:
        print("--threads は 1 以上で指定してください", file=sys.stderr)
        return EXIT_CONFIG

    try:
        # 設定ファイル → 環境変数 → CLI フラグの順に上書きする
        config = load_config(args.config).with_mode(args.verb)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.out is not None:
            config = config.with_output_directory(args.out)
        result = COMMANDS[args.verb](config, args.threads)
    except (ConfigError, ConfigurationError, ParameterError) as exc:
        print(f"設定エラー: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BracketError as exc:
        print(f"区間エラー: {exc}", file=sys.stderr)
        print(f"  A_lo: {exc.lo_summary}", file=sys.stderr)
        print(f"  A_hi: {exc.hi_summary}", file=sys.stderr)
        return EXIT_BRACKET
    except (CommandError, StoreError, OSError) as exc:
        logger.exception("infrastructure failure")
        print(f"実行エラー: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE

    print(result.directory)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
