"""
FedPAW Experiment CLI
generate / run / report over a TOML experiment file
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from engine.python.config import ExperimentConfig, Settings, configure_logging  # noqa: E402
from engine.python.errors import FedPawError  # noqa: E402
from engine.python.harness import cmd_generate, cmd_run  # noqa: E402
from engine.python.report import cmd_report  # noqa: E402

logger = logging.getLogger("fedpaw")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="experiment",
        description="Personalized federated speed prediction experiments",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", type=str, help="Overrides FEDPAW_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="Write the synthetic client corpus")
    generate.add_argument("--config", type=Path, required=True, help="Experiment TOML file")
    generate.add_argument("--force", action="store_true", help="Overwrite an existing corpus")

    run = sub.add_parser("run", help="Execute the run matrix")
    run.add_argument("--config", type=Path, required=True, help="Experiment TOML file")
    run.add_argument("--jobs", type=int, default=1, help="Runs executed in parallel processes")
    run.add_argument("--resume", action="store_true", help="Skip runs completed in the registry")

    report = sub.add_parser("report", help="Summarize finished runs")
    report.add_argument("--runs", type=Path, nargs="+", required=True, help="Experiment roots or run directories")
    report.add_argument("--out", type=Path, help="Report directory (default: <first root>/report)")
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = parse_args(argv)
    settings = Settings()
    configure_logging(args.log_level or settings.log_level, settings.log_json)

    try:
        if args.command == "generate":
            config = ExperimentConfig.from_toml(args.config)
            cmd_generate(config, settings, force=args.force)
            return 0
        if args.command == "run":
            config = ExperimentConfig.from_toml(args.config)
            outcome = cmd_run(config, settings, jobs=max(1, args.jobs), resume=args.resume)
            return outcome.exit_code
        result = cmd_report(args.runs, args.out)
        if result.incomplete:
            logger.warning(f"{len(result.incomplete)} run directories were incomplete")
        return 0
    except FedPawError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
