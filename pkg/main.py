import dotenv
import os
import sys
import argparse
import logging

# Import the function that creates each command's flow
from flow import FLOWS
from nodes import ABLATION_AXES, BASELINES

dotenv.load_dotenv(override=True)

METRIC_CHOICES = ("smape", "smape_m3", "mape", "mase", "owa", "nd")


def _env_flag(name, default=False):
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def build_parser():
    parser = argparse.ArgumentParser(description="Train, evaluate and inspect N-BEATS forecasting ensembles.")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging output")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub):
        sub.add_argument("--config", required=True, help="Path to the run config (key = value file).")
        sub.add_argument("--seed", type=int, help="Base seed (overrides the config file).")
        sub.add_argument("--out", help="Output directory (overrides the config file).")

    train = commands.add_parser("train", help="Train the configured ensembles and score them on the test set.")
    add_common(train)
    train.add_argument("--workers", type=int, default=int(os.environ.get("NBEATS_WORKERS", "1")),
                       help="Parallel ensemble members (default: NBEATS_WORKERS or 1).")
    train.add_argument("--metric", help=f"Print only this metric ({', '.join(METRIC_CHOICES)}).")
    train.add_argument("--naive2", default="internal", help="'internal' or a CSV of per-subset Naive2 smape/mase.")

    evaluate = commands.add_parser("evaluate", help="Score stored forecasts, weight files or a baseline.")
    add_common(evaluate)
    evaluate.add_argument("--forecasts",
                          help=f"Forecast CSV, manifest.csv, a .nbts weight file or one of {', '.join(BASELINES)} "
                               "(default: <out>/forecast.csv). Comma-separated manifests and .nbts files "
                               "are pooled into one median ensemble.")
    evaluate.add_argument("--metric", help=f"Print only this metric ({', '.join(METRIC_CHOICES)}).")
    evaluate.add_argument("--naive2", default="internal", help="'internal' or a CSV of per-subset Naive2 smape/mase.")

    decompose = commands.add_parser("decompose", help="Write per-stack forecast traces for chosen series.")
    add_common(decompose)
    decompose.add_argument("--series", required=True, help="Comma-separated series ids.")
    decompose.add_argument("--member", type=int, default=0, help="Ensemble member to trace (default: 0).")

    ablate = commands.add_parser("ablate", help="Compare settings of one axis on the validation split.")
    add_common(ablate)
    ablate.add_argument("--axis", required=True, help=f"One of {', '.join(ABLATION_AXES)}.")
    ablate.add_argument("--workers", type=int, default=int(os.environ.get("NBEATS_WORKERS", "1")),
                        help="Parallel ensemble members (default: NBEATS_WORKERS or 1).")
    return parser


def build_shared(args):
    """Initial shared store for the command's flow."""
    if getattr(args, "metric", None) and args.metric not in METRIC_CHOICES:
        raise ValueError(f"unknown metric '{args.metric}', expected one of {METRIC_CHOICES}")
    if args.command == "ablate" and args.axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis '{args.axis}', expected one of {ABLATION_AXES}")
    workers = getattr(args, "workers", 1)
    if workers < 1:
        raise ValueError(f"--workers must be >= 1, got {workers}")

    shared = {
        "config_path": args.config,
        # CLI flags override the file
        "overrides": {"seed": args.seed, "out": args.out},
        "workers": workers,
        "progress": _env_flag("NBEATS_PROGRESS"),
        "metric": getattr(args, "metric", None),
        "naive2_source": getattr(args, "naive2", "internal"),
        "forecast_source": getattr(args, "forecasts", None),
    }
    if args.command == "decompose":
        shared["series_ids"] = [s.strip() for s in args.series.split(",") if s.strip()]
        shared["member"] = args.member
    if args.command == "ablate":
        shared["axis"] = args.axis
    return shared


# --- Main Function ---
def main(argv=None):
    args = build_parser().parse_args(argv)

    # Configure logging based on verbose flag
    log_level = logging.DEBUG if args.verbose else logging.INFO

    # Reset logging configuration
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler()  # Output to console
        ]
    )
    logger = logging.getLogger(__name__)

    if args.verbose:
        logger.debug("Verbose logging enabled")
        logger.debug(f"Command line arguments: {vars(args)}")

    try:
        shared = build_shared(args)
        print(f"Starting {args.command} with config {args.config}")
        FLOWS[args.command]().run(shared)
    except KeyboardInterrupt:
        logger.info("Process interrupted by keyboard")
        print("\nProcess interrupted. Shutting down...", file=sys.stderr)
        return 130
    except Exception as e:
        logger.debug("Error in main execution", exc_info=True)
        logger.error(f"Error in main execution: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
