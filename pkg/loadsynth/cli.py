"""
Command-line entry point: simdata, train, generate, evaluate, serve.

Exit codes: 0 success, 1 training failure, 2 usage, input or artifact error,
3 guard refusal, 4 attempt budget exhausted.
"""
import argparse
import logging
import socket
import sys
from datetime import date
from typing import List, Optional

from pydantic import ValidationError

from loadsynth.config import Settings, load_settings
from loadsynth.exceptions import (
    ArtifactError,
    BudgetExhaustedError,
    ConfigurationError,
    DatasetError,
    DatasetNotFoundError,
    GuardRefusedError,
    InvalidRequestError,
    LayoutMismatchError,
    LoadSynthError,
    MixtureFitError,
    TrainingDivergedError,
)

logger = logging.getLogger("loadsynth")

EXIT_OK = 0
EXIT_TRAINING = 1
EXIT_USAGE = 2
EXIT_GUARD = 3
EXIT_BUDGET = 4

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
SYNTHETIC_DATE = date(2000, 1, 1)


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _settings(args: argparse.Namespace, **overrides) -> Settings:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["SEED"] = args.seed
    settings = load_settings(getattr(args, "config", None), **overrides)
    logging.getLogger().setLevel(settings.LOG_LEVEL.upper())
    return settings


# --- commands ------------------------------------------------------------------------------------

def cmd_simdata(args: argparse.Namespace) -> int:
    from loadsynth.services.profile_store import write_dataset_csv
    from loadsynth.services.simdata import CohortSpec, generate_cohort

    settings = _settings(args, DATA_PATH=args.output)
    spec = CohortSpec(
        n_households=args.households,
        days_per_household=args.days,
        noise_scale=args.noise,
        seed=settings.SEED,
        start_date=args.start_date,
    )
    path = write_dataset_csv(generate_cohort(spec), settings.DATA_PATH)
    logger.info(f"Simulated cohort written to {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from loadsynth.services.pipeline import train_and_save

    settings = _settings(args, DATA_PATH=args.data, MODEL_PATH=args.model)
    artifact = train_and_save(settings)
    print(artifact.model_version)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    from loadsynth.services.artifact import load_artifact
    from loadsynth.services.generator import GenerationRequest, generate
    from loadsynth.services.profile_store import LabelCondition, dataset_frame, write_csv

    settings = _settings(args, MODEL_PATH=args.model)
    artifact = load_artifact(settings.MODEL_PATH)
    condition = LabelCondition(
        has_ev=args.has_ev,
        has_heat_pump=args.has_heat_pump,
        smart_tariff=args.smart_tariff,
        property_type=args.property_type,
        energy_rating=args.energy_rating,
    )
    result = generate(
        artifact.model, artifact.mixture, GenerationRequest(condition, args.count, settings.SEED), settings.guard
    )
    frame = dataset_frame(
        result.profiles,
        result.realized_labels,
        [f"synthetic-{i:05d}" for i in range(1, args.count + 1)],
        [SYNTHETIC_DATE] * args.count,
    )
    write_csv(frame, args.output)
    logger.info(
        f"Wrote {args.count} profiles to {args.output} "
        f"(acceptance rate {result.diagnostics.acceptance_rate:.3f})"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from loadsynth.services.pipeline import evaluate_pipeline

    settings = _settings(args, DATA_PATH=args.data, MODEL_PATH=args.model, REPORTS_DIR=args.reports_dir)
    report, paths = evaluate_pipeline(settings)
    print(paths["report"])
    return EXIT_OK


def port_available(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError:
            return False
    return True


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from loadsynth.main import create_app

    settings = _settings(args, HOST=args.host, PORT=args.port, MODEL_PATH=args.model)
    app = create_app(settings)
    if not port_available(settings.HOST, settings.PORT):
        logger.error(f"Port {settings.PORT} on {settings.HOST} is already in use")
        return EXIT_USAGE
    uvicorn.run(app, host=settings.HOST, port=settings.PORT, log_level=settings.LOG_LEVEL.lower())
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from loadsynth.services.profile_store import ENERGY_RATINGS, PROPERTY_TYPES

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="env file with settings")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides SEED")

    parser = argparse.ArgumentParser(
        prog="loadsynth",
        description="Synthetic household load profiles from a conditional VAE with a latent mixture",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simdata = sub.add_parser("simdata", parents=[common], help="write a simulated cohort CSV")
    simdata.add_argument("--output", help="CSV path (default DATA_PATH)")
    simdata.add_argument("--households", type=positive_int, default=600)
    simdata.add_argument("--days", type=positive_int, default=60)
    simdata.add_argument("--noise", type=float, default=0.25)
    simdata.add_argument("--start-date", type=date.fromisoformat, default=date(2021, 3, 1))
    simdata.set_defaults(handler=cmd_simdata)

    train = sub.add_parser("train", parents=[common], help="train the model and write the artifact")
    train.add_argument("--data", help="CSV path (default DATA_PATH)")
    train.add_argument("--model", help="artifact path (default MODEL_PATH)")
    train.set_defaults(handler=cmd_train)

    gen = sub.add_parser("generate", parents=[common], help="generate profiles matching a condition")
    gen.add_argument("--model", help="artifact path (default MODEL_PATH)")
    gen.add_argument("--count", type=positive_int, required=True)
    gen.add_argument("--output", required=True, help="CSV path")
    gen.add_argument("--has-ev", type=parse_bool)
    gen.add_argument("--has-heat-pump", type=parse_bool)
    gen.add_argument("--smart-tariff", type=parse_bool)
    gen.add_argument("--property-type", choices=[p.value for p in PROPERTY_TYPES])
    gen.add_argument("--energy-rating", choices=[r.value for r in ENERGY_RATINGS])
    gen.set_defaults(handler=cmd_generate)

    evaluate = sub.add_parser("evaluate", parents=[common], help="write the evaluation report")
    evaluate.add_argument("--data", help="CSV path (default DATA_PATH)")
    evaluate.add_argument("--model", help="artifact path (default MODEL_PATH)")
    evaluate.add_argument("--reports-dir", help="output directory (default REPORTS_DIR)")
    evaluate.set_defaults(handler=cmd_evaluate)

    serve = sub.add_parser("serve", parents=[common], help="run the HTTP API")
    serve.add_argument("--host")
    serve.add_argument("--port", type=positive_int)
    serve.add_argument("--model", help="artifact path (default MODEL_PATH)")
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except GuardRefusedError as e:
        logger.error(f"Generation refused: {e}")
        return EXIT_GUARD
    except BudgetExhaustedError as e:
        logger.error(str(e))
        return EXIT_BUDGET
    except (TrainingDivergedError, MixtureFitError) as e:
        logger.error(f"Training failed: {e}")
        return EXIT_TRAINING
    except (
        ConfigurationError, DatasetNotFoundError, DatasetError, ArtifactError, LayoutMismatchError, InvalidRequestError,
    ) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except LoadSynthError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_TRAINING
    except ValueError as e:
        logger.error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
