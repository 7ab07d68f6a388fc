"""Command-line entry point for the experiment suites and the HTTP service."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from app.config import settings
from app.errors import ConfigError, DomainError
from app.schemas import ExperimentConfig, ExperimentKind
from app.services.experiment_service import run_experiment
from app.services.output_service import OutputService

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2

# Desk-scale defaults; every sweep can be raised through --config.
PRESETS: Dict[str, Dict] = {
    "hydro-transport": {
        "kind": "hydro_transport",
        "params": {"n_particles": 128, "alpha": 2.0, "beta": 1.0, "mu": 1.0, "regime": "transport"},
        "initial_profile": {"family": "logistic", "nu": 1.0},
        "n_sweep": [128, 512, 2048],
        "time_points": [1.0],
        "replicas": 20,
    },
    "hydro-kpp": {
        "kind": "hydro_kpp",
        "params": {"n_particles": 64, "alpha": 1.0, "beta": 1.0, "mu": 1.0, "regime": "diffusive"},
        "initial_profile": {"family": "logistic", "nu": 1.0},
        "n_sweep": [64, 128, 256],
        "time_points": [0.5],
        "replicas": 20,
    },
    "martingale": {
        "kind": "martingale",
        "params": {"n_particles": 128, "alpha": 2.0, "beta": 1.0, "mu": 1.0, "regime": "transport"},
        "initial_profile": {"family": "logistic", "nu": 1.0},
        "n_sweep": [128, 512],
        "time_points": [0.5, 1.0],
        "replicas": 100,
    },
    "waves-transport": {
        "kind": "waves_transport",
        "params": {"n_particles": 2, "alpha": 2.0, "beta": 1.0, "mu": 1.0, "regime": "transport"},
        "replicas": 1,
    },
    "waves-kpp": {
        "kind": "waves_kpp",
        "params": {"n_particles": 2, "alpha": 1.0, "beta": 1.0, "mu": 1.0, "regime": "diffusive"},
        "replicas": 1,
    },
    "longtime": {
        "kind": "longtime",
        "params": {"n_particles": 10, "alpha": 2.0, "beta": 1.0, "regime": "fixed", "mu_n": 0.5},
        "replicas": 4,
    },
    "oracle-n2": {
        "kind": "oracle_n2",
        "params": {"n_particles": 2, "alpha": 1.0, "beta": 1.0, "regime": "fixed", "mu_n": 1.0},
        "replicas": 1,
    },
}

COMMAND_KINDS = {
    "hydro-transport": {ExperimentKind.HYDRO_TRANSPORT},
    "hydro-kpp": {ExperimentKind.HYDRO_KPP},
    "martingale": {ExperimentKind.MARTINGALE},
    "waves": {ExperimentKind.WAVES_TRANSPORT, ExperimentKind.WAVES_KPP},
    "longtime": {ExperimentKind.LONGTIME},
    "oracle-n2": {ExperimentKind.ORACLE_N2},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rollback-sim",
        description="Mean-field rollback particle simulator: hydrodynamic, wave and long-time experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m app hydro-transport --replicas 20 --threads 4
  python -m app waves --variant kpp --out results/waves
  python -m app oracle-n2 --alpha 2 --beta 1 --mu2 1
  python -m app serve
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in COMMAND_KINDS:
        sub = subparsers.add_parser(command, help=f"Run the {command} experiment")
        sub.add_argument("--config", type=Path, default=None, help="Experiment configuration (JSON)")
        sub.add_argument("--out", type=Path, default=None, help=f"Output directory (default: {settings.output_dir})")
        sub.add_argument("--seed", type=int, default=None, help="Base seed; replaces the per-replica seed list")
        sub.add_argument("--replicas", type=int, default=None, help="Number of replicas")
        sub.add_argument("--threads", type=int, default=None, help="Worker threads (default: DEFAULT_THREADS)")
        if command == "waves":
            sub.add_argument("--variant", choices=["transport", "kpp"], default="transport", help="Limit equation")
        if command == "oracle-n2":
            sub.add_argument("--alpha", type=float, default=None, help="Right-jump rate")
            sub.add_argument("--beta", type=float, default=None, help="Left-jump rate")
            sub.add_argument("--mu2", type=float, default=None, help="Interaction rate mu_2")

    serve = subparsers.add_parser("serve", help="Run the HTTP API under uvicorn")
    serve.add_argument("--host", default=settings.service_host)
    serve.add_argument("--port", type=int, default=settings.service_port)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Preset or config file, with the command-line overrides applied and re-validated."""
    if args.config is not None:
        try:
            payload = json.loads(args.config.read_text(encoding="utf-8"))
        except Exception as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    else:
        preset = args.command if args.command != "waves" else f"waves-{args.variant}"
        payload = json.loads(json.dumps(PRESETS[preset]))

    if args.replicas is not None:
        payload["replicas"] = args.replicas
    if args.seed is not None:
        payload["seed"] = args.seed
        payload["seeds"] = []
    if args.command == "oracle-n2":
        params = payload.setdefault("params", {})
        for name, key in (("alpha", "alpha"), ("beta", "beta"), ("mu2", "mu_n")):
            if getattr(args, name) is not None:
                params[key] = getattr(args, name)
    if args.out is not None:
        payload["output_dir"] = str(args.out)

    try:
        config = ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    if config.kind not in COMMAND_KINDS[args.command]:
        raise ConfigError(f"config kind {config.kind.value} does not match subcommand {args.command}")
    return config


def _serve(host: str, port: int) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port, log_level=settings.log_level.lower())
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return _serve(args.host, args.port)

    try:
        config = load_config(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    try:
        run = run_experiment(config, threads=args.threads)
    except DomainError as e:
        logger.error(f"Experiment rejected: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Experiment failed: {e}", exc_info=True)
        return 1

    csv_path, json_path = OutputService(config.output_dir).emit(run, config)
    failed = [r.metric for r in run.records if r.metric.startswith("check:") and r.value == 0.0]
    print(f"{run.experiment_id}: {len(run.records)} records -> {csv_path}, {json_path}")
    if failed:
        print(f"Failed checks: {', '.join(sorted(set(failed)))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
