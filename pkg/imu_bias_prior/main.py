"""Command line entry point for the bias-prior pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

from . import pipeline
from .bias_labeler import LabelingError
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, read_euroc_sequence, write_json
from .evaluation import AlignmentError
from .fusion import FusionError, SolverError
from .geom import GeometryError
from .ipnet import NetworkError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Raised for invalid command lines."""


EXIT_CODES: List[Tuple[Type[BaseException], int]] = [
    (UsageError, EXIT_USAGE),
    (ConfigError, EXIT_USAGE),
    (DatasetError, EXIT_DATA),
    (FusionError, EXIT_DATA),
    (AlignmentError, EXIT_DATA),
    (FileNotFoundError, EXIT_DATA),
    (LabelingError, EXIT_NUMERICAL),
    (NetworkError, EXIT_NUMERICAL),
    (SolverError, EXIT_NUMERICAL),
    (GeometryError, EXIT_NUMERICAL),
    (ValueError, EXIT_USAGE),
    (RuntimeError, EXIT_USAGE),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def exit_code_for(exc: BaseException) -> Optional[int]:
    for kind, code in EXIT_CODES:
        if isinstance(exc, kind):
            return code
    return None


def report_error(exc: BaseException, code: int) -> None:
    """Message on stderr followed by one JSON line for scripts."""

    print(f"error: {exc}", file=sys.stderr)
    tail: Dict[str, Any] = {
        "error": str(exc),
        "type": type(exc).__name__,
        "exit_code": code,
        "diagnostics": getattr(exc, "diagnostics", {}) or {},
    }
    if isinstance(exc, DatasetError):
        tail["diagnostics"] = {"path": exc.path, "line": exc.line}
    print(json.dumps(tail, sort_keys=True, default=str), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration (JSON, YAML or TOML)")
    common.add_argument("--seed", type=int, help="Override the configuration seed")
    common.add_argument("--workers", type=int, default=1, help="Worker processes for per-sequence work")
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")

    parser = _Parser(prog="imu-bias-prior", description="IMU bias labels, priors and fixed-lag fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", parents=[common], help="Write synthetic EuRoC-layout sequences")
    gen.add_argument("--out", type=Path, required=True)

    labels = sub.add_parser("make-labels", parents=[common], help="Mean-bias labels per sequence")
    labels.add_argument("--data", type=Path, required=True)
    labels.add_argument("--out", type=Path, required=True)
    labels.add_argument("--poses", type=Path, help="TUM trajectory (file or directory) instead of ground truth")

    trainer = sub.add_parser("train", parents=[common], help="Train the bias-prior network")
    trainer.add_argument("--data", type=Path, required=True)
    trainer.add_argument("--labels", type=Path, required=True)
    trainer.add_argument("--out", type=Path, required=True)

    infer = sub.add_parser("infer", parents=[common], help="Sliding-window bias priors per sequence")
    infer.add_argument("--data", type=Path, required=True)
    infer.add_argument("--weights", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)

    fuse = sub.add_parser("fuse", parents=[common], help="Fixed-lag estimation with an optional bias prior")
    fuse.add_argument("--data", type=Path, required=True)
    fuse.add_argument("--out", type=Path, required=True)
    fuse.add_argument("--prior", default="off", help="off, oracle, network or file:PATH")
    fuse.add_argument("--weights", type=Path, help="Network weights for --prior network")
    fuse.add_argument("--labels", type=Path, help="Label directory for --prior oracle")

    ev = sub.add_parser("eval", parents=[common], help="ATE/RPE of estimated trajectories")
    ev.add_argument("--est", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--baseline", type=Path, help="Second run to compare against")

    bench = sub.add_parser("bench-infer", parents=[common], help="Inference throughput and latency")
    bench.add_argument("--weights", type=Path, help="Weights file; freshly initialized weights otherwise")
    bench.add_argument("--data", type=Path, help="Sequence directory; the first configured sequence otherwise")
    bench.add_argument("--repeats", type=int, default=1)
    bench.add_argument("--out", type=Path)
    return parser


def _prior_spec(value: str) -> str:
    mode = value.partition(":")[0]
    if mode not in ("off", "oracle", "network", "file") or (mode == "file" and not value.partition(":")[2]):
        raise UsageError(f"--prior must be off, oracle, network or file:PATH, got '{value}'")
    if mode != "file" and ":" in value:
        raise UsageError(f"--prior {mode} takes no argument")
    return value


def run_command(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    command = args.command
    if command == "gen-synthetic":
        return pipeline.generate_synthetic(config, args.out, args.workers)
    if command == "make-labels":
        return pipeline.make_label_files(config, args.data, args.out, args.poses, args.workers)
    if command == "train":
        return pipeline.train_network(config, args.data, args.labels, args.out)
    if command == "infer":
        return pipeline.infer_priors(args.data, args.weights, args.out, args.workers, config.bounds)
    if command == "fuse":
        prior = _prior_spec(args.prior)
        if prior == "network" and args.weights is None:
            raise UsageError("--prior network requires --weights")
        return pipeline.fuse_sequences(config, args.data, args.out, prior, args.weights, args.labels, args.workers)
    if command == "eval":
        return pipeline.evaluate_runs(config, args.est, args.data, args.out, args.baseline)
    if command == "bench-infer":
        weights = pipeline.bench_weights(config, args.weights)
        if args.data is not None:
            bundle = read_euroc_sequence(pipeline.discover_sequences(args.data)[0])
        else:
            bundle = pipeline.synthesize_bundle(config, 0)
        report = pipeline.bench_inference(weights, bundle, args.repeats)
        if args.out is not None:
            write_json(args.out, report)
        return report
    raise UsageError(f"Unknown command: {command}")  # pragma: no cover - argparse guards this


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose, args.quiet)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        config = load_config(args.config).with_seed(args.seed)
        result = run_command(args, config)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        if code is None:
            raise
        report_error(exc, code)
        return code
    summary = {k: v for k, v in result.items() if k != "config"}
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover - CLI entry point
    sys.exit(main())
