"""
The ``uspsim`` command line tool: verification suites, protocol simulations
and cost-model studies, each producing a machine-readable report.

Exit status is 0 on success, 1 on an internal error or failed verification
and 2 for an invalid or infeasible configuration.
"""

from typing import Optional, Sequence

import sys

import json

import inspect

import argparse

import logging

from dataclasses import asdict, dataclass, fields, replace

from pathlib import Path

import uspsim

from uspsim.tensor import ShapeError

from uspsim.mesh import MeshInfeasibleError, build_mesh, check_divisible

from uspsim.protocols import CommOptions

from uspsim.costmodel import (
    CSV_COLUMNS,
    HardwareProfile,
    ProfileError,
    WorkloadProfile,
    load_profile,
    round_calibration,
    sweep,
)

from uspsim.simulate import Dims, simulate, verify

from uspsim.serdes import format_report, read_json, write_report

from uspsim.trace_hash import trace_hash


log = logging.getLogger(__name__)

PROFILE_DIR = Path(inspect.getfile(uspsim)).parent / "profiles"
"""Calibrated hardware and workload profiles shipped with the package."""

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

COMMANDS = ("verify", "simulate", "cost")

DEFAULT_WORKERS = {
    "verify": (1, 2, 4),
    "simulate": (4,),
    "cost": (1, 2, 4, 8),
}


class ConfigError(ValueError):
    """
    Thrown when a run configuration is invalid (bad values, unknown keys or
    options which do not apply to the command).
    """


@dataclass
class RunConfig:
    command: str
    workers: Optional[tuple[int, ...]] = None
    """Worker counts; defaults depend on the command."""
    max_ring: int = 1
    dims: Dims = Dims(1, 4, 16, 8)
    fp8_kv: bool = False
    pipelined: bool = False
    compiled: bool = False
    seed: Optional[int] = None
    hw: str = "nvlink"
    """A profile file path or the name of a packaged profile."""
    workload: str = "flux"
    out: Optional[Path] = None
    format: str = "json"
    grid: bool = False
    all_meshes: bool = False
    concurrent: bool = False

    def __post_init__(self) -> None:
        if self.workers is None:
            self.workers = DEFAULT_WORKERS.get(self.command, (1,))

    @property
    def opts(self) -> CommOptions:
        return CommOptions(fp8_kv=self.fp8_kv, pipelined_ring=self.pipelined)

    def validate(self) -> None:
        """
        Check the configuration is complete and every requested mesh is
        feasible, before anything is run.
        """
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command '{self.command}'")
        if not self.workers or min(self.workers) < 1:
            raise ConfigError("At least one worker count (each at least 1) is required")
        if self.max_ring < 1:
            raise ConfigError("--max-ring must be at least 1")
        if self.format not in ("json", "csv"):
            raise ConfigError(f"Unknown output format '{self.format}'")
        if self.format == "csv" and self.command != "cost":
            raise ConfigError("CSV output is only available for the cost command")

        if self.command in ("verify", "simulate"):
            if self.seed is None:
                raise ConfigError(f"--seed is required for {self.command}")
            if self.command == "simulate" and len(self.workers) != 1:
                raise ConfigError("simulate takes a single worker count")
            for n in self.workers:
                check_divisible(build_mesh(n, self.max_ring, self.dims.h), self.dims.s, self.dims.h)

    def to_json(self) -> dict:
        data = asdict(self)
        data["workers"] = list(self.workers)
        data["dims"] = str(self.dims)
        # Where the report is written is not part of the run
        del data["out"]
        return data


def _parse_workers(value) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str):
        value = value.split(",")
    try:
        return tuple(int(n) for n in value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid worker count list: {value!r}") from None


def _coerce(name: str, value):
    if value is None:
        return None
    try:
        if name == "workers":
            return _parse_workers(value)
        elif name == "dims":
            return value if isinstance(value, Dims) else Dims.parse(str(value))
        elif name == "out":
            return Path(value)
        elif name in ("max_ring", "seed"):
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(f"{value!r} is not an integer")
            return int(value)
        elif name in ("fp8_kv", "pipelined", "compiled", "grid", "all_meshes", "concurrent"):
            if not isinstance(value, bool):
                raise ValueError(f"{value!r} is not a boolean")
            return value
        else:
            return str(value)
    except ValueError as exc:
        raise ConfigError(f"Invalid value for {name}: {exc}") from None


def resolve_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    """
    Build a :py:class:`RunConfig` from defaults, then values from a config
    file, then command line flags (``None`` meaning 'not given').
    """
    names = {f.name for f in fields(RunConfig)} - {"command"}
    unknown = set(file_values) - names
    if unknown:
        raise ConfigError(f"Unknown config file key(s): {', '.join(sorted(unknown))}")

    values = {}
    for source in [file_values, flag_values]:
        for name, value in source.items():
            value = _coerce(name, value)
            if value is not None:
                values[name] = value
    return RunConfig(command=command, **values)


def resolve_profile(cls, name_or_path: str, profile_dir: Path = PROFILE_DIR, allow_paths: bool = True):
    """
    Load a profile from a file, falling back to the profile of that name in
    ``profile_dir``.
    """
    path = Path(name_or_path)
    if not (allow_paths and path.is_file()):
        path = profile_dir / f"{path.name}.json"
    if not path.is_file():
        raise ProfileError(f"No {cls.__name__} file or packaged profile named '{name_or_path}'")
    return load_profile(cls, path)


def cmd_verify(config: RunConfig) -> tuple[int, dict]:
    report = verify(
        config.dims,
        config.workers,
        config.max_ring,
        config.opts,
        seed=config.seed,
        grid=config.grid,
        deterministic=not config.concurrent,
        progress=lambda case: log.info("Checking %s", case),
    )
    out = report.to_json()
    out["config"] = config.to_json()
    return (EXIT_OK if report.passed else EXIT_FAILED), out


def cmd_simulate(config: RunConfig) -> tuple[int, dict]:
    trace = simulate(
        config.dims,
        config.workers[0],
        config.max_ring,
        config.opts,
        seed=config.seed,
        deterministic=not config.concurrent,
    )
    trace["run_config"] = config.to_json()
    trace["digest"] = trace_hash(trace)
    return EXIT_OK, trace


def cmd_cost(
    config: RunConfig,
    dims_given: bool = False,
    profile_dir: Path = PROFILE_DIR,
    allow_paths: bool = True,
) -> tuple[int, dict]:
    hw = resolve_profile(HardwareProfile, config.hw, profile_dir, allow_paths)
    w = resolve_profile(WorkloadProfile, config.workload, profile_dir, allow_paths)
    if dims_given:
        # Measured step times belong to the profile's own dimensions
        w = replace(w, b=config.dims.b, h=config.dims.h, s=config.dims.s, d=config.dims.d, measured_step_ms={})

    rows = sweep(
        hw,
        w,
        config.workers,
        config.max_ring,
        config.opts,
        compiled=config.compiled,
        all_meshes=config.all_meshes,
    )
    hidden = [row.optimized.hidden_fraction for row in rows if row.mesh.ring_size > 1]
    return EXIT_OK, {
        "config": config.to_json(),
        "hardware": hw.to_json(),
        "workload": w.to_json(),
        "rows": [row.to_row() for row in rows],
        "speedups": {row.config: row.speedup.to_json() for row in rows},
        "hidden_fraction_range": [min(hidden), max(hidden)] if hidden else None,
        "round_calibration": round_calibration(w),
    }


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uspsim",
        description="""
            Simulate, verify and model unified sequence parallel (Ulysses
            and Ring) attention over a deterministic simulated fabric.
        """,
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {uspsim.__version__}",
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        default=False,
        help="""
            Log progress and per-operation details to stderr.
        """,
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help="""
            A JSON file of settings (keys as the long option names, with
            underscores). Command line options take precedence.
        """,
    )
    common.add_argument(
        "--workers",
        default=None,
        help="""
            Worker count, or a comma separated list of counts.
        """,
    )
    common.add_argument(
        "--max-ring",
        dest="max_ring",
        type=int,
        default=None,
        help="""
            The largest ring dimension to use. Defaults to 1 (pure
            Ulysses wherever the head count allows).
        """,
    )
    common.add_argument(
        "--dims",
        default=None,
        help="""
            Tensor dimensions as BxHxSxD. Defaults to 1x4x16x8 (for cost,
            the workload profile's dimensions).
        """,
    )
    common.add_argument("--fp8-kv", dest="fp8_kv", action="store_true", default=None,
                        help="Send K and V as FP8 E4M3 with a per-tensor scale.")
    common.add_argument("--pipelined", action="store_true", default=None,
                        help="Use the double-buffered ring schedule.")
    common.add_argument("--compiled", action="store_true", default=None,
                        help="(cost) Model compiled steps with reduced launch overhead.")
    common.add_argument("--seed", type=int, default=None,
                        help="Seed for generated inputs (required for verify and simulate).")
    common.add_argument("--hw", default=None,
                        help="(cost) Hardware profile file or packaged name. Defaults to nvlink.")
    common.add_argument("--workload", default=None,
                        help="(cost) Workload profile file or packaged name. Defaults to flux.")
    common.add_argument("--out", default=None,
                        help="Write the report to this file instead of stdout.")
    common.add_argument("--format", choices=["json", "csv"], default=None,
                        help="Report format. CSV is only available for cost.")
    common.add_argument("--grid", action="store_true", default=None,
                        help="(verify) Check every feasible mesh of the full grid.")
    common.add_argument("--all-meshes", dest="all_meshes", action="store_true", default=None,
                        help="(cost) Model every feasible mesh rather than the chosen one.")
    common.add_argument("--concurrent", action="store_true", default=None,
                        help="Let simulated workers run freely instead of in lock-step.")

    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("verify", parents=[common], help="Run the verification suite.")
    subparsers.add_parser("simulate", parents=[common], help="Produce a protocol trace.")
    subparsers.add_parser("cost", parents=[common], help="Run the latency cost model.")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line tool, returning its exit status."""
    parser = make_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    flag_names = {f.name for f in fields(RunConfig)} - {"command"}
    flag_values = {name: getattr(args, name) for name in flag_names}

    try:
        file_values = {}
        if args.config is not None:
            try:
                file_values = read_json(args.config)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config} is not valid JSON: {exc}") from None
            if not isinstance(file_values, dict):
                raise ConfigError(f"{args.config} must contain a JSON object")
        config = resolve_config(args.command, file_values, flag_values)
        config.validate()

        if config.command == "verify":
            status, report = cmd_verify(config)
        elif config.command == "simulate":
            status, report = cmd_simulate(config)
        else:
            dims_given = flag_values["dims"] is not None or "dims" in file_values
            status, report = cmd_cost(config, dims_given)
    except (ConfigError, MeshInfeasibleError, ProfileError, ShapeError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        log.exception("Internal error")
        return EXIT_FAILED

    columns = CSV_COLUMNS if config.command == "cost" else None
    try:
        if config.out is not None:
            write_report(report, config.out, config.format, columns)
        else:
            sys.stdout.write(format_report(report, config.format, columns))
    except OSError as exc:
        log.error("Could not write the report: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
