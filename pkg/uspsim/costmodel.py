"""
An analytical latency and communication-volume model of distributed
attention.

Volumes are the same closed forms the fabric's traffic log is checked
against (per rank, per attention layer). Time is priced as
``bytes / per-direction bandwidth + rounds * link latency``, and ring
rounds may be overlapped with compute following the pipelined schedule.
Per-step latency adds the ideally-split compute and the kernel launch
overhead (largely removed when the step is compiled into a graph replay).
"""

from typing import Iterable, Optional

import json

import logging

from dataclasses import asdict, dataclass, field, fields

from pathlib import Path

from uspsim.mesh import Mesh2D, MeshInfeasibleError, build_mesh, check_divisible, feasible_ring_sizes

from uspsim.protocols import CommOptions


log = logging.getLogger(__name__)

FP8_SCALE_BYTES = 4
"""Every FP8 K or V segment carries its 32-bit scale."""


class ProfileError(ValueError):
    """
    Thrown when a hardware or workload profile is missing fields, has
    unknown fields or has out-of-range values.
    """


def _from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ProfileError(f"Unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ProfileError(f"Invalid {cls.__name__}: {exc}") from None


@dataclass(frozen=True)
class HardwareProfile:
    link_bandwidth: float
    """Bytes/second, as quoted (see :py:attr:`bidirectional`)."""
    link_latency: float
    """Seconds charged per communication round (collective or send). This
    is a fitted effective overhead (synchronisation, collective setup and
    wire latency together), not a physical link latency."""
    launch_overhead: float
    """Seconds of host overhead per kernel launch."""
    element_width: int = 2
    """Bytes per activation element on the wire (2 for BF16)."""
    bidirectional: bool = True
    """If True the quoted bandwidth covers both directions, so each
    direction gets half."""
    launch_residual: float = 0.05
    """Fraction of launch overhead remaining when a step is compiled."""
    description: str = ""
    """Free text: where the numbers came from."""

    def __post_init__(self) -> None:
        for name in ["link_bandwidth", "link_latency", "launch_overhead", "element_width"]:
            if not getattr(self, name) > 0:
                raise ProfileError(f"HardwareProfile.{name} must be positive")
        if not 0 <= self.launch_residual <= 1:
            raise ProfileError("HardwareProfile.launch_residual must be within [0, 1]")

    @property
    def direction_bandwidth(self) -> float:
        return self.link_bandwidth / 2 if self.bidirectional else self.link_bandwidth

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        return _from_dict(cls, data)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class WorkloadProfile:
    b: int
    h: int
    s: int
    d: int
    layers: int = 1
    """Attention layers per denoising step."""
    kernels_per_step: int = 0
    compute_per_step: float = 0.0
    """Seconds of compute per step on a single worker."""
    steps: int = 1
    attention_fraction: float = 0.35
    """Share of compute spent in attention (what ring rounds can hide behind)."""
    measured_step_ms: dict[int, float] = field(default_factory=dict)
    """Measured baseline (uncompiled) milliseconds per step by worker count,
    compared against the model in sweeps."""
    round_benchmark_ms: tuple[float, ...] = ()
    """Measured (serial, pipelined) milliseconds of one ring attention
    call on :py:attr:`round_benchmark_ring` workers, or empty."""
    round_benchmark_ring: int = 2
    description: str = ""

    def __post_init__(self) -> None:
        for name in ["b", "h", "s", "d", "layers", "steps", "round_benchmark_ring"]:
            if not getattr(self, name) >= 1:
                raise ProfileError(f"WorkloadProfile.{name} must be at least 1")
        if self.kernels_per_step < 0 or self.compute_per_step < 0:
            raise ProfileError("WorkloadProfile kernel count and compute time must not be negative")
        if not 0 <= self.attention_fraction <= 1:
            raise ProfileError("WorkloadProfile.attention_fraction must be within [0, 1]")

        # JSON object keys arrive as strings
        try:
            measured = {int(n): float(ms) for n, ms in self.measured_step_ms.items()}
        except (TypeError, ValueError, AttributeError):
            raise ProfileError("WorkloadProfile.measured_step_ms must map worker counts to milliseconds") from None
        if any(n < 1 or ms <= 0 for n, ms in measured.items()):
            raise ProfileError("WorkloadProfile.measured_step_ms must have positive counts and times")
        object.__setattr__(self, "measured_step_ms", measured)

        try:
            benchmark = tuple(float(ms) for ms in self.round_benchmark_ms)
        except (TypeError, ValueError):
            raise ProfileError("WorkloadProfile.round_benchmark_ms must be a list of numbers") from None
        if benchmark and (len(benchmark) != 2 or not 0 < benchmark[1] <= benchmark[0]):
            raise ProfileError("WorkloadProfile.round_benchmark_ms must be [serial, pipelined] with 0 < pipelined <= serial")
        if benchmark and self.round_benchmark_ring < 2:
            raise ProfileError("WorkloadProfile.round_benchmark_ring must be at least 2")
        object.__setattr__(self, "round_benchmark_ms", benchmark)

    def scaling_efficiency(self, n_workers: int) -> Optional[float]:
        """
        Measured speedup from the smallest measured worker count to
        ``n_workers``, as a share of the ideal (linear) speedup.
        """
        if n_workers not in self.measured_step_ms:
            return None
        n0 = min(self.measured_step_ms)
        return (self.measured_step_ms[n0] * n0) / (self.measured_step_ms[n_workers] * n_workers)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadProfile":
        return _from_dict(cls, data)

    def to_json(self) -> dict:
        return asdict(self)


def load_profile(cls, path: Path):
    """Read a :py:class:`HardwareProfile` or :py:class:`WorkloadProfile` from JSON."""
    with Path(path).open("r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ProfileError(f"{path} must contain a JSON object")
    return cls.from_dict(data)


def comm_volume_ulysses(
    w: WorkloadProfile,
    ulysses_size: int,
    ring_size: int = 1,
    width: int = 2,
    fp8_kv: bool = False,
) -> int:
    """
    Bytes sent per rank per attention layer by the two Ulysses all-to-alls:
    packed Q, K, V in and O out, excluding the rank's own slot.

    With local sequence length ``S/N`` (``N = R*U``) each of the ``U-1``
    peers receives one ``[B, H/U, S/N, D]`` block of each tensor.
    """
    if ulysses_size < 1 or ring_size < 1:
        raise ValueError("Mesh dimensions must be at least 1")
    if ulysses_size == 1:
        return 0
    n = w.b * (w.h // ulysses_size) * (w.s // (ring_size * ulysses_size)) * w.d
    if fp8_kv:
        per_peer = 2 * n * width + 2 * (n + FP8_SCALE_BYTES)
    else:
        per_peer = 4 * n * width
    return per_peer * (ulysses_size - 1)


def comm_volume_ring(
    w: WorkloadProfile,
    ring_size: int,
    ulysses_size: int = 1,
    width: int = 2,
    fp8_kv: bool = False,
) -> int:
    """
    Bytes sent per rank per attention layer by ring attention: one K and one
    V chunk of ``[B, H/U, S/R, D]`` in each of the ``R-1`` rounds.
    """
    if ulysses_size < 1 or ring_size < 1:
        raise ValueError("Mesh dimensions must be at least 1")
    if ring_size == 1:
        return 0
    m = w.b * (w.h // ulysses_size) * (w.s // ring_size) * w.d
    per_round = 2 * (m + FP8_SCALE_BYTES) if fp8_kv else 2 * m * width
    return per_round * (ring_size - 1)


@dataclass(frozen=True)
class PipelineTimes:
    serial_total: float
    pipelined_total: float
    hidden_fraction: float

    def to_json(self) -> dict:
        return asdict(self)


def pipeline_timeline(compute: float, comm: float, ring_size: int) -> PipelineTimes:
    """
    Time for ``ring_size`` compute blocks and ``ring_size - 1`` transfers
    scheduled serially and pipelined.

    Pipelined, the first transfer is prefetched under the local block and
    every later transfer overlaps the previous block, so each of the
    ``R-1`` remote rounds costs ``max(compute, comm)``.
    """
    if ring_size < 1:
        raise ValueError("ring_size must be at least 1")
    if compute < 0 or comm < 0:
        raise ValueError("Durations must not be negative")

    rounds = ring_size - 1
    serial = ring_size * compute + rounds * comm
    pipelined = compute + rounds * max(compute, comm)
    if rounds == 0 or comm == 0:
        hidden = 1.0
    else:
        hidden = 1.0 - exposed_ring_comm(compute, comm, ring_size) / (rounds * comm)
        hidden = min(1.0, max(0.0, hidden))
    return PipelineTimes(serial, pipelined, hidden)


def exposed_ring_comm(compute: float, comm: float, ring_size: int) -> float:
    """
    Communication time left exposed by the pipelined schedule, i.e.
    ``pipelined_total - ring_size * compute``. Exactly zero when
    ``comm <= compute``.
    """
    return (ring_size - 1) * max(0.0, comm - compute)


def calibrate_round_split(serial_total: float, pipelined_total: float, ring_size: int) -> tuple[float, float]:
    """
    Recover the per-round (compute, comm) durations which make
    :py:func:`pipeline_timeline` reproduce a measured serial/pipelined pair.
    """
    if ring_size < 2:
        raise ValueError("Need at least two ring ranks to separate compute from comm")
    if not 0 < pipelined_total <= serial_total:
        raise ValueError("Expected 0 < pipelined_total <= serial_total")
    rounds = ring_size - 1

    # Communication fully hidden: pipelined == R * compute
    compute = pipelined_total / ring_size
    comm = (serial_total - ring_size * compute) / rounds
    if comm <= compute:
        return (compute, comm)

    # Communication bound: serial - pipelined == (R - 1) * compute
    compute = (serial_total - pipelined_total) / rounds
    comm = (pipelined_total - compute) / rounds
    return (compute, comm)


def round_calibration(w: WorkloadProfile) -> Optional[dict]:
    """
    The per-round compute/comm split recovered from the workload's ring
    micro-benchmark, and the timeline it implies. None when the profile
    carries no benchmark.
    """
    if not w.round_benchmark_ms:
        return None
    serial_ms, pipelined_ms = w.round_benchmark_ms
    ring_size = w.round_benchmark_ring
    compute_ms, comm_ms = calibrate_round_split(serial_ms, pipelined_ms, ring_size)
    times = pipeline_timeline(compute_ms, comm_ms, ring_size)
    return {
        "ring_size": ring_size,
        "measured_serial_ms": serial_ms,
        "measured_pipelined_ms": pipelined_ms,
        "round_compute_ms": compute_ms,
        "round_comm_ms": comm_ms,
        "timeline_ms": times.to_json(),
        "pipelined_speedup": times.serial_total / times.pipelined_total,
    }


@dataclass(frozen=True)
class LatencyBreakdown:
    """
    Per-step latency components in seconds. ``total = compute +
    exposed_comm + launch``; hidden communication is overlapped with compute
    and so is not part of the total.
    """

    compute: float
    exposed_comm: float
    hidden_comm: float
    launch: float
    steps: int = 1

    @property
    def total(self) -> float:
        return self.compute + self.exposed_comm + self.launch

    @property
    def total_comm(self) -> float:
        return self.exposed_comm + self.hidden_comm

    @property
    def comm_fraction(self) -> float:
        return self.total_comm / self.total if self.total > 0 else 0.0

    @property
    def hidden_fraction(self) -> float:
        return self.hidden_comm / self.total_comm if self.total_comm > 0 else 1.0

    @property
    def run_total(self) -> float:
        return self.total * self.steps

    def to_json(self) -> dict:
        return {
            "compute_ms": self.compute * 1e3,
            "comm_exposed_ms": self.exposed_comm * 1e3,
            "comm_hidden_ms": self.hidden_comm * 1e3,
            "launch_ms": self.launch * 1e3,
            "total_ms": self.total * 1e3,
            "comm_fraction": self.comm_fraction,
            "hidden_fraction": self.hidden_fraction,
            "run_total_s": self.run_total,
        }


def step_latency(
    hw: HardwareProfile,
    w: WorkloadProfile,
    mesh: Mesh2D,
    opts: CommOptions = CommOptions(),
    compiled: bool = False,
) -> LatencyBreakdown:
    """
    Model one denoising step of ``w`` on ``mesh``.
    """
    check_divisible(mesh, w.s, w.h)
    n, r, u = mesh.n_workers, mesh.ring_size, mesh.ulysses_size
    bandwidth = hw.direction_bandwidth

    compute = w.compute_per_step / n
    launch = w.kernels_per_step * hw.launch_overhead
    if compiled:
        launch *= hw.launch_residual

    ulysses_bytes = comm_volume_ulysses(w, u, r, hw.element_width, opts.fp8_kv)
    ulysses_time = ulysses_bytes / bandwidth + (2 if u > 1 else 0) * hw.link_latency

    ring_exposed = ring_hidden = 0.0
    if r > 1:
        round_bytes = comm_volume_ring(w, r, u, hw.element_width, opts.fp8_kv) / (r - 1)
        round_comm = round_bytes / bandwidth + hw.link_latency
        if opts.pipelined_ring:
            round_compute = compute * w.attention_fraction / (w.layers * r)
            ring_exposed = exposed_ring_comm(round_compute, round_comm, r)
            ring_hidden = (r - 1) * round_comm - ring_exposed
        else:
            ring_exposed = (r - 1) * round_comm

    return LatencyBreakdown(
        compute=compute,
        exposed_comm=w.layers * (ulysses_time + ring_exposed),
        hidden_comm=w.layers * ring_hidden,
        launch=launch,
        steps=w.steps,
    )


def comm_fraction(breakdown: LatencyBreakdown) -> float:
    """Share of the per-step total spent communicating (exposed or hidden)."""
    return breakdown.comm_fraction


@dataclass(frozen=True)
class SpeedupReport:
    ratio: float
    deltas: dict[str, float]
    """Seconds saved per step, per component (compute, exposed_comm, launch)."""

    def to_json(self) -> dict:
        return {"speedup": self.ratio, "deltas_ms": {k: v * 1e3 for k, v in self.deltas.items()}}


def speedup_report(baseline: LatencyBreakdown, optimized: LatencyBreakdown) -> SpeedupReport:
    """
    Overall speedup and its attribution to each latency component.
    """
    deltas = {
        "compute": baseline.compute - optimized.compute,
        "exposed_comm": baseline.exposed_comm - optimized.exposed_comm,
        "launch": baseline.launch - optimized.launch,
    }
    total_delta = baseline.total - optimized.total
    assert abs(sum(deltas.values()) - total_delta) <= 1e-12 * max(1.0, abs(baseline.total))
    return SpeedupReport(ratio=baseline.total / optimized.total, deltas=deltas)


@dataclass(frozen=True)
class SweepRow:
    config: str
    mesh: Mesh2D
    baseline: LatencyBreakdown
    optimized: LatencyBreakdown
    speedup: SpeedupReport
    measured_ms: Optional[float] = None
    """Measured baseline milliseconds per step, when the workload has one."""
    scaling_efficiency: Optional[float] = None

    @property
    def model_gap_ms(self) -> Optional[float]:
        """How much slower the measured baseline is than the modelled one."""
        if self.measured_ms is None:
            return None
        return self.measured_ms - self.baseline.total * 1e3

    def to_row(self) -> dict:
        row = {"config": self.config}
        row.update({k: round(v, 6) for k, v in self.optimized.to_json().items()})
        row["baseline_total_ms"] = round(self.baseline.total * 1e3, 6)
        row["speedup"] = round(self.speedup.ratio, 6)
        for name in ["measured_ms", "model_gap_ms", "scaling_efficiency"]:
            value = getattr(self, name)
            row[name] = None if value is None else round(value, 6)
        return row


CSV_COLUMNS = [
    "config",
    "compute_ms",
    "comm_exposed_ms",
    "comm_hidden_ms",
    "launch_ms",
    "total_ms",
    "speedup",
    "comm_fraction",
    "hidden_fraction",
    "baseline_total_ms",
    "run_total_s",
    "measured_ms",
    "model_gap_ms",
    "scaling_efficiency",
]


def sweep(
    hw: HardwareProfile,
    w: WorkloadProfile,
    worker_counts: Iterable[int],
    max_ring_dim_size: int,
    opts: CommOptions = CommOptions(),
    compiled: bool = False,
    all_meshes: bool = False,
) -> list[SweepRow]:
    """
    Compare a baseline (serial ring, full precision, uncompiled) against the
    given options for each worker count. Each worker count uses the mesh
    :py:func:`~uspsim.mesh.build_mesh` picks, or every feasible mesh when
    ``all_meshes`` is set.
    """
    out = []
    for n in worker_counts:
        if all_meshes:
            ring_sizes = feasible_ring_sizes(n, max_ring_dim_size, w.h)
            if not ring_sizes:
                raise MeshInfeasibleError(f"no feasible mesh for N={n}, H={w.h}")
            meshes = [Mesh2D(n, r, n // r) for r in ring_sizes]
        else:
            meshes = [build_mesh(n, max_ring_dim_size, w.h)]

        for mesh in meshes:
            baseline = step_latency(hw, w, mesh)
            optimized = step_latency(hw, w, mesh, opts, compiled)
            flags = [
                name
                for name, on in [
                    ("fp8", opts.fp8_kv),
                    ("pipelined", opts.pipelined_ring),
                    ("compiled", compiled),
                ]
                if on
            ]
            config = f"N={n} R={mesh.ring_size} U={mesh.ulysses_size}"
            if flags:
                config += " " + "+".join(flags)
            log.info("%s: %.3f ms/step", config, optimized.total * 1e3)
            out.append(
                SweepRow(
                    config,
                    mesh,
                    baseline,
                    optimized,
                    speedup_report(baseline, optimized),
                    measured_ms=w.measured_step_ms.get(n),
                    scaling_efficiency=w.scaling_efficiency(n),
                )
            )
    return out
