"""
A deterministic in-process communication fabric for simulating distributed
protocols.

Each of N workers runs the same program (a function of its
:py:class:`WorkerContext`) in its own thread. Workers exchange byte buffers
over FIFO point-to-point links and through collectives; the fabric logs
every byte in a :py:class:`TrafficLog`.

Two schedulers are provided:

* Deterministic (the default): only one worker runs at a time and the
  'turn' is passed round-robin on every fabric operation, so a run's
  interleaving (and hence its logs) is fully reproducible.
* Concurrent: workers run freely, synchronised only by the fabric.

In both modes a stall is detected when no live worker can make progress,
and a run is bounded by a budget of scheduler steps (fabric operations)
rather than by wall-clock timeouts.
"""

from typing import Callable, Generic, Iterable, NamedTuple, Optional, TypeVar

import logging

import threading

from collections import defaultdict, deque

from dataclasses import dataclass, field


log = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 1_000_000

T = TypeVar("T")


class FabricError(RuntimeError):
    """Base class for failures of a simulated run."""


class DeadlockError(FabricError):
    """
    Thrown when workers can no longer make progress (or the scheduler step
    budget is exhausted). :py:attr:`stalled` describes what each blocked
    worker was waiting for.
    """

    def __init__(self, reason: str, stalled: list[str]) -> None:
        details = "; ".join(stalled) if stalled else "no blocked workers"
        super().__init__(f"{reason} ({details})")
        self.reason = reason
        self.stalled = stalled


class WorkerFailedError(FabricError):
    """
    Thrown when a worker's program raised an exception. The original
    exception is chained as ``__cause__``.
    """

    def __init__(self, rank: int, cause: BaseException) -> None:
        super().__init__(f"worker {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause


class CollectiveMismatchError(FabricError):
    """
    Thrown when members of a group enter different kinds of collective at
    the same point in their sequence of collectives on that group.
    """


class _Aborted(Exception):
    """Raised inside workers to unwind them once the run has failed."""


@dataclass(frozen=True)
class ProcessGroup:
    """An ordered set of worker ranks taking part in collectives together."""

    members: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("A process group needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"Duplicate ranks in process group {self.members}")

    @property
    def size(self) -> int:
        return len(self.members)

    def position(self, rank: int) -> int:
        """The index of ``rank`` within the group."""
        try:
            return self.members.index(rank)
        except ValueError:
            raise ValueError(f"Rank {rank} is not a member of group {self.members}") from None

    def next(self, rank: int) -> int:
        return self.members[(self.position(rank) + 1) % self.size]

    def prev(self, rank: int) -> int:
        return self.members[(self.position(rank) - 1) % self.size]

    def __contains__(self, rank: int) -> bool:
        return rank in self.members

    def __iter__(self) -> Iterable[int]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class TrafficEntry:
    op: str
    group: tuple[int, ...]
    """Collective group, or (source, destination) for point-to-point sends."""
    round: int
    """Collective sequence number on the group, or message index on the link."""
    rank: int
    bytes: int = 0
    """Bytes sent by this rank (excluding messages to itself)."""
    received: int = 0
    msgs: int = 0

    def to_json(self) -> dict:
        return {
            "op": self.op,
            "group": list(self.group),
            "round": self.round,
            "rank": self.rank,
            "bytes": self.bytes,
            "received": self.received,
            "msgs": self.msgs,
        }


class TrafficLog:
    """
    Per (op, group, round, rank) accounting of bytes sent and received.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, tuple[int, ...], int, int], TrafficEntry] = {}

    def add(
        self,
        op: str,
        group: tuple[int, ...],
        round: int,
        rank: int,
        sent: int = 0,
        received: int = 0,
        msgs: int = 0,
    ) -> None:
        key = (op, tuple(group), round, rank)
        entry = self._entries.get(key)
        if entry is None:
            entry = self._entries[key] = TrafficEntry(op, tuple(group), round, rank)
        entry.bytes += sent
        entry.received += received
        entry.msgs += msgs

    def entries(self, op: Optional[str] = None, rank: Optional[int] = None) -> list[TrafficEntry]:
        """All entries (optionally filtered), in a canonical order."""
        return sorted(
            (
                entry
                for entry in self._entries.values()
                if (op is None or entry.op == op) and (rank is None or entry.rank == rank)
            ),
            key=lambda e: (e.op, e.group, e.round, e.rank),
        )

    def bytes_sent(self, rank: Optional[int] = None, op: Optional[str] = None) -> int:
        return sum(e.bytes for e in self.entries(op, rank))

    def bytes_received(self, rank: Optional[int] = None, op: Optional[str] = None) -> int:
        return sum(e.received for e in self.entries(op, rank))

    def rounds(self, rank: int, op: Optional[str] = None) -> int:
        """
        The number of distinct communication rounds in which ``rank`` sent
        at least one message.
        """
        return len({(e.op, e.group, e.round) for e in self.entries(op, rank) if e.msgs > 0})

    def groups(self, op: Optional[str] = None) -> set[tuple[int, ...]]:
        return {e.group for e in self.entries(op)}

    def conserved(self) -> bool:
        """True iff for every collective/link round, bytes sent == bytes received."""
        totals: dict[tuple[str, tuple[int, ...], int], list[int]] = defaultdict(lambda: [0, 0])
        for e in self._entries.values():
            totals[(e.op, e.group, e.round)][0] += e.bytes
            totals[(e.op, e.group, e.round)][1] += e.received
        return all(sent == received for sent, received in totals.values())

    def summary(self) -> dict:
        ranks = sorted({e.rank for e in self._entries.values()})
        ops = sorted({e.op for e in self._entries.values()})
        return {
            "total_bytes": self.bytes_sent(),
            "per_rank": {
                str(rank): {
                    op: {"bytes": self.bytes_sent(rank, op), "rounds": self.rounds(rank, op)}
                    for op in ops
                }
                for rank in ranks
            },
        }

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.entries()]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TrafficLog) and self.to_json() == other.to_json()


@dataclass(frozen=True)
class Span:
    """One event on a worker's logical timeline."""

    kind: str
    """``send``, ``recv``, ``compute`` or ``merge``."""
    label: str
    issue: int
    complete: int

    def to_json(self) -> dict:
        return {"kind": self.kind, "label": self.label, "issue": self.issue, "complete": self.complete}


@dataclass
class Timeline:
    """
    A per-worker record of when transfers and compute blocks were issued and
    completed, measured on a logical clock which ticks once per event.
    """

    spans: list[Span] = field(default_factory=list)
    clock: int = 0

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def record(self, kind: str, label: str, issue: int, complete: Optional[int] = None) -> Span:
        span = Span(kind, label, issue, self.tick() if complete is None else complete)
        self.spans.append(span)
        return span

    def count(self, kind: str) -> int:
        return sum(1 for span in self.spans if span.kind == kind)

    def of_kind(self, kind: str) -> list[Span]:
        return [span for span in self.spans if span.kind == kind]

    def to_json(self) -> list[dict]:
        return [span.to_json() for span in self.spans]


class _Wait(NamedTuple):
    ready: Callable[[], bool]
    description: Callable[[], str]


class _Collective:
    def __init__(self, kind: str, size: int) -> None:
        self.kind = kind
        self.size = size
        self.deposits: dict[int, list[bytes]] = {}
        self.collected = 0


class Fabric:
    """
    The shared message-passing substrate. Workers should use it via their
    :py:class:`WorkerContext` rather than directly.
    """

    def __init__(
        self,
        n_workers: int,
        deterministic: bool = True,
        step_budget: int = DEFAULT_STEP_BUDGET,
    ) -> None:
        if n_workers < 1:
            raise ValueError("A fabric needs at least one worker")
        self.n_workers = n_workers
        self.deterministic = deterministic
        self.step_budget = step_budget
        self.traffic = TrafficLog()
        self.failure: Optional[FabricError] = None
        self.steps = 0

        self._cond = threading.Condition()
        self._links: dict[tuple[int, int], deque[bytes]] = defaultdict(deque)
        self._sent_count: dict[tuple[int, int], int] = defaultdict(int)
        self._received_count: dict[tuple[int, int], int] = defaultdict(int)
        self._collectives: dict[tuple[tuple[int, ...], int], _Collective] = {}
        self._collective_seq: dict[tuple[int, tuple[int, ...]], int] = defaultdict(int)
        self._waiting: dict[int, _Wait] = {}
        self._live = set(range(n_workers))
        self._turn = 0

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.n_workers:
            raise ValueError(f"Rank {rank} does not exist (fabric has {self.n_workers} workers)")

    # Scheduling (all called with self._cond held)

    def _fail(self, error: FabricError) -> None:
        if self.failure is None:
            log.debug("Run failed: %s", error)
            self.failure = error
        self._cond.notify_all()

    def _stalled(self) -> list[str]:
        return [
            f"rank {rank} waiting in {wait.description()}"
            for rank, wait in sorted(self._waiting.items())
            if rank in self._live and not wait.ready()
        ]

    def _eligible(self, rank: int) -> bool:
        if rank not in self._live:
            return False
        wait = self._waiting.get(rank)
        return wait is None or wait.ready()

    def _reschedule(self, rank: int) -> None:
        """
        Called whenever ``rank`` blocks or exits: pass the turn on (in
        deterministic mode) and detect stalls.
        """
        if not self._live:
            return
        if self.deterministic:
            for offset in range(1, self.n_workers + 1):
                candidate = (rank + offset) % self.n_workers
                if self._eligible(candidate):
                    self._turn = candidate
                    return
            self._fail(DeadlockError("no worker can make progress", self._stalled()))
        elif not any(self._eligible(r) for r in self._live):
            self._fail(DeadlockError("no worker can make progress", self._stalled()))

    def _await(self, rank: int, ready: Callable[[], bool], description: Callable[[], str]) -> None:
        """
        Block ``rank`` until ``ready()`` holds (and, when deterministic, the
        scheduler hands it the turn). Every call is one scheduler step.
        """
        self._waiting[rank] = _Wait(ready, description)
        self.steps += 1
        if self.steps > self.step_budget:
            self._fail(DeadlockError(f"step budget of {self.step_budget} exhausted", self._stalled()))
        self._reschedule(rank)
        self._cond.notify_all()
        try:
            while True:
                if self.failure is not None:
                    raise _Aborted()
                if ready() and (not self.deterministic or self._turn == rank):
                    return
                self._cond.wait()
        finally:
            del self._waiting[rank]

    def _yield(self, rank: int, what: str) -> None:
        self._await(rank, lambda: True, lambda: what)

    def run_worker(self, ctx: "WorkerContext", program: Callable[["WorkerContext"], T], results: list) -> None:
        rank = ctx.rank
        try:
            with self._cond:
                while self.deterministic and self._turn != rank and self.failure is None:
                    self._cond.wait()
                if self.failure is not None:
                    return
            results[rank] = program(ctx)
        except _Aborted:
            pass
        except Exception as exc:
            with self._cond:
                log.debug("Worker %d raised %r", rank, exc)
                failure = WorkerFailedError(rank, exc)
                failure.__cause__ = exc
                self._fail(failure)
        finally:
            with self._cond:
                self._live.discard(rank)
                if self.failure is None:
                    self._reschedule(rank)
                self._cond.notify_all()

    # Operations

    def send(self, rank: int, to: int, buf: bytes) -> None:
        self._check_rank(to)
        buf = bytes(buf)
        with self._cond:
            link = (rank, to)
            index = self._sent_count[link]
            self._sent_count[link] += 1
            self._links[link].append(buf)
            if to != rank:
                self.traffic.add("send", link, index, rank, sent=len(buf), msgs=1)
            self._yield(rank, f"send to {to}")

    def recv(self, rank: int, source: int) -> bytes:
        self._check_rank(source)
        with self._cond:
            link = (source, rank)
            queue = self._links[link]
            self._await(
                rank,
                lambda: bool(queue),
                lambda: f"recv from {source}",
            )
            buf = queue.popleft()
            index = self._received_count[link]
            self._received_count[link] += 1
            if source != rank:
                self.traffic.add("send", link, index, rank, received=len(buf))
            return buf

    def _collective(
        self,
        kind: str,
        rank: int,
        group: ProcessGroup,
        payloads: list[bytes],
    ) -> list[bytes]:
        if rank not in group:
            raise ValueError(f"Rank {rank} is not a member of group {group.members}")
        for member in group:
            self._check_rank(member)
        key = group.members
        position = group.position(rank)

        with self._cond:
            seq = self._collective_seq[(rank, key)]
            self._collective_seq[(rank, key)] += 1

            instance = self._collectives.setdefault((key, seq), _Collective(kind, group.size))
            if instance.kind != kind:
                self._fail(CollectiveMismatchError(
                    f"rank {rank} entered {kind} but others entered {instance.kind} "
                    f"as collective #{seq} on group {key}"
                ))
                raise _Aborted()
            instance.deposits[rank] = payloads

            if group.size > 1:
                sent = sum(len(p) for j, p in enumerate(payloads) if j != position)
                self.traffic.add(kind, key, seq, rank, sent=sent, msgs=group.size - 1 if kind != "barrier" else 0)

            self._await(
                rank,
                lambda: len(instance.deposits) == instance.size,
                lambda: (
                    f"{kind} #{seq} on group {key} "
                    f"(arrived: {sorted(instance.deposits)})"
                ),
            )

            out = [instance.deposits[member][position] for member in key]
            if group.size > 1:
                received = sum(len(p) for j, p in enumerate(out) if j != position)
                self.traffic.add(kind, key, seq, rank, received=received)

            instance.collected += 1
            if instance.collected == instance.size:
                del self._collectives[(key, seq)]
            return out

    def all_to_all(self, rank: int, group: ProcessGroup, payloads: list[bytes]) -> list[bytes]:
        if len(payloads) != group.size:
            raise ValueError(f"all_to_all needs {group.size} buffers, got {len(payloads)}")
        return self._collective("all_to_all", rank, group, [bytes(p) for p in payloads])

    def barrier(self, rank: int, group: ProcessGroup) -> None:
        self._collective("barrier", rank, group, [b""] * group.size)


class Transfer:
    """
    Handle for an asynchronously issued send or receive. :py:meth:`wait`
    blocks until the transfer has completed and returns the received
    buffer (or ``None`` for sends).
    """

    def __init__(self, ctx: "WorkerContext", kind: str, peer: int, label: str) -> None:
        self._ctx = ctx
        self.kind = kind
        self.peer = peer
        self.label = label
        self.issued = ctx.timeline.tick()
        self._done = False
        self._buf: Optional[bytes] = None

    def wait(self) -> Optional[bytes]:
        if not self._done:
            if self.kind == "recv":
                self._buf = self._ctx.fabric.recv(self._ctx.rank, self.peer)
            self._ctx.timeline.record(self.kind, self.label, self.issued)
            self._done = True
        return self._buf


class WorkerContext:
    """
    A worker's handle onto the fabric. All operations are from the point
    of view of this worker's rank.
    """

    def __init__(self, fabric: Fabric, rank: int) -> None:
        self.fabric = fabric
        self.rank = rank
        self.timeline = Timeline()

    @property
    def n_workers(self) -> int:
        return self.fabric.n_workers

    def send(self, to: int, buf: bytes) -> None:
        self.fabric.send(self.rank, to, buf)

    def recv(self, source: int) -> bytes:
        return self.fabric.recv(self.rank, source)

    def isend(self, to: int, buf: bytes, label: str = "") -> Transfer:
        """
        Issue a send. Links are buffered so the data is handed to the fabric
        immediately; the handle's ``wait`` marks completion on the timeline.
        """
        transfer = Transfer(self, "send", to, label)
        self.fabric.send(self.rank, to, buf)
        return transfer

    def irecv(self, source: int, label: str = "") -> Transfer:
        return Transfer(self, "recv", source, label)

    def all_to_all(self, group: ProcessGroup, payloads: list[bytes]) -> list[bytes]:
        """
        Send ``payloads[j]`` to the j-th member of the group; returns the
        buffers addressed to this rank, indexed by sender position.
        """
        return self.fabric.all_to_all(self.rank, group, payloads)

    def barrier(self, group: ProcessGroup) -> None:
        self.fabric.barrier(self.rank, group)


@dataclass
class ProtocolRun(Generic[T]):
    results: list[T]
    traffic: TrafficLog
    timelines: list[Timeline]
    steps: int


def run_protocol(
    n_workers: int,
    program: Callable[[WorkerContext], T],
    deterministic: bool = True,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> ProtocolRun[T]:
    """
    Run ``program`` on ``n_workers`` simulated workers, returning each
    worker's return value along with the run's traffic and timelines.

    Raises :py:exc:`DeadlockError` if the workers stall and
    :py:exc:`WorkerFailedError` if any program raises.
    """
    fabric = Fabric(n_workers, deterministic=deterministic, step_budget=step_budget)
    contexts = [WorkerContext(fabric, rank) for rank in range(n_workers)]
    results: list = [None] * n_workers

    if n_workers == 1:
        fabric.run_worker(contexts[0], program, results)
    else:
        threads = [
            threading.Thread(
                target=fabric.run_worker,
                args=(ctx, program, results),
                name=f"uspsim-worker-{ctx.rank}",
                daemon=True,
            )
            for ctx in contexts
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

    if fabric.failure is not None:
        raise fabric.failure

    log.debug("Run of %d workers finished in %d steps", n_workers, fabric.steps)
    return ProtocolRun(
        results=results,
        traffic=fabric.traffic,
        timelines=[ctx.timeline for ctx in contexts],
        steps=fabric.steps,
    )
