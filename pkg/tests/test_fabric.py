import pytest

from uspsim.fabric import (
    CollectiveMismatchError,
    DeadlockError,
    Fabric,
    ProcessGroup,
    TrafficLog,
    WorkerContext,
    WorkerFailedError,
    run_protocol,
)


class TestProcessGroup:

    def test_ring_neighbours(self) -> None:
        group = ProcessGroup((1, 3, 5))
        assert group.size == len(group) == 3
        assert group.position(3) == 1
        assert group.next(5) == 1
        assert group.prev(1) == 5
        assert 3 in group and 2 not in group
        assert list(group) == [1, 3, 5]

    def test_invalid(self) -> None:
        with pytest.raises(ValueError):
            ProcessGroup(())
        with pytest.raises(ValueError):
            ProcessGroup((0, 0))
        with pytest.raises(ValueError):
            ProcessGroup((0, 1)).position(2)


def test_fabric_needs_workers() -> None:
    with pytest.raises(ValueError):
        Fabric(0)


@pytest.fixture(params=[True, False], ids=["deterministic", "concurrent"])
def deterministic(request) -> bool:
    return request.param


class TestPointToPoint:

    def test_fifo_order(self, deterministic: bool) -> None:
        def program(ctx: WorkerContext) -> list[bytes]:
            if ctx.rank == 0:
                for i in range(5):
                    ctx.send(1, bytes([i]) * (i + 1))
                return []
            else:
                return [ctx.recv(0) for _ in range(5)]

        run = run_protocol(2, program, deterministic=deterministic)
        assert run.results[1] == [bytes([i]) * (i + 1) for i in range(5)]

        assert run.traffic.bytes_sent(0, "send") == 1 + 2 + 3 + 4 + 5
        assert run.traffic.bytes_received(1, "send") == 1 + 2 + 3 + 4 + 5
        assert run.traffic.rounds(0, "send") == 5
        assert run.traffic.groups("send") == {(0, 1)}
        assert run.traffic.conserved()

    def test_exchange_around_ring(self, deterministic: bool) -> None:
        group = ProcessGroup((0, 1, 2, 3))

        def program(ctx: WorkerContext) -> bytes:
            ctx.send(group.next(ctx.rank), f"from {ctx.rank}".encode())
            return ctx.recv(group.prev(ctx.rank))

        run = run_protocol(4, program, deterministic=deterministic)
        assert run.results == [b"from 3", b"from 0", b"from 1", b"from 2"]

    def test_self_messages_are_not_traffic(self) -> None:
        def program(ctx: WorkerContext) -> bytes:
            ctx.send(ctx.rank, b"hello")
            return ctx.recv(ctx.rank)

        run = run_protocol(2, program)
        assert run.results == [b"hello", b"hello"]
        assert run.traffic.bytes_sent() == 0

    def test_async_transfers_on_timeline(self) -> None:
        def program(ctx: WorkerContext) -> bytes:
            peer = 1 - ctx.rank
            incoming = ctx.irecv(peer, "data")
            outgoing = ctx.isend(peer, bytes([ctx.rank]) * 4, "data")
            buf = incoming.wait()
            assert outgoing.wait() is None
            return buf

        run = run_protocol(2, program)
        assert run.results == [b"\x01" * 4, b"\x00" * 4]
        for timeline in run.timelines:
            assert timeline.count("send") == 1
            assert timeline.count("recv") == 1
            (recv,) = timeline.of_kind("recv")
            (send,) = timeline.of_kind("send")
            # The receive was issued first, so it was outstanding while the
            # send was issued
            assert recv.issue < send.issue < recv.complete


class TestCollectives:

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_all_to_all(self, n: int, deterministic: bool) -> None:
        group = ProcessGroup(tuple(range(n)))

        def program(ctx: WorkerContext) -> list[bytes]:
            return ctx.all_to_all(group, [f"{ctx.rank}->{j}".encode() for j in range(n)])

        run = run_protocol(n, program, deterministic=deterministic)
        for rank, received in enumerate(run.results):
            assert received == [f"{i}->{rank}".encode() for i in range(n)]

        for rank in range(n):
            # Every message is 4 bytes; the self slot is not counted
            assert run.traffic.bytes_sent(rank, "all_to_all") == 4 * (n - 1)
            assert run.traffic.rounds(rank, "all_to_all") == (1 if n > 1 else 0)
        assert run.traffic.conserved()

    def test_subgroups(self) -> None:
        groups = [ProcessGroup((0, 2)), ProcessGroup((1, 3))]

        def program(ctx: WorkerContext) -> list[bytes]:
            group = groups[ctx.rank % 2]
            return ctx.all_to_all(group, [bytes([ctx.rank])] * 2)

        run = run_protocol(4, program)
        assert run.results[0] == run.results[2] == [b"\x00", b"\x02"]
        assert run.results[1] == run.results[3] == [b"\x01", b"\x03"]
        assert run.traffic.groups("all_to_all") == {(0, 2), (1, 3)}

    def test_payload_count_checked(self) -> None:
        def program(ctx: WorkerContext) -> None:
            ctx.all_to_all(ProcessGroup((0, 1)), [b""])

        with pytest.raises(WorkerFailedError):
            run_protocol(2, program)

    def test_barrier(self, deterministic: bool) -> None:
        order = []

        def program(ctx: WorkerContext) -> None:
            order.append(("before", ctx.rank))
            ctx.barrier(ProcessGroup((0, 1, 2)))
            order.append(("after", ctx.rank))

        run = run_protocol(3, program, deterministic=deterministic)
        assert [stage for stage, _rank in order] == ["before"] * 3 + ["after"] * 3
        assert run.traffic.bytes_sent() == 0
        assert run.traffic.rounds(0, "barrier") == 0

    def test_repeated_collectives_are_sequenced(self) -> None:
        group = ProcessGroup((0, 1))

        def program(ctx: WorkerContext) -> list[list[bytes]]:
            return [ctx.all_to_all(group, [bytes([i, ctx.rank])] * 2) for i in range(3)]

        run = run_protocol(2, program)
        assert run.results[0] == [[bytes([i, 0]), bytes([i, 1])] for i in range(3)]
        assert run.traffic.rounds(0, "all_to_all") == 3


class TestFailures:

    def test_deadlock_on_mutual_recv(self, deterministic: bool) -> None:
        def program(ctx: WorkerContext) -> bytes:
            return ctx.recv(1 - ctx.rank)

        with pytest.raises(DeadlockError) as exc_info:
            run_protocol(2, program, deterministic=deterministic)
        assert len(exc_info.value.stalled) == 2
        assert all("recv from" in s for s in exc_info.value.stalled)

    def test_deadlock_on_missing_member(self) -> None:
        def program(ctx: WorkerContext) -> None:
            if ctx.rank != 2:
                ctx.barrier(ProcessGroup((0, 1, 2)))

        with pytest.raises(DeadlockError) as exc_info:
            run_protocol(3, program)
        assert any("barrier" in s for s in exc_info.value.stalled)

    def test_collective_mismatch(self) -> None:
        group = ProcessGroup((0, 1))

        def program(ctx: WorkerContext) -> None:
            if ctx.rank == 0:
                ctx.barrier(group)
            else:
                ctx.all_to_all(group, [b"", b""])

        with pytest.raises(CollectiveMismatchError):
            run_protocol(2, program)

    def test_worker_exception(self, deterministic: bool) -> None:
        def program(ctx: WorkerContext) -> None:
            if ctx.rank == 1:
                raise KeyError("oops")
            ctx.recv(1)

        with pytest.raises(WorkerFailedError) as exc_info:
            run_protocol(2, program, deterministic=deterministic)
        assert exc_info.value.rank == 1
        assert isinstance(exc_info.value.__cause__, KeyError)

    def test_bad_rank(self) -> None:
        def program(ctx: WorkerContext) -> None:
            ctx.send(7, b"")

        with pytest.raises(WorkerFailedError) as exc_info:
            run_protocol(2, program)
        assert isinstance(exc_info.value.cause, ValueError)

    def test_step_budget(self) -> None:
        def program(ctx: WorkerContext) -> None:
            for _ in range(100):
                ctx.send(1 - ctx.rank, b"x")

        with pytest.raises(DeadlockError) as exc_info:
            run_protocol(2, program, step_budget=10)
        assert "budget" in str(exc_info.value)


def test_runs_are_reproducible() -> None:
    group = ProcessGroup((0, 1, 2))

    def program(ctx: WorkerContext) -> bytes:
        received = ctx.all_to_all(group, [bytes([ctx.rank]) * (j + 1) for j in range(3)])
        ctx.send(group.next(ctx.rank), b"".join(received))
        return ctx.recv(group.prev(ctx.rank))

    first = run_protocol(3, program)
    second = run_protocol(3, program)
    concurrent = run_protocol(3, program, deterministic=False)

    assert first.results == second.results == concurrent.results
    assert first.traffic == second.traffic == concurrent.traffic
    assert [t.to_json() for t in first.timelines] == [t.to_json() for t in concurrent.timelines]
    assert first.steps == second.steps


class TestTrafficLog:

    def test_accumulates(self) -> None:
        log = TrafficLog()
        log.add("send", (0, 1), 0, 0, sent=10, msgs=1)
        log.add("send", (0, 1), 0, 1, received=10)
        log.add("all_to_all", (0, 1), 0, 0, sent=4, msgs=1)
        log.add("all_to_all", (0, 1), 0, 0, received=4)
        log.add("all_to_all", (0, 1), 0, 1, sent=4, received=4, msgs=1)

        assert log.bytes_sent() == 18
        assert log.bytes_sent(0) == 14
        assert log.bytes_sent(op="send") == 10
        assert log.conserved()
        assert log.summary() == {
            "total_bytes": 18,
            "per_rank": {
                "0": {"all_to_all": {"bytes": 4, "rounds": 1}, "send": {"bytes": 10, "rounds": 1}},
                "1": {"all_to_all": {"bytes": 4, "rounds": 1}, "send": {"bytes": 0, "rounds": 0}},
            },
        }

    def test_not_conserved(self) -> None:
        log = TrafficLog()
        log.add("send", (0, 1), 0, 0, sent=10, msgs=1)
        assert not log.conserved()

    def test_json(self) -> None:
        log = TrafficLog()
        log.add("send", (2, 3), 1, 2, sent=8, msgs=1)
        assert log.to_json() == [
            {"op": "send", "group": [2, 3], "round": 1, "rank": 2, "bytes": 8, "received": 0, "msgs": 1}
        ]
