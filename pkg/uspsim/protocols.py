"""
Distributed attention protocols, executed by each worker over the fabric.

* Ulysses: an all-to-all turns sequence-sharded Q/K/V into head-sharded,
  full-sequence tensors; attention runs locally; a second all-to-all
  restores sequence sharding.
* Ring: K/V chunks circulate around the ring for R-1 rounds while each
  worker folds the partial results for its queries together with
  :py:func:`~uspsim.tensor.merge_lse`. A serial schedule and a pipelined
  (double-buffered, prefetching) schedule are provided.
* USP: Ulysses within each Ulysses group around Ring within each ring group.

Every function here is called collectively: each member of the group(s)
involved must make the same call with the same local shapes.
"""

from typing import Union

import logging

from dataclasses import dataclass

import numpy as np

from uspsim.tensor import (
    HEAD,
    SEQUENCE,
    AttnResult,
    ShapeError,
    ShardSpec,
    Tensor4,
    attention_with_lse,
    check_tensor4,
    merge_lse,
)

from uspsim.fp8 import QuantizedTensor, dequantize, quantize

from uspsim.fabric import ProcessGroup, WorkerContext

from uspsim.mesh import Mesh2D, check_divisible, ring_group, ulysses_group


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CommOptions:
    fp8_kv: bool = False
    """Quantize K and V to FP8 E4M3 (with a per-tensor scale) on the wire."""

    pipelined_ring: bool = False
    """Use the double-buffered, prefetching ring schedule."""

    def to_json(self) -> dict:
        return {"fp8_kv": self.fp8_kv, "pipelined_ring": self.pipelined_ring}


def _check_local(q: Tensor4, k: Tensor4, v: Tensor4) -> None:
    check_tensor4(q, "Q")
    check_tensor4(k, "K")
    check_tensor4(v, "V")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError("S", f"local Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")


def _from_bytes(buf: Union[bytes, memoryview], shape: tuple[int, ...], dtype: np.dtype) -> Tensor4:
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(buf) != expected:
        raise ShapeError(
            "S",
            f"received {len(buf)} bytes where {expected} were expected for {shape}; "
            f"are all ranks using the same local shape?",
        )
    return np.frombuffer(buf, dtype=dtype).reshape(shape)


def _kv_segment_size(shape: tuple[int, ...], dtype: np.dtype, fp8_kv: bool) -> int:
    n = int(np.prod(shape))
    return QuantizedTensor.payload_size(n) if fp8_kv else n * dtype.itemsize


def _encode_kv_segment(x: Tensor4, fp8_kv: bool) -> bytes:
    if fp8_kv:
        return quantize(x).payload()
    else:
        return np.ascontiguousarray(x).tobytes()


def _decode_kv_segment(buf: memoryview, shape: tuple[int, ...], dtype: np.dtype, fp8_kv: bool) -> Tensor4:
    if fp8_kv:
        if len(buf) != _kv_segment_size(shape, dtype, fp8_kv):
            raise ShapeError("S", f"received a {len(buf)} byte FP8 segment for shape {shape}")
        return dequantize(QuantizedTensor.from_payload(shape, buf)).astype(dtype, copy=False)
    else:
        return _from_bytes(buf, shape, dtype)


def encode_kv(k: Tensor4, v: Tensor4, fp8_kv: bool) -> bytes:
    """Pack one K chunk and one V chunk into a single message."""
    return _encode_kv_segment(k, fp8_kv) + _encode_kv_segment(v, fp8_kv)


def decode_kv(buf: bytes, shape: tuple[int, ...], dtype: np.dtype, fp8_kv: bool) -> tuple[Tensor4, Tensor4]:
    size = _kv_segment_size(shape, dtype, fp8_kv)
    if len(buf) != 2 * size:
        raise ShapeError("S", f"received a {len(buf)} byte K/V message, expected {2 * size}")
    view = memoryview(buf)
    return (
        _decode_kv_segment(view[:size], shape, dtype, fp8_kv),
        _decode_kv_segment(view[size:], shape, dtype, fp8_kv),
    )


def _quantized_head_blocks(x: Tensor4, count: int) -> list[bytes]:
    """
    Quantize ``x`` once (one scale for the whole tensor) and split the codes
    into ``count`` head blocks, each carrying a copy of the scale.
    """
    quantized = quantize(x)
    codes = quantized.codes.reshape(x.shape)
    out = []
    for index in range(count):
        block = ShardSpec(HEAD, index, count).take(codes)
        out.append(QuantizedTensor(
            shape=block.shape,
            codes=np.ascontiguousarray(block).reshape(-1),
            scale=quantized.scale,
        ).payload())
    return out


def _compute(ctx: WorkerContext, q: Tensor4, k: Tensor4, v: Tensor4, label: str) -> AttnResult:
    issue = ctx.timeline.tick()
    result = attention_with_lse(q, k, v)
    ctx.timeline.record("compute", label, issue)
    return result


def _merge(ctx: WorkerContext, a: AttnResult, b: AttnResult, label: str) -> AttnResult:
    issue = ctx.timeline.tick()
    result = merge_lse(a, b)
    ctx.timeline.record("merge", label, issue)
    return result


def ulysses_scatter(
    ctx: WorkerContext,
    group: ProcessGroup,
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    opts: CommOptions,
) -> tuple[Tensor4, Tensor4, Tensor4]:
    """
    The input all-to-all: ``[B, H, S_loc, D]`` sequence shards in,
    ``[B, H/U, U*S_loc, D]`` head shards out. Q, K and V travel together in
    one collective.
    """
    _check_local(q, k, v)
    size = group.size
    if size == 1:
        return q, k, v

    b, h, s_loc, d = q.shape
    if h % size != 0:
        raise ShapeError("H", f"H={h} is not divisible by the Ulysses group size {size}")

    if opts.fp8_kv:
        k_blocks = _quantized_head_blocks(k, size)
        v_blocks = _quantized_head_blocks(v, size)
    else:
        k_blocks = [ShardSpec(HEAD, j, size).take(k).tobytes() for j in range(size)]
        v_blocks = [ShardSpec(HEAD, j, size).take(v).tobytes() for j in range(size)]

    payloads = [
        ShardSpec(HEAD, j, size).take(q).tobytes() + k_blocks[j] + v_blocks[j]
        for j in range(size)
    ]

    issue = ctx.timeline.tick()
    received = ctx.all_to_all(group, payloads)
    ctx.timeline.record("all_to_all", "ulysses input", issue)

    block_shape = (b, h // size, s_loc, d)
    q_size = int(np.prod(block_shape)) * q.dtype.itemsize
    kv_size = _kv_segment_size(block_shape, k.dtype, opts.fp8_kv)
    q_parts, k_parts, v_parts = [], [], []
    for buf in received:
        if len(buf) != q_size + 2 * kv_size:
            raise ShapeError("S", f"received a {len(buf)} byte Ulysses payload, expected {q_size + 2 * kv_size}")
        view = memoryview(buf)
        q_parts.append(_from_bytes(view[:q_size], block_shape, q.dtype))
        k_parts.append(_decode_kv_segment(view[q_size:q_size + kv_size], block_shape, k.dtype, opts.fp8_kv))
        v_parts.append(_decode_kv_segment(view[q_size + kv_size:], block_shape, v.dtype, opts.fp8_kv))

    # Senders are in sequence order so their parts concatenate directly
    return (
        np.concatenate(q_parts, axis=2),
        np.concatenate(k_parts, axis=2),
        np.concatenate(v_parts, axis=2),
    )


def ulysses_gather(ctx: WorkerContext, group: ProcessGroup, o: Tensor4) -> Tensor4:
    """
    The output all-to-all: ``[B, H/U, U*S_loc, D]`` in,
    ``[B, H, S_loc, D]`` out. Outputs always travel at full precision.
    """
    size = group.size
    if size == 1:
        return o

    b, h_loc, s, d = o.shape
    payloads = [ShardSpec(SEQUENCE, j, size).take(o).tobytes() for j in range(size)]

    issue = ctx.timeline.tick()
    received = ctx.all_to_all(group, payloads)
    ctx.timeline.record("all_to_all", "ulysses output", issue)

    block_shape = (b, h_loc, s // size, d)
    return np.concatenate(
        [_from_bytes(buf, block_shape, o.dtype) for buf in received],
        axis=1,
    )


def ulysses_attention(
    ctx: WorkerContext,
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    group: ProcessGroup,
    opts: CommOptions = CommOptions(),
) -> Tensor4:
    """
    Head-parallel attention for this rank's sequence shard, using exactly
    two all-to-all collectives.
    """
    q, k, v = ulysses_scatter(ctx, group, q, k, v, opts)
    result = _compute(ctx, q, k, v, "local")
    return ulysses_gather(ctx, group, result.o)


def ring_attention_serial(
    ctx: WorkerContext,
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    group: ProcessGroup,
    opts: CommOptions = CommOptions(),
) -> AttnResult:
    """
    Ring attention where every round's transfer completes before that
    round's compute starts.
    """
    _check_local(q, k, v)
    size = group.size
    following = group.next(ctx.rank)
    preceding = group.prev(ctx.rank)

    result = _compute(ctx, q, k, v, "local")
    for hop in range(1, size):
        label = f"hop {hop}"
        ctx.isend(following, encode_kv(k, v, opts.fp8_kv), label).wait()
        buf = ctx.irecv(preceding, label).wait()
        k, v = decode_kv(buf, q.shape, k.dtype, opts.fp8_kv)
        result = _merge(ctx, result, _compute(ctx, q, k, v, label), label)

    log.debug("Rank %d finished %d serial ring rounds", ctx.rank, size - 1)
    return result


def ring_attention_pipelined(
    ctx: WorkerContext,
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    group: ProcessGroup,
    opts: CommOptions = CommOptions(),
) -> AttnResult:
    """
    Ring attention with double buffering: the first remote chunk is
    prefetched before the local block is computed, and each round issues
    the next transfer before computing on the chunk that just arrived.

    Chunks arrive and are merged in the same order as in
    :py:func:`ring_attention_serial`, so results are bit-identical.
    """
    _check_local(q, k, v)
    size = group.size
    if size == 1:
        return _compute(ctx, q, k, v, "local")

    following = group.next(ctx.rank)
    preceding = group.prev(ctx.rank)

    # Prefetch
    buf_a = ctx.irecv(preceding, "hop 1")
    sends = [ctx.isend(following, encode_kv(k, v, opts.fp8_kv), "hop 1")]
    buf_b = None

    result = _compute(ctx, q, k, v, "local")
    for hop in range(1, size):
        k_hop, v_hop = decode_kv(buf_a.wait(), q.shape, k.dtype, opts.fp8_kv)
        if hop < size - 1:
            buf_b = ctx.irecv(preceding, f"hop {hop + 1}")
            sends.append(ctx.isend(following, encode_kv(k_hop, v_hop, opts.fp8_kv), f"hop {hop + 1}"))
        label = f"hop {hop}"
        result = _merge(ctx, result, _compute(ctx, q, k_hop, v_hop, label), label)
        buf_a, buf_b = buf_b, buf_a

    for transfer in sends:
        transfer.wait()

    log.debug("Rank %d finished %d pipelined ring rounds", ctx.rank, size - 1)
    return result


def usp_attention(
    ctx: WorkerContext,
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    mesh: Mesh2D,
    opts: CommOptions = CommOptions(),
) -> Tensor4:
    """
    Unified sequence parallel attention for this rank's ``[B, H, S/N, D]``
    sequence shard: Ulysses input all-to-all within the rank's Ulysses
    group, ring attention within its ring group, then the Ulysses output
    all-to-all.
    """
    _check_local(q, k, v)
    check_divisible(mesh, q.shape[2] * mesh.n_workers, q.shape[1])

    u_group = ulysses_group(mesh, ctx.rank)
    r_group = ring_group(mesh, ctx.rank)

    q, k, v = ulysses_scatter(ctx, u_group, q, k, v, opts)
    if opts.pipelined_ring:
        result = ring_attention_pipelined(ctx, q, k, v, r_group, opts)
    else:
        result = ring_attention_serial(ctx, q, k, v, r_group, opts)
    return ulysses_gather(ctx, u_group, result.o)
