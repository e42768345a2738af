"""
Dense rank-4 attention tensors and the numeric ground truth every
distributed protocol is checked against.

Tensors are plain :py:class:`numpy.ndarray` objects of shape ``[B, H, S, D]``
(batch, heads, sequence, head dimension). Worker computation uses 32-bit
floats; the 64-bit oracle mode is simply the same code fed 64-bit arrays.
"""

from typing import Sequence, Union

import math

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt


Tensor4 = npt.NDArray[np.floating]
"""A ``[B, H, S, D]`` array of activations."""

AXES = ("B", "H", "S", "D")

SEQUENCE = "sequence"
HEAD = "head"


class ShapeError(ValueError):
    """
    Thrown when tensors passed to an operation do not have compatible shapes.
    The :py:attr:`axis` attribute names the offending axis (one of ``B``,
    ``H``, ``S``, ``D`` or ``rank`` when the array isn't rank-4 at all).
    """

    def __init__(self, axis: str, message: str) -> None:
        super().__init__(f"axis {axis}: {message}")
        self.axis = axis


class CoverageError(ValueError):
    """
    Thrown when a set of sequence shards does not tile the sequence exactly
    (i.e. shards overlap or leave a gap).
    """


def check_tensor4(x: Tensor4, name: str = "tensor") -> Tensor4:
    """
    Check that ``x`` is a rank-4 floating point array, returning it
    unchanged.
    """
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError("rank", f"{name} must be a rank-4 array, got {np.shape(x)}")
    if not np.issubdtype(x.dtype, np.floating):
        raise ShapeError("rank", f"{name} must hold floating point values, got {x.dtype}")
    return x


def _check_qkv(q: Tensor4, k: Tensor4, v: Tensor4) -> None:
    check_tensor4(q, "Q")
    check_tensor4(k, "K")
    check_tensor4(v, "V")
    for axis, name in [(0, "B"), (1, "H"), (3, "D")]:
        if not (q.shape[axis] == k.shape[axis] == v.shape[axis]):
            raise ShapeError(
                name,
                f"Q, K and V disagree ({q.shape[axis]}, {k.shape[axis]}, {v.shape[axis]})",
            )
    if k.shape[2] != v.shape[2]:
        raise ShapeError("S", f"K and V sequence lengths differ ({k.shape[2]} vs {v.shape[2]})")


@dataclass(frozen=True)
class AttnResult:
    """
    An attention output together with the per-query log-sum-exp of the
    (scaled) logits it was computed from.

    ``lse = -inf`` means "no keys seen": the identity element for
    :py:func:`merge_lse`.
    """

    o: Tensor4
    """Attention output, ``[B, H, Sq, D]``."""

    lse: npt.NDArray[np.floating]
    """Natural-log softmax denominators of ``Q K^T / sqrt(D)``, ``[B, H, Sq]``."""

    def __post_init__(self) -> None:
        check_tensor4(self.o, "O")
        if self.lse.shape != self.o.shape[:3]:
            raise ShapeError(
                "S",
                f"lse shape {self.lse.shape} does not match output {self.o.shape[:3]}",
            )

    @classmethod
    def identity(cls, shape: Sequence[int], dtype: npt.DTypeLike = np.float32) -> "AttnResult":
        """The merge identity: zero output with ``lse = -inf``."""
        b, h, s, d = shape
        return cls(
            o=np.zeros((b, h, s, d), dtype=dtype),
            lse=np.full((b, h, s), -np.inf, dtype=dtype),
        )


def _scaled_logits(q: Tensor4, k: Tensor4) -> npt.NDArray[np.float64]:
    # Accumulate in 64-bit; results are rounded once to the input dtype
    q = q.astype(np.float64, copy=False)
    k = k.astype(np.float64, copy=False)
    return np.einsum("bhqd,bhkd->bhqk", q, k) * (1.0 / math.sqrt(q.shape[3]))


def attention_reference(q: Tensor4, k: Tensor4, v: Tensor4) -> Tensor4:
    """
    Full (non-causal) scaled dot-product attention, ``softmax(Q K^T / sqrt(D)) V``,
    with a row softmax stabilised by subtracting each row's maximum.
    """
    _check_qkv(q, k, v)
    if k.shape[2] == 0:
        raise ShapeError("S", "attention needs at least one key")

    logits = _scaled_logits(q, k)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    o = np.einsum("bhqk,bhkd->bhqd", weights, v.astype(np.float64, copy=False))
    return o.astype(q.dtype, copy=False)


def attention_with_lse(q: Tensor4, k: Tensor4, v: Tensor4) -> AttnResult:
    """
    Attention of ``q`` restricted to the keys/values given (which may be
    just one chunk of the full sequence), along with the log-sum-exp state
    needed to merge it with results for other chunks.

    An empty key set yields the merge identity.
    """
    _check_qkv(q, k, v)
    b, h, sq, d = q.shape
    if k.shape[2] == 0:
        return AttnResult.identity((b, h, sq, d), q.dtype)

    logits = _scaled_logits(q, k)
    row_max = logits.max(axis=-1)
    weights = np.exp(logits - row_max[..., None])
    denominator = weights.sum(axis=-1)
    o = np.einsum("bhqk,bhkd->bhqd", weights, v.astype(np.float64, copy=False)) / denominator[..., None]
    lse = row_max + np.log(denominator)
    return AttnResult(o=o.astype(q.dtype, copy=False), lse=lse.astype(q.dtype, copy=False))


def merge_lse(a: AttnResult, b: AttnResult) -> AttnResult:
    """
    Combine the attention results for two disjoint key sets into the result
    for their union.

    Uses the overflow-safe form::

        m       = max(lse_a, lse_b)
        lse_new = m + log(exp(lse_a - m) + exp(lse_b - m))
        o_new   = exp(lse_a - lse_new) o_a + exp(lse_b - lse_new) o_b

    with the exponentials normalised by their sum so that merging with the
    identity element reproduces the other operand exactly.
    """
    if a.o.shape != b.o.shape:
        for axis, (n_a, n_b) in zip(AXES, zip(a.o.shape, b.o.shape)):
            if n_a != n_b:
                raise ShapeError(axis, f"cannot merge results of shape {a.o.shape} and {b.o.shape}")

    with np.errstate(invalid="ignore", divide="ignore"):
        lse_a = a.lse.astype(np.float64, copy=False)
        lse_b = b.lse.astype(np.float64, copy=False)
        m = np.maximum(lse_a, lse_b)
        m = np.where(np.isfinite(m), m, 0)
        weight_a = np.exp(lse_a - m)
        weight_b = np.exp(lse_b - m)
        total = weight_a + weight_b
        lse = m + np.log(total)
        lse = np.where(total > 0, lse, -np.inf)

        # Both operands empty: keep the identity rather than 0/0
        safe_total = np.where(total > 0, total, 1)
        o = (
            (weight_a / safe_total)[..., None] * a.o.astype(np.float64, copy=False)
            + (weight_b / safe_total)[..., None] * b.o.astype(np.float64, copy=False)
        )

    dtype = a.o.dtype
    return AttnResult(o=o.astype(dtype, copy=False), lse=lse.astype(dtype, copy=False))


def seeded_generator(seed: int) -> np.random.Generator:
    """
    The portable generator used for all reproducible inputs: numpy's
    ``PCG64`` bit generator seeded directly with ``seed``.
    """
    return np.random.Generator(np.random.PCG64(seed))


def random_qkv(
    b: int,
    h: int,
    s: int,
    d: int,
    seed: int,
    low: float = -3.0,
    high: float = 3.0,
    dtype: npt.DTypeLike = np.float32,
) -> tuple[Tensor4, Tensor4, Tensor4]:
    """
    Draw Q, K and V (in that order, from one generator) uniformly from
    ``[low, high)``. Values are drawn in 64-bit then rounded to ``dtype``.
    """
    rng = seeded_generator(seed)
    shape = (b, h, s, d)
    return tuple(  # type: ignore[return-value]
        rng.uniform(low, high, size=shape).astype(dtype)
        for _ in range(3)
    )


@dataclass(frozen=True)
class ShardSpec:
    """
    Describes one of ``count`` equal slices of a tensor along either the
    sequence or the head axis.
    """

    axis: str
    index: int
    count: int

    def __post_init__(self) -> None:
        if self.axis not in (SEQUENCE, HEAD):
            raise ValueError(f"Unknown shard axis {self.axis!r}")
        if not (0 <= self.index < self.count):
            raise ValueError(f"Shard index {self.index} out of range for {self.count} shards")

    @property
    def dim(self) -> int:
        return 2 if self.axis == SEQUENCE else 1

    def bounds(self, length: int) -> tuple[int, int]:
        """The ``[start, end)`` slice of an axis of the given length."""
        if length % self.count != 0:
            raise ShapeError(
                "S" if self.axis == SEQUENCE else "H",
                f"length {length} is not divisible into {self.count} shards",
            )
        size = length // self.count
        return (self.index * size, (self.index + 1) * size)

    def take(self, x: Tensor4) -> Tensor4:
        start, end = self.bounds(x.shape[self.dim])
        if self.dim == 2:
            return x[:, :, start:end]
        else:
            return x[:, start:end]


def sequence_shards(x: Tensor4, count: int) -> list[tuple[int, Tensor4]]:
    """
    Split ``x`` into ``count`` equal sequence shards, returned as
    (start-offset, shard) pairs in sequence order.
    """
    check_tensor4(x)
    out = []
    for index in range(count):
        spec = ShardSpec(SEQUENCE, index, count)
        start, _end = spec.bounds(x.shape[2])
        out.append((start, np.ascontiguousarray(spec.take(x))))
    return out


def gather_output(shards: Sequence[Union[tuple[int, Tensor4], Tensor4]]) -> Tensor4:
    """
    Reassemble a tensor from sequence shards.

    Shards may be given as (start-offset, tensor) pairs, in any order, or as
    bare tensors which are taken to be contiguous and in sequence order. The
    shards must tile ``[0, S)`` exactly.
    """
    if not shards:
        raise CoverageError("No shards given")

    placed: list[tuple[int, Tensor4]] = []
    offset = 0
    for shard in shards:
        if isinstance(shard, tuple):
            placed.append(shard)
        else:
            placed.append((offset, shard))
            offset += shard.shape[2]
    placed.sort(key=lambda pair: pair[0])

    expected_start = 0
    for start, shard in placed:
        check_tensor4(shard, "shard")
        if start < expected_start:
            raise CoverageError(f"Shard at {start} overlaps the previous shard (ending at {expected_start})")
        if start > expected_start:
            raise CoverageError(f"Gap between {expected_start} and {start}")
        expected_start = start + shard.shape[2]

    return np.concatenate([shard for _start, shard in placed], axis=2)
