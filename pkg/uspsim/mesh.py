"""
The 2D (ring x ulysses) process mesh used by unified sequence parallelism.

Ranks are laid out ulysses-fastest: ``rank = ring_index * U + ulysses_index``.
So with N=4, R=2, U=2 the Ulysses groups are {0, 1} and {2, 3} and the
ring groups are {0, 2} and {1, 3}.
"""

from dataclasses import dataclass

from uspsim.fabric import ProcessGroup


class MeshInfeasibleError(ValueError):
    """
    Thrown when no (R, U) factorisation satisfies the mesh constraints, or
    when a workload's dimensions cannot be divided over a mesh. The
    :py:attr:`constraint` attribute states the violated constraint.
    """

    def __init__(self, constraint: str) -> None:
        super().__init__(f"Infeasible mesh: {constraint}")
        self.constraint = constraint


@dataclass(frozen=True)
class Mesh2D:
    n_workers: int
    ring_size: int
    """R: the number of ranks in each ring group."""
    ulysses_size: int
    """U: the number of ranks in each Ulysses group."""

    def __post_init__(self) -> None:
        if self.ring_size * self.ulysses_size != self.n_workers:
            raise ValueError(
                f"R={self.ring_size} x U={self.ulysses_size} != N={self.n_workers}"
            )

    @property
    def ring_groups(self) -> list[ProcessGroup]:
        """U groups of R ranks: ranks sharing an ulysses index."""
        return [
            ProcessGroup(tuple(r * self.ulysses_size + u for r in range(self.ring_size)))
            for u in range(self.ulysses_size)
        ]

    @property
    def ulysses_groups(self) -> list[ProcessGroup]:
        """R groups of U contiguous ranks: ranks sharing a ring index."""
        return [
            ProcessGroup(tuple(r * self.ulysses_size + u for u in range(self.ulysses_size)))
            for r in range(self.ring_size)
        ]

    def ring_index(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.ulysses_size

    def ulysses_index(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.ulysses_size

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.n_workers:
            raise ValueError(f"Rank {rank} out of range for a mesh of {self.n_workers} workers")

    def to_json(self) -> dict:
        return {
            "N": self.n_workers,
            "R": self.ring_size,
            "U": self.ulysses_size,
            "ring_groups": [list(g.members) for g in self.ring_groups],
            "ulysses_groups": [list(g.members) for g in self.ulysses_groups],
        }


def feasible_ring_sizes(n_workers: int, max_ring_dim_size: int, n_heads: int) -> list[int]:
    """
    Every ring size R (ascending) for which R divides N, R does not exceed
    the cap and the resulting Ulysses size divides the head count.
    """
    return [
        r
        for r in range(1, min(n_workers, max_ring_dim_size) + 1)
        if n_workers % r == 0 and n_heads % (n_workers // r) == 0
    ]


def build_mesh(n_workers: int, max_ring_dim_size: int, n_heads: int) -> Mesh2D:
    """
    Choose the mesh for ``n_workers`` ranks: the ring dimension is the
    largest feasible size not exceeding ``max_ring_dim_size``; the remaining
    factor becomes the Ulysses dimension, which must divide ``n_heads``.
    """
    for name, value in [
        ("N", n_workers),
        ("max_ring_dim_size", max_ring_dim_size),
        ("H", n_heads),
    ]:
        if value < 1:
            raise MeshInfeasibleError(f"{name} must be at least 1 (got {value})")

    candidates = feasible_ring_sizes(n_workers, max_ring_dim_size, n_heads)
    if not candidates:
        raise MeshInfeasibleError(
            f"no divisor R of N={n_workers} with R <= {max_ring_dim_size} "
            f"leaves a Ulysses size dividing H={n_heads} (H mod U == 0)"
        )
    ring_size = candidates[-1]
    return Mesh2D(n_workers, ring_size, n_workers // ring_size)


def ring_group(mesh: Mesh2D, rank: int) -> ProcessGroup:
    return mesh.ring_groups[mesh.ulysses_index(rank)]


def ulysses_group(mesh: Mesh2D, rank: int) -> ProcessGroup:
    return mesh.ulysses_groups[mesh.ring_index(rank)]


def check_divisible(mesh: Mesh2D, seq_len: int, n_heads: int) -> None:
    """
    Check a sequence length and head count can be sharded over ``mesh``
    (``S mod N == 0`` and ``H mod U == 0``).
    """
    if seq_len % mesh.n_workers != 0:
        raise MeshInfeasibleError(f"S={seq_len} is not divisible by N={mesh.n_workers}")
    if n_heads % mesh.ulysses_size != 0:
        raise MeshInfeasibleError(f"H={n_heads} is not divisible by U={mesh.ulysses_size}")
