"""Brute-force references used by tests and the `verify` command.

Everything here recomputes results from first principles: the direct
counter rebuilds the per-position intervals itself and never touches the
gene codec, so it can catch codec bugs instead of inheriting them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

from .evolution import EvalOutcome
from .mapping_space import (
    ArchPair,
    EnumerationCapExceeded,
    Gene,
    LayerMapping,
    SearchSpace,
    decode,
    encode,
    enumerate_space,
)

DEFAULT_CAP = 10**7


class MappingFunctionEvaluator:
    """Adapts a pure fitness function over mappings to the evaluator protocol."""

    def __init__(self, space: SearchSpace, fn: Callable[[LayerMapping], float]) -> None:
        self.space = space
        self.fn = fn
        self.evaluations = 0

    def evaluate(self, gene: Gene) -> EvalOutcome:
        self.evaluations += 1
        return EvalOutcome(fitness=float(self.fn(decode(gene, self.space))))


class PlantedHammingEvaluator(MappingFunctionEvaluator):
    """Fitness 1 - normalized Hamming distance to a planted target mapping.

    The target is the unique global maximum (fitness 1.0), which makes this
    the reference workload for certifying search correctness.
    """

    def __init__(self, space: SearchSpace, target: LayerMapping) -> None:
        positions = space.arch.student_layers

        def fitness(mapping: LayerMapping) -> float:
            differing = sum(
                1 for a, b in zip(mapping.entries, target.entries) if a != b
            )
            return 1.0 - differing / positions

        super().__init__(space, fitness)
        self.target = target


@dataclass(frozen=True)
class ExhaustiveResult:
    best_mapping: LayerMapping
    best_gene: Gene
    best_fitness: float
    evaluated_count: int


def count_space_direct(arch: ArchPair, cap: int = DEFAULT_CAP) -> int:
    """Count valid mappings by recursion over ranges, without the codec.

    Non-None entries must be strictly increasing; None is allowed at every
    position except the last.
    """
    n, m = arch.teacher_layers, arch.student_layers
    k = 1
    while 2**k * m <= 2 * n:
        k += 1
    intervals: list[tuple[int, int, bool]] = []
    for pos in range(1, m + 1):
        if pos < m:
            z = ((pos - 1) * n) // (2 * m)
            intervals.append((z + 1, min(z + 2**k - 1, n), True))
        else:
            intervals.append((max(n - 2**k + 1, 1), n, False))

    @lru_cache(maxsize=None)
    def count_from(i: int, prev: int) -> int:
        lo, hi, none_ok = intervals[i]
        lo = max(lo, prev + 1)
        if i == m - 1:
            return max(0, hi - lo + 1)
        total = count_from(i + 1, prev) if none_ok else 0
        for value in range(lo, hi + 1):
            total += count_from(i + 1, value)
        return total

    total = count_from(0, 0)
    if total > cap:
        raise EnumerationCapExceeded(f"space size {total} exceeds cap {cap}")
    return total


def exhaustive_search(
    space: SearchSpace, evaluator, cap: int = DEFAULT_CAP
) -> ExhaustiveResult:
    """Evaluate every valid mapping; ties break to the smallest gene bits."""
    best_fitness = float("-inf")
    best_gene: Gene | None = None
    best_mapping: LayerMapping | None = None
    count = 0
    for mapping in enumerate_space(space, cap=cap):
        gene = encode(mapping, space)
        outcome = evaluator.evaluate(gene)
        count += 1
        better = outcome.fitness > best_fitness or (
            outcome.fitness == best_fitness
            and best_gene is not None
            and gene.bits < best_gene.bits
        )
        if better:
            best_fitness = outcome.fitness
            best_gene = gene
            best_mapping = mapping
    if best_gene is None or best_mapping is None:
        raise ValueError("search space is empty")
    return ExhaustiveResult(
        best_mapping=best_mapping,
        best_gene=best_gene,
        best_fitness=best_fitness,
        evaluated_count=count,
    )
