"""Layer-mapping search space, binary gene codec, and baseline heuristics.

A layer mapping assigns each student layer a teacher layer to imitate (or
None for no supervision).  Mappings are encoded as fixed-width binary genes,
k bits per student layer, where k is the smallest integer with 2^k > 2*N/M.
Non-None entries must be strictly increasing with student depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

__all__ = [
    "ArchPair",
    "SearchSpace",
    "LayerMapping",
    "Gene",
    "SpaceError",
    "InvalidMappingError",
    "EnumerationCapExceeded",
    "build_space",
    "decode",
    "encode",
    "is_valid",
    "enumerate_space",
    "enumerate_genes",
    "heuristic_mapping",
    "parse_mapping",
    "format_mapping",
    "parse_gene",
    "format_gene",
]

DEFAULT_ENUMERATION_CAP = 10**7

HEURISTICS = ("uniform", "last_layer", "contribution")


class SpaceError(ValueError):
    """Bad architecture pair or gene/space mismatch."""


class InvalidMappingError(ValueError):
    """Mapping violates the search-space constraints."""


class EnumerationCapExceeded(RuntimeError):
    """Space enumeration exceeded the configured cap."""


@dataclass(frozen=True, slots=True)
class ArchPair:
    """Teacher/student layer counts (N, M) with 1 <= M <= N."""

    teacher_layers: int
    student_layers: int

    def __post_init__(self) -> None:
        n, m = self.teacher_layers, self.student_layers
        if m < 1:
            raise SpaceError(f"student_layers must be >= 1, got {m}")
        if n < m:
            raise SpaceError(
                f"teacher_layers ({n}) must be >= student_layers ({m})"
            )


@dataclass(frozen=True, slots=True)
class LayerMapping:
    """Tuple (g(1)..g(M)); each entry a teacher layer index or None."""

    entries: tuple[Optional[int], ...]

    def __iter__(self) -> Iterator[Optional[int]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Optional[int]:
        return self.entries[i]

    @property
    def active_positions(self) -> tuple[int, ...]:
        """0-based student positions with a teacher layer assigned."""
        return tuple(i for i, e in enumerate(self.entries) if e is not None)

    def __str__(self) -> str:
        return format_mapping(self)


@dataclass(frozen=True, slots=True)
class Gene:
    """Fixed-width binary encoding of a layer mapping (M*k bits)."""

    bits: str

    def __post_init__(self) -> None:
        if not self.bits or any(c not in "01" for c in self.bits):
            raise SpaceError(f"gene bits must be a nonempty 0/1 string, got {self.bits!r}")

    def __len__(self) -> int:
        return len(self.bits)

    def grouped(self, k: int) -> str:
        """Human-readable form, k-bit groups joined by '-'."""
        return format_gene(self, k)


@dataclass(frozen=True, slots=True)
class SearchSpace:
    """Per-position admissible teacher-layer intervals plus the codec width k."""

    arch: ArchPair
    bits_per_position: int
    position_ranges: tuple[tuple[int, int], ...]
    none_allowed: tuple[bool, ...]

    @property
    def gene_length(self) -> int:
        return self.arch.student_layers * self.bits_per_position

    def code_offset(self, position: int) -> int:
        """Base value so that code c decodes to offset + c at `position` (0-based)."""
        n, m = self.arch.teacher_layers, self.arch.student_layers
        k = self.bits_per_position
        if position == m - 1:
            return n - 2**k + 1
        return (position * n) // (2 * m)  # Z for 1-based position+1

    def validate_mapping(self, mapping: LayerMapping) -> list[str]:
        """Position-precise list of constraint violations (empty if valid)."""
        m = self.arch.student_layers
        problems: list[str] = []
        if len(mapping) != m:
            return [f"expected {m} entries, got {len(mapping)}"]
        prev: Optional[int] = None
        for i, entry in enumerate(mapping):
            pos = i + 1
            if entry is None:
                if not self.none_allowed[i]:
                    problems.append(f"position {pos}: None not allowed at the last position")
                continue
            lo, hi = self.position_ranges[i]
            if not lo <= entry <= hi:
                problems.append(f"position {pos}: {entry} outside range [{lo},{hi}]")
            if prev is not None and entry <= prev:
                problems.append(f"position {pos}: {entry} < previous non-None {prev}"
                                if entry < prev
                                else f"position {pos}: {entry} repeats previous non-None {prev}")
            prev = entry
        return problems

    def is_valid_mapping(self, mapping: LayerMapping) -> bool:
        return not self.validate_mapping(mapping)


def build_space(arch: ArchPair) -> SearchSpace:
    """Derive the per-position search intervals and codec width for (M, N).

    k is the minimum integer with 2^k > 2*N/M.  Non-last positions span
    [Z+1, Z + 2^k - 1] with Z = floor((m-1)*N / (2*M)), clamped above at N,
    and admit None; the last position spans [N - 2^k + 1, N], clamped below
    at 1, and never admits None.
    """
    n, m = arch.teacher_layers, arch.student_layers
    if 2 * n / m >= 2**16:
        raise SpaceError(f"2*N/M = {2 * n / m} exceeds the sanity bound 2^16")
    k = 1
    while 2**k * m <= 2 * n:  # 2^k > 2N/M, in exact integer arithmetic
        k += 1
    ranges: list[tuple[int, int]] = []
    none_ok: list[bool] = []
    for pos in range(1, m + 1):
        if pos < m:
            z = ((pos - 1) * n) // (2 * m)
            ranges.append((z + 1, min(z + 2**k - 1, n)))
            none_ok.append(True)
        else:
            ranges.append((max(n - 2**k + 1, 1), n))
            none_ok.append(False)
    return SearchSpace(
        arch=arch,
        bits_per_position=k,
        position_ranges=tuple(ranges),
        none_allowed=tuple(none_ok),
    )


def _check_gene_length(gene: Gene, space: SearchSpace) -> None:
    if len(gene) != space.gene_length:
        raise SpaceError(
            f"gene length {len(gene)} does not match M*k = {space.gene_length}"
        )


def decode(gene: Gene, space: SearchSpace) -> LayerMapping:
    """Decode a gene to its mapping without enforcing validity.

    Per non-last position, code 0 means None and code c >= 1 means Z + c;
    the last position's code c means (N - 2^k + 1) + c.  Codes pointing
    outside the position's interval decode to that out-of-range integer,
    which is then rejected by `is_valid`.
    """
    _check_gene_length(gene, space)
    k = space.bits_per_position
    m = space.arch.student_layers
    entries: list[Optional[int]] = []
    for i in range(m):
        code = int(gene.bits[i * k : (i + 1) * k], 2)
        if i < m - 1 and code == 0:
            entries.append(None)
        else:
            entries.append(space.code_offset(i) + code)
    return LayerMapping(tuple(entries))


def encode(mapping: LayerMapping, space: SearchSpace) -> Gene:
    """Encode a valid mapping into its gene; exact inverse of `decode`."""
    problems = space.validate_mapping(mapping)
    if problems:
        raise InvalidMappingError("; ".join(problems))
    k = space.bits_per_position
    m = space.arch.student_layers
    parts: list[str] = []
    for i, entry in enumerate(mapping):
        if entry is None:
            code = 0
        else:
            code = entry - space.code_offset(i)
        parts.append(format(code, f"0{k}b"))
    return Gene("".join(parts))


def is_valid(gene: Gene, space: SearchSpace) -> bool:
    """True iff the decoded mapping satisfies every mapping invariant."""
    _check_gene_length(gene, space)
    return space.is_valid_mapping(decode(gene, space))


def enumerate_genes(
    space: SearchSpace, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[Gene]:
    """Yield every valid gene exactly once, in lexicographic bit order."""
    k = space.bits_per_position
    m = space.arch.student_layers
    lo_hi = space.position_ranges
    offsets = [space.code_offset(i) for i in range(m)]
    code_bits = [format(c, f"0{k}b") for c in range(2**k)]
    groups: list[str] = [code_bits[0]] * m
    yielded = 0

    def rec(i: int, prev: int) -> Iterator[Gene]:
        nonlocal yielded
        lo, hi = lo_hi[i]
        lo = max(lo, prev + 1)
        if i == m - 1:
            prefix = "".join(groups[: m - 1])
            for value in range(lo, hi + 1):
                yielded += 1
                if yielded > cap:
                    raise EnumerationCapExceeded(
                        f"space size exceeds the enumeration cap {cap}"
                    )
                yield Gene(prefix + code_bits[value - offsets[i]])
            return
        groups[i] = code_bits[0]  # None sorts first, keeping lexicographic order
        yield from rec(i + 1, prev)
        for value in range(lo, hi + 1):
            groups[i] = code_bits[value - offsets[i]]
            yield from rec(i + 1, value)

    yield from rec(0, 0)


def enumerate_space(
    space: SearchSpace, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[LayerMapping]:
    """Yield every valid mapping exactly once, in lexicographic gene order."""
    for gene in enumerate_genes(space, cap=cap):
        yield decode(gene, space)


def _round_half_up(numer: int, denom: int) -> int:
    return (2 * numer + denom) // (2 * denom)


def heuristic_mapping(
    strategy: str,
    arch: ArchPair,
    layer_scores: Optional[Sequence[float]] = None,
) -> LayerMapping:
    """Baseline mappings: uniform, last_layer, or contribution.

    uniform assigns g(m) = round(m*N/M) (ties round half-up); last_layer
    supervises only the final student layer from the final teacher layer;
    contribution picks the M teacher layers with the lowest input/output
    cosine scores (lower cosine = more important), sorted ascending.  The
    contribution result may fall outside the Eq.-8 style search intervals
    and is reported as-is.
    """
    n, m = arch.teacher_layers, arch.student_layers
    if strategy == "uniform":
        return LayerMapping(tuple(_round_half_up(pos * n, m) for pos in range(1, m + 1)))
    if strategy == "last_layer":
        return LayerMapping((None,) * (m - 1) + (n,))
    if strategy == "contribution":
        if layer_scores is None:
            raise ValueError("contribution heuristic requires per-layer scores")
        if len(layer_scores) != n:
            raise ValueError(
                f"expected {n} layer scores, got {len(layer_scores)}"
            )
        order = sorted(range(n), key=lambda i: (layer_scores[i], i))
        chosen = sorted(i + 1 for i in order[:m])
        return LayerMapping(tuple(chosen))
    raise ValueError(f"unknown heuristic {strategy!r}; expected one of {HEURISTICS}")


def format_mapping(mapping: LayerMapping) -> str:
    """Render as comma-separated integers with 0 standing for None."""
    return ",".join("0" if e is None else str(e) for e in mapping)


def parse_mapping(text: str) -> LayerMapping:
    """Parse the comma-separated form; 0 stands for None."""
    parts = [p.strip() for p in text.split(",")]
    entries: list[Optional[int]] = []
    for i, part in enumerate(parts):
        try:
            value = int(part)
        except ValueError:
            raise InvalidMappingError(
                f"position {i + 1}: {part!r} is not an integer"
            ) from None
        if value < 0:
            raise InvalidMappingError(f"position {i + 1}: negative entry {value}")
        entries.append(None if value == 0 else value)
    return LayerMapping(tuple(entries))


def format_gene(gene: Gene, k: int) -> str:
    """Render as k-bit groups joined by '-', e.g. '000-000-010-101'."""
    if len(gene.bits) % k:
        raise SpaceError(f"gene length {len(gene.bits)} is not a multiple of k={k}")
    return "-".join(gene.bits[i : i + k] for i in range(0, len(gene.bits), k))


def parse_gene(text: str) -> Gene:
    """Parse either the dashed group form or a raw bit string."""
    return Gene(text.replace("-", ""))
