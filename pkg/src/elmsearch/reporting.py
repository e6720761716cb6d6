"""CSV reporting helpers: generation stats, per-gene tables, rank tables.

All tables are plain CSV with a header row; floats carry 6 significant
digits so identical runs emit byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .evolution import Generation
from .mapping_space import Gene, SearchSpace, decode, format_gene, format_mapping


def format_float(x: float) -> str:
    return f"{x:.6g}"


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = [
            format_float(cell) if isinstance(cell, float) else str(cell)
            for cell in row
        ]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


STATS_HEADER = ("Gen", "Max", "Min", "Avg", "Std", "BestGene")


def generation_stats_rows(
    history: Sequence[Generation], space: SearchSpace
) -> list[tuple]:
    k = space.bits_per_position
    return [
        (
            gen.index,
            gen.stats["max"],
            gen.stats["min"],
            gen.stats["avg"],
            gen.stats["std"],
            format_gene(gen.best_gene, k),
        )
        for gen in history
    ]


def write_generation_stats(
    path: str | Path, history: Sequence[Generation], space: SearchSpace
) -> None:
    write_csv(path, STATS_HEADER, generation_stats_rows(history, space))


def write_per_gene_table(
    path: str | Path,
    cache: dict,
    space: SearchSpace,
    task_names: Sequence[str],
) -> None:
    """One row per unique evaluated gene, in first-evaluation order."""
    header = ["Gene", "Mapping", "Fitness"] + list(task_names)
    rows = []
    for bits, outcome in cache.items():
        gene = Gene(bits)
        fitness = outcome.fitness if hasattr(outcome, "fitness") else outcome["fitness"]
        per_task = outcome.per_task if hasattr(outcome, "per_task") else outcome["per_task"]
        row = [
            format_gene(gene, space.bits_per_position),
            format_mapping(decode(gene, space)),
            float(fitness),
        ]
        row += [float(per_task.get(name, float("nan"))) for name in task_names]
        rows.append(tuple(row))
    write_csv(path, header, rows)


def write_best_gene(
    path: str | Path, gene: Gene, fitness: float, space: SearchSpace
) -> None:
    mapping = decode(gene, space)
    text = (
        f"gene={format_gene(gene, space.bits_per_position)}\n"
        f"mapping={format_mapping(mapping)}\n"
        f"fitness={format_float(float(fitness))}\n"
    )
    Path(path).write_text(text)


def write_loss_curve(path: str | Path, losses: Sequence[float]) -> None:
    write_csv(path, ("Step", "Loss"), [(i + 1, float(x)) for i, x in enumerate(losses)])


# ----------------------------------------------------------------------
# rank preservation

def _ranks(values: Sequence[float]) -> np.ndarray:
    """Average ranks (1-based), ties sharing the mean rank."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation (Pearson correlation of average ranks)."""
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need two equal-length samples with at least 2 points")
    ra, rb = _ranks(a), _ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        raise ValueError("rank variance is zero; correlation undefined")
    return float((ra * rb).sum() / denom)


FITNESS_TABLE_HEADER = ("Mapping", "Fitness")


def write_fitness_table(path: str | Path, rows: Sequence[tuple[str, float]]) -> None:
    write_csv(path, FITNESS_TABLE_HEADER, [(m, float(f)) for m, f in rows])


def read_fitness_table(path: str | Path) -> list[tuple[str, float]]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        mapping, fitness = line.split(",", 1)
        out.append((mapping, float(fitness)))
    return out


def write_rank_table(
    path: str | Path,
    proxy_rows: Sequence[tuple[str, float]],
    full_rows: Sequence[tuple[str, float]],
) -> float:
    """Side-by-side fitness table plus a Spearman coefficient footer row."""
    full_by_mapping = dict(full_rows)
    mappings = [m for m, _ in proxy_rows if m in full_by_mapping]
    proxy_vals = [f for m, f in proxy_rows if m in full_by_mapping]
    full_vals = [full_by_mapping[m] for m in mappings]
    coeff = spearman(proxy_vals, full_vals)
    rows: list[tuple] = [
        (m, float(p), float(f)) for m, p, f in zip(mappings, proxy_vals, full_vals)
    ]
    rows.append(("spearman", float(coeff), float(coeff)))
    write_csv(path, ("Mapping", "ProxyFitness", "FullFitness"), rows)
    return coeff
