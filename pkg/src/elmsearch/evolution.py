"""Genetic algorithm over layer-mapping genes.

Population initialization samples every bit from Bernoulli(0.5) with
rejection of invalid genes; selection is fitness-proportionate on
V - min(V) (uniform when all fitness values are equal); crossover swaps
per-position bit groups; mutation flips individual bits.  Fitness values
are cached by gene bits and every generation is checkpointed atomically.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .mapping_space import Gene, SearchSpace, is_valid

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class SearchError(RuntimeError):
    pass


class SearchAborted(SearchError):
    """Evaluator failure; the latest checkpoint remains resumable."""

    def __init__(self, message: str, checkpoint_path: Optional[Path]) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class GAConfig:
    generations: int = 5  # T
    population_size: int = 12  # S
    mutation_prob: float = 0.8  # chance a sampled pair undergoes mutation
    crossover_prob: float = 0.2  # chance a sampled pair undergoes crossover
    bitflip_rate: float = 0.05  # per-bit flip probability inside mutation
    exchange_rate: float = 0.2  # per-position swap probability inside crossover
    seed: int = 0
    max_repair_attempts: int = 32

    def __post_init__(self) -> None:
        if self.generations < 1 or self.population_size < 2:
            raise ValueError("need generations >= 1 and population_size >= 2")
        for name in ("mutation_prob", "crossover_prob", "bitflip_rate", "exchange_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_repair_attempts < 1:
            raise ValueError("max_repair_attempts must be positive")


def default_population_size(student_layers: int) -> int:
    """12 genes per generation for 4-layer students, 20 for 6-layer."""
    return 12 if student_layers <= 4 else 20


@dataclass(frozen=True)
class EvalOutcome:
    fitness: float
    per_task: dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None


class FitnessEvaluator(Protocol):
    def evaluate(self, gene: Gene) -> EvalOutcome: ...


@dataclass(frozen=True)
class ScoredGene:
    gene: Gene
    fitness: float
    eval_metadata: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Generation:
    index: int
    members: tuple[ScoredGene, ...]
    stats: dict[str, float]
    best_gene: Gene

    @classmethod
    def from_members(cls, index: int, members: Sequence[ScoredGene]) -> "Generation":
        if not members:
            raise SearchError("generation must have at least one member")
        if any(m.fitness is None for m in members):
            raise SearchError("generation contains unevaluated members")
        fits = np.array([m.fitness for m in members], dtype=np.float64)
        best_fitness = fits.max()
        best_bits = min(m.gene.bits for m in members if m.fitness == best_fitness)
        stats = {
            "max": float(fits.max()),
            "min": float(fits.min()),
            "avg": float(fits.mean()),
            "std": float(fits.std()),
        }
        return cls(index=index, members=tuple(members), stats=stats,
                   best_gene=Gene(best_bits))


@dataclass(frozen=True)
class SearchResult:
    generations: tuple[Generation, ...]
    best: ScoredGene


# ----------------------------------------------------------------------
# operators

def init_population(
    space: SearchSpace,
    config: GAConfig,
    rng: Optional[np.random.Generator] = None,
    draw_log: Optional[list[str]] = None,
) -> list[Gene]:
    """Sample S valid genes, each bit Bernoulli(0.5), rejecting invalid draws."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    length = space.gene_length
    genes: list[Gene] = []
    consecutive_rejects = 0
    limit = config.max_repair_attempts * config.population_size
    while len(genes) < config.population_size:
        bits = "".join("1" if b else "0" for b in rng.random(length) < 0.5)
        if draw_log is not None:
            draw_log.append(bits)
        gene = Gene(bits)
        if is_valid(gene, space):
            genes.append(gene)
            consecutive_rejects = 0
        else:
            consecutive_rejects += 1
            if consecutive_rejects > limit:
                raise SearchError(
                    f"{consecutive_rejects} consecutive invalid samples; "
                    "the space admits too few valid genes"
                )
    return genes


def selection_probabilities(fitness: np.ndarray) -> np.ndarray:
    """Roulette weights proportional to V - min(V); uniform if all equal."""
    weights = fitness - fitness.min()
    total = weights.sum()
    if total == 0.0:
        return np.full(len(fitness), 1.0 / len(fitness))
    return weights / total


def select_pair(
    generation: Generation, rng: np.random.Generator
) -> tuple[Gene, Gene]:
    """Two independent fitness-proportionate draws (repeats allowed)."""
    for m in generation.members:
        if m.fitness is None:
            raise SearchError("cannot select from an unevaluated generation")
    fits = np.array([m.fitness for m in generation.members], dtype=np.float64)
    probs = selection_probabilities(fits)
    i = int(rng.choice(len(fits), p=probs))
    j = int(rng.choice(len(fits), p=probs))
    return generation.members[i].gene, generation.members[j].gene


def _swap_groups(g1: Gene, g2: Gene, k: int, mask: np.ndarray) -> tuple[Gene, Gene]:
    a = list(g1.bits)
    b = list(g2.bits)
    for pos, swap in enumerate(mask):
        if swap:
            lo, hi = pos * k, (pos + 1) * k
            a[lo:hi], b[lo:hi] = b[lo:hi], a[lo:hi]
    return Gene("".join(a)), Gene("".join(b))


def crossover_with_mask(
    g1: Gene, g2: Gene, space: SearchSpace, mask: np.ndarray
) -> tuple[Gene, Gene]:
    """Swap k-bit groups where mask is set; invalid children revert to their parent."""
    c1, c2 = _swap_groups(g1, g2, space.bits_per_position, mask)
    if not is_valid(c1, space):
        c1 = g1
    if not is_valid(c2, space):
        c2 = g2
    return c1, c2


def crossover(
    g1: Gene,
    g2: Gene,
    space: SearchSpace,
    rng: np.random.Generator,
    exchange_rate: float,
) -> tuple[Gene, Gene]:
    mask = rng.random(space.arch.student_layers) < exchange_rate
    return crossover_with_mask(g1, g2, space, mask)


def flip_bits(gene: Gene, mask: np.ndarray) -> Gene:
    bits = "".join(
        ("1" if c == "0" else "0") if flip else c
        for c, flip in zip(gene.bits, mask)
    )
    return Gene(bits)


def mutate(
    gene: Gene,
    space: SearchSpace,
    rng: np.random.Generator,
    bitflip_rate: float,
    max_repair_attempts: int = 32,
) -> Gene:
    """Flip each bit with probability q; redraw the whole mask while invalid."""
    length = len(gene.bits)
    for _ in range(max_repair_attempts):
        mask = rng.random(length) < bitflip_rate
        candidate = flip_bits(gene, mask)
        if is_valid(candidate, space):
            return candidate
    return gene


def next_generation(
    prev: Generation,
    space: SearchSpace,
    config: GAConfig,
    rng: np.random.Generator,
) -> list[Gene]:
    """Sample pairs, probabilistically apply crossover then mutation, collect S genes."""
    out: list[Gene] = []
    while len(out) < config.population_size:
        g1, g2 = select_pair(prev, rng)
        if rng.random() < config.crossover_prob:
            g1, g2 = crossover(g1, g2, space, rng, config.exchange_rate)
        if rng.random() < config.mutation_prob:
            g1 = mutate(g1, space, rng, config.bitflip_rate, config.max_repair_attempts)
            g2 = mutate(g2, space, rng, config.bitflip_rate, config.max_repair_attempts)
        out.append(g1)
        if len(out) < config.population_size:
            out.append(g2)
    return out


# ----------------------------------------------------------------------
# search loop with caching and checkpointing

FitnessCache = dict[str, EvalOutcome]


def _evaluate_population(
    population: Sequence[Gene],
    evaluator: FitnessEvaluator,
    cache: FitnessCache,
    jobs: int,
) -> list[ScoredGene]:
    pending: list[Gene] = []
    seen: set[str] = set()
    for gene in population:
        if gene.bits not in cache and gene.bits not in seen:
            pending.append(gene)
            seen.add(gene.bits)

    batch_eval = getattr(evaluator, "evaluate_batch", None)
    if pending:
        if batch_eval is not None:
            for gene, outcome in zip(pending, batch_eval(list(pending))):
                cache[gene.bits] = outcome
        elif jobs > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {g.bits: pool.submit(evaluator.evaluate, g) for g in pending}
                for bits, fut in futures.items():
                    cache[bits] = fut.result()
        else:
            for gene in pending:
                cache[gene.bits] = evaluator.evaluate(gene)

    members = []
    for gene in population:
        outcome = cache[gene.bits]
        members.append(ScoredGene(gene=gene, fitness=outcome.fitness,
                                  eval_metadata=dict(outcome.per_task)))
    return members


def best_of(generation: Generation) -> ScoredGene:
    """Highest fitness; ties break to the lexicographically smallest bits."""
    return min(generation.members, key=lambda m: (-m.fitness, m.gene.bits))


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _checkpoint_payload(
    space: SearchSpace,
    config: GAConfig,
    history: Sequence[Generation],
    cache: FitnessCache,
    rng_state: dict,
) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "arch": {
            "teacher_layers": space.arch.teacher_layers,
            "student_layers": space.arch.student_layers,
        },
        "config": {
            "generations": config.generations,
            "population_size": config.population_size,
            "mutation_prob": config.mutation_prob,
            "crossover_prob": config.crossover_prob,
            "bitflip_rate": config.bitflip_rate,
            "exchange_rate": config.exchange_rate,
            "seed": config.seed,
            "max_repair_attempts": config.max_repair_attempts,
        },
        "completed_generations": len(history),
        "history": [
            {
                "index": gen.index,
                "members": [
                    {
                        "bits": m.gene.bits,
                        "fitness": m.fitness,
                        "per_task": m.eval_metadata,
                    }
                    for m in gen.members
                ],
            }
            for gen in history
        ],
        "cache": {
            bits: {"fitness": o.fitness, "per_task": o.per_task, "error": o.error}
            for bits, o in cache.items()
        },
        "rng_state": rng_state,
    }


def write_checkpoint(path: Path, payload: dict) -> None:
    _atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_checkpoint(path: Path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SearchError(
            f"checkpoint version {payload.get('version')} does not match "
            f"supported version {CHECKPOINT_VERSION}"
        )
    return payload


def _restore_from_checkpoint(
    payload: dict, space: SearchSpace, config: GAConfig
) -> tuple[list[Generation], FitnessCache, np.random.Generator]:
    saved = payload["config"]
    for key, value in saved.items():
        if getattr(config, key) != value:
            raise SearchError(
                f"checkpoint config mismatch on {key!r}: saved {value}, got {getattr(config, key)}"
            )
    arch = payload["arch"]
    if (arch["teacher_layers"], arch["student_layers"]) != (
        space.arch.teacher_layers, space.arch.student_layers
    ):
        raise SearchError("checkpoint architecture does not match the search space")
    history = []
    for entry in payload["history"]:
        members = [
            ScoredGene(Gene(m["bits"]), m["fitness"], dict(m["per_task"]))
            for m in entry["members"]
        ]
        history.append(Generation.from_members(entry["index"], members))
    cache: FitnessCache = {
        bits: EvalOutcome(v["fitness"], dict(v["per_task"]), v.get("error"))
        for bits, v in payload["cache"].items()
    }
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = payload["rng_state"]
    return history, cache, rng


def run_search(
    space: SearchSpace,
    config: GAConfig,
    evaluator: FitnessEvaluator,
    checkpoint_path: Optional[str | Path] = None,
    resume: bool = False,
    jobs: int = 1,
    cache: Optional[FitnessCache] = None,
    on_generation: Optional[Callable[[Generation], None]] = None,
) -> SearchResult:
    """Run T generations and return the best gene of the final generation.

    A checkpoint is written after every generation; with resume=True the
    run continues from it and reproduces the uninterrupted trajectory
    exactly.  Fitness values are cached by gene bits, so a gene surviving
    into later generations is evaluated once.
    """
    ckpt = Path(checkpoint_path) if checkpoint_path is not None else None
    history: list[Generation]
    if resume:
        if ckpt is None or not ckpt.exists():
            raise SearchError("resume requested but no checkpoint found")
        payload = load_checkpoint(ckpt)
        history, restored_cache, rng = _restore_from_checkpoint(payload, space, config)
        if cache:
            restored_cache.update(cache)
        cache = restored_cache
    else:
        history = []
        cache = dict(cache) if cache else {}
        rng = np.random.default_rng(config.seed)

    for t in range(len(history) + 1, config.generations + 1):
        # State as of the last completed generation: a failure checkpoint
        # must let resume redraw this generation's population identically.
        state_before_draws = rng.bit_generator.state
        if t == 1:
            population = init_population(space, config, rng)
        else:
            population = next_generation(history[-1], space, config, rng)
        try:
            members = _evaluate_population(population, evaluator, cache, jobs)
        except Exception as exc:  # noqa: BLE001 - evaluator owns its failure modes
            if ckpt is not None:
                write_checkpoint(
                    ckpt,
                    _checkpoint_payload(space, config, history, cache, state_before_draws),
                )
            logger.error("evaluation failed in generation %d: %s", t, exc)
            raise SearchAborted(
                f"evaluator failed in generation {t}: {exc}", ckpt
            ) from exc
        generation = Generation.from_members(t, members)
        history.append(generation)
        if ckpt is not None:
            write_checkpoint(
                ckpt,
                _checkpoint_payload(space, config, history, cache, rng.bit_generator.state),
            )
        if on_generation is not None:
            on_generation(generation)

    final = history[-1]
    best_member = best_of(final)
    return SearchResult(generations=tuple(history), best=best_member)
