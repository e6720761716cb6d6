"""Synthetic corpus, proxy evaluation tasks, and the gene fitness pipeline.

The corpus is a seeded pattern grammar: Markov-chain background tokens
with short fixed motifs spliced in.  Three tasks are derived from it,
mirroring a single-sequence / sequence-pair / span-extraction triad:

  classification  does the sequence contain the designated motif (accuracy)
  pair            is the second sequence a lightly corrupted copy of the
                  first, as opposed to an unrelated sequence (accuracy)
  span            start/end of the designated motif occurrence (token F1)

Every label is recomputable from the inputs alone (motif scan, Hamming
distance threshold), which keeps relabeling oracles honest.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .distillation import DistillConfig, DivergenceError, TeacherActivations, distill
from .evolution import EvalOutcome
from .mapping_space import Gene, LayerMapping, SearchSpace, decode, format_mapping
from .optim import Adam, warmup_linear_decay
from .tinyformer import (
    TinyTransformer,
    TransformerConfig,
    softmax_cross_entropy,
    truncated_normal,
)

logger = logging.getLogger(__name__)

CLS_TOKEN = 0
SEP_TOKEN = 1
MASK_TOKEN = 2
NUM_SPECIAL_TOKENS = 3

COPY_CORRUPTION_FRAC = 0.1
COPY_THRESHOLD_FRAC = 0.3
MAX_REGEN_ATTEMPTS = 100


def derive_seed(*parts) -> int:
    """Stable 64-bit stream seed from arbitrary labelled parts."""
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


# ----------------------------------------------------------------------
# corpus

@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    seq_len: int = 16
    num_sequences: int = 2000
    motif_len: int = 4
    num_motifs: int = 4
    markov_prob: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")
        if self.seq_len < 8:
            raise ValueError("seq_len must be >= 8")
        if self.seq_len < 2 * self.motif_len + 2:
            raise ValueError("seq_len too short for two non-overlapping motifs")
        if self.vocab_size - NUM_SPECIAL_TOKENS < 2 * self.motif_len:
            raise ValueError("vocabulary too small for the motif alphabet")


@dataclass(frozen=True)
class SyntheticCorpus:
    sequences: np.ndarray  # (n, seq_len) int64 content tokens
    spec: CorpusSpec
    subset: Optional[tuple[float, int]] = None  # (rho, seed) when subsampled

    @property
    def mask_token_id(self) -> int:
        return MASK_TOKEN

    @property
    def motifs(self) -> list[np.ndarray]:
        return corpus_motifs(self.spec)

    @property
    def designated_motif(self) -> np.ndarray:
        return corpus_motifs(self.spec)[0]

    def __len__(self) -> int:
        return len(self.sequences)


def corpus_motifs(spec: CorpusSpec) -> list[np.ndarray]:
    """Deterministic motif set; motif 0 is the designated one, motif 1 a
    same-token-multiset decoy so bag-of-token features cannot separate them."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    content = np.arange(NUM_SPECIAL_TOKENS, spec.vocab_size)
    designated = rng.choice(content, size=spec.motif_len, replace=False)
    decoy = designated.copy()
    while np.array_equal(decoy, designated):
        rng.shuffle(decoy)
    motifs = [designated, decoy]
    while len(motifs) < spec.num_motifs:
        cand = rng.choice(content, size=spec.motif_len, replace=False)
        if not any(np.array_equal(cand, m) for m in motifs):
            motifs.append(cand)
    return motifs


def contains_motif(seq: np.ndarray, motif: np.ndarray) -> bool:
    return first_occurrence(seq, motif) is not None


def first_occurrence(seq: np.ndarray, motif: np.ndarray) -> Optional[tuple[int, int]]:
    """Inclusive (start, end) of the first occurrence, or None."""
    m = len(motif)
    for start in range(len(seq) - m + 1):
        if np.array_equal(seq[start : start + m], motif):
            return start, start + m - 1
    return None


def _background(
    rng: np.random.Generator, spec: CorpusSpec, successor: np.ndarray
) -> np.ndarray:
    content_lo = NUM_SPECIAL_TOKENS
    n_content = spec.vocab_size - content_lo
    seq = np.empty(spec.seq_len, dtype=np.int64)
    seq[0] = content_lo + rng.integers(n_content)
    for j in range(1, spec.seq_len):
        if rng.random() < spec.markov_prob:
            seq[j] = successor[seq[j - 1] - content_lo]
        else:
            seq[j] = content_lo + rng.integers(n_content)
    return seq


def _insert_motifs(
    seq: np.ndarray, motifs: list[np.ndarray], rng: np.random.Generator
) -> None:
    length = len(seq)
    used: list[tuple[int, int]] = []
    for motif in motifs:
        m = len(motif)
        for _ in range(50):
            start = int(rng.integers(0, length - m + 1))
            if all(start + m <= lo or start >= hi for lo, hi in used):
                seq[start : start + m] = motif
                used.append((start, start + m))
                break


def generate_corpus(spec: CorpusSpec) -> SyntheticCorpus:
    """Seeded Markov background with spliced motifs; exactly half of the
    sequences contain the designated motif."""
    motifs = corpus_motifs(spec)
    designated, decoys = motifs[0], motifs[1:]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    content_lo = NUM_SPECIAL_TOKENS
    n_content = spec.vocab_size - content_lo
    successor = rng.permutation(np.arange(content_lo, spec.vocab_size))

    n = spec.num_sequences
    intended = np.zeros(n, dtype=bool)
    intended[: (n + 1) // 2] = True
    label_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
    label_rng.shuffle(intended)

    sequences = np.empty((n, spec.seq_len), dtype=np.int64)
    for i in range(n):
        for attempt in range(MAX_REGEN_ATTEMPTS):
            seq = _background(rng, spec, successor)
            if intended[i]:
                chosen = [designated]
                if decoys and rng.random() < 0.5:
                    chosen.append(decoys[rng.integers(len(decoys))])
            else:
                chosen = [decoys[rng.integers(len(decoys))]]
                if len(decoys) > 1 and rng.random() < 0.5:
                    chosen.append(decoys[rng.integers(len(decoys))])
            _insert_motifs(seq, chosen, rng)
            if contains_motif(seq, designated) == intended[i]:
                sequences[i] = seq
                break
        else:
            raise RuntimeError(f"could not realise intended label for sequence {i}")
    return SyntheticCorpus(sequences=sequences, spec=spec)


def subsample(corpus: SyntheticCorpus, rho: float, seed: int) -> SyntheticCorpus:
    """Deterministic rho-fraction subset; depends only on (corpus seed, rho, seed)."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    if rho == 1.0:
        return corpus
    n = len(corpus.sequences)
    count = max(1, int(round(rho * n)))
    rng = np.random.default_rng(
        np.random.SeedSequence([corpus.spec.seed, seed, int(round(rho * 10**9))])
    )
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return SyntheticCorpus(
        sequences=corpus.sequences[idx], spec=corpus.spec, subset=(rho, seed)
    )


# ----------------------------------------------------------------------
# proxy tasks

@dataclass(frozen=True)
class TaskData:
    inputs: np.ndarray  # (n, L') int64, CLS-prefixed model inputs
    labels: np.ndarray  # (n,) class ids, or (n, 2) inclusive span bounds


@dataclass(frozen=True)
class ProxyTask:
    name: str
    metric: str  # "accuracy" | "f1"
    head: str  # "cls" | "span"
    train: TaskData
    dev: TaskData


@dataclass(frozen=True)
class ProxyTaskSuite:
    classification: ProxyTask
    pair: ProxyTask
    span: ProxyTask
    motif: np.ndarray
    copy_threshold: int  # Hamming distance below which a pair counts as a copy

    @property
    def tasks(self) -> tuple[ProxyTask, ProxyTask, ProxyTask]:
        return (self.classification, self.pair, self.span)


def _cls_inputs(sequences: np.ndarray) -> np.ndarray:
    n = len(sequences)
    return np.hstack([np.full((n, 1), CLS_TOKEN, dtype=np.int64), sequences])


def _pair_inputs(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    n = len(first)
    return np.hstack([
        np.full((n, 1), CLS_TOKEN, dtype=np.int64),
        first,
        np.full((n, 1), SEP_TOKEN, dtype=np.int64),
        second,
    ])


def _corrupt(
    seq: np.ndarray, rng: np.random.Generator, vocab_size: int
) -> np.ndarray:
    """Replace ceil(10%) of positions with different content tokens."""
    length = len(seq)
    n_corrupt = int(np.ceil(COPY_CORRUPTION_FRAC * length))
    out = seq.copy()
    positions = rng.choice(length, size=n_corrupt, replace=False)
    for pos in positions:
        new = out[pos]
        while new == seq[pos]:
            new = NUM_SPECIAL_TOKENS + rng.integers(vocab_size - NUM_SPECIAL_TOKENS)
        out[pos] = new
    return out


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int((np.asarray(a) != np.asarray(b)).sum())


def build_tasks(
    corpus: SyntheticCorpus,
    train_size: int = 240,
    dev_size: int = 120,
    seed: int = 0,
) -> ProxyTaskSuite:
    """Derive the three labelled proxy tasks with disjoint train/dev splits."""
    spec = corpus.spec
    motif = corpus.designated_motif
    sequences = corpus.sequences
    n = len(sequences)
    if train_size + dev_size > n:
        raise ValueError("corpus too small for the requested task sizes")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, 4]))
    threshold = int(np.floor(COPY_THRESHOLD_FRAC * spec.seq_len))

    has_motif = np.array([contains_motif(s, motif) for s in sequences])
    pos_idx = np.flatnonzero(has_motif)
    neg_idx = np.flatnonzero(~has_motif)

    def balanced_split(size_train: int, size_dev: int) -> tuple[np.ndarray, np.ndarray]:
        half_train, half_dev = size_train // 2, size_dev // 2
        pos = rng.choice(pos_idx, size=half_train + half_dev, replace=False)
        neg = rng.choice(neg_idx, size=half_train + half_dev, replace=False)
        train = np.concatenate([pos[:half_train], neg[:half_train]])
        dev = np.concatenate([pos[half_train:], neg[half_train:]])
        rng.shuffle(train)
        rng.shuffle(dev)
        return train, dev

    # classification: designated-motif presence
    train_idx, dev_idx = balanced_split(train_size, dev_size)
    cls_task = ProxyTask(
        name="classification", metric="accuracy", head="cls",
        train=TaskData(_cls_inputs(sequences[train_idx]), has_motif[train_idx].astype(np.int64)),
        dev=TaskData(_cls_inputs(sequences[dev_idx]), has_motif[dev_idx].astype(np.int64)),
    )

    # pair: corrupted copy vs unrelated sequence
    def make_pairs(count: int, base: np.ndarray) -> TaskData:
        half = count // 2
        firsts, seconds, labels = [], [], []
        for j, idx in enumerate(base[: 2 * half]):
            s1 = sequences[idx]
            if j < half:
                s2 = _corrupt(s1, rng, spec.vocab_size)
                label = 1
            else:
                while True:
                    other = int(rng.integers(n))
                    if other != idx and hamming(s1, sequences[other]) > threshold:
                        s2 = sequences[other]
                        break
                label = 0
            firsts.append(s1)
            seconds.append(s2)
            labels.append(label)
        order = rng.permutation(len(labels))
        inputs = _pair_inputs(np.array(firsts), np.array(seconds))[order]
        return TaskData(inputs, np.array(labels, dtype=np.int64)[order])

    pair_base = rng.choice(n, size=train_size + dev_size, replace=False)
    pair_task = ProxyTask(
        name="pair", metric="accuracy", head="cls",
        train=make_pairs(train_size, pair_base[:train_size]),
        dev=make_pairs(dev_size, pair_base[train_size:]),
    )

    # span: locate the designated motif (CLS shifts positions by one)
    span_pool = rng.choice(pos_idx, size=min(train_size + dev_size, len(pos_idx)), replace=False)
    span_train_n = min(train_size, len(span_pool) - dev_size)

    def make_spans(idx: np.ndarray) -> TaskData:
        spans = []
        for i in idx:
            start, end = first_occurrence(sequences[i], motif)
            spans.append((start + 1, end + 1))
        return TaskData(_cls_inputs(sequences[idx]), np.array(spans, dtype=np.int64))

    span_task = ProxyTask(
        name="span", metric="f1", head="span",
        train=make_spans(span_pool[:span_train_n]),
        dev=make_spans(span_pool[span_train_n : span_train_n + dev_size]),
    )

    return ProxyTaskSuite(
        classification=cls_task, pair=pair_task, span=span_task,
        motif=motif, copy_threshold=threshold,
    )


# ----------------------------------------------------------------------
# fine-tuning and scoring

@dataclass(frozen=True)
class ScoreResult:
    per_task: dict[str, float]
    fitness: float


def span_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    """Token-overlap F1 between inclusive position spans."""
    pred_set = set(range(pred[0], pred[1] + 1))
    gold_set = set(range(gold[0], gold[1] + 1))
    overlap = len(pred_set & gold_set)
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_set)
    recall = overlap / len(gold_set)
    return 2 * precision * recall / (precision + recall)


def _finetune_one(
    student: TinyTransformer,
    task: ProxyTask,
    seed: int,
    steps: int,
    batch_size: int,
    learning_rate: float,
    max_span: int,
) -> float:
    rng = np.random.default_rng(seed)
    model = student.copy()
    d = model.config.hidden_size
    head_w = truncated_normal(rng, (d, 2))
    head_b = np.zeros(2)
    trainable = dict(model.params)
    trainable["head_w"] = head_w
    trainable["head_b"] = head_b
    opt = Adam(trainable, learning_rate)

    train, dev = task.train, task.dev
    n_train = len(train.inputs)
    for step in range(1, steps + 1):
        idx = rng.integers(0, n_train, size=batch_size)
        inputs = train.inputs[idx]
        cache = model.forward(inputs)
        final = cache.final
        if task.head == "cls":
            h0 = final[:, 0, :]
            logits = h0 @ head_w + head_b
            loss, dlogits = softmax_cross_entropy(logits, train.labels[idx])
            d_w = h0.T @ dlogits
            d_b = dlogits.sum(axis=0)
            d_final = np.zeros_like(final)
            d_final[:, 0, :] = dlogits @ head_w.T
        else:
            logits = final @ head_w + head_b  # (B, L, 2)
            starts = train.labels[idx][:, 0]
            ends = train.labels[idx][:, 1]
            loss_s, dls = softmax_cross_entropy(logits[:, :, 0], starts)
            loss_e, dle = softmax_cross_entropy(logits[:, :, 1], ends)
            loss = loss_s + loss_e
            dlogits = np.stack([dls, dle], axis=2)
            d_w = np.einsum("bld,blc->dc", final, dlogits)
            d_b = dlogits.sum(axis=(0, 1))
            d_final = dlogits @ head_w.T
        if not np.isfinite(loss):
            raise DivergenceError(f"fine-tuning diverged on task {task.name} at step {step}")
        grads = model.backward(cache, d_final=d_final)
        grads["head_w"] = d_w
        grads["head_b"] = d_b
        opt.step(grads, warmup_linear_decay(step, steps, 0.1))

    # dev evaluation
    cache = model.forward(dev.inputs)
    final = cache.final
    if task.head == "cls":
        logits = final[:, 0, :] @ head_w + head_b
        return float((logits.argmax(axis=1) == dev.labels).mean())
    logits = final @ head_w + head_b
    scores = []
    length = final.shape[1]
    for i in range(len(dev.inputs)):
        s = int(logits[i, :, 0].argmax())
        window = logits[i, s : min(s + max_span, length), 1]
        e = s + int(window.argmax())
        scores.append(span_f1((s, e), tuple(dev.labels[i])))
    return float(np.mean(scores))


def finetune_and_score(
    student: TinyTransformer,
    suite: ProxyTaskSuite,
    seed: int,
    steps: int = 300,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
) -> ScoreResult:
    """Fine-tune one fresh copy of the student per task; fitness is the
    unweighted mean of the three dev metrics."""
    max_span = 2 * len(suite.motif)
    per_task: dict[str, float] = {}
    for i, task in enumerate(suite.tasks):
        per_task[task.name] = _finetune_one(
            student, task, derive_seed(seed, "finetune", i),
            steps, batch_size, learning_rate, max_span,
        )
    fitness = float(np.mean(list(per_task.values())))
    return ScoreResult(per_task=per_task, fitness=fitness)


# ----------------------------------------------------------------------
# gene-level evaluation

class ProxyFitnessEvaluator:
    """decode -> distill on the rho-subsampled corpus -> fine-tune -> fitness."""

    def __init__(
        self,
        teacher: TinyTransformer,
        student_template: TransformerConfig,
        space: SearchSpace,
        corpus: SyntheticCorpus,
        suite: ProxyTaskSuite,
        distill_config: DistillConfig,
        rho: float = 0.1,
        seed: int = 0,
        finetune_steps: int = 300,
        finetune_batch_size: int = 32,
        finetune_learning_rate: float = 1e-3,
    ) -> None:
        self.teacher = teacher
        self.student_template = student_template
        self.space = space
        self.suite = suite
        self.distill_config = distill_config
        self.rho = rho
        self.seed = seed
        self.finetune_steps = finetune_steps
        self.finetune_batch_size = finetune_batch_size
        self.finetune_learning_rate = finetune_learning_rate
        self.proxy_corpus = subsample(corpus, rho, seed)
        self.evaluations = 0
        self.failures: list[tuple[str, str]] = []
        self.losses_dir: Optional[Path] = None  # set to persist per-gene loss curves
        self._teacher_acts: Optional[TeacherActivations] = None
        self._teacher_acts_lock = threading.Lock()

    def evaluate(self, gene: Gene) -> EvalOutcome:
        mapping = decode(gene, self.space)
        problems = self.space.validate_mapping(mapping)
        if problems:
            raise ValueError(f"invalid gene {gene.bits}: " + "; ".join(problems))
        self.evaluations += 1
        gene_seed = derive_seed(self.seed, gene.bits)
        student_config = replace(
            self.student_template, seed=derive_seed(gene_seed, "student-init")
        )
        distill_config = replace(
            self.distill_config, seed=derive_seed(gene_seed, "distill")
        )
        try:
            result = distill(
                self.teacher, student_config, mapping, self.proxy_corpus,
                distill_config, teacher_acts=self._teacher_activations(),
            )
            self._record_losses(gene.bits, result.losses)
            score = finetune_and_score(
                result.student, self.suite,
                seed=derive_seed(gene_seed, "score"),
                steps=self.finetune_steps,
                batch_size=self.finetune_batch_size,
                learning_rate=self.finetune_learning_rate,
            )
        except DivergenceError as exc:
            logger.warning("gene %s failed evaluation: %s", gene.bits, exc)
            self.failures.append((gene.bits, str(exc)))
            return EvalOutcome(fitness=0.0, per_task={}, error=str(exc))
        return EvalOutcome(fitness=score.fitness, per_task=score.per_task)

    def _teacher_activations(self) -> TeacherActivations:
        with self._teacher_acts_lock:
            if self._teacher_acts is None:
                self._teacher_acts = TeacherActivations(
                    self.teacher, self.proxy_corpus.sequences
                )
            return self._teacher_acts

    def _record_losses(self, bits: str, losses: Sequence[float]) -> None:
        if self.losses_dir is None:
            return
        from .reporting import write_loss_curve

        self.losses_dir.mkdir(parents=True, exist_ok=True)
        write_loss_curve(self.losses_dir / f"{bits}.csv", losses)


def evaluate_gene(gene: Gene, evaluator) -> float:
    """Full pipeline fitness for one gene."""
    return evaluator.evaluate(gene).fitness


# ----------------------------------------------------------------------
# external evaluator protocol (pending.tsv / fitness.tsv)

class ProtocolTimeout(RuntimeError):
    pass


def write_pending_file(path: Path, rows: Sequence[tuple[str, str, int]]) -> None:
    """Rows of (gene bits, mapping text, seed), tab-separated."""
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        for bits, mapping_text, seed in rows:
            f.write(f"{bits}\t{mapping_text}\t{seed}\n")
    os.replace(tmp, path)


def read_pending_file(path: Path) -> list[tuple[str, str, int]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        bits, mapping_text, seed = line.split("\t")
        rows.append((bits, mapping_text, int(seed)))
    return rows


def write_fitness_file(
    path: Path, rows: Sequence[tuple[str, float, dict[str, float]]]
) -> None:
    """Rows of (gene bits, fitness, per-task scores); fitness with 6+ digits."""
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        for bits, fitness, per_task in rows:
            scores = "\t".join(f"{k}={v:.6f}" for k, v in sorted(per_task.items()))
            line = f"{bits}\t{fitness:.6f}"
            if scores:
                line += "\t" + scores
            f.write(line + "\n")
    os.replace(tmp, path)


def read_fitness_file(path: Path) -> dict[str, EvalOutcome]:
    outcomes: dict[str, EvalOutcome] = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        bits, fitness = parts[0], float(parts[1])
        per_task = {}
        for chunk in parts[2:]:
            key, value = chunk.split("=")
            per_task[key] = float(value)
        outcomes[bits] = EvalOutcome(fitness=fitness, per_task=per_task)
    return outcomes


class FileProtocolEvaluator:
    """Delegates fitness evaluation to an external worker via TSV files.

    The engine writes `pending.tsv` (gene bits, decoded mapping, per-gene
    seed) into the exchange directory and polls for `fitness.tsv` until
    every pending gene has a line.  Both files are consumed afterwards so
    a run can issue several rounds.
    """

    def __init__(
        self,
        space: SearchSpace,
        exchange_dir: str | Path,
        seed: int = 0,
        poll_interval: float = 0.05,
        timeout: float = 120.0,
    ) -> None:
        self.space = space
        self.exchange_dir = Path(exchange_dir)
        self.exchange_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.poll_interval = poll_interval
        self.timeout = timeout

    @property
    def pending_path(self) -> Path:
        return self.exchange_dir / "pending.tsv"

    @property
    def fitness_path(self) -> Path:
        return self.exchange_dir / "fitness.tsv"

    def evaluate(self, gene: Gene) -> EvalOutcome:
        return self.evaluate_batch([gene])[0]

    def evaluate_batch(self, genes: Sequence[Gene]) -> list[EvalOutcome]:
        rows = []
        for gene in genes:
            mapping = decode(gene, self.space)
            rows.append((
                gene.bits,
                format_mapping(mapping),
                derive_seed(self.seed, gene.bits),
            ))
        write_pending_file(self.pending_path, rows)
        deadline = time.monotonic() + self.timeout
        wanted = [gene.bits for gene in genes]
        while True:
            if self.fitness_path.exists():
                outcomes = read_fitness_file(self.fitness_path)
                if all(bits in outcomes for bits in wanted):
                    self.pending_path.unlink(missing_ok=True)
                    self.fitness_path.unlink(missing_ok=True)
                    return [outcomes[bits] for bits in wanted]
            if time.monotonic() > deadline:
                raise ProtocolTimeout(
                    f"no complete fitness.tsv within {self.timeout}s in {self.exchange_dir}"
                )
            time.sleep(self.poll_interval)
