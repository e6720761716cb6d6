"""Teacher pretraining and layer-wise task-agnostic distillation.

The distillation objective sums, over student layers with a teacher
assignment, a per-layer loss of two Frobenius terms: mean over heads of
the squared distance between pre-softmax attention score matrices, plus
the squared distance between projected student hidden states and teacher
hidden states.  Layers mapped to None contribute nothing.  Norms are
mean-reduced over the batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mapping_space import LayerMapping, format_mapping
from .optim import Adam, warmup_linear_decay
from .tinyformer import (
    LayerActivations,
    TinyTransformer,
    TransformerConfig,
    truncated_normal,
)

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_frac: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class PretrainResult:
    model: TinyTransformer
    losses: list[float]
    masked_accuracy: float


@dataclass
class DistillResult:
    student: TinyTransformer
    projections: dict[int, np.ndarray]  # 0-based student layer -> W_h
    losses: list[float]


# ----------------------------------------------------------------------
# layer-wise loss

def _check_compatible(student_acts: LayerActivations, teacher_acts: LayerActivations) -> None:
    hs, ls = student_acts.attention_scores.shape[1:3]
    ht, lt = teacher_acts.attention_scores.shape[1:3]
    if hs != ht:
        raise ValueError(f"head count mismatch: student {hs} vs teacher {ht}")
    if ls != lt:
        raise ValueError(f"sequence length mismatch: student {ls} vs teacher {lt}")


def layer_loss(
    student_acts: LayerActivations,
    teacher_acts: LayerActivations,
    w_h: np.ndarray,
) -> float:
    """Attention-score and projected-hidden-state distance for one layer pair."""
    loss, _, _, _ = layer_loss_with_grads(student_acts, teacher_acts, w_h)
    return loss


def layer_loss_with_grads(
    student_acts: LayerActivations,
    teacher_acts: LayerActivations,
    w_h: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (loss, d_scores, d_hidden, d_w_h) for the student side."""
    _check_compatible(student_acts, teacher_acts)
    a_s = student_acts.attention_scores
    a_t = teacher_acts.attention_scores
    h_s = student_acts.hidden_states
    h_t = teacher_acts.hidden_states
    batch, heads = a_s.shape[0], a_s.shape[1]

    da = a_s - a_t
    attn_term = float((da * da).sum() / (heads * batch))
    d_scores = (2.0 / (heads * batch)) * da

    diff = h_s @ w_h - h_t
    hidden_term = float((diff * diff).sum() / batch)
    d_hidden = (2.0 / batch) * (diff @ w_h.T)
    d_w_h = (2.0 / batch) * np.einsum("blc,bld->cd", h_s, diff)

    return attn_term + hidden_term, d_scores, d_hidden, d_w_h


def mapping_loss(
    student_cache,
    teacher_layers: dict[int, LayerActivations],
    mapping: LayerMapping,
    projections: dict[int, np.ndarray],
) -> tuple[float, list[Optional[np.ndarray]], list[Optional[np.ndarray]], dict[int, np.ndarray]]:
    """Total loss over all supervised layers plus per-layer injected grads.

    teacher_layers maps 0-based teacher layer index to its activations.
    """
    layers = len(mapping)
    d_scores: list[Optional[np.ndarray]] = [None] * layers
    d_hidden: list[Optional[np.ndarray]] = [None] * layers
    d_proj: dict[int, np.ndarray] = {}
    total = 0.0
    for pos, teacher_layer in enumerate(mapping):
        if teacher_layer is None:
            continue
        loss, ds, dh, dw = layer_loss_with_grads(
            student_cache.per_layer[pos],
            teacher_layers[teacher_layer - 1],
            projections[pos],
        )
        total += loss
        d_scores[pos] = ds
        d_hidden[pos] = dh
        d_proj[pos] = dw
    return total, d_scores, d_hidden, d_proj


# ----------------------------------------------------------------------
# teacher pretraining (masked-token objective)

def _mask_batch(
    batch: np.ndarray,
    mask_token_id: int,
    rng: np.random.Generator,
    mask_frac: float = 0.15,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace ~mask_frac of positions with the mask token.

    Returns (masked ids, flat masked positions, original targets).
    """
    batch = batch.copy()
    n, length = batch.shape
    per_seq = max(1, int(round(mask_frac * length)))
    rows = np.repeat(np.arange(n), per_seq)
    cols = np.concatenate([
        rng.choice(length, size=per_seq, replace=False) for _ in range(n)
    ])
    flat = rows * length + cols
    targets = batch[rows, cols].copy()
    batch[rows, cols] = mask_token_id
    return batch, flat, targets


def masked_token_accuracy(
    model: TinyTransformer,
    sequences: np.ndarray,
    mask_token_id: int,
    seed: int,
    batch_size: int = 64,
) -> float:
    """Held-out masked-token top-1 accuracy under deterministic masking."""
    rng = np.random.default_rng(seed)
    correct = 0
    total = 0
    for start in range(0, len(sequences), batch_size):
        batch = np.asarray(sequences[start : start + batch_size], dtype=np.int64)
        masked, flat, targets = _mask_batch(batch, mask_token_id, rng)
        cache = model.forward(masked)
        logits = model.mlm_logits(cache, flat)
        correct += int((logits.argmax(axis=1) == targets).sum())
        total += len(targets)
    return correct / total


def pretrain_teacher(
    config: TransformerConfig,
    corpus,
    mask_token_id: Optional[int] = None,
    steps: int = 2000,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    warmup_frac: float = 0.1,
    holdout_frac: float = 0.1,
    seed: Optional[int] = None,
) -> PretrainResult:
    """Train a fresh teacher on masked-token prediction over the corpus.

    `corpus` is either a (n, L) int array or an object exposing
    .sequences and .mask_token_id.  The trailing holdout_frac of the
    corpus is held out for the accuracy estimate.
    """
    if mask_token_id is None:
        mask_token_id = corpus.mask_token_id
    sequences = np.asarray(getattr(corpus, "sequences", corpus), dtype=np.int64)
    if seed is None:
        seed = config.seed
    n_holdout = max(1, int(round(holdout_frac * len(sequences))))
    train = sequences[:-n_holdout]
    holdout = sequences[-n_holdout:]

    model = TinyTransformer(config)
    opt = Adam(model.params, learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EAC]))
    losses: list[float] = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train), size=batch_size)
        masked, flat, targets = _mask_batch(train[idx], mask_token_id, rng)
        cache = model.forward(masked)
        loss, grads = model.mlm_loss(cache, flat, targets)
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss became {loss} at step {step}")
        opt.step(grads, warmup_linear_decay(step, steps, warmup_frac))
        losses.append(loss)

    accuracy = masked_token_accuracy(
        model, holdout, mask_token_id, seed=np.random.SeedSequence([seed, 0xE7A1]).generate_state(1)[0]
    )
    return PretrainResult(model=model, losses=losses, masked_accuracy=accuracy)


# ----------------------------------------------------------------------
# distillation

class TeacherActivations:
    """Frozen-teacher activations precomputed once over a fixed corpus.

    They depend only on the sequences, not on the mapping being searched,
    so one cache serves every gene evaluation against the same corpus.
    """

    def __init__(
        self, teacher: TinyTransformer, sequences: np.ndarray, batch_size: int = 128
    ) -> None:
        sequences = np.asarray(sequences, dtype=np.int64)
        self.heads = teacher.config.heads
        scores: list[list[np.ndarray]] = [[] for _ in range(teacher.config.layers)]
        hidden: list[list[np.ndarray]] = [[] for _ in range(teacher.config.layers)]
        for start in range(0, len(sequences), batch_size):
            cache = teacher.forward(sequences[start : start + batch_size])
            for i, acts in enumerate(cache.per_layer):
                scores[i].append(acts.attention_scores)
                hidden[i].append(acts.hidden_states)
        self.scores = [np.concatenate(chunks) for chunks in scores]
        self.hidden = [np.concatenate(chunks) for chunks in hidden]

    def layer_batch(self, layer: int, idx: np.ndarray) -> LayerActivations:
        return LayerActivations(
            attention_scores=self.scores[layer][idx],
            hidden_states=self.hidden[layer][idx],
        )


def distill(
    teacher: TinyTransformer,
    student_config: TransformerConfig,
    mapping: LayerMapping,
    corpus,
    config: DistillConfig,
    teacher_acts: Optional[TeacherActivations] = None,
) -> DistillResult:
    """Distill a randomly initialized student under the given layer mapping.

    The teacher is frozen; the per-layer hidden-state projections are
    trained jointly with the student and returned alongside it.  Passing a
    precomputed TeacherActivations for the same corpus skips the repeated
    teacher forward passes.
    """
    if len(mapping) != student_config.layers:
        raise ValueError(
            f"mapping has {len(mapping)} entries for a {student_config.layers}-layer student"
        )
    if teacher.config.heads != student_config.heads:
        raise ValueError(
            f"head count mismatch: teacher {teacher.config.heads}, "
            f"student {student_config.heads} (both sides must agree)"
        )
    for entry in mapping:
        if entry is not None and not 1 <= entry <= teacher.config.layers:
            raise ValueError(f"mapping entry {entry} outside teacher depth")

    sequences = np.asarray(getattr(corpus, "sequences", corpus), dtype=np.int64)
    student = TinyTransformer(student_config)

    ss = np.random.SeedSequence([config.seed, 0xD157])
    batch_rng, proj_rng = [np.random.default_rng(c) for c in ss.spawn(2)]

    projections: dict[int, np.ndarray] = {}
    for pos, teacher_layer in enumerate(mapping):
        if teacher_layer is not None:
            projections[pos] = truncated_normal(
                proj_rng, (student_config.hidden_size, teacher.config.hidden_size)
            )

    trainable: dict[str, np.ndarray] = dict(student.params)
    for pos, w in projections.items():
        trainable[f"proj.{pos}"] = w
    opt = Adam(trainable, config.learning_rate)

    needed_layers = sorted({g - 1 for g in mapping if g is not None})
    losses: list[float] = []
    for step in range(1, config.steps + 1):
        idx = batch_rng.integers(0, len(sequences), size=config.batch_size)
        batch = sequences[idx]
        if teacher_acts is not None:
            teacher_layers = {
                i: teacher_acts.layer_batch(i, idx) for i in needed_layers
            }
        else:
            teacher_cache = teacher.forward(batch)
            teacher_layers = {i: teacher_cache.per_layer[i] for i in needed_layers}
        student_cache = student.forward(batch)
        loss, d_scores, d_hidden, d_proj = mapping_loss(
            student_cache, teacher_layers, mapping, projections
        )
        if not np.isfinite(loss):
            raise DivergenceError(f"distillation loss became {loss} at step {step}")
        grads = student.backward(student_cache, d_scores=d_scores, d_hidden=d_hidden)
        for pos, dw in d_proj.items():
            grads[f"proj.{pos}"] = dw
        for name in trainable:
            if name not in grads:
                grads[name] = np.zeros_like(trainable[name])
        opt.step(grads, warmup_linear_decay(step, config.steps, config.warmup_frac))
        losses.append(loss)

    return DistillResult(student=student, projections=projections, losses=losses)


def decile_means(losses: Sequence[float]) -> tuple[float, float]:
    """Mean loss over the first and last 10% of steps (at least one step each)."""
    n = max(1, len(losses) // 10)
    return float(np.mean(losses[:n])), float(np.mean(losses[-n:]))


# ----------------------------------------------------------------------
# manifest

def write_manifest(
    path: str | Path,
    mapping: LayerMapping,
    config: DistillConfig,
    losses: Sequence[float],
    per_task: Optional[dict[str, float]] = None,
    extra: Optional[dict] = None,
) -> None:
    """Structured record of one distillation run, stored beside its snapshot."""
    first, last = decile_means(losses)
    payload = {
        "mapping": format_mapping(mapping),
        "config": {
            "steps": config.steps,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "warmup_frac": config.warmup_frac,
            "seed": config.seed,
        },
        "final_loss": losses[-1] if losses else None,
        "first_decile_mean_loss": first,
        "last_decile_mean_loss": last,
        "per_task": per_task or {},
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
