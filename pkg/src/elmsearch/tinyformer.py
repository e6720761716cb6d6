"""Minimal transformer encoder with exact hand-written gradients.

Float64 throughout, no dropout, post-norm residual blocks (attention and
feed-forward sub-layers each wrapped in residual + layer norm, as in the
original BERT lineage).  Per-layer pre-softmax attention scores and
post-layer hidden states are exposed so a distillation loss can fit them,
and `backward` accepts gradients injected at those points.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels

LN_EPS = 1e-12
MASK_BIAS = -1e9
INIT_STD = 0.02

SNAPSHOT_MAGIC = b"ELMW"
SNAPSHOT_VERSION = 1


class ShapeError(ValueError):
    """Input does not fit the model configuration."""


class SnapshotError(RuntimeError):
    """Weight snapshot is malformed or from an incompatible version."""


@dataclass(frozen=True)
class TransformerConfig:
    layers: int
    hidden_size: int
    ffn_size: int
    heads: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_size % self.heads:
            raise ShapeError(
                f"hidden_size {self.hidden_size} not divisible by heads {self.heads}"
            )
        for name in ("layers", "hidden_size", "ffn_size", "heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads


@dataclass(frozen=True)
class LayerActivations:
    """What the distillation loss sees for one layer of one forward pass."""

    attention_scores: np.ndarray  # (B, h, L, L) pre-softmax, scaled by 1/sqrt(d_k)
    hidden_states: np.ndarray  # (B, L, d) output of the full sub-layer stack


@dataclass
class ForwardCache:
    """Forward activations retained for backward and for distillation."""

    ids: np.ndarray
    attn_mask: Optional[np.ndarray]
    final: np.ndarray  # (B, L, d)
    per_layer: list[LayerActivations]
    attention_weights: list[np.ndarray]  # (B, h, L, L) softmax rows, for inspection
    _emb: dict = field(default_factory=dict, repr=False)
    _layers: list[dict] = field(default_factory=list, repr=False)


def _param_names(config: TransformerConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "emb_ln_g", "emb_ln_b"]
    for i in range(config.layers):
        names += [
            f"l{i}.wq", f"l{i}.bq", f"l{i}.wk", f"l{i}.bk", f"l{i}.wv", f"l{i}.bv",
            f"l{i}.wo", f"l{i}.bo", f"l{i}.ln1_g", f"l{i}.ln1_b",
            f"l{i}.w1", f"l{i}.b1", f"l{i}.w2", f"l{i}.b2",
            f"l{i}.ln2_g", f"l{i}.ln2_b",
        ]
    names += ["mlm_w", "mlm_b"]
    return names


def _param_shape(name: str, c: TransformerConfig) -> tuple[int, ...]:
    d, di, v = c.hidden_size, c.ffn_size, c.vocab_size
    base = name.split(".")[-1]
    shapes = {
        "tok_emb": (v, d), "pos_emb": (c.max_seq_len, d),
        "emb_ln_g": (d,), "emb_ln_b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln1_g": (d,), "ln1_b": (d,), "w1": (d, di), "b1": (di,),
        "w2": (di, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
        "mlm_w": (d, v), "mlm_b": (v,),
    }
    return shapes[base]


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD
) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two sigma."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_params(config: TransformerConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name in _param_names(config):
        shape = _param_shape(name, config)
        base = name.split(".")[-1]
        if base.endswith("ln1_g") or base.endswith("ln2_g") or base == "emb_ln_g":
            params[name] = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b") or base == "mlm_b":
            params[name] = np.zeros(shape)
        else:
            params[name] = truncated_normal(rng, shape)
    return params


class TinyTransformer:
    """Encoder trunk plus a masked-token prediction head."""

    def __init__(
        self,
        config: TransformerConfig,
        params: Optional[dict[str, np.ndarray]] = None,
    ) -> None:
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = set(_param_names(config))
        if set(self.params) != expected:
            missing = expected - set(self.params)
            extra = set(self.params) - expected
            raise ShapeError(f"parameter set mismatch: missing={missing}, extra={extra}")

    def copy(self) -> "TinyTransformer":
        return TinyTransformer(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_names(self) -> list[str]:
        return _param_names(self.config)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------------
    # forward

    def forward(
        self, ids: np.ndarray, attn_mask: Optional[np.ndarray] = None
    ) -> ForwardCache:
        c = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"ids must be (batch, length), got shape {ids.shape}")
        batch, length = ids.shape
        if length > c.max_seq_len:
            raise ShapeError(f"sequence length {length} exceeds max_seq_len {c.max_seq_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ShapeError("token id outside [0, vocab_size)")
        if attn_mask is not None:
            attn_mask = np.asarray(attn_mask)
            if attn_mask.shape != ids.shape:
                raise ShapeError("attn_mask shape must match ids shape")

        p = self.params
        h, d = c.heads, c.hidden_size

        x0 = p["tok_emb"][ids] + p["pos_emb"][:length]
        x0_2d = np.ascontiguousarray(x0.reshape(batch * length, d))
        x_2d, emb_mean, emb_rstd = kernels.layernorm_forward(
            x0_2d, p["emb_ln_g"], p["emb_ln_b"], LN_EPS
        )

        if attn_mask is not None:
            mask_bias = np.where(attn_mask == 0, MASK_BIAS, 0.0).astype(np.float64)
            has_mask = True
        else:
            mask_bias = np.zeros((1, 1))
            has_mask = False

        cache = ForwardCache(
            ids=ids, attn_mask=attn_mask, final=np.empty(0),
            per_layer=[], attention_weights=[],
        )
        cache._emb = {"x0_2d": x0_2d, "mean": emb_mean, "rstd": emb_rstd}

        for i in range(c.layers):
            lp = f"l{i}."
            layer = kernels.encoder_layer_forward(
                x_2d,
                p[lp + "wq"], p[lp + "bq"], p[lp + "wk"], p[lp + "bk"],
                p[lp + "wv"], p[lp + "bv"], p[lp + "wo"], p[lp + "bo"],
                p[lp + "ln1_g"], p[lp + "ln1_b"],
                p[lp + "w1"], p[lp + "b1"], p[lp + "w2"], p[lp + "b2"],
                p[lp + "ln2_g"], p[lp + "ln2_b"],
                batch, length, h, mask_bias, has_mask, LN_EPS,
            )
            (q, k, v, scores, probs, cat2, r1, mean1, rstd1,
             h1, ffn_pre, ffn_act, r2, mean2, rstd2, out_2d) = layer
            cache._layers.append({
                "x_2d": x_2d, "q": q, "k": k, "v": v, "probs": probs,
                "cat2": cat2, "r1": r1, "mean1": mean1, "rstd1": rstd1,
                "h1": h1, "ffn_pre": ffn_pre, "ffn_act": ffn_act,
                "r2": r2, "mean2": mean2, "rstd2": rstd2,
            })
            cache.per_layer.append(LayerActivations(
                attention_scores=scores.reshape(batch, h, length, length),
                hidden_states=out_2d.reshape(batch, length, d),
            ))
            cache.attention_weights.append(probs.reshape(batch, h, length, length))
            x_2d = out_2d

        cache.final = x_2d.reshape(batch, length, d)
        return cache

    # ------------------------------------------------------------------
    # backward

    def backward(
        self,
        cache: ForwardCache,
        d_final: Optional[np.ndarray] = None,
        d_scores: Optional[Sequence[Optional[np.ndarray]]] = None,
        d_hidden: Optional[Sequence[Optional[np.ndarray]]] = None,
    ) -> dict[str, np.ndarray]:
        """Exact gradients of a scalar loss given its output-side gradients.

        d_final is dL/d(final hidden states); d_scores[i] and d_hidden[i]
        are gradients injected at layer i's pre-softmax attention scores
        and post-layer hidden states (the distillation hook points).
        """
        c = self.config
        p = self.params
        batch, length = cache.ids.shape
        h, d = c.heads, c.hidden_size
        n2 = batch * length

        grads: dict[str, np.ndarray] = {}
        no_inject = np.zeros((1, 1, 1))

        dx_2d = np.zeros((n2, d))
        if d_final is not None:
            dx_2d += d_final.reshape(n2, d)

        for i in range(c.layers - 1, -1, -1):
            lc = cache._layers[i]
            lp = f"l{i}."
            if d_hidden is not None and d_hidden[i] is not None:
                dx_2d = dx_2d + d_hidden[i].reshape(n2, d)
            if d_scores is not None and d_scores[i] is not None:
                inject = np.ascontiguousarray(
                    d_scores[i].reshape(batch * h, length, length)
                )
                has_inject = True
            else:
                inject = no_inject
                has_inject = False

            out = kernels.encoder_layer_backward(
                dx_2d,
                lc["x_2d"],
                p[lp + "wq"], p[lp + "wk"], p[lp + "wv"], p[lp + "wo"],
                p[lp + "ln1_g"], p[lp + "w1"], p[lp + "w2"], p[lp + "ln2_g"],
                lc["q"], lc["k"], lc["v"],
                lc["probs"], lc["cat2"],
                lc["r1"], lc["mean1"], lc["rstd1"],
                lc["h1"], lc["ffn_pre"], lc["ffn_act"],
                lc["r2"], lc["mean2"], lc["rstd2"],
                inject, has_inject,
                batch, length, h,
            )
            (dx_2d, grads[lp + "wq"], grads[lp + "bq"],
             grads[lp + "wk"], grads[lp + "bk"],
             grads[lp + "wv"], grads[lp + "bv"],
             grads[lp + "wo"], grads[lp + "bo"],
             grads[lp + "ln1_g"], grads[lp + "ln1_b"],
             grads[lp + "w1"], grads[lp + "b1"],
             grads[lp + "w2"], grads[lp + "b2"],
             grads[lp + "ln2_g"], grads[lp + "ln2_b"]) = out

        emb = cache._emb
        dx0_2d, dge, dbe = kernels.layernorm_backward(
            dx_2d, emb["x0_2d"], emb["mean"], emb["rstd"], p["emb_ln_g"]
        )
        grads["emb_ln_g"] = dge
        grads["emb_ln_b"] = dbe
        grads["tok_emb"] = kernels.embedding_backward(
            cache.ids.ravel(), dx0_2d, c.vocab_size
        )
        pos_grad = np.zeros_like(p["pos_emb"])
        pos_grad[:length] = dx0_2d.reshape(batch, length, d).sum(axis=0)
        grads["pos_emb"] = pos_grad
        grads["mlm_w"] = np.zeros_like(p["mlm_w"])
        grads["mlm_b"] = np.zeros_like(p["mlm_b"])
        return grads

    # ------------------------------------------------------------------
    # masked-token head

    def mlm_logits(self, cache: ForwardCache, positions: np.ndarray) -> np.ndarray:
        """Vocabulary logits at flat (batch*length) positions."""
        d = self.config.hidden_size
        sel = cache.final.reshape(-1, d)[positions]
        return sel @ self.params["mlm_w"] + self.params["mlm_b"]

    def mlm_loss(
        self, cache: ForwardCache, positions: np.ndarray, targets: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross entropy at masked positions and full parameter grads."""
        d = self.config.hidden_size
        final2d = cache.final.reshape(-1, d)
        sel = final2d[positions]
        logits = sel @ self.params["mlm_w"] + self.params["mlm_b"]
        loss, dlogits = softmax_cross_entropy(logits, targets)
        d_sel = dlogits @ self.params["mlm_w"].T
        d_final2d = np.zeros_like(final2d)
        d_final2d[positions] = d_sel
        grads = self.backward(cache, d_final=d_final2d.reshape(cache.final.shape))
        grads["mlm_w"] += sel.T @ dlogits
        grads["mlm_b"] += dlogits.sum(axis=0)
        return loss, grads


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross entropy over rows; returns (loss, dL/dlogits)."""
    n = logits.shape[0]
    probs = kernels.softmax_rows(logits)
    picked = probs[np.arange(n), targets]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean cosine over paired rows, skipping zero-norm pairs entirely."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise ValueError("all position pairs have zero norm")
    dots = (a * b).sum(axis=-1)
    return float((dots[keep] / (na[keep] * nb[keep])).mean())


def layer_contribution(
    model: TinyTransformer, sequences: np.ndarray, batch_size: int = 64
) -> list[float]:
    """Per-layer mean cosine between each layer's input and output states.

    Lower cosine means the layer changes its input more, i.e. contributes
    more; used by the contribution baseline heuristic.
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.size == 0:
        raise ValueError("corpus sample is empty")
    layers = model.config.layers
    dots = [0.0] * layers
    counts = [0] * layers
    for start in range(0, len(sequences), batch_size):
        batch = sequences[start : start + batch_size]
        cache = model.forward(batch)
        d = model.config.hidden_size
        prev = None
        for i in range(layers):
            inp = cache._layers[i]["x_2d"].reshape(batch.shape[0], -1, d)
            out = cache.per_layer[i].hidden_states
            na = np.linalg.norm(inp, axis=-1)
            nb = np.linalg.norm(out, axis=-1)
            keep = (na > 0) & (nb > 0)
            cos = ((inp * out).sum(axis=-1)[keep] / (na[keep] * nb[keep]))
            dots[i] += float(cos.sum())
            counts[i] += int(keep.sum())
            prev = out
    scores = []
    for i in range(layers):
        if counts[i] == 0:
            raise ValueError(f"layer {i}: every position pair had zero norm")
        scores.append(dots[i] / counts[i])
    return scores


# ----------------------------------------------------------------------
# weight snapshots

_HEADER = struct.Struct("<4sI6IQ")


def save_snapshot(model: TinyTransformer, path: str | Path) -> None:
    """Versioned binary dump: header then float64 tensors in declaration order."""
    c = model.config
    header = _HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION,
        c.layers, c.hidden_size, c.ffn_size, c.heads, c.vocab_size,
        c.max_seq_len, c.seed,
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        for name in _param_names(c):
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            f.write(arr.tobytes())
    tmp.replace(path)


def load_snapshot(path: str | Path) -> TinyTransformer:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SnapshotError("snapshot too short for header")
    magic, version, layers, hidden, ffn, heads, vocab, max_seq, seed = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    config = TransformerConfig(
        layers=layers, hidden_size=hidden, ffn_size=ffn, heads=heads,
        vocab_size=vocab, max_seq_len=max_seq, seed=seed,
    )
    offset = _HEADER.size
    params: dict[str, np.ndarray] = {}
    for name in _param_names(config):
        shape = _param_shape(name, config)
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(raw):
            raise SnapshotError(f"snapshot truncated at parameter {name}")
        params[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise SnapshotError(f"{len(raw) - offset} trailing bytes after parameters")
    return TinyTransformer(config, params)
