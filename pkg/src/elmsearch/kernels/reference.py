"""Pure-numpy implementations of the hot numeric kernels.

These are the fallback path; `elmsearch.kernels.jit` provides numba-compiled
versions with identical semantics.  All arrays are float64.  Attention
tensors use a stacked (batch*heads, length, ...) layout.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient through row-wise softmax given probabilities p and dL/dp."""
    inner = (p * dp).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def layernorm_forward(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise layer norm; returns (y, mean, rstd) for the backward pass."""
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layernorm_backward(
    dy: np.ndarray,
    x: np.ndarray,
    mean: np.ndarray,
    rstd: np.ndarray,
    gain: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgain, dbias) for row-wise layer norm."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    bc1: float,
    bc2: float,
) -> None:
    """One fused in-place Adam update on flat arrays.

    bc1/bc2 are the bias-correction factors 1 - beta^t for the current step.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def embedding_backward(
    ids: np.ndarray, dout: np.ndarray, vocab_size: int
) -> np.ndarray:
    """Scatter-add gradient rows into a (vocab_size, d) table."""
    table = np.zeros((vocab_size, dout.shape[1]), dtype=np.float64)
    np.add.at(table, ids, dout)
    return table


# ----------------------------------------------------------------------
# fused transformer encoder layer (post-norm, residual around MHA and FFN)

def _split_heads(x2: np.ndarray, batch: int, length: int, heads: int) -> np.ndarray:
    """(batch*length, d) -> contiguous (batch*heads, length, d_k)."""
    dk = x2.shape[1] // heads
    return np.ascontiguousarray(
        x2.reshape(batch, length, heads, dk).transpose(0, 2, 1, 3)
    ).reshape(batch * heads, length, dk)


def _merge_heads(x: np.ndarray, batch: int, length: int, heads: int) -> np.ndarray:
    """(batch*heads, length, d_k) -> (batch*length, d)."""
    dk = x.shape[2]
    return np.ascontiguousarray(
        x.reshape(batch, heads, length, dk).transpose(0, 2, 1, 3)
    ).reshape(batch * length, heads * dk)


def encoder_layer_forward(
    x2: np.ndarray,
    wq: np.ndarray, bq: np.ndarray,
    wk: np.ndarray, bk: np.ndarray,
    wv: np.ndarray, bv: np.ndarray,
    wo: np.ndarray, bo: np.ndarray,
    ln1_g: np.ndarray, ln1_b: np.ndarray,
    w1: np.ndarray, b1: np.ndarray,
    w2: np.ndarray, b2: np.ndarray,
    ln2_g: np.ndarray, ln2_b: np.ndarray,
    batch: int, length: int, heads: int,
    mask_bias: np.ndarray, has_mask: bool,
    eps: float,
):
    """One post-norm encoder layer on (batch*length, d) activations.

    Returns every intermediate the backward pass and the distillation loss
    need: (q, k, v, scores, probs, cat2, r1, mean1, rstd1, h1, ffn_pre,
    ffn_act, r2, mean2, rstd2, out).  `scores` are the unmasked scaled
    attention scores; the mask bias only affects the softmax input.
    """
    dk = x2.shape[1] // heads
    scale = 1.0 / np.sqrt(dk)

    q = _split_heads(x2 @ wq + bq, batch, length, heads)
    k = _split_heads(x2 @ wk + bk, batch, length, heads)
    v = _split_heads(x2 @ wv + bv, batch, length, heads)

    scores = (q @ k.transpose(0, 2, 1)) * scale  # (batch*heads, L, L)
    if has_mask:
        bias = np.repeat(mask_bias, heads, axis=0)  # (batch*heads, L)
        masked = scores + bias[:, None, :]
    else:
        masked = scores
    probs = softmax_rows(masked.reshape(-1, length)).reshape(scores.shape)

    ctx = probs @ v
    cat2 = _merge_heads(ctx, batch, length, heads)
    r1 = x2 + cat2 @ wo + bo
    h1, mean1, rstd1 = layernorm_forward(r1, ln1_g, ln1_b, eps)
    ffn_pre = h1 @ w1 + b1
    ffn_act = np.maximum(ffn_pre, 0.0)
    r2 = h1 + ffn_act @ w2 + b2
    out, mean2, rstd2 = layernorm_forward(r2, ln2_g, ln2_b, eps)
    return (q, k, v, scores, probs, cat2, r1, mean1, rstd1,
            h1, ffn_pre, ffn_act, r2, mean2, rstd2, out)


def encoder_layer_backward(
    dx: np.ndarray,
    x2: np.ndarray,
    wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
    ln1_g: np.ndarray, w1: np.ndarray, w2: np.ndarray, ln2_g: np.ndarray,
    q: np.ndarray, k: np.ndarray, v: np.ndarray,
    probs: np.ndarray, cat2: np.ndarray,
    r1: np.ndarray, mean1: np.ndarray, rstd1: np.ndarray,
    h1: np.ndarray, ffn_pre: np.ndarray, ffn_act: np.ndarray,
    r2: np.ndarray, mean2: np.ndarray, rstd2: np.ndarray,
    d_scores_inject: np.ndarray, has_inject: bool,
    batch: int, length: int, heads: int,
):
    """Backward through one encoder layer given dL/d(out) in `dx`.

    d_scores_inject is an extra gradient added at the unmasked attention
    score node (the distillation hook).  Returns (dx_prev, dwq, dbq, dwk,
    dbk, dwv, dbv, dwo, dbo, dg1, db1, dw1, db1f, dw2, db2f, dg2, db2).
    """
    dk_dim = x2.shape[1] // heads
    scale = 1.0 / np.sqrt(dk_dim)

    dr2, dg2, db2 = layernorm_backward(dx, r2, mean2, rstd2, ln2_g)
    dw2 = ffn_act.T @ dr2
    db2f = dr2.sum(axis=0)
    d_ffn_pre = (dr2 @ w2.T) * (ffn_pre > 0.0)
    dw1 = h1.T @ d_ffn_pre
    db1f = d_ffn_pre.sum(axis=0)
    dh1 = dr2 + d_ffn_pre @ w1.T

    dr1, dg1, db1 = layernorm_backward(dh1, r1, mean1, rstd1, ln1_g)
    dwo = cat2.T @ dr1
    dbo = dr1.sum(axis=0)
    dctx = _split_heads(dr1 @ wo.T, batch, length, heads)

    dprobs = dctx @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ dctx
    dscores = softmax_rows_backward(
        probs.reshape(-1, length), dprobs.reshape(-1, length)
    ).reshape(probs.shape)
    if has_inject:
        dscores = dscores + d_scores_inject

    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 2, 1) @ q) * scale

    dq2 = _merge_heads(dq, batch, length, heads)
    dk2 = _merge_heads(dk, batch, length, heads)
    dv2 = _merge_heads(dv, batch, length, heads)

    dwq = x2.T @ dq2
    dbq = dq2.sum(axis=0)
    dwk = x2.T @ dk2
    dbk = dk2.sum(axis=0)
    dwv = x2.T @ dv2
    dbv = dv2.sum(axis=0)

    dx_prev = dr1 + dq2 @ wq.T + dk2 @ wk.T + dv2 @ wv.T
    return (dx_prev, dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo,
            dg1, db1, dw1, db1f, dw2, db2f, dg2, db2)
