"""Dense float64 kernels with hand-written reverse-mode gradients.

Every layer the detector uses lives here as a pure function plus a matching
``*_backward`` that recomputes intermediates from the saved inputs and
returns exact analytic gradients, including gradients with respect to the
layer input (the attack needs d loss / d input, not just parameter grads).

Shape conventions: sequence activations are ``(B, T, D)``; ``pad_mask`` is
boolean ``(B, T)`` with True marking PAD positions, which are excluded from
attention (their key weights are exactly 0) and from pooling.  Everything is
float64; any NaN/Inf in an op output raises ``NonFiniteValueError``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValueError, ShapeMismatchError


@dataclass
class LayerGrads:
    """Parameter gradients keyed by name, plus the input gradient."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    dx: np.ndarray | None = None


def ensure_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(where)
    return arr


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(msg)


# --- affine ---

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b over the last axis of x."""
    _require(x.shape[-1] == w.shape[0], f"linear: x {x.shape} vs w {w.shape}")
    _require(b.shape == (w.shape[1],), f"linear: b {b.shape} vs w {w.shape}")
    return ensure_finite(x @ w + b, "linear")


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> LayerGrads:
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    return LayerGrads(
        params={"w": xf.T @ dyf, "b": dyf.sum(axis=0)},
        dx=(dy @ w.T).reshape(x.shape),
    )


# --- embeddings ---

def embedding_lookup(ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    _require(int(ids.max(initial=0)) < table.shape[0], "embedding: id out of range")
    return table[ids]


def embedding_backward(ids: np.ndarray, dy: np.ndarray, n_rows: int) -> LayerGrads:
    grad = np.zeros((n_rows, dy.shape[-1]))
    np.add.at(grad, ids.reshape(-1), dy.reshape(-1, dy.shape[-1]))
    return LayerGrads(params={"table": grad}, dx=None)


# --- layer norm ---

def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis: y = gamma * (x - mean) / sqrt(var + eps) + beta."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return ensure_finite(xhat * gamma + beta, "layer_norm")


def layer_norm_backward(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, dy: np.ndarray,
    eps: float = 1e-5,
) -> LayerGrads:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    ghat = dy * gamma
    dx = (ghat - ghat.mean(axis=-1, keepdims=True)
          - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)) / sigma
    lead = tuple(range(dy.ndim - 1))
    return LayerGrads(
        params={"gamma": (dy * xhat).sum(axis=lead), "beta": dy.sum(axis=lead)},
        dx=dx,
    )


# --- softmax / attention ---

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (row max subtracted before exp)."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return ensure_finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def _attention_weights(scores: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Masked softmax over the key axis with exact zeros at PAD keys.

    Rows whose keys are all PAD get all-zero weights rather than NaN.
    """
    valid = ~pad_mask[:, None, None, :]  # (B,1,1,T)
    m = np.where(valid, scores, -np.inf).max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(valid, scores - m, -np.inf))
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def multi_head_attention(
    x: np.ndarray,
    wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
    n_heads: int,
    pad_mask: np.ndarray,
) -> np.ndarray:
    """Self-attention: softmax(q k^T / sqrt(dh)) v per head, then output proj.

    x: (B, T, D); pad_mask: (B, T) bool, True = PAD (masked out as keys).
    """
    B, T, D = x.shape
    _require(D % n_heads == 0, "attention: D not divisible by n_heads")
    _require(pad_mask.shape == (B, T), f"attention: pad_mask {pad_mask.shape}")
    dh = D // n_heads
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scores = q @ k.swapaxes(-1, -2) / np.sqrt(dh)
    w = _attention_weights(scores, pad_mask)
    y = _merge_heads(w @ v) @ wo
    return ensure_finite(y, "multi_head_attention")


def multi_head_attention_backward(
    x: np.ndarray,
    wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
    n_heads: int,
    pad_mask: np.ndarray,
    dy: np.ndarray,
) -> LayerGrads:
    B, T, D = x.shape
    dh = D // n_heads
    scale = 1.0 / np.sqrt(dh)
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scores = q @ k.swapaxes(-1, -2) * scale
    w = _attention_weights(scores, pad_mask)
    ctx = _merge_heads(w @ v)  # (B,T,D)

    dyf = dy.reshape(-1, D)
    dwo = ctx.reshape(-1, D).T @ dyf
    dctx = _split_heads(dy @ wo.T, n_heads)  # (B,h,T,dh)

    dw = dctx @ v.swapaxes(-1, -2)  # (B,h,T,T)
    dv = w.swapaxes(-1, -2) @ dctx
    # softmax backward; masked entries have w == 0 so their ds is exactly 0
    ds = (dw - (dw * w).sum(axis=-1, keepdims=True)) * w * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q

    xf = x.reshape(-1, D)
    dq_m, dk_m, dv_m = (_merge_heads(g) for g in (dq, dk, dv))
    grads = {
        "wq": xf.T @ dq_m.reshape(-1, D),
        "wk": xf.T @ dk_m.reshape(-1, D),
        "wv": xf.T @ dv_m.reshape(-1, D),
        "wo": dwo,
    }
    dx = dq_m @ wq.T + dk_m @ wk.T + dv_m @ wv.T
    return LayerGrads(params=grads, dx=dx)


# --- position-wise feed-forward ---

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def ffn(
    x: np.ndarray,
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray,
) -> np.ndarray:
    """Two affine maps with ReLU between: relu(x w1 + b1) w2 + b2."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


def ffn_backward(
    x: np.ndarray,
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray,
    dy: np.ndarray,
) -> LayerGrads:
    pre = x @ w1 + b1
    h = relu(pre)
    g2 = linear_backward(h, w2, dy)
    dpre = g2.dx * (pre > 0)  # subgradient 0 at the kink
    g1 = linear_backward(x, w1, dpre)
    return LayerGrads(
        params={"w1": g1.params["w"], "b1": g1.params["b"],
                "w2": g2.params["w"], "b2": g2.params["b"]},
        dx=g1.dx,
    )


# --- pooling ---

def masked_mean_pool(x: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Mean over non-PAD positions; an all-PAD sequence pools to zeros."""
    _require(pad_mask.shape == x.shape[:2], "pool: pad_mask shape")
    valid = (~pad_mask).astype(np.float64)[..., None]  # (B,T,1)
    cnt = np.maximum(valid.sum(axis=1), 1.0)  # (B,1)
    return ensure_finite((x * valid).sum(axis=1) / cnt, "masked_mean_pool")


def masked_mean_pool_backward(
    x: np.ndarray, pad_mask: np.ndarray, dy: np.ndarray
) -> LayerGrads:
    valid = (~pad_mask).astype(np.float64)[..., None]
    cnt = np.maximum(valid.sum(axis=1), 1.0)
    dx = dy[:, None, :] * valid / cnt[:, None, :]
    return LayerGrads(dx=dx)


# --- loss ---

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood via log-sum-exp (saturation-safe).

    logits: (B, C) or (C,); labels: (B,) ints or scalar int.
    """
    lg, lb = _promote(logits, labels)
    m = lg.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=-1))
    loss = float(np.mean(lse - lg[np.arange(lg.shape[0]), lb]))
    if not np.isfinite(loss):
        raise NonFiniteValueError("cross_entropy")
    return loss


def cross_entropy_backward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean CE)/d logits = (softmax - onehot) / B, shaped like ``logits``."""
    lg, lb = _promote(logits, labels)
    p = softmax(lg, axis=-1)
    p[np.arange(lg.shape[0]), lb] -= 1.0
    return (p / lg.shape[0]).reshape(logits.shape)


def _promote(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim == 1:
        lg = lg[None, :]
    lb = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _require(lg.ndim == 2 and lb.shape == (lg.shape[0],), "cross_entropy: shapes")
    _require(bool(np.all((lb >= 0) & (lb < lg.shape[1]))), "cross_entropy: label range")
    return lg, lb


# --- gradient checking ---

def grad_check(f, x: np.ndarray, step: float = 1e-5) -> float:
    """Compare f's analytic gradient against central finite differences.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    Returns max over coordinates of |analytic - numeric| /
    max(1, |analytic|, |numeric|).
    """
    _, analytic = f(x)
    _require(np.shape(analytic) == x.shape, "grad_check: grad shape")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi, _ = f(x)
        flat[i] = orig - step
        lo, _ = f(x)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        a = float(np.asarray(analytic).reshape(-1)[i])
        if not (np.isfinite(numeric) and np.isfinite(a)):
            raise NonFiniteValueError("grad_check")
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
