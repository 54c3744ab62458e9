"""Numeric primitives with a fixed floating-point evaluation order.

Every contraction goes through np.einsum with the default (non-optimizing)
path: each output element is a plain sum over the contracted index in array
order, independent of how the non-contracted rows are batched.  That is what
makes chunked execution bitwise-identical to unchunked execution, so matmul/@
(BLAS, blocking-dependent) must not appear here.  All math is float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x [s,b,i] @ w [i,o] -> [s,b,o], no bias."""
    return np.einsum("sbi,io->sbo", x, w)


def linear_backward_x(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("sbo,io->sbi", dy, w)


def linear_backward_w(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # One einsum over all s*b rows; never computed per chunk.
    return np.einsum("sbi,sbo->io", x, dy)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact erf formulation (not the tanh approximation)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + LN_EPS)
    return xhat * gain + bias


def layernorm_backward_b(dy: np.ndarray, x: np.ndarray,
                         gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient; stats are recomputed from x so full and recompute
    execution share one code path.  Returns (dx, xhat); xhat feeds the
    weight-gradient half."""
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    dxhat = dy * gain
    dx = inv * (dxhat
                - np.mean(dxhat, axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, xhat


def layernorm_backward_w(dy: np.ndarray, xhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dgain = np.einsum("sbh,sbh->h", dy, xhat)
    dbias = np.einsum("sbh->h", dy)
    return dgain, dbias


# --- causal multi-head attention core (no parameters) ---------------------


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    s, b, h = x.shape
    return x.reshape(s, b, num_heads, h // num_heads)


def _causal_probs(q4: np.ndarray, k4: np.ndarray) -> np.ndarray:
    """Masked softmax probabilities [b,n,s,t]; shared verbatim by forward and
    backward so the backward's recomputed probabilities match bitwise."""
    s = q4.shape[0]
    scale = 1.0 / np.sqrt(q4.shape[-1])
    scores = np.einsum("sbnd,tbnd->bnst", q4, k4) * scale
    scores = scores + np.triu(np.full((s, s), -np.inf), k=1)
    mx = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - mx)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int) -> np.ndarray:
    """Causal scaled-dot-product attention over [s,b,h] inputs."""
    q4, k4, v4 = (_split_heads(t, num_heads) for t in (q, k, v))
    p = _causal_probs(q4, k4)
    ctx = np.einsum("bnst,tbnd->sbnd", p, v4)
    return ctx.reshape(q.shape)


def attention_backward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       d_out: np.ndarray, num_heads: int
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. q, k, v; probabilities recomputed, never stashed."""
    q4, k4, v4 = (_split_heads(t, num_heads) for t in (q, k, v))
    d4 = _split_heads(d_out, num_heads)
    p = _causal_probs(q4, k4)
    scale = 1.0 / np.sqrt(q4.shape[-1])
    dv = np.einsum("bnst,sbnd->tbnd", p, d4)
    dp = np.einsum("sbnd,tbnd->bnst", d4, v4)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = np.einsum("bnst,tbnd->sbnd", ds, k4) * scale
    dk = np.einsum("bnst,sbnd->tbnd", ds, q4) * scale
    return dq.reshape(q.shape), dk.reshape(q.shape), dv.reshape(q.shape)


# --- chunked MLP ----------------------------------------------------------


def mlp_forward(x: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                chunk: int | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two-layer GeLU MLP evaluated in row chunks along the sequence axis.

    Returns (out, m1, g) where m1 is the pre-activation and g the GeLU
    output; both are retained whole for the weight gradients.  A chunk of
    None (or >= s) degenerates to one slab; a chunk that does not divide s
    leaves a short remainder slab.  Row-local math plus full-row weight
    einsums keep every chunk size bitwise-equivalent.
    """
    s = x.shape[0]
    c = s if chunk is None else min(chunk, s)
    m1 = np.empty(x.shape[:2] + (w1.shape[1],), dtype=x.dtype)
    g = np.empty_like(m1)
    out = np.empty(x.shape[:2] + (w2.shape[1],), dtype=x.dtype)
    for a in range(0, s, c):
        sl = slice(a, min(a + c, s))
        m1[sl] = linear(x[sl], w1)
        g[sl] = gelu(m1[sl])
        out[sl] = linear(g[sl], w2)
    return out, m1, g


def mlp_backward_b(d_out: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                   m1: np.ndarray, chunk: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient, chunked like the forward.  Returns (dx, d_m1); d_m1 is
    retained whole so both weight gradients reduce over all rows at once."""
    s = d_out.shape[0]
    c = s if chunk is None else min(chunk, s)
    d_m1 = np.empty_like(m1)
    dx = np.empty(d_out.shape[:2] + (w1.shape[0],), dtype=d_out.dtype)
    for a in range(0, s, c):
        sl = slice(a, min(a + c, s))
        d_m1[sl] = linear_backward_x(d_out[sl], w2) * gelu_grad(m1[sl])
        dx[sl] = linear_backward_x(d_m1[sl], w1)
    return dx, d_m1


def mlp_backward_w(x: np.ndarray, d_m1: np.ndarray, g: np.ndarray,
                   d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return linear_backward_w(x, d_m1), linear_backward_w(g, d_out)
