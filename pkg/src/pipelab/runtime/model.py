"""Model fixtures, the synthetic loss, and the sequential reference run.

The reference pushes one microbatch at a time through all layers and then
straight back, accumulating parameter gradients in ascending microbatch
order.  Any schedule execution, however it interleaves work across stages,
must reproduce these losses and gradients bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import ModelConfig
from .layers import (
    LayerParams,
    attn_backward,
    attn_forward,
    post_backward_b,
    post_backward_w,
    post_forward,
    pre_backward_b,
    pre_backward_w,
    pre_forward,
)

Grads = dict[str, np.ndarray]


def make_layer_params(rng: np.random.Generator, h: int) -> LayerParams:
    # Gains near one, biases near zero, weights ~ 1/sqrt(h): keeps layer
    # outputs O(1) so the mean-square loss is well conditioned for the
    # finite-difference checks.
    def w(n_in: int, n_out: int) -> np.ndarray:
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    return LayerParams(
        ln1_gain=1.0 + 0.1 * rng.standard_normal(h),
        ln1_bias=0.1 * rng.standard_normal(h),
        qkv_weight=w(h, 3 * h),
        o_weight=w(h, h),
        ln2_gain=1.0 + 0.1 * rng.standard_normal(h),
        ln2_bias=0.1 * rng.standard_normal(h),
        mlp_w1=w(h, 4 * h),
        mlp_w2=w(4 * h, h),
    )


def make_model(cfg: ModelConfig, seed: int) -> list[LayerParams]:
    rng = np.random.default_rng(seed)
    return [make_layer_params(rng, cfg.h) for _ in range(cfg.L)]


def make_inputs(cfg: ModelConfig, seed: int) -> list[np.ndarray]:
    """One [s, b, h] array per microbatch."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((cfg.s, cfg.b, cfg.h)) for _ in range(cfg.m)]


def loss_and_grad(z: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared output: a fixed synthetic head so gradients are defined
    without labels."""
    return float(np.mean(z * z)), z * (2.0 / z.size)


def zero_grads(params: list[LayerParams]) -> list[Grads]:
    return [{n: np.zeros_like(getattr(p, n)) for n in p.field_names()}
            for p in params]


def accumulate(total: list[Grads], delta: list[Grads]) -> None:
    # In-place adds, layer by layer; callers must feed microbatches ascending.
    for t, d in zip(total, delta):
        for name, g in d.items():
            t[name] += g


def layer_forward(x: np.ndarray, params: LayerParams, num_heads: int,
                  qkv_in_attention: bool, mlp_chunk: int | None
                  ) -> tuple[np.ndarray, dict]:
    pa, s_pre = pre_forward(x, params, qkv_in_attention)
    ap, s_attn = attn_forward(pa, num_heads, qkv_in_attention)
    out, s_post = post_forward(ap, params, mlp_chunk)
    return out, {"pre": s_pre, "attn": s_attn, "post": s_post}


def layer_backward(d_out: np.ndarray, params: LayerParams, stash: dict,
                   num_heads: int, qkv_in_attention: bool,
                   mlp_chunk: int | None) -> tuple[np.ndarray, Grads]:
    gap, w_post = post_backward_b(d_out, params, stash["post"], mlp_chunk)
    grads = post_backward_w(w_post)
    gpa = attn_backward(gap, stash["attn"], num_heads, qkv_in_attention)
    d_x, w_pre = pre_backward_b(gpa, params, stash["pre"], qkv_in_attention)
    grads.update(pre_backward_w(w_pre))
    return d_x, grads


@dataclass
class OracleResult:
    losses: list[float]               # by microbatch
    param_grads: list[Grads]          # by layer, summed over microbatches


def sequential_oracle(params: list[LayerParams], inputs: list[np.ndarray],
                      num_heads: int, qkv_in_attention: bool = False,
                      mlp_chunk: int | None = None) -> OracleResult:
    losses: list[float] = []
    total = zero_grads(params)
    for x in inputs:
        stashes = []
        for p in params:
            x, st = layer_forward(x, p, num_heads, qkv_in_attention, mlp_chunk)
            stashes.append(st)
        loss, d = loss_and_grad(x)
        losses.append(loss)
        per_mb: list[Grads] = [{} for _ in params]
        for li in range(len(params) - 1, -1, -1):
            d, per_mb[li] = layer_backward(d, params[li], stashes[li],
                                           num_heads, qkv_in_attention, mlp_chunk)
        accumulate(total, per_mb)
    return OracleResult(losses, total)
