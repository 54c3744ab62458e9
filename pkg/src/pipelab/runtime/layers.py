"""Transformer layer split into the pre / attention / post components.

The layer is pre-LN:

    pre:   ln1(x)                     (+ the QKV projection when it stays here)
    attn:  causal multi-head attention (+ the QKV projection when moved here)
    post:  O projection, residual add, ln2, chunked GeLU MLP, residual add

`qkv_in_attention` picks where the QKV projection runs.  Moving it into the
attention component shrinks the pre->attn payload from 4bsh to 2bsh + 3h^2
(the normalized input, the residual, and a copy of the QKV weight); the
projection itself is the same einsum on the same operands either way, so the
numbers do not change, only the placement.

Payloads and stashes are plain dicts of float64 arrays.  Element counts per
layer and microbatch match the bookkeeping used by the schedule analysis:
stashes hold 1/4/11 bsh for pre/attn/post when the projection rides with
attention (2/3/11 otherwise), and `reduce_stash` cuts that to the recompute
retention of 4bsh + 3h^2 total: the pre input, the attention input plus the
carried weight copy, and the post input pair.  `regenerate_stash` rebuilds
the full stash from the retention with the forward's own code so recompute
execution is bitwise-transparent.

Every backward is split into a B half (input gradients, returns a context)
and a W half (weight gradients from that context).  Calling W directly after
B is the fused backward; deferring W is the split backward.  Both run the
identical einsums, which is what makes the two modes produce identical
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .mathops import (
    attention,
    attention_backward,
    layernorm,
    layernorm_backward_b,
    layernorm_backward_w,
    linear,
    linear_backward_w,
    linear_backward_x,
    mlp_backward_b,
    mlp_backward_w,
    mlp_forward,
)

Arrays = dict[str, np.ndarray]


@dataclass
class LayerParams:
    """Weights of one layer; linear layers carry no bias.

    Element count is 12h^2 + 4h: 3h^2 QKV, h^2 output projection, 8h^2 MLP,
    and four h-vectors for the two layernorms.
    """

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    qkv_weight: np.ndarray   # [h, 3h]
    o_weight: np.ndarray     # [h, h]
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_w1: np.ndarray       # [h, 4h]
    mlp_w2: np.ndarray       # [4h, h]

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self))

    def element_count(self) -> int:
        return sum(getattr(self, n).size for n in self.field_names())

    def as_dict(self) -> Arrays:
        return {n: getattr(self, n) for n in self.field_names()}


# Parameter fields by owning component; attention owns none (its QKV weight
# copy travels in the payload).
PRE_FIELDS = ("ln1_gain", "ln1_bias", "qkv_weight")
POST_FIELDS = ("o_weight", "ln2_gain", "ln2_bias", "mlp_w1", "mlp_w2")


def payload_elements(payload: Arrays) -> int:
    return sum(int(a.size) for a in payload.values())


# --- forward --------------------------------------------------------------


def pre_forward(x: np.ndarray, params: LayerParams,
                qkv_in_attention: bool) -> tuple[Arrays, Arrays]:
    """Returns (payload for the attention stage, full-mode stash)."""
    ln_out = layernorm(x, params.ln1_gain, params.ln1_bias)
    if qkv_in_attention:
        payload = {"ln_out": ln_out, "residual": x, "qkv_weight": params.qkv_weight}
        stash = {"x": x}
    else:
        qkv = linear(ln_out, params.qkv_weight)
        payload = {"qkv": qkv, "residual": x}
        stash = {"x": x, "ln_out": ln_out}
    return payload, stash


def attn_forward(payload: Arrays, num_heads: int,
                 qkv_in_attention: bool) -> tuple[Arrays, Arrays]:
    if qkv_in_attention:
        qkv = linear(payload["ln_out"], payload["qkv_weight"])
        stash = {"ln_out": payload["ln_out"], "qkv": qkv,
                 "qkv_weight": payload["qkv_weight"]}
    else:
        qkv = payload["qkv"]
        stash = {"qkv": qkv}
    h = qkv.shape[-1] // 3
    attn_out = attention(qkv[..., :h], qkv[..., h:2 * h], qkv[..., 2 * h:], num_heads)
    return {"attn_out": attn_out, "residual": payload["residual"]}, stash


def _post_trunk(attn_out: np.ndarray, residual: np.ndarray, params: LayerParams,
                mlp_chunk: int | None) -> Arrays:
    o_out = linear(attn_out, params.o_weight)
    x2 = residual + o_out
    ln2_out = layernorm(x2, params.ln2_gain, params.ln2_bias)
    m2, m1, g = mlp_forward(ln2_out, params.mlp_w1, params.mlp_w2, mlp_chunk)
    return {"attn_out": attn_out, "x2": x2, "ln2_out": ln2_out,
            "m1": m1, "g": g, "m2": m2}


def post_forward(payload: Arrays, params: LayerParams,
                 mlp_chunk: int | None) -> tuple[np.ndarray, Arrays]:
    """Returns (layer output, full-mode stash of 11bsh elements)."""
    t = _post_trunk(payload["attn_out"], payload["residual"], params, mlp_chunk)
    out = t["x2"] + t.pop("m2")
    return out, t


# --- backward -------------------------------------------------------------


def post_backward_b(d_out: np.ndarray, params: LayerParams, stash: Arrays,
                    mlp_chunk: int | None) -> tuple[Arrays, Arrays]:
    """Input-gradient half; returns (gradient payload toward attention, wctx)."""
    d_ln2, d_m1 = mlp_backward_b(d_out, params.mlp_w1, params.mlp_w2,
                                 stash["m1"], mlp_chunk)
    d_x2_ln, xhat2 = layernorm_backward_b(d_ln2, stash["x2"], params.ln2_gain)
    d_x2 = d_out + d_x2_ln          # residual add around the MLP
    d_attn_out = linear_backward_x(d_x2, params.o_weight)
    wctx = {"ln2_out": stash["ln2_out"], "d_m1": d_m1, "g": stash["g"],
            "d_out": d_out, "xhat2": xhat2, "d_ln2": d_ln2,
            "attn_out": stash["attn_out"], "d_o": d_x2}
    return {"d_attn_out": d_attn_out, "d_residual": d_x2}, wctx


def post_backward_w(wctx: Arrays) -> Arrays:
    dw1, dw2 = mlp_backward_w(wctx["ln2_out"], wctx["d_m1"], wctx["g"], wctx["d_out"])
    dgain, dbias = layernorm_backward_w(wctx["d_ln2"], wctx["xhat2"])
    dwo = linear_backward_w(wctx["attn_out"], wctx["d_o"])
    return {"o_weight": dwo, "ln2_gain": dgain, "ln2_bias": dbias,
            "mlp_w1": dw1, "mlp_w2": dw2}


def attn_backward(payload: Arrays, stash: Arrays, num_heads: int,
                  qkv_in_attention: bool) -> Arrays:
    """Fused backward of the attention component (it owns no parameters, so
    there is no W half).  With the QKV projection here, its weight gradient is
    computed now and shipped inside the returned payload; the probabilities
    are always recomputed from q, k, v."""
    qkv = stash.get("qkv")
    if qkv is None:
        # Recompute retention kept only the normalized input and the weight.
        qkv = linear(stash["ln_out"], stash["qkv_weight"])
    h = qkv.shape[-1] // 3
    dq, dk, dv = attention_backward(qkv[..., :h], qkv[..., h:2 * h],
                                    qkv[..., 2 * h:], payload["d_attn_out"], num_heads)
    d_qkv = np.concatenate([dq, dk, dv], axis=-1)
    if not qkv_in_attention:
        return {"d_qkv": d_qkv, "d_residual": payload["d_residual"]}
    d_ln_out = linear_backward_x(d_qkv, stash["qkv_weight"])
    d_w = linear_backward_w(stash["ln_out"], d_qkv)
    return {"d_ln_out": d_ln_out, "d_residual": payload["d_residual"],
            "d_qkv_weight": d_w}


def pre_backward_b(payload: Arrays, params: LayerParams, stash: Arrays,
                   qkv_in_attention: bool) -> tuple[np.ndarray, Arrays]:
    """Returns (gradient w.r.t. the layer input, wctx)."""
    if qkv_in_attention:
        d_ln_out = payload["d_ln_out"]
        wctx: Arrays = {"d_qkv_weight": payload["d_qkv_weight"]}
    else:
        d_ln_out = linear_backward_x(payload["d_qkv"], params.qkv_weight)
        wctx = {"ln_out": stash["ln_out"], "d_qkv": payload["d_qkv"]}
    d_x_ln, xhat1 = layernorm_backward_b(d_ln_out, stash["x"], params.ln1_gain)
    wctx.update({"xhat1": xhat1, "d_ln1": d_ln_out})
    return d_x_ln + payload["d_residual"], wctx


def pre_backward_w(wctx: Arrays) -> Arrays:
    dgain, dbias = layernorm_backward_w(wctx["d_ln1"], wctx["xhat1"])
    if "d_qkv_weight" in wctx:
        d_w = wctx["d_qkv_weight"]
    else:
        d_w = linear_backward_w(wctx["ln_out"], wctx["d_qkv"])
    return {"ln1_gain": dgain, "ln1_bias": dbias, "qkv_weight": d_w}


# --- recompute stash management -------------------------------------------


def reduce_stash(comp: str, stash: Arrays, payload: Arrays,
                 qkv_in_attention: bool) -> Arrays:
    """Recompute-mode retention for one component.

    pre keeps its raw input; attn keeps its normalized input plus the weight
    copy (the projection is redone in its backward) or, with the projection
    upstream, the projected q/k/v it cannot rebuild; post keeps its incoming
    payload pair.  Totals 4bsh + 3h^2 per layer and microbatch in the
    projection-in-attention layout.
    """
    if comp == "pre":
        return {"x": stash["x"]}
    if comp == "attn":
        if qkv_in_attention:
            return {"ln_out": stash["ln_out"], "qkv_weight": stash["qkv_weight"]}
        return {"qkv": stash["qkv"]}
    if comp == "post":
        return {"attn_out": payload["attn_out"], "residual": payload["residual"]}
    raise ValueError(f"no recompute retention for component {comp!r}")


def regenerate_stash(comp: str, kept: Arrays, params: LayerParams,
                     qkv_in_attention: bool, mlp_chunk: int | None) -> Arrays:
    """Rebuild the full-mode stash from the retention (the RECOMPUTE_FWD
    task).  Attention is regenerated lazily inside its backward instead."""
    if comp == "pre":
        if qkv_in_attention:
            return {"x": kept["x"]}
        ln_out = layernorm(kept["x"], params.ln1_gain, params.ln1_bias)
        return {"x": kept["x"], "ln_out": ln_out}
    if comp == "post":
        t = _post_trunk(kept["attn_out"], kept["residual"], params, mlp_chunk)
        t.pop("m2")
        return t
    raise ValueError(f"component {comp!r} is never recomputed")
