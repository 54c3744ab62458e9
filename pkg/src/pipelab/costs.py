"""Per-layer cost model: FLOPs, stashed-activation elements, comm volumes, durations.

A transformer layer is split into three schedulable components:

  pre    layernorm + QKV projection (the projection moves to `attn` when
         qkv_in_attention is set, the weight-transfer variant)
  attn   causal self-attention core (QK^T, softmax, PV)
  post   output projection + residual + layernorm + MLP

FLOPs per microbatch per layer follow the dense-matmul counts (elementwise ops
are ignored, as usual for this kind of accounting):

  op       forward      backward-input   backward-weight
  QKV      6bsh^2       6bsh^2           6bsh^2
  attn     4bhs^2       8bhs^2           0
  O        2bsh^2       2bsh^2           2bsh^2
  MLP      16bsh^2      16bsh^2          16bsh^2

so the layer totals are 4bsh(6h+s) forward, 4bsh(6h+2s) backward-input and
24bsh^2 backward-weight.  The attention core is the only op whose
backward-input doubles its forward and whose backward-weight vanishes; those
ratios are exact at the FLOPs level, which is why duration tables derived here
satisfy the bubble formulas with zero tolerance in both unit and ns mode.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, DeviceSpec, ModelConfig

COMPONENTS = ("pre", "attn", "post")
PASSES = ("fwd", "bwd_b", "bwd_w")

# Comm edge kinds.  pre_attn / attn_post are the helix component boundaries;
# boundary is the classic layer-wise stage cut.
EDGE_PRE_ATTN = "pre_attn"
EDGE_ATTN_POST = "attn_post"
EDGE_BOUNDARY = "boundary"


@dataclass(frozen=True)
class PassFlops:
    fwd: int
    bwd_b: int
    bwd_w: int


@dataclass(frozen=True)
class ComponentCosts:
    """FLOPs per (component, pass) for one layer of one microbatch."""

    pre: PassFlops
    attn: PassFlops
    post: PassFlops
    qkv_in_attention: bool

    def of(self, comp: str) -> PassFlops:
        return getattr(self, comp)


def op_flops(cfg: ModelConfig) -> dict[str, PassFlops]:
    """Raw per-op counts before component attribution."""
    b, s, h = cfg.b, cfg.s, cfg.h
    qkv = 6 * b * s * h * h
    return {
        "qkv": PassFlops(qkv, qkv, qkv),
        "attn": PassFlops(4 * b * h * s * s, 8 * b * h * s * s, 0),
        "o": PassFlops(2 * b * s * h * h, 2 * b * s * h * h, 2 * b * s * h * h),
        "mlp": PassFlops(16 * b * s * h * h, 16 * b * s * h * h, 16 * b * s * h * h),
    }


def component_flops(cfg: ModelConfig, qkv_in_attention: bool = False) -> ComponentCosts:
    ops = op_flops(cfg)

    def _sum(*names: str) -> PassFlops:
        return PassFlops(
            sum(ops[n].fwd for n in names),
            sum(ops[n].bwd_b for n in names),
            sum(ops[n].bwd_w for n in names),
        )

    if qkv_in_attention:
        pre = PassFlops(0, 0, 0)
        attn = _sum("qkv", "attn")
    else:
        pre = ops["qkv"]
        attn = ops["attn"]
    return ComponentCosts(pre=pre, attn=attn, post=_sum("o", "mlp"), qkv_in_attention=qkv_in_attention)


def layer_flops(cfg: ModelConfig) -> PassFlops:
    """Whole-layer totals; independent of the qkv attribution flag."""
    c = component_flops(cfg)
    return PassFlops(
        c.pre.fwd + c.attn.fwd + c.post.fwd,
        c.pre.bwd_b + c.attn.bwd_b + c.post.bwd_b,
        c.pre.bwd_w + c.attn.bwd_w + c.post.bwd_w,
    )


def attention_flops_share(cfg: ModelConfig) -> float:
    """Attention core's share of forward FLOPs: s / (6h + s)."""
    return cfg.s / (6 * cfg.h + cfg.s)


def params_per_layer(h: int) -> int:
    # qkv 3h^2 + o h^2 + mlp 8h^2 + two layernorm gain/bias pairs.
    return 12 * h * h + 4 * h


def activation_elements(cfg: ModelConfig, recompute: bool = False,
                        qkv_in_attention: bool = False) -> dict[str, int]:
    """Stashed elements per (component, layer, microbatch), excluding inputs.

    Full mode totals 16bsh per layer: layernorm input 1 + QKV output 3 for pre
    (attention rounds its softmax bookkeeping into 3bsh, flash-style), and
    O input 1 + layernorm input 1 + two MLP linear inputs 1+4 + GeLU output 4
    for post.  With qkv_in_attention the 3bsh QKV output moves with the op.

    Recompute mode keeps only what regeneration needs: each component-boundary
    input (2bsh around attention, 2bsh at the unit seam) for 4bsh per layer.
    """
    bsh = cfg.tokens * cfg.h
    if recompute:
        # Unit seam input is attributed to the post component that stashes it.
        return {"pre": 0, "attn": 2 * bsh, "post": 2 * bsh}
    if qkv_in_attention:
        return {"pre": 1 * bsh, "attn": 4 * bsh, "post": 11 * bsh}
    return {"pre": 2 * bsh, "attn": 3 * bsh, "post": 11 * bsh}


def layer_activation_elements(cfg: ModelConfig, recompute: bool = False) -> int:
    acts = activation_elements(cfg, recompute=recompute)
    return acts["pre"] + acts["attn"] + acts["post"]


def comm_volume(cfg: ModelConfig, edge: str, qkv_in_attention: bool = False) -> int:
    """Payload elements for one microbatch crossing one edge, either direction.

    Gradient traffic mirrors forward traffic exactly: on pre->attn the forward
    payload with the weight transfer on is ln_out + residual + W_qkv
    (2bsh + 3h^2) and the backward payload is d(ln_out) + d(residual) + dW_qkv,
    the same count.  With it off both directions carry QKV + residual = 4bsh.
    """
    bsh = cfg.tokens * cfg.h
    if edge == EDGE_PRE_ATTN:
        if qkv_in_attention:
            return 2 * bsh + 3 * cfg.h * cfg.h
        return 4 * bsh
    if edge == EDGE_ATTN_POST:
        return 2 * bsh
    if edge == EDGE_BOUNDARY:
        return bsh
    raise ConfigError(f"unknown edge kind {edge!r}")


def qkv_transfer_saves(cfg: ModelConfig) -> bool:
    """Weight transfer shrinks the pre->attn payload iff 3h^2 < 2bsh."""
    return 3 * cfg.h * cfg.h < 2 * cfg.tokens * cfg.h


@dataclass(frozen=True)
class DurationTable:
    """Integer durations per (component, pass), in abstract units or ns."""

    entries: dict[tuple[str, str], int]
    time_unit: str  # "unit" or "ns"

    def of(self, comp: str, pass_: str) -> int:
        return self.entries[(comp, pass_)]

    def comp_totals(self, pass_: str) -> int:
        return sum(self.entries[(c, pass_)] for c in COMPONENTS)

    @staticmethod
    def from_units(t_pre: int, t_attn: int, t_post: int) -> "DurationTable":
        """Abstract-time table; backward follows the exact FLOPs ratios.

        backward-input = forward except attention doubled; backward-weight =
        forward except attention zeroed.
        """
        for t in (t_pre, t_attn, t_post):
            if not isinstance(t, int) or t < 0:
                raise ConfigError("unit durations must be non-negative ints")
        entries = {
            ("pre", "fwd"): t_pre, ("pre", "bwd_b"): t_pre, ("pre", "bwd_w"): t_pre,
            ("attn", "fwd"): t_attn, ("attn", "bwd_b"): 2 * t_attn, ("attn", "bwd_w"): 0,
            ("post", "fwd"): t_post, ("post", "bwd_b"): t_post, ("post", "bwd_w"): t_post,
        }
        return DurationTable(entries=entries, time_unit="unit")

    @staticmethod
    def from_flops(cfg: ModelConfig, device: DeviceSpec,
                   qkv_in_attention: bool = False) -> "DurationTable":
        """Nanosecond table from FLOPs over the per-GPU rate (sp_size-sharded).

        Each op's forward is floored to int ns first; component entries are
        then built from those ints with the exact ratio rules, so identities
        like attn backward-input = 2x attn forward survive the rounding.
        """
        denom = device.compute_rate * cfg.sp_size
        ops = op_flops(cfg)
        ns = {name: (pf.fwd * 10**9) // denom for name, pf in ops.items()}
        qkv, attn, o, mlp = ns["qkv"], ns["attn"], ns["o"], ns["mlp"]
        if qkv_in_attention:
            pre = (0, 0, 0)
            at = (qkv + attn, qkv + 2 * attn, qkv)
        else:
            pre = (qkv, qkv, qkv)
            at = (attn, 2 * attn, 0)
        post = (o + mlp, o + mlp, o + mlp)
        entries = {}
        for comp, trip in (("pre", pre), ("attn", at), ("post", post)):
            for pass_, val in zip(PASSES, trip):
                entries[(comp, pass_)] = val
        return DurationTable(entries=entries, time_unit="ns")


def transfer_ns(volume_elements: int, device: DeviceSpec) -> int:
    """Wire time for a payload, excluding latency, floored to int ns."""
    return (volume_elements * device.bytes_per_element * 10**9) // device.link_bandwidth
