"""Cost-model identities: FLOPs totals, activation counts, comm volumes,
duration-table ratio rules."""

import random

import pytest

from pipelab.config import ConfigError, ModelConfig, device_preset
from pipelab.costs import (
    EDGE_ATTN_POST,
    EDGE_BOUNDARY,
    EDGE_PRE_ATTN,
    DurationTable,
    activation_elements,
    attention_flops_share,
    comm_volume,
    component_flops,
    layer_activation_elements,
    layer_flops,
    op_flops,
    params_per_layer,
    qkv_transfer_saves,
    transfer_ns,
)
from pipelab.runtime import LayerParams, make_layer_params


def _cfg(h, s, b, heads=1, L=1, p=1, m=1):
    return ModelConfig(L=L, h=h, s=s, b=b, num_heads=heads, p=p, m=m)


def _random_cfg(rng):
    heads = rng.choice([1, 2, 4])
    h = heads * 2 * rng.randint(1, 64)
    return _cfg(h=h, s=rng.randint(1, 512), b=rng.randint(1, 8), heads=heads)


def test_op_table_one_config():
    # Spelled out once so a typo in the formulas can't hide behind itself.
    cfg = _cfg(h=4, s=6, b=3)
    b, s, h = 3, 6, 4
    ops = op_flops(cfg)
    assert ops["qkv"].fwd == ops["qkv"].bwd_b == ops["qkv"].bwd_w == 6 * b * s * h * h
    assert ops["attn"].fwd == 4 * b * h * s * s
    assert ops["attn"].bwd_b == 8 * b * h * s * s
    assert ops["attn"].bwd_w == 0
    assert ops["o"].fwd == 2 * b * s * h * h
    assert ops["mlp"].fwd == 16 * b * s * h * h


def test_layer_totals_random():
    rng = random.Random(0xC057)
    for _ in range(300):
        cfg = _random_cfg(rng)
        b, s, h = cfg.b, cfg.s, cfg.h
        tot = layer_flops(cfg)
        assert tot.fwd == 4 * b * s * h * (6 * h + s)
        assert tot.bwd_b == 4 * b * s * h * (6 * h + 2 * s)
        assert tot.bwd_w == 24 * b * s * h * h


def test_component_attribution_moves_qkv_only():
    rng = random.Random(7)
    for _ in range(50):
        cfg = _random_cfg(rng)
        off = component_flops(cfg, qkv_in_attention=False)
        on = component_flops(cfg, qkv_in_attention=True)
        qkv = op_flops(cfg)["qkv"]
        assert on.pre.fwd == on.pre.bwd_b == on.pre.bwd_w == 0
        assert on.attn.fwd == off.attn.fwd + qkv.fwd
        assert on.attn.bwd_w == qkv.bwd_w
        assert on.post == off.post
        # whole-layer totals do not depend on the flag
        for pass_ in ("fwd", "bwd_b", "bwd_w"):
            total_off = sum(getattr(getattr(off, c), pass_) for c in ("pre", "attn", "post"))
            total_on = sum(getattr(getattr(on, c), pass_) for c in ("pre", "attn", "post"))
            assert total_off == total_on


def test_attention_share_closed_form():
    rng = random.Random(99)
    for _ in range(50):
        cfg = _random_cfg(rng)
        share = attention_flops_share(cfg)
        assert share == pytest.approx(cfg.s / (6 * cfg.h + cfg.s))
        comp = component_flops(cfg)
        assert share == pytest.approx(comp.attn.fwd / layer_flops(cfg).fwd)


def test_activation_element_breakdown():
    cfg = _cfg(h=8, s=16, b=2)
    bsh = 2 * 16 * 8
    assert activation_elements(cfg) == {"pre": 2 * bsh, "attn": 3 * bsh, "post": 11 * bsh}
    assert activation_elements(cfg, qkv_in_attention=True) == {
        "pre": 1 * bsh, "attn": 4 * bsh, "post": 11 * bsh}
    assert activation_elements(cfg, recompute=True) == {
        "pre": 0, "attn": 2 * bsh, "post": 2 * bsh}
    assert layer_activation_elements(cfg) == 16 * bsh
    assert layer_activation_elements(cfg, recompute=True) == 4 * bsh


def test_comm_volumes_random():
    rng = random.Random(0x5EED)
    for _ in range(300):
        cfg = _random_cfg(rng)
        bsh = cfg.b * cfg.s * cfg.h
        assert comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention=True) == 2 * bsh + 3 * cfg.h * cfg.h
        assert comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention=False) == 4 * bsh
        assert comm_volume(cfg, EDGE_ATTN_POST) == 2 * bsh
        assert comm_volume(cfg, EDGE_BOUNDARY) == bsh
    with pytest.raises(ConfigError):
        comm_volume(_cfg(h=4, s=4, b=1), "sideways")


def test_qkv_transfer_saves_boundary():
    # saves iff 3h^2 < 2bsh, i.e. weight smaller than the QKV tensor it avoids
    assert qkv_transfer_saves(_cfg(h=4, s=100, b=1))
    assert not qkv_transfer_saves(_cfg(h=100, s=4, b=1))
    h, s, b = 6, 9, 1          # 3h^2 = 108 == 2bsh = 108: tie is "no saving"
    assert 3 * h * h == 2 * b * s * h
    assert not qkv_transfer_saves(_cfg(h=h, s=s, b=b))


def test_params_per_layer_matches_runtime_params():
    import numpy as np
    rng = np.random.default_rng(3)
    for h in (2, 4, 8, 16):
        lp: LayerParams = make_layer_params(rng, h)
        assert lp.element_count() == params_per_layer(h) == 12 * h * h + 4 * h


def test_from_units_ratio_rules():
    t = DurationTable.from_units(1, 3, 2)
    assert t.time_unit == "unit"
    assert t.of("pre", "fwd") == t.of("pre", "bwd_b") == t.of("pre", "bwd_w") == 1
    assert t.of("attn", "fwd") == 3
    assert t.of("attn", "bwd_b") == 6
    assert t.of("attn", "bwd_w") == 0
    assert t.of("post", "fwd") == t.of("post", "bwd_b") == t.of("post", "bwd_w") == 2
    assert t.comp_totals("fwd") == 6
    assert t.comp_totals("bwd_b") == 9
    assert t.comp_totals("bwd_w") == 3
    with pytest.raises(ConfigError):
        DurationTable.from_units(1, -1, 2)
    with pytest.raises(ConfigError):
        DurationTable.from_units(1.5, 1, 1)


def test_from_flops_keeps_exact_ratios():
    dev = device_preset("h20_like")
    rng = random.Random(11)
    for _ in range(40):
        cfg = _random_cfg(rng)
        t = DurationTable.from_flops(cfg, dev)
        assert t.time_unit == "ns"
        assert t.of("attn", "bwd_b") == 2 * t.of("attn", "fwd")
        assert t.of("attn", "bwd_w") == 0
        for comp in ("pre", "post"):
            assert t.of(comp, "fwd") == t.of(comp, "bwd_b") == t.of(comp, "bwd_w")
        ton = DurationTable.from_flops(cfg, dev, qkv_in_attention=True)
        assert ton.of("pre", "fwd") == 0
        qkv = t.of("pre", "fwd")   # pre carries exactly the QKV projection
        attn = t.of("attn", "fwd")
        assert ton.of("attn", "fwd") == qkv + attn
        assert ton.of("attn", "bwd_b") == qkv + 2 * attn
        assert ton.of("attn", "bwd_w") == qkv


def test_from_flops_sp_divides_time():
    dev = device_preset("h20_like")
    cfg1 = ModelConfig(L=2, h=512, s=4096, b=1, num_heads=4, p=1, m=1, sp_size=1)
    cfg8 = cfg1.with_(sp_size=8)
    t1 = DurationTable.from_flops(cfg1, dev)
    t8 = DurationTable.from_flops(cfg8, dev)
    # single-op components divide exactly (floor(floor(x/r)/8) == floor(x/8r));
    # post sums two per-op floors, so it can undershoot by one
    assert t8.of("pre", "fwd") == t1.of("pre", "fwd") // 8
    assert t8.of("attn", "fwd") == t1.of("attn", "fwd") // 8
    assert t1.of("post", "fwd") // 8 - 1 <= t8.of("post", "fwd") <= t1.of("post", "fwd") // 8


def test_transfer_ns_floor():
    dev = device_preset("h20_like")
    assert transfer_ns(0, dev) == 0
    one = transfer_ns(1, dev)
    big = transfer_ns(10**6, dev)
    # integer floor, monotone, and linear up to rounding
    assert big >= 10**6 * one
    assert transfer_ns(2 * 10**6, dev) >= big * 2 - 1
