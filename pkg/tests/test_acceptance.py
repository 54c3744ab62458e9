"""Headline guarantees of the laboratory, one test per claim.

Every promise the package makes is restated here as a single end-to-end test
with its tolerance pinned in the assertions: simulation reproduces the
closed-form bubble and memory expressions exactly (tolerance 0); the
long-sequence memory wall appears at the right stages and sequence lengths;
two-fold interleaving hides communication up to one attention time and not
at twice that; all five schedule variants train the toy transformer bitwise
identically to the sequential reference; analytic gradients agree with
central finite differences to 1e-6; MLP chunking and recomputation never
change a single bit; the cost model's integer identities hold over a
thousand random shapes; and attention's share of forward time overtakes the
rest of the layer as sequences grow.

Run `pytest tests/test_acceptance.py -v` for one pass/fail line per
guarantee.
"""

import random
import time

import numpy as np

from pipelab.analytic import activation_bytes_by_stage, bubble_time
from pipelab.config import ModelConfig, device_preset
from pipelab.costs import (
    EDGE_ATTN_POST,
    EDGE_BOUNDARY,
    EDGE_PRE_ATTN,
    DurationTable,
    comm_volume,
    layer_activation_elements,
    layer_flops,
)
from pipelab.engine import CommModel
from pipelab.generators import METHODS, generate
from pipelab.runtime import (
    execute_schedule,
    loss_and_grad,
    make_inputs,
    make_model,
    sequential_oracle,
)
from pipelab.runtime.model import layer_backward, layer_forward
from pipelab.simulate import overlap_report, simulate

UNITS = (1, 3, 2)
GRID = [(p, k * p) for p in (2, 4, 8) for k in (1, 2, 4)]
TOY = ModelConfig(L=4, h=8, s=8, b=2, num_heads=2, p=2, m=4)


def _grid_cfg(p, L):
    return ModelConfig(L=L, h=8, s=8, b=1, num_heads=2, p=p, m=2 * p)


def _toy_fixtures():
    return make_model(TOY, seed=0), make_inputs(TOY, seed=1)


def _grads_equal(got, want, L):
    return all(np.array_equal(got[l][n], want[l][n])
               for l in range(L) for n in want[l])


def test_bubble_formulas_match_simulation_exactly():
    # (p, L) over {2,4,8} x {p,2p,4p}, m = 2p, unit times (1,3,2), zero comm:
    # every stage's simulated idle time equals the closed form, tolerance 0.
    t0 = time.monotonic()
    table = DurationTable.from_units(*UNITS)
    for p, L in GRID:
        cfg = _grid_cfg(p, L)
        for method in METHODS:
            sim = simulate(generate(method, cfg, table), table, CommModel.zero())
            want = bubble_time(method, p, L, *UNITS)
            assert sim.metrics.per_stage_bubble == [want] * p, (method, p, L)
    assert time.monotonic() - t0 < 10.0


def test_memory_formulas_match_simulation_exactly():
    # Same sweep, tolerance 0.  1F1B is exact per stage; the backward-split
    # schedule stays under one full model's activations with the cap attained
    # at stage 0; recomputation retains a uniform footprint on every stage.
    table = DurationTable.from_units(*UNITS)
    for p, L in GRID:
        cfg = _grid_cfg(p, L)
        act = 16 * cfg.b * cfg.s * cfg.h

        sim = simulate(generate("1f1b", cfg, table), table, CommModel.zero())
        want = [act * (L // p) * (p - i) for i in range(p)]
        assert sim.metrics.per_stage_peak_activation == want, (p, L)

        sim = simulate(generate("zb1p", cfg, table), table, CommModel.zero())
        peaks = sim.metrics.per_stage_peak_activation
        cap = act * L
        assert all(x <= cap for x in peaks), (p, L)
        assert peaks[0] == cap, (p, L)

        sim = simulate(generate("helix_twofold_rc", cfg, table), table,
                       CommModel.zero())
        keep = 4 * cfg.b * cfg.s * cfg.h * cfg.m * L // p
        assert sim.metrics.per_stage_peak_activation == [keep] * p, (p, L)


def test_long_sequence_memory_wall():
    # 40 layers, h=5120, 8 stages, fp16, activations sharded 8-way within a
    # stage: under 1F1B stage 0 blows an 80 GiB budget at s=131072 but not at
    # s=32768, and stages 2+ never do at any tested length.  The wall hits
    # the first two stages, in depth order.
    budget = 80 * (1 << 30)

    def rows(s):
        cfg = ModelConfig(L=40, h=5120, s=s, b=1, num_heads=40, p=8, m=8,
                          sp_size=8)
        return activation_bytes_by_stage("1f1b", cfg)   # fp16 default

    for s, first_over in ((32768, False), (65536, False), (131072, True)):
        r = rows(s)
        assert (r[0] > budget) is first_over, s
        assert all(x <= budget for x in r[2:]), s
    assert rows(131072)[1] > budget


def test_twofold_overlap_dichotomy():
    # With per-hop cost <= t_attn the two-fold schedule's steady state never
    # waits on a transfer; at 2 * t_attn it does, and the makespan strictly
    # exceeds the covered case.  Unit mode, tolerance 0.
    t_attn = 3
    table = DurationTable.from_units(2, t_attn, 2)
    for p in (2, 4, 8):
        cfg = ModelConfig(L=p, h=16, s=24, b=1, num_heads=4, p=p, m=2 * p)
        vol = comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention=False)
        sched = generate("helix_twofold", cfg, table, qkv_in_attention=False)

        def run(cost):
            comm = (CommModel.zero() if cost == 0
                    else CommModel.uniform(cost, ref_volume=vol))
            return simulate(sched, table, comm)

        covered = [run(c) for c in (0, 1, 2, t_attn)]
        for sim in covered:
            assert overlap_report(sim).steady_wait == 0, p
        exposed = run(2 * t_attn)
        assert overlap_report(exposed).steady_wait > 0, p
        assert exposed.metrics.makespan > covered[-1].metrics.makespan, p


def test_every_schedule_trains_identically_to_sequential():
    # L=4, h=8, s=8, b=2, heads=2, p=2, m=4, seeded params: losses and every
    # parameter gradient bitwise equal to the sequential reference for all
    # five schedule variants.
    t0 = time.monotonic()
    params, inputs = _toy_fixtures()
    ref = sequential_oracle(params, inputs, TOY.num_heads)
    table = DurationTable.from_units(*UNITS)
    for method in METHODS:
        res = execute_schedule(generate(method, TOY, table), params, inputs)
        assert res.losses == ref.losses, method
        assert _grads_equal(res.param_grads, ref.param_grads, TOY.L), method
    assert time.monotonic() - t0 < 60.0


def test_gradients_match_finite_differences():
    # One layer, s=4, h=8; central differences at eps=1e-6 over six sampled
    # entries of every parameter class; relative error <= 1e-6.
    cfg = ModelConfig(L=1, h=8, s=4, b=2, num_heads=2, p=1, m=1)
    lp = make_model(cfg, seed=11)[0]
    x = make_inputs(cfg, seed=12)[0]

    def loss_of():
        z, _ = layer_forward(x, lp, cfg.num_heads, False, None)
        return loss_and_grad(z)[0]

    z, stash = layer_forward(x, lp, cfg.num_heads, False, None)
    _, dz = loss_and_grad(z)
    _, grads = layer_backward(dz, lp, stash, cfg.num_heads, False, None)

    eps = 1e-6
    rng = np.random.default_rng(0)
    worst = 0.0
    for name in sorted(grads):
        flat = getattr(lp, name).reshape(-1)
        for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = loss_of()
            flat[idx] = keep - eps
            dn = loss_of()
            flat[idx] = keep
            num = (up - dn) / (2 * eps)
            ana = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    assert worst <= 1e-6, worst


def test_chunking_and_recompute_change_nothing():
    # Outputs and gradients are bitwise invariant to the MLP chunk size over
    # c in {1, 3, s} and to the recompute toggle, in both the sequential
    # reference and the schedule executor.
    params, inputs = _toy_fixtures()
    ref = sequential_oracle(params, inputs, TOY.num_heads)
    for chunk in (1, 3, TOY.s):
        got = sequential_oracle(params, inputs, TOY.num_heads, mlp_chunk=chunk)
        assert got.losses == ref.losses, chunk
        assert _grads_equal(got.param_grads, ref.param_grads, TOY.L), chunk

    table = DurationTable.from_units(*UNITS)
    plain = execute_schedule(generate("helix_twofold", TOY, table),
                             params, inputs)
    for chunk in (None, 1, 3, TOY.s):
        rc = execute_schedule(generate("helix_twofold_rc", TOY, table),
                              params, inputs, mlp_chunk=chunk)
        assert rc.losses == plain.losses == ref.losses, chunk
        assert _grads_equal(rc.param_grads, plain.param_grads, TOY.L), chunk


def test_cost_model_integer_identities():
    # 1000 random shapes: per-layer totals 4bsh(6h+s) forward, 4bsh(6h+2s)
    # input-gradient, 24bsh^2 weight-gradient, 16bsh stashed elements; hop
    # volumes 2bsh+3h^2 into attention, 2bsh out, bsh at layer boundaries.
    # Exact integer equality throughout.
    rng = random.Random(0xACCE97)
    for _ in range(1000):
        heads = rng.choice([1, 2, 4, 8])
        h = heads * 2 * rng.randint(1, 64)
        cfg = ModelConfig(L=1, h=h, s=rng.randint(1, 512), b=rng.randint(1, 8),
                          num_heads=heads, p=1, m=1)
        b, s = cfg.b, cfg.s
        tot = layer_flops(cfg)
        assert tot.fwd == 4 * b * s * h * (6 * h + s)
        assert tot.bwd_b == 4 * b * s * h * (6 * h + 2 * s)
        assert tot.bwd_w == 24 * b * s * h * h
        assert layer_activation_elements(cfg) == 16 * b * s * h
        assert comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention=True) \
            == 2 * b * s * h + 3 * h * h
        assert comm_volume(cfg, EDGE_ATTN_POST) == 2 * b * s * h
        assert comm_volume(cfg, EDGE_BOUNDARY) == b * s * h


def test_attention_dominates_forward_time_as_sequences_grow():
    # Flops mode on the H20-like spec, h=5120: attention's share of forward
    # layer time is strictly increasing over s in {8k..128k} and crosses 50%
    # within one sweep step of 64k.
    device = device_preset("h20_like")
    sweep = [8192, 16384, 32768, 65536, 131072]
    shares = []
    for s in sweep:
        cfg = ModelConfig(L=40, h=5120, s=s, b=1, num_heads=40, p=8, m=8)
        t = DurationTable.from_flops(cfg, device, qkv_in_attention=False)
        fwd = [t.of(c, "fwd") for c in ("pre", "attn", "post")]
        shares.append(t.of("attn", "fwd") / sum(fwd))
    assert all(y > x for x, y in zip(shares, shares[1:])), shares
    assert shares[3] > 0.5, shares                   # exceeded by s=65536
    crossing = next(s for s, f in zip(sweep, shares) if f > 0.5)
    assert crossing in (32768, 65536, 131072), crossing
