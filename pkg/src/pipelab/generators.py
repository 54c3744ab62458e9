"""Schedule generators: 1F1B, ZB1P, helix naive FILO, helix two-fold, recompute.

The layer-wise baselines (1F1B, ZB1P) cut the model between layers: stage st
owns L/p whole layers, tasks are per-stage "chunk" tasks, and boundaries carry
bsh elements.  The helix schedules cut at component boundaries using the
attention-parallel partition and drain microbatches first-in-last-out: all m
forwards run first (in loops of p, or 2p for two-fold), then all backwards in
the exact reverse order.

Backward granularity differs on purpose.  ZB1P is the only schedule that
splits the backward into a B task (input gradients) and a deferrable W task
(weight gradients); that split is what lets it fill bubbles.  1F1B and the
helix schedules use fused backward tasks computing both gradients at once, so
every backward task costs exactly twice its forward counterpart and gradients
leave a stage only when its whole backward block is done, which is what the
closed-form bubble accounting assumes.

1F1B's per-stage order is closed-form.  ZB1P reuses the 1F1B forward/backward
order as a backbone and fills idle gaps with the deferred W tasks, subject to
an activation-memory cap; the fill policy is greedy: run the next backbone
task if it is ready and within the cap, else a pending W, else wait.

Helix forward orders come from a deterministic list-scheduling pass over the
forward subgraph with lockstep priorities: within a loop, microbatches sweep
layer by layer (pre-attention serialized on the owning stage, attention fanned
out one per stage, post-attention gathered), and the next loop's work slots
into the gaps.  The backward order is the per-stage reverse of the realized
forward order, which makes the backward phase an exact factor-two mirror of
the forward phase and pins the bubble at three times the forward ramp.

The two-fold variant interleaves pairs of microbatches (i, i+p) whose
attention placements coincide, so one batch's transfer can hide behind the
partner's attention compute.  A pair advances like one virtual microbatch of
doubled duration; to make replay reproduce that timing the generator adds
pair edges: the pair member scheduled first repeats its cross-task deps
against the partner, and the second member chains after the first.  Task
multisets are unchanged, only edges.
"""

from __future__ import annotations

from dataclasses import replace

from .config import ConfigError, ModelConfig
from .costs import (
    EDGE_ATTN_POST,
    EDGE_BOUNDARY,
    EDGE_PRE_ATTN,
    DurationTable,
    activation_elements,
    comm_volume,
    layer_activation_elements,
)
from .engine import CommModel, PrioritySelector, execute, make_duration_fn
from .partition import attn_stage, check_helix_config, post_stage, pre_stage
from .schedule import BWD_B, BWD_W, FWD, RECOMPUTE, RECV, SEND, Schedule, Task

METHOD_1F1B = "1f1b"
METHOD_ZB1P = "zb1p"
METHOD_HELIX_NAIVE = "helix_naive"
METHOD_HELIX_TWOFOLD = "helix_twofold"
METHOD_HELIX_TWOFOLD_RC = "helix_twofold_rc"
METHODS = (METHOD_1F1B, METHOD_ZB1P, METHOD_HELIX_NAIVE,
           METHOD_HELIX_TWOFOLD, METHOD_HELIX_TWOFOLD_RC)

FUSED, SPLIT = "fused", "split"


def _base_meta(cfg: ModelConfig, qkv: bool, fold: int, backward: str) -> dict[str, int | str]:
    return {
        "p": cfg.p, "m": cfg.m, "L": cfg.L, "h": cfg.h, "s": cfg.s, "b": cfg.b,
        "heads": cfg.num_heads, "sp": cfg.sp_size,
        "fold": fold, "qkv": int(qkv), "recompute": 0, "backward": backward,
    }


def meta_config(sched: Schedule) -> ModelConfig:
    m = sched.meta
    return ModelConfig(L=int(m["L"]), h=int(m["h"]), s=int(m["s"]), b=int(m["b"]),
                       num_heads=int(m["heads"]), p=int(m["p"]), m=int(m["m"]),
                       sp_size=int(m["sp"]))


def warmup_mbs(sched: Schedule) -> set[int]:
    """Microbatches in the pipeline-fill transient (excluded from steady-state
    overlap accounting): the first slot's pair for two-fold, microbatch 0
    otherwise."""
    fold = int(sched.meta.get("fold", 1))
    p = int(sched.meta["p"])
    return {0, p} if fold == 2 else {0}


def comm_hidden(kind: str, mb: int, p: int) -> bool:
    """Whether a two-fold schedule expects this task's inbound transfer to
    hide behind its pair sibling's execution.  The member executed first in a
    pair exposes its own transfer (nothing precedes it within the pair); the
    second member's transfer rides behind the first's compute.  Forwards run
    the low microbatch first; backwards reverse that."""
    fpos = (mb % (2 * p)) // p
    if kind == FWD:
        return fpos == 1
    return fpos == 0


# --- layer-wise baselines -------------------------------------------------


def _layerwise_tasks(cfg: ModelConfig, split_w: bool) -> dict[str, Task]:
    p, m, span = cfg.p, cfg.m, cfg.L // cfg.p
    vol = comm_volume(cfg, EDGE_BOUNDARY)
    alloc = layer_activation_elements(cfg) * span
    tasks: dict[str, Task] = {}

    def add(t: Task) -> None:
        tasks[t.id] = t

    for i in range(m):
        for st in range(p):
            first_layer = st * span
            f_deps: tuple[str, ...] = ()
            if st > 0:
                add(Task(f"sn.fb.s{st-1}.m{i}", st - 1, SEND, "chunk", i, first_layer - span,
                         span, (f"f.s{st-1}.m{i}",), EDGE_BOUNDARY, st, vol))
                add(Task(f"rv.fb.s{st}.m{i}", st, RECV, "chunk", i, first_layer, span,
                         (f"sn.fb.s{st-1}.m{i}",), EDGE_BOUNDARY, st - 1, vol))
                f_deps = (f"rv.fb.s{st}.m{i}",)
            add(Task(f"f.s{st}.m{i}", st, FWD, "chunk", i, first_layer, span,
                     f_deps, mem_delta=alloc))
        for st in range(p - 1, -1, -1):
            first_layer = st * span
            b_deps = [f"f.s{st}.m{i}"]
            if st < p - 1:
                add(Task(f"sn.gb.s{st+1}.m{i}", st + 1, SEND, "chunk", i, first_layer + span,
                         span, (f"b.s{st+1}.m{i}",), EDGE_BOUNDARY, st, vol))
                add(Task(f"rv.gb.s{st}.m{i}", st, RECV, "chunk", i, first_layer, span,
                         (f"sn.gb.s{st+1}.m{i}",), EDGE_BOUNDARY, st + 1, vol))
                b_deps.insert(0, f"rv.gb.s{st}.m{i}")
            add(Task(f"b.s{st}.m{i}", st, BWD_B, "chunk", i, first_layer, span,
                     tuple(b_deps), mem_delta=0 if split_w else -alloc))
            if split_w:
                add(Task(f"w.s{st}.m{i}", st, BWD_W, "chunk", i, first_layer, span,
                         (f"b.s{st}.m{i}",), mem_delta=-alloc))
    return tasks


def _check_layerwise(cfg: ModelConfig) -> None:
    if cfg.L % cfg.p != 0:
        raise ConfigError(f"L={cfg.L} must be divisible by p={cfg.p}")
    if cfg.m < cfg.p:
        raise ConfigError(f"m={cfg.m} < p={cfg.p}: pipeline never fills")


def _one_f_one_b_order(cfg: ModelConfig) -> list[list[str]]:
    """Per-stage forward/backward id sequence of 1F1B: stage st warms up with
    p-1-st forwards, alternates forward/backward, then drains."""
    order: list[list[str]] = []
    for st in range(cfg.p):
        w = cfg.p - 1 - st
        seq = [f"f.s{st}.m{i}" for i in range(w)]
        k = 0
        for fi in range(w, cfg.m):
            seq += [f"f.s{st}.m{fi}", f"b.s{st}.m{k}"]
            k += 1
        seq += [f"b.s{st}.m{j}" for j in range(k, cfg.m)]
        order.append(seq)
    return order


def gen_1f1b(cfg: ModelConfig, durations: DurationTable | None = None) -> Schedule:
    """One-forward-one-backward with a fused backward per stage chunk.

    `durations` is accepted for signature parity with the other generators;
    the order is closed-form and does not depend on it.
    """
    _check_layerwise(cfg)
    tasks = _layerwise_tasks(cfg, split_w=False)
    return Schedule(METHOD_1F1B, cfg.p, tasks, _one_f_one_b_order(cfg),
                    _base_meta(cfg, False, 1, FUSED))


class _Zb1pSelector:
    """Backbone-next if ready and within the cap, else a pending W, else wait."""

    def __init__(self, tasks: dict[str, Task], backbone: list[list[str]], cap_chunks: int):
        self.tasks = tasks
        self.backbone = backbone
        self.ptr = [0] * len(backbone)
        self.placed_f = [0] * len(backbone)
        self.placed_w = [0] * len(backbone)
        self.cap = cap_chunks

    def _w(self, stage: int, pool: dict[str, int]) -> str | None:
        ws = [tid for tid in pool if self.tasks[tid].kind == BWD_W]
        if not ws:
            return None
        self.placed_w[stage] += 1
        return min(ws, key=lambda tid: self.tasks[tid].mb)

    def pick(self, stage: int, pool: dict[str, int], now: int) -> str | None:
        seq, i = self.backbone[stage], self.ptr[stage]
        nxt = seq[i] if i < len(seq) else None
        if nxt is not None and nxt in pool:
            is_f = self.tasks[nxt].kind == FWD
            if is_f and self.placed_f[stage] + 1 - self.placed_w[stage] > self.cap:
                return self._w(stage, pool)
            self.ptr[stage] += 1
            self.placed_f[stage] += int(is_f)
            return nxt
        return self._w(stage, pool)


def gen_zb1p(cfg: ModelConfig, durations: DurationTable,
             memory_cap_elements: int | None = None) -> Schedule:
    """1F1B forward/backward backbone with the backward split into B and W,
    weight gradients deferred into the bubbles, bounded by an activation cap
    (default: 16bsh*L elements, the whole-model stash of one microbatch)."""
    _check_layerwise(cfg)
    chunk = layer_activation_elements(cfg) * (cfg.L // cfg.p)
    cap = memory_cap_elements if memory_cap_elements is not None \
        else layer_activation_elements(cfg) * cfg.L
    cap_chunks = cap // chunk
    if cap_chunks < cfg.p:
        raise ConfigError(
            f"memory cap {cap} allows {cap_chunks} in-flight chunks; stage 0 needs {cfg.p}")
    tasks = _layerwise_tasks(cfg, split_w=True)
    res = execute(tasks, cfg.p, make_duration_fn(durations), CommModel.zero(),
                  _Zb1pSelector(tasks, _one_f_one_b_order(cfg), cap_chunks))
    meta = _base_meta(cfg, False, 1, SPLIT)
    meta["cap_elements"] = cap
    return Schedule(METHOD_ZB1P, cfg.p, tasks, res.stage_sequence, meta)


# --- helix schedules ------------------------------------------------------


def _helix_tasks(cfg: ModelConfig, qkv: bool) -> dict[str, Task]:
    """Forward and fused-backward tasks under the attention-parallel partition.

    Stage placement: pre(l) on l%p, attn(l, i) on (l+i+1)%p, post(l) on the
    stage of pre(l+1), so the unit (post(l-1), pre(l)) is co-located and layer
    boundaries never cross stages.  Gradients retrace the forward edges in
    reverse with equal volumes.
    """
    L = cfg.L
    acts = activation_elements(cfg, qkv_in_attention=qkv)
    vol_pa = comm_volume(cfg, EDGE_PRE_ATTN, qkv)
    vol_ap = comm_volume(cfg, EDGE_ATTN_POST, qkv)
    tasks: dict[str, Task] = {}

    def add(t: Task) -> None:
        tasks[t.id] = t

    def link(producer: str, tag: str, edge: str, l: int, i: int,
             src: int, dst: int, vol: int) -> str:
        """Wire producer to a consumer on dst; returns the id to depend on."""
        if src == dst:
            return producer
        sid, rid = f"sn.{tag}.l{l}.m{i}", f"rv.{tag}.l{l}.m{i}"
        add(Task(sid, src, SEND, "chunk", i, l, 1, (producer,), edge, dst, vol))
        add(Task(rid, dst, RECV, "chunk", i, l, 1, (sid,), edge, src, vol))
        return rid

    for i in range(cfg.m):
        for l in range(L):
            sp, sa, so = pre_stage(l, cfg), attn_stage(l, i, cfg), post_stage(l, cfg)
            f_deps = (f"f.post.l{l-1}.m{i}",) if l > 0 else ()
            add(Task(f"f.pre.l{l}.m{i}", sp, FWD, "pre", i, l, 1, f_deps,
                     mem_delta=acts["pre"]))
            d = link(f"f.pre.l{l}.m{i}", "pa", EDGE_PRE_ATTN, l, i, sp, sa, vol_pa)
            add(Task(f"f.attn.l{l}.m{i}", sa, FWD, "attn", i, l, 1, (d,),
                     mem_delta=acts["attn"]))
            d = link(f"f.attn.l{l}.m{i}", "ap", EDGE_ATTN_POST, l, i, sa, so, vol_ap)
            add(Task(f"f.post.l{l}.m{i}", so, FWD, "post", i, l, 1, (d,),
                     mem_delta=acts["post"]))
        for l in range(L - 1, -1, -1):
            sp, sa, so = pre_stage(l, cfg), attn_stage(l, i, cfg), post_stage(l, cfg)
            if l == L - 1:
                b_deps: tuple[str, ...] = (f"f.post.l{l}.m{i}",)
            else:
                # dX from pre(l+1)'s backward lands on this stage directly.
                b_deps = (f"b.pre.l{l+1}.m{i}", f"f.post.l{l}.m{i}")
            add(Task(f"b.post.l{l}.m{i}", so, BWD_B, "post", i, l, 1, b_deps,
                     mem_delta=-acts["post"]))
            d = link(f"b.post.l{l}.m{i}", "gap", EDGE_ATTN_POST, l, i, so, sa, vol_ap)
            add(Task(f"b.attn.l{l}.m{i}", sa, BWD_B, "attn", i, l, 1,
                     (d, f"f.attn.l{l}.m{i}"), mem_delta=-acts["attn"]))
            d = link(f"b.attn.l{l}.m{i}", "gpa", EDGE_PRE_ATTN, l, i, sa, sp, vol_pa)
            add(Task(f"b.pre.l{l}.m{i}", sp, BWD_B, "pre", i, l, 1,
                     (d, f"f.pre.l{l}.m{i}"), mem_delta=-acts["pre"]))
    return tasks


def _pair_partner(i: int, p: int) -> int:
    j = i % (2 * p)
    return i + p if j < p else i - p


def _add_pair_edges(tasks: dict[str, Task], cfg: ModelConfig) -> None:
    """Encode the virtual pairing of (i, i+p): the pair member executed first
    also waits for the partner's producers, so the pair advances in lockstep,
    and the second member chains after the first.  Forwards lead with the low
    microbatch; backwards reverse, leading with the high one.

    The lead's partner edges point at the producing compute task, not at the
    partner's RECV: the pair is held back by the partner's computation being
    ready upstream, while the partner's transfer itself rides behind the
    lead's execution.  That keeps zero-comm timing identical (a RECV completes
    at producer end) but leaves the partner's wire time off the lead's floor,
    which is the whole point of the fold.  Only edges are added, never tasks.
    """
    p = cfg.p
    original = {tid: t.deps for tid, t in tasks.items() if t.is_compute}

    def producer(d: str) -> str:
        # Resolve a RECV dep to the compute task feeding its SEND.
        if tasks[d].kind == RECV:
            return tasks[tasks[d].deps[0]].deps[0]
        return d

    for tid, deps in original.items():
        t = tasks[tid]
        partner = _pair_partner(t.mb, p)
        swap = lambda d: d[: d.rindex(".m") + 2] + str(partner)  # noqa: E731
        pos = (t.mb % (2 * p)) // p
        leads = pos == 0 if t.kind == FWD else pos == 1
        if leads:
            extra = tuple(swap(producer(d)) for d in deps)
        else:
            extra = (swap(tid),)
        merged = deps + tuple(d for d in extra if d not in deps)
        tasks[tid] = t.with_deps(merged)


def _fwd_keys(tasks: dict[str, Task], cfg: ModelConfig, fold: int) -> dict[str, tuple]:
    """Lockstep forward priorities.  Within a loop, work advances in layer
    bands: the unit (post(l-1), pre(l)) shares band 2l interleaved per slot,
    attention of layer l sits alone in band 2l+1.  Slots order microbatches
    within the loop; two-fold partners are adjacent via the fold position."""
    p = cfg.p
    loop_sz = fold * p
    keys: dict[str, tuple] = {}
    for tid, t in tasks.items():
        if t.kind != FWD:
            continue
        j = t.mb % loop_sz
        loop, slot, fpos = t.mb // loop_sz, j % p, j // p
        if t.comp == "pre":
            band, pos = 2 * t.layer, 1
        elif t.comp == "attn":
            band, pos = 2 * t.layer + 1, 0
        else:
            band, pos = 2 * t.layer + 2, 0
        keys[tid] = (loop, band, slot, pos, fpos)
    return keys


def _forward_subgraph(tasks: dict[str, Task]) -> dict[str, Task]:
    sub = {tid: t for tid, t in tasks.items() if t.kind == FWD}
    sends = {tid: t for tid, t in tasks.items()
             if t.kind == SEND and all(d in sub for d in t.deps)}
    sub.update(sends)
    sub.update({tid: t for tid, t in tasks.items()
                if t.kind == RECV and t.deps[0] in sends})
    return sub


def _gen_helix(cfg: ModelConfig, durations: DurationTable,
               fold: int, qkv: bool, method: str) -> Schedule:
    check_helix_config(cfg, fold=fold)
    tasks = _helix_tasks(cfg, qkv)
    if fold == 2:
        _add_pair_edges(tasks, cfg)
    fwd = _forward_subgraph(tasks)
    res = execute(fwd, cfg.p, make_duration_fn(durations), CommModel.zero(),
                  PrioritySelector(_fwd_keys(fwd, cfg, fold)))
    per_stage: list[list[str]] = []
    for seq in res.stage_sequence:
        back = [f"b.{tasks[fid].comp}.l{tasks[fid].layer}.m{tasks[fid].mb}"
                for fid in reversed(seq)]
        per_stage.append(seq + back)
    return Schedule(method, cfg.p, tasks, per_stage,
                    _base_meta(cfg, qkv, fold, FUSED))


def gen_helix_naive(cfg: ModelConfig, durations: DurationTable,
                    qkv_in_attention: bool = True) -> Schedule:
    """Attention-parallel schedule, whole microbatches FILO (m % p == 0)."""
    return _gen_helix(cfg, durations, 1, qkv_in_attention, METHOD_HELIX_NAIVE)


def gen_helix_twofold(cfg: ModelConfig, durations: DurationTable,
                      qkv_in_attention: bool = True) -> Schedule:
    """Pair-interleaved helix schedule (m % 2p == 0)."""
    return _gen_helix(cfg, durations, 2, qkv_in_attention, METHOD_HELIX_TWOFOLD)


def apply_recomputation(sched: Schedule) -> Schedule:
    """Recompute-without-attention transform for helix schedules.

    Shrinks the stash to attention inputs/outputs plus component boundaries
    (4bsh per layer per microbatch) and inserts a RECOMPUTE_FWD task directly
    before each backward pre/post task in the stage order.  Regeneration runs
    on demand inside the backward step, so a recompute waits for the same
    incoming gradient as its backward task and stretches every pre/post
    backward to three forward units.  Attention is never recomputed.
    """
    if any(t.comp == "chunk" and t.is_compute for t in sched.tasks.values()):
        raise ConfigError("recomputation applies to component-partitioned schedules")
    if int(sched.meta.get("recompute", 0)):
        raise ConfigError("schedule already recomputed")
    cfg = meta_config(sched)
    qkv = bool(int(sched.meta["qkv"]))
    acts = activation_elements(cfg, recompute=True, qkv_in_attention=qkv)

    tasks = dict(sched.tasks)
    for t in list(sched.tasks.values()):
        if t.kind != BWD_B or t.comp == "attn":
            continue
        stash = f"f.{t.comp}.l{t.layer}.m{t.mb}"
        grad_side = tuple(d for d in t.deps if d != stash)
        rid = f"rc.{t.comp}.l{t.layer}.m{t.mb}"
        tasks[rid] = Task(rid, t.stage, RECOMPUTE, t.comp, t.mb, t.layer, 1,
                          (stash,) + grad_side)

    for tid, t in list(tasks.items()):
        if t.kind == FWD:
            tasks[tid] = replace(t, mem_delta=acts[t.comp])
        elif t.kind == BWD_B:
            extra = () if t.comp == "attn" else (f"rc.{t.comp}.l{t.layer}.m{t.mb}",)
            tasks[tid] = replace(t, deps=t.deps + extra, mem_delta=-acts[t.comp])

    per_stage: list[list[str]] = []
    for order in sched.per_stage_order:
        seq: list[str] = []
        for tid in order:
            t = sched.tasks[tid]
            if t.kind == BWD_B and t.comp in ("pre", "post"):
                seq.append(f"rc.{t.comp}.l{t.layer}.m{t.mb}")
            seq.append(tid)
        per_stage.append(seq)

    meta = dict(sched.meta)
    meta["recompute"] = 1
    return Schedule(sched.method + "_rc", sched.n_stages, tasks, per_stage, meta)


def generate(method: str, cfg: ModelConfig, durations: DurationTable,
             qkv_in_attention: bool = True,
             memory_cap_elements: int | None = None) -> Schedule:
    if method == METHOD_1F1B:
        return gen_1f1b(cfg, durations)
    if method == METHOD_ZB1P:
        return gen_zb1p(cfg, durations, memory_cap_elements)
    if method == METHOD_HELIX_NAIVE:
        return gen_helix_naive(cfg, durations, qkv_in_attention)
    if method == METHOD_HELIX_TWOFOLD:
        return gen_helix_twofold(cfg, durations, qkv_in_attention)
    if method == METHOD_HELIX_TWOFOLD_RC:
        return apply_recomputation(gen_helix_twofold(cfg, durations, qkv_in_attention))
    raise ConfigError(f"unknown method {method!r} (known: {', '.join(METHODS)})")
