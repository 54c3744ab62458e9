"""Numeric execution of a schedule against per-stage contexts.

Each stage owns a value table (in-flight payloads), an activation stash keyed
by (layer, microbatch, component), deferred weight-gradient contexts, and its
slice of the parameter gradients.  Tasks are interpreted one by one:

  FWD / BWD_B / BWD_W    run the layer component math from runtime.layers
  RECOMPUTE_FWD          rebuilds a reduced stash entry in place
  SEND / RECV            move a payload between stages; the element count of
                         every sent payload must equal both the volume on the
                         task and the cost model's figure for that edge, and
                         a mismatch is a hard error, not a warning

Two drivers share the interpreter.  The replay driver is single-threaded and
enforces every dependency edge globally; it is the reference.  The threaded
driver runs one thread per stage against blocking channels, enforcing the
per-stage order plus payload availability; pure ordering edges between
compute tasks on different stages (the two-fold pair edges) only shape
timing, carry no data, and are not synchronized on.  Both must produce
results bitwise-equal to the sequential reference.

Losses land on whichever stage holds the last layer's output.  Parameter
gradients are recorded per microbatch where the owning component runs and
summed in ascending microbatch order at the end, so the accumulation order
never depends on how the schedule interleaved the work.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from ..config import ModelConfig
from ..costs import comm_volume
from ..generators import meta_config
from ..schedule import BWD_B, BWD_W, FWD, RECOMPUTE, RECV, SEND, Schedule, Task
from .layers import (
    Arrays,
    LayerParams,
    attn_backward,
    attn_forward,
    payload_elements,
    post_backward_b,
    post_backward_w,
    post_forward,
    pre_backward_b,
    pre_backward_w,
    pre_forward,
    reduce_stash,
    regenerate_stash,
)
from .model import Grads, loss_and_grad, zero_grads

_WAIT_TIMEOUT = 30.0


class ExecutionError(Exception):
    pass


class PayloadMismatch(ExecutionError):
    """A transferred payload disagrees with the declared communication volume."""


class StalledSchedule(ExecutionError):
    """No stage can make progress (missing payload or unsatisfiable edge)."""


class _Stage:
    __slots__ = ("idx", "values", "stash", "wctx", "grads", "losses", "live", "peak")

    def __init__(self, idx: int):
        self.idx = idx
        self.values: dict[str, Arrays] = {}
        self.stash: dict[tuple[int, int, str], Arrays] = {}
        self.wctx: dict[int, list] = {}
        self.grads: dict[tuple[int, str], dict[int, np.ndarray]] = {}
        self.losses: dict[int, float] = {}
        self.live = 0
        self.peak = 0

    def bump(self) -> None:
        n = sum(payload_elements(e) for e in self.stash.values())
        for lst in self.wctx.values():
            for _l, w_post, w_pre in lst:
                n += payload_elements(w_post) + payload_elements(w_pre)
        self.live = n
        self.peak = max(self.peak, n)


@dataclass
class RunResult:
    losses: list[float]                    # by microbatch
    param_grads: list[Grads]               # by layer
    peak_stash_elements: list[int]         # by stage: stash + deferred wctx
    mode: str


class _Runner:
    def __init__(self, sched: Schedule, params: list[LayerParams],
                 inputs: list[np.ndarray], mlp_chunk: int | None):
        self.sched = sched
        self.tasks = sched.tasks
        self.cfg: ModelConfig = meta_config(sched)
        self.qkv = bool(int(sched.meta.get("qkv", 0)))
        self.rc = bool(int(sched.meta.get("recompute", 0)))
        self.split = sched.meta.get("backward") == "split"
        self.params = params
        self.inputs = inputs
        self.chunk = mlp_chunk
        self.stages = [_Stage(i) for i in range(sched.n_stages)]

        cfg = self.cfg
        if len(params) != cfg.L:
            raise ExecutionError(f"need {cfg.L} layer params, got {len(params)}")
        if len(inputs) != cfg.m:
            raise ExecutionError(f"need {cfg.m} input microbatches, got {len(inputs)}")
        want = (cfg.s, cfg.b, cfg.h)
        for i, x in enumerate(inputs):
            if x.shape != want:
                raise ExecutionError(f"input {i} has shape {x.shape}, want {want}")

        self.recv_of_send: dict[str, str] = {
            t.deps[0]: t.id for t in self.tasks.values() if t.kind == RECV}
        self.sends_by_producer: dict[str, list[Task]] = {}
        for t in self.tasks.values():
            if t.kind == SEND:
                self.sends_by_producer.setdefault(t.deps[0], []).append(t)
        for lst in self.sends_by_producer.values():
            lst.sort(key=lambda t: t.id)

    # --- value routing ---------------------------------------------------

    def _input_id(self, t: Task) -> str | None:
        """Id of the dependency carrying this task's input payload, or None
        when the input is external (first forward) or synthesized (loss)."""
        i, l = t.mb, t.layer
        if t.kind == FWD:
            if t.comp == "chunk":
                c = f"rv.fb.s{t.stage}.m{i}"
                return c if c in t.deps else None
            if t.comp == "pre":
                return f"f.post.l{l - 1}.m{i}" if l > 0 else None
            prev = {"attn": ("pa", "pre"), "post": ("ap", "attn")}[t.comp]
            c = f"rv.{prev[0]}.l{l}.m{i}"
            return c if c in t.deps else f"f.{prev[1]}.l{l}.m{i}"
        if t.kind == BWD_B:
            if t.comp == "chunk":
                c = f"rv.gb.s{t.stage}.m{i}"
                return c if c in t.deps else None
            if t.comp == "post":
                return f"b.pre.l{l + 1}.m{i}" if l < self.cfg.L - 1 else None
            prev = {"attn": ("gap", "post"), "pre": ("gpa", "attn")}[t.comp]
            c = f"rv.{prev[0]}.l{l}.m{i}"
            return c if c in t.deps else f"b.{prev[1]}.l{l}.m{i}"
        return None

    def _take(self, st: _Stage, tid: str) -> Arrays:
        try:
            return st.values.pop(tid)
        except KeyError:
            raise StalledSchedule(f"stage {st.idx}: payload of {tid} not present") from None

    def _store_stash(self, st: _Stage, l: int, mb: int, comp: str,
                     full: Arrays, payload: Arrays) -> None:
        st.stash[(l, mb, comp)] = \
            reduce_stash(comp, full, payload, self.qkv) if self.rc else full

    def _record(self, st: _Stage, l: int, mb: int, grads: Arrays) -> None:
        for name, g in grads.items():
            st.grads.setdefault((l, name), {})[mb] = g

    # --- task interpreters -----------------------------------------------

    def run_compute(self, t: Task) -> None:
        st = self.stages[t.stage]
        heads = self.cfg.num_heads
        if t.kind == FWD:
            if t.comp == "chunk":
                self._fwd_chunk(st, t)
            else:
                self._fwd_component(st, t)
        elif t.kind == BWD_B:
            if t.comp == "chunk":
                self._bwd_chunk(st, t)
            else:
                self._bwd_component(st, t)
        elif t.kind == BWD_W:
            for l, w_post, w_pre in st.wctx.pop(t.mb):
                self._record(st, l, t.mb, post_backward_w(w_post))
                self._record(st, l, t.mb, pre_backward_w(w_pre))
        elif t.kind == RECOMPUTE:
            key = (t.layer, t.mb, t.comp)
            st.stash[key] = regenerate_stash(t.comp, st.stash[key],
                                             self.params[t.layer], self.qkv, self.chunk)
        else:
            raise ExecutionError(f"{t.id}: kind {t.kind} is not a compute task")
        st.bump()

    def _fwd_component(self, st: _Stage, t: Task) -> None:
        src = self._input_id(t)
        p = self.params[t.layer]
        if t.comp == "pre":
            x = self.inputs[t.mb] if src is None else self._take(st, src)["x"]
            payload, full = pre_forward(x, p, self.qkv)
            self._store_stash(st, t.layer, t.mb, "pre", full, {})
            st.values[t.id] = payload
        elif t.comp == "attn":
            payload = self._take(st, src)
            out, full = attn_forward(payload, self.cfg.num_heads, self.qkv)
            self._store_stash(st, t.layer, t.mb, "attn", full, payload)
            st.values[t.id] = out
        else:
            payload = self._take(st, src)
            out, full = post_forward(payload, p, self.chunk)
            self._store_stash(st, t.layer, t.mb, "post", full, payload)
            st.values[t.id] = {"x": out}

    def _bwd_component(self, st: _Stage, t: Task) -> None:
        src = self._input_id(t)
        p = self.params[t.layer]
        if t.comp == "post":
            if src is None:
                z = self._take(st, f"f.post.l{t.layer}.m{t.mb}")["x"]
                loss, d_out = loss_and_grad(z)
                st.losses[t.mb] = loss
            else:
                d_out = self._take(st, src)["d_x"]
            stash = st.stash.pop((t.layer, t.mb, "post"))
            gap, wctx = post_backward_b(d_out, p, stash, self.chunk)
            self._record(st, t.layer, t.mb, post_backward_w(wctx))
            st.values[t.id] = gap
        elif t.comp == "attn":
            payload = self._take(st, src)
            stash = st.stash.pop((t.layer, t.mb, "attn"))
            st.values[t.id] = attn_backward(payload, stash, self.cfg.num_heads, self.qkv)
        else:
            payload = self._take(st, src)
            stash = st.stash.pop((t.layer, t.mb, "pre"))
            d_x, wctx = pre_backward_b(payload, p, stash, self.qkv)
            self._record(st, t.layer, t.mb, pre_backward_w(wctx))
            if t.layer > 0:
                st.values[t.id] = {"d_x": d_x}

    def _fwd_chunk(self, st: _Stage, t: Task) -> None:
        src = self._input_id(t)
        x = self.inputs[t.mb] if src is None else self._take(st, src)["x"]
        for l in range(t.layer, t.layer + t.span):
            p = self.params[l]
            pa, s_pre = pre_forward(x, p, self.qkv)
            self._store_stash(st, l, t.mb, "pre", s_pre, {})
            ap, s_attn = attn_forward(pa, self.cfg.num_heads, self.qkv)
            self._store_stash(st, l, t.mb, "attn", s_attn, pa)
            x, s_post = post_forward(ap, p, self.chunk)
            self._store_stash(st, l, t.mb, "post", s_post, ap)
        st.values[t.id] = {"x": x}

    def _bwd_chunk(self, st: _Stage, t: Task) -> None:
        src = self._input_id(t)
        if src is None:
            z = self._take(st, f"f.s{t.stage}.m{t.mb}")["x"]
            loss, d = loss_and_grad(z)
            st.losses[t.mb] = loss
        else:
            d = self._take(st, src)["d_x"]
        deferred: list = []
        for l in range(t.layer + t.span - 1, t.layer - 1, -1):
            p = self.params[l]
            gap, w_post = post_backward_b(d, p, st.stash.pop((l, t.mb, "post")), self.chunk)
            gpa = attn_backward(gap, st.stash.pop((l, t.mb, "attn")),
                                self.cfg.num_heads, self.qkv)
            d, w_pre = pre_backward_b(gpa, p, st.stash.pop((l, t.mb, "pre")), self.qkv)
            if self.split:
                deferred.append((l, w_post, w_pre))
            else:
                self._record(st, l, t.mb, post_backward_w(w_post))
                self._record(st, l, t.mb, pre_backward_w(w_pre))
        if self.split:
            st.wctx[t.mb] = deferred
        if t.stage > 0:
            st.values[t.id] = {"d_x": d}

    def run_send(self, t: Task) -> tuple[str, Arrays]:
        payload = self._take(self.stages[t.stage], t.deps[0])
        n = payload_elements(payload)
        declared = comm_volume(self.cfg, t.edge, self.qkv)
        if n != t.volume or n != declared:
            raise PayloadMismatch(
                f"{t.id}: payload carries {n} elements, task declares {t.volume}, "
                f"cost model expects {declared} for edge {t.edge!r}")
        return self.recv_of_send[t.id], payload

    # --- drivers ---------------------------------------------------------

    def replay(self) -> None:
        """Single-threaded reference pass honoring every dependency edge."""
        tasks, order = self.tasks, self.sched.per_stage_order
        done: set[str] = set()
        ptr = [0] * len(order)
        comm = sorted(tid for tid, t in tasks.items() if not t.is_compute)
        transit: dict[str, Arrays] = {}
        while len(done) < len(tasks):
            progressed = False
            for tid in comm:
                t = tasks[tid]
                if tid in done or not all(d in done for d in t.deps):
                    continue
                if t.kind == SEND:
                    rid, payload = self.run_send(t)
                    transit[rid] = payload
                else:
                    self.stages[t.stage].values[tid] = transit.pop(tid)
                done.add(tid)
                progressed = True
            for si, seq in enumerate(order):
                while ptr[si] < len(seq):
                    t = tasks[seq[ptr[si]]]
                    if not all(d in done for d in t.deps):
                        break
                    self.run_compute(t)
                    done.add(t.id)
                    ptr[si] += 1
                    progressed = True
            if not progressed:
                blocked = {seq[ptr[si]]: [d for d in tasks[seq[ptr[si]]].deps
                                          if d not in done]
                           for si, seq in enumerate(order) if ptr[si] < len(seq)}
                raise StalledSchedule(f"schedule cannot progress; blocked on {blocked}")
        if transit:
            raise ExecutionError(f"undelivered payloads: {sorted(transit)}")

    def threaded(self) -> None:
        """One worker per stage; payloads cross on blocking keyed channels."""
        cond = threading.Condition()
        transit: dict[str, Arrays] = {}
        errors: list[BaseException] = []

        def worker(si: int) -> None:
            st = self.stages[si]
            try:
                for tid in self.sched.per_stage_order[si]:
                    t = self.tasks[tid]
                    for d in t.deps:
                        dt = self.tasks.get(d)
                        if dt is None or dt.kind != RECV or dt.stage != si:
                            continue
                        if d in st.values:
                            continue
                        with cond:
                            ok = cond.wait_for(lambda: d in transit or errors,
                                               timeout=_WAIT_TIMEOUT)
                            if errors:
                                return
                            if not ok:
                                raise StalledSchedule(
                                    f"stage {si}: {tid} never received {d}")
                            st.values[d] = transit.pop(d)
                    self.run_compute(t)
                    for snd in self.sends_by_producer.get(tid, ()):
                        rid, payload = self.run_send(snd)
                        with cond:
                            transit[rid] = payload
                            cond.notify_all()
            except BaseException as e:  # noqa: BLE001 - surfaced after join
                with cond:
                    errors.append(e)
                    cond.notify_all()

        threads = [threading.Thread(target=worker, args=(si,), daemon=True)
                   for si in range(len(self.stages))]
        for th in threads:
            th.start()
        for th in threads:
            th.join(timeout=_WAIT_TIMEOUT * 2)
        if errors:
            raise errors[0]
        if any(th.is_alive() for th in threads):
            raise StalledSchedule("stage workers did not finish")
        if transit:
            raise ExecutionError(f"undelivered payloads: {sorted(transit)}")

    # --- result assembly -------------------------------------------------

    def collect(self, mode: str) -> RunResult:
        cfg = self.cfg
        losses_map: dict[int, float] = {}
        for st in self.stages:
            losses_map.update(st.losses)
        if sorted(losses_map) != list(range(cfg.m)):
            raise ExecutionError(f"losses recorded for {sorted(losses_map)}, want 0..{cfg.m - 1}")

        by_site: dict[tuple[int, str], dict[int, np.ndarray]] = {}
        for st in self.stages:
            for site, by_mb in st.grads.items():
                if site in by_site:
                    raise ExecutionError(f"gradient site {site} recorded on two stages")
                by_site[site] = by_mb
        expected = {(l, name) for l in range(cfg.L)
                    for name in self.params[l].field_names()}
        if set(by_site) != expected:
            missing = sorted(expected - set(by_site))
            raise ExecutionError(f"gradient sites missing: {missing[:6]}")

        total = zero_grads(self.params)
        for (l, name), by_mb in by_site.items():
            if sorted(by_mb) != list(range(cfg.m)):
                raise ExecutionError(f"site ({l}, {name}) covered microbatches {sorted(by_mb)}")
            acc = total[l][name]
            for i in range(cfg.m):
                acc += by_mb[i]

        leftovers = {tid for st in self.stages for tid in st.values}
        if leftovers:
            raise ExecutionError(f"unconsumed payloads: {sorted(leftovers)[:6]}")
        dirty = [st.idx for st in self.stages if st.stash or st.wctx]
        if dirty:
            raise ExecutionError(f"stash not drained on stages {dirty}")

        return RunResult([losses_map[i] for i in range(cfg.m)], total,
                         [st.peak for st in self.stages], mode)


def execute_schedule(sched: Schedule, params: list[LayerParams],
                     inputs: list[np.ndarray], mlp_chunk: int | None = None,
                     threaded: bool = False) -> RunResult:
    """Run a schedule numerically and return losses, accumulated parameter
    gradients, and the per-stage peak of stashed elements.

    The same schedule produces bitwise-identical results in replay and
    threaded mode, with any MLP chunk size, and with or without recompute,
    all equal to the sequential reference on the same model and inputs.
    """
    runner = _Runner(sched, params, inputs, mlp_chunk)
    if threaded:
        runner.threaded()
    else:
        runner.replay()
    return runner.collect("threaded" if threaded else "replay")
