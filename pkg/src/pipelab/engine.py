"""Deterministic event-driven execution core shared by simulation and generation.

Resource model per stage: one compute executor, one outbound channel, one
inbound channel.  Compute tasks start at max(stage free, last dep finish); the
selector decides which ready task runs (a replay selector enforces a recorded
order and stalls in-order; generation selectors pick by priority or policy).
A SEND is placed the instant its producer finishes: it occupies the outbound
channel from max(channel free, producer finish) for the wire time, and the
payload lands latency later, when the matching RECV queues on the receiver's
inbound channel (FIFO by arrival, ties by id).  Uncontended, a RECV therefore
completes at send_start + latency + wire_time.

Everything is integer time.  Event ties break on (time, event tag, id), so runs
are bit-reproducible.  The optional slowdown factor models compute/comm
interference crudely: a compute task that starts while one of its stage's
channels is mid-transfer runs slowdown x longer.  Default 1.0 (off).
"""

from __future__ import annotations

import heapq
from bisect import bisect_right
from dataclasses import dataclass

from .config import DeviceSpec
from .costs import DurationTable, transfer_ns
from .schedule import BWD_B, BWD_W, FWD, RECOMPUTE, RECV, SEND, Schedule, Task

_FINISH, _ARRIVAL, _WAKE = 0, 1, 2


@dataclass(frozen=True)
class CommModel:
    """Transfer timing: wire time per payload plus fixed latency.

    mode "zero": free transfers.  mode "uniform": every payload costs
    `uniform_cost` regardless of volume (abstract-unit experiments); with
    `ref_volume` set, the cost scales as uniform_cost * volume / ref_volume,
    so payloads half the reference size take half the wire time.  mode
    "bytes": wire time is volume * bytes_per_element / bandwidth, floored to
    integer ns.
    """

    mode: str = "zero"
    latency: int = 0
    uniform_cost: int = 0
    ref_volume: int = 0
    bytes_per_element: int = 2
    bandwidth: int = 0
    slowdown: float = 1.0

    def wire_time(self, volume: int) -> int:
        if self.mode == "zero":
            return 0
        if self.mode == "uniform":
            if self.ref_volume:
                return (volume * self.uniform_cost) // self.ref_volume
            return self.uniform_cost
        return (volume * self.bytes_per_element * 10**9) // self.bandwidth

    @staticmethod
    def zero() -> "CommModel":
        return CommModel()

    @staticmethod
    def uniform(cost: int, latency: int = 0, slowdown: float = 1.0,
                ref_volume: int = 0) -> "CommModel":
        return CommModel(mode="uniform", latency=latency, uniform_cost=cost,
                         ref_volume=ref_volume, slowdown=slowdown)

    @staticmethod
    def from_device(device: DeviceSpec, slowdown: float = 1.0) -> "CommModel":
        return CommModel(mode="bytes", latency=device.latency_ns,
                         bytes_per_element=device.bytes_per_element,
                         bandwidth=device.link_bandwidth, slowdown=slowdown)


def make_duration_fn(table: DurationTable, fused_backward: bool = False):
    """Map a compute task to its integer duration.

    Chunk tasks cover `span` layers of all three components.  With
    `fused_backward` the schedule has no separate BWD_W tasks: each BWD_B is a
    whole backward (input and weight gradients together) and bills for both
    passes, which makes every backward task exactly twice its forward
    counterpart under the standard cost ratios.
    """
    pass_of = {FWD: "fwd", RECOMPUTE: "fwd", BWD_B: "bwd_b", BWD_W: "bwd_w"}

    def dur(task: Task) -> int:
        pass_ = pass_of[task.kind]
        if task.comp == "chunk":
            d = task.span * table.comp_totals(pass_)
            if fused_backward and task.kind == BWD_B:
                d += task.span * table.comp_totals("bwd_w")
            return d
        d = table.of(task.comp, pass_)
        if fused_backward and task.kind == BWD_B:
            d += table.of(task.comp, "bwd_w")
        return d

    return dur


class DeadlockError(RuntimeError):
    def __init__(self, missing: list[str], detail: str):
        super().__init__(f"schedule deadlocked; {len(missing)} tasks never ran. {detail}")
        self.missing = missing


class ReplaySelector:
    """Run each stage's recorded order strictly, stalling until the next task
    in line is ready."""

    def __init__(self, per_stage_order: list[list[str]]):
        self.orders = per_stage_order
        self.ptr = [0] * len(per_stage_order)

    def pick(self, stage: int, pool: dict[str, int], now: int) -> str | None:
        order, i = self.orders[stage], self.ptr[stage]
        if i < len(order) and order[i] in pool:
            self.ptr[stage] += 1
            return order[i]
        return None


class PrioritySelector:
    """Among ready tasks, run the one with the smallest precomputed key."""

    def __init__(self, key: dict[str, tuple]):
        self.key = key

    def pick(self, stage: int, pool: dict[str, int], now: int) -> str | None:
        if not pool:
            return None
        return min(pool, key=lambda tid: self.key[tid])


class _Busy:
    """Non-overlapping placed intervals, queried for 'mid-transfer at t'."""

    def __init__(self) -> None:
        self.starts: list[int] = []
        self.ends: list[int] = []

    def add(self, start: int, end: int) -> None:
        self.starts.append(start)
        self.ends.append(end)

    def covers(self, t: int) -> bool:
        i = bisect_right(self.starts, t) - 1
        return i >= 0 and t < self.ends[i]


@dataclass
class EngineResult:
    timeline: dict[str, tuple[int, int]]
    stage_sequence: list[list[str]]  # compute tasks in placement order


def execute(tasks: dict[str, Task], n_stages: int, dur_of, comm: CommModel,
            selector) -> EngineResult:
    succ_compute: dict[str, list[str]] = {tid: [] for tid in tasks}
    sends_of: dict[str, list[str]] = {tid: [] for tid in tasks}
    recv_of_send: dict[str, str] = {}
    rem: dict[str, int] = {}
    send_rem: dict[str, int] = {}
    for t in tasks.values():
        if t.kind == SEND:
            send_rem[t.id] = len(t.deps)
            for d in t.deps:
                sends_of[d].append(t.id)
        elif t.kind == RECV:
            recv_of_send[t.deps[0]] = t.id
        else:
            rem[t.id] = len(t.deps)
            for d in t.deps:
                succ_compute[d].append(t.id)
    for lst in sends_of.values():
        lst.sort()

    timeline: dict[str, tuple[int, int]] = {}
    stage_seq: list[list[str]] = [[] for _ in range(n_stages)]
    stage_free = [0] * n_stages
    out_free = [0] * n_stages
    in_free = [0] * n_stages
    out_busy = [_Busy() for _ in range(n_stages)]
    in_busy = [_Busy() for _ in range(n_stages)]
    pool: list[dict[str, int]] = [{} for _ in range(n_stages)]

    events: list[tuple[int, int, str]] = []

    def push(t: int, tag: int, key: str) -> None:
        heapq.heappush(events, (t, tag, key))

    for tid, n in rem.items():
        if n == 0:
            st = tasks[tid].stage
            pool[st][tid] = 0
            push(0, _WAKE, f"{st:06d}")

    def finish(tid: str, t: int) -> None:
        task = tasks[tid]
        for sid in sends_of[tid]:
            send_rem[sid] -= 1
            if send_rem[sid]:
                continue  # payload leaves when the last producer finishes
            send = tasks[sid]
            st = send.stage
            start = max(out_free[st], t)
            end = start + comm.wire_time(send.volume)
            out_free[st] = end
            out_busy[st].add(start, end)
            timeline[sid] = (start, end)
            push(start + comm.latency, _ARRIVAL, recv_of_send[sid])
        for nid in succ_compute[tid]:
            rem[nid] -= 1
            if rem[nid] == 0:
                st = tasks[nid].stage
                pool[st][nid] = t
                push(t, _WAKE, f"{st:06d}")
        if task.is_compute:
            push(t, _WAKE, f"{task.stage:06d}")

    while events:
        t, tag, key = heapq.heappop(events)
        if tag == _FINISH:
            finish(key, t)
        elif tag == _ARRIVAL:
            recv = tasks[key]
            st = recv.stage
            start = max(in_free[st], t)
            end = start + comm.wire_time(recv.volume)
            in_free[st] = end
            in_busy[st].add(start, end)
            timeline[key] = (start, end)
            push(end, _FINISH, key)
        else:
            st = int(key)
            if stage_free[st] > t:
                continue
            tid = selector.pick(st, pool[st], t)
            if tid is None:
                continue
            task = tasks[tid]
            d = dur_of(task)
            if comm.slowdown != 1.0 and d > 0 and (
                    out_busy[st].covers(t) or in_busy[st].covers(t)):
                d = int(round(d * comm.slowdown))
            timeline[tid] = (t, t + d)
            stage_free[st] = t + d
            stage_seq[st].append(tid)
            del pool[st][tid]
            push(t + d, _FINISH, tid)

    if len(timeline) != len(tasks):
        missing = sorted(set(tasks) - set(timeline))
        sample = []
        for tid in missing[:6]:
            waiting = [d for d in tasks[tid].deps if d not in timeline]
            sample.append(f"{tid} waiting on {waiting or 'selector'}")
        raise DeadlockError(missing, "; ".join(sample))
    return EngineResult(timeline=timeline, stage_sequence=stage_seq)


def replay(sched: Schedule, dur_of, comm: CommModel) -> EngineResult:
    return execute(sched.tasks, sched.n_stages, dur_of, comm,
                   ReplaySelector(sched.per_stage_order))
