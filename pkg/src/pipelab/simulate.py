"""Replay simulation of a schedule plus derived reports.

`simulate` replays a schedule's per-stage orders under the engine's timing
rules and returns integer task intervals plus summary metrics.  Bubble time is
measured per stage against the global window: makespan minus that stage's busy
compute time, so warmup, drain and mid-stream stalls all count.  Peak
activation memory comes from each task's `mem_delta` applied at task end, with
frees ordered before allocations at equal timestamps.

`overlap_report` quantifies how well transfers hide behind compute: for every
compute task, its wait is the gap between its actual start and the latest of
its stage predecessor's end and its dependencies' producer finish times.  A
RECV dep is charged at the producing task's end, the moment the payload could
have been available over an instant wire, so any positive wait is exactly the
start delay the transfer itself caused.  Zero-cost comm yields zero waits
everywhere.  In a two-fold schedule the first pair member's transfers are
exposed by construction and only the second member's are expected to hide;
`steady_wait` sums the waits of tasks whose transfers the schedule claims to
overlap.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .costs import DurationTable
from .engine import CommModel, EngineResult, make_duration_fn, replay
from .generators import comm_hidden, warmup_mbs
from .schedule import RECV, SEND, Schedule


@dataclass
class Metrics:
    makespan: int
    per_stage_busy: list[int]
    per_stage_bubble: list[int]
    bubble_fraction: float
    per_stage_peak_activation: list[int]
    total_send_elements: int
    time_unit: str


@dataclass
class SimResult:
    sched: Schedule
    timeline: dict[str, tuple[int, int]]
    metrics: Metrics


def simulate(sched: Schedule, durations: DurationTable,
             comm: CommModel | None = None) -> SimResult:
    comm = comm or CommModel.zero()
    fused = sched.meta.get("backward") == "fused"
    res: EngineResult = replay(sched, make_duration_fn(durations, fused), comm)
    tl = res.timeline
    n = sched.n_stages
    makespan = max(end for _, end in tl.values()) if tl else 0
    busy = [0] * n
    for tid, (start, end) in tl.items():
        t = sched.tasks[tid]
        if t.is_compute:
            busy[t.stage] += end - start
    bubble = [makespan - b for b in busy]
    peaks = [max((lvl for _, lvl in prof), default=0)
             for prof in memory_profile(sched, tl)]
    sends = sum(t.volume for t in sched.tasks.values() if t.kind == SEND)
    frac = sum(bubble) / (n * makespan) if makespan else 0.0
    return SimResult(sched, tl, Metrics(
        makespan=makespan, per_stage_busy=busy, per_stage_bubble=bubble,
        bubble_fraction=frac, per_stage_peak_activation=peaks,
        total_send_elements=sends, time_unit=durations.time_unit))


def memory_profile(sched: Schedule, timeline: dict[str, tuple[int, int]]
                   ) -> list[list[tuple[int, int]]]:
    """Per stage, the stepwise resident-activation curve as (time, level)
    points.  Deltas land at task end; frees sort before allocations at the
    same instant."""
    profiles: list[list[tuple[int, int]]] = []
    for st in range(sched.n_stages):
        events = []
        for tid in sched.per_stage_order[st]:
            t = sched.tasks[tid]
            if t.mem_delta:
                events.append((timeline[tid][1], t.mem_delta > 0, tid, t.mem_delta))
        events.sort()
        level = 0
        prof = []
        for time, _, _, delta in events:
            level += delta
            prof.append((time, level))
        profiles.append(prof)
    return profiles


@dataclass
class OverlapRow:
    task_id: str
    stage: int
    mb: int
    wait: int
    hidden: bool  # schedule expects this task's inbound transfer to overlap


@dataclass
class OverlapReport:
    rows: list[OverlapRow]
    per_stage_wait: list[int]
    total_wait: int
    steady_wait: int  # waits on tasks whose transfers should be hidden
    warmup_mbs: set[int]


def overlap_report(result: SimResult) -> OverlapReport:
    sched, tl = result.sched, result.timeline
    warm = warmup_mbs(sched)
    fold = int(sched.meta.get("fold", 1))
    p = int(sched.meta["p"])
    rows: list[OverlapRow] = []
    per_stage = [0] * sched.n_stages
    for st in range(sched.n_stages):
        prev_end = 0
        for tid in sched.per_stage_order[st]:
            t = sched.tasks[tid]
            start, end = tl[tid]
            floor = prev_end
            for d in t.deps:
                dt = sched.tasks[d]
                if dt.kind == RECV:
                    # Charge the payload at its producer's finish: the wait
                    # beyond that is wire/queueing time the wire added.
                    floor = max(floor, tl[sched.tasks[dt.deps[0]].deps[0]][1])
                else:
                    floor = max(floor, tl[d][1])
            wait = start - floor
            if wait > 0:
                if fold == 2:
                    hidden = comm_hidden(t.kind, t.mb, p)
                else:
                    hidden = t.mb not in warm
                rows.append(OverlapRow(tid, st, t.mb, wait, hidden))
                per_stage[st] += wait
            prev_end = end
    total = sum(per_stage)
    steady = sum(r.wait for r in rows if r.hidden)
    return OverlapReport(rows=rows, per_stage_wait=per_stage, total_wait=total,
                         steady_wait=steady, warmup_mbs=warm)


# --- exports --------------------------------------------------------------


def chrome_trace(result: SimResult) -> list[dict]:
    """Chrome trace-event list: pid = stage, lanes for compute and channels.

    Times are microseconds in the trace; ns-mode values are divided by 1e3,
    abstract units are emitted 1:1.
    """
    scale = 1e-3 if result.metrics.time_unit == "ns" else 1.0
    events = []
    for tid in sorted(result.timeline):
        t = result.sched.tasks[tid]
        start, end = result.timeline[tid]
        lane = {SEND: "out", RECV: "in"}.get(t.kind, "compute")
        events.append({
            "name": tid, "ph": "X", "pid": t.stage, "tid": lane,
            "ts": start * scale, "dur": (end - start) * scale,
            "cat": t.kind,
            "args": {"kind": t.kind, "comp": t.comp, "mb": t.mb, "layer": t.layer},
        })
    return events


def write_chrome_trace(path: str | Path, result: SimResult) -> None:
    Path(path).write_text(json.dumps({"traceEvents": chrome_trace(result)}, indent=1))


def timeline_csv(result: SimResult) -> str:
    """Deterministic CSV of all task intervals: identical configs yield
    byte-identical output."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "stage", "kind", "mb", "layer", "start", "end"])
    rows = sorted(result.timeline.items(), key=lambda kv: (kv[1][0], kv[1][1], kv[0]))
    for tid, (start, end) in rows:
        t = result.sched.tasks[tid]
        w.writerow([tid, t.stage, t.kind, t.mb, t.layer, start, end])
    return buf.getvalue()


def write_timeline_csv(path: str | Path, result: SimResult) -> None:
    Path(path).write_text(timeline_csv(result))
