"""Schedule representation, structural validation, and text serialization.

A schedule is a set of tasks plus an explicit per-stage execution order for the
compute tasks.  Compute kinds are FWD, BWD_B (input gradient), BWD_W (weight
gradient) and RECOMPUTE_FWD; SEND/RECV tasks model the channel occupancy of
cross-stage payloads and are not listed in the per-stage order (they are driven
by their producer/consumer).  Dependencies are ids; a RECV depends on exactly
its SEND, and consumers depend on the RECV (or directly on the producer when
both live on the same stage).

Memory accounting rides on the tasks: `mem_delta` is applied at task-end time,
positive on forward tasks that stash activations, negative on the last backward
consumer.  Validation checks the per-stage running sum never goes negative and
returns to zero.

The text form is versioned and line-oriented: a header, one `task` line per
task, one `order` line per stage.  Round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

FWD = "FWD"
BWD_B = "BWD_B"
BWD_W = "BWD_W"
RECOMPUTE = "RECOMPUTE_FWD"
SEND = "SEND"
RECV = "RECV"

COMPUTE_KINDS = (FWD, BWD_B, BWD_W, RECOMPUTE)
COMM_KINDS = (SEND, RECV)

HEADER = "# pipelab schedule v1"


@dataclass(frozen=True)
class Task:
    id: str
    stage: int
    kind: str
    comp: str               # pre | attn | post | chunk
    mb: int
    layer: int              # first layer covered
    span: int = 1           # layers covered (chunk tasks span L/p)
    deps: tuple[str, ...] = ()
    edge: str = ""          # comm edge kind for SEND/RECV
    peer: int = -1          # peer stage for SEND/RECV
    volume: int = 0         # payload elements for SEND/RECV
    mem_delta: int = 0      # activation elements applied at task end

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS

    def with_deps(self, deps: tuple[str, ...]) -> "Task":
        return replace(self, deps=deps)


@dataclass
class Schedule:
    method: str
    n_stages: int
    tasks: dict[str, Task]
    per_stage_order: list[list[str]]
    meta: dict[str, int | str] = field(default_factory=dict)

    def compute_tasks(self):
        return (t for t in self.tasks.values() if t.is_compute)

    def stage_tasks(self, stage: int):
        return (self.tasks[tid] for tid in self.per_stage_order[stage])


def successors(tasks: dict[str, Task]) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = {tid: [] for tid in tasks}
    for t in tasks.values():
        for d in t.deps:
            succ[d].append(t.id)
    return succ


@dataclass
class ValidationReport:
    ok: bool
    errors: list[str]

    def __bool__(self) -> bool:
        return self.ok


def validate_schedule(sched: Schedule) -> ValidationReport:
    """Structural checks: referential integrity, acyclicity, per-microbatch
    program order, B-before-W, recompute-before-use, memory sanity."""
    errors: list[str] = []
    tasks = sched.tasks

    def err(msg: str) -> None:
        if len(errors) < 50:
            errors.append(msg)

    # Referential integrity and field sanity.
    for t in tasks.values():
        for d in t.deps:
            if d not in tasks:
                err(f"{t.id}: missing dep {d}")
        if t.kind not in COMPUTE_KINDS + COMM_KINDS:
            err(f"{t.id}: unknown kind {t.kind}")
        if not 0 <= t.stage < sched.n_stages:
            err(f"{t.id}: stage {t.stage} out of range")
        if t.kind in COMM_KINDS:
            if t.volume < 0:
                err(f"{t.id}: negative volume")
            if t.peer == t.stage:
                err(f"{t.id}: send/recv to own stage")
        if t.kind == RECV:
            deps = [tasks[d] for d in t.deps if d in tasks]
            if len(deps) != 1 or deps[0].kind != SEND:
                err(f"{t.id}: RECV must depend on exactly one SEND")
            elif deps[0].volume != t.volume or deps[0].stage != t.peer or deps[0].peer != t.stage:
                err(f"{t.id}: SEND/RECV peer or volume mismatch")

    # Per-stage order covers exactly the compute tasks of that stage.
    listed: set[str] = set()
    for st, order in enumerate(sched.per_stage_order):
        for tid in order:
            t = tasks.get(tid)
            if t is None:
                err(f"order[{st}]: unknown task {tid}")
                continue
            if not t.is_compute:
                err(f"order[{st}]: {tid} is not a compute task")
            elif t.stage != st:
                err(f"order[{st}]: {tid} belongs to stage {t.stage}")
            if tid in listed:
                err(f"order[{st}]: {tid} listed twice")
            listed.add(tid)
    for t in sched.compute_tasks():
        if t.id not in listed:
            err(f"{t.id}: compute task missing from per-stage order")

    if errors:
        return ValidationReport(False, errors)

    # Acyclicity over deps plus per-stage order adjacency.
    indeg = {tid: len(t.deps) for tid, t in tasks.items()}
    extra: dict[str, list[str]] = {tid: [] for tid in tasks}
    for order in sched.per_stage_order:
        for a, b in zip(order, order[1:]):
            extra[a].append(b)
            indeg[b] += 1
    succ = successors(tasks)
    frontier = sorted(tid for tid, d in indeg.items() if d == 0)
    seen = 0
    from collections import deque
    q = deque(frontier)
    while q:
        tid = q.popleft()
        seen += 1
        for nid in succ[tid] + extra[tid]:
            indeg[nid] -= 1
            if indeg[nid] == 0:
                q.append(nid)
    if seen != len(tasks):
        stuck = sorted(tid for tid, d in indeg.items() if d > 0)[:8]
        err(f"cycle among deps/order; {len(tasks) - seen} tasks blocked, e.g. {stuck}")
        return ValidationReport(False, errors)

    # Position index for order-based checks.
    pos = {tid: i for order in sched.per_stage_order for i, tid in enumerate(order)}

    def _connected(a: Task, b: Task) -> bool:
        # b follows a directly, or through one SEND/RECV hop.
        if a.id in b.deps:
            return True
        for d in b.deps:
            dt = tasks[d]
            if dt.kind == RECV and any(a.id in tasks[sd].deps for sd in dt.deps):
                return True
        return False

    comp_rank = {"pre": 0, "attn": 1, "post": 2, "chunk": 0}
    by_mb_fwd: dict[int, list[Task]] = {}
    by_mb_bwd: dict[int, list[Task]] = {}
    for t in sched.compute_tasks():
        if t.kind == FWD:
            by_mb_fwd.setdefault(t.mb, []).append(t)
        elif t.kind == BWD_B:
            by_mb_bwd.setdefault(t.mb, []).append(t)
        if t.kind == BWD_W:
            # Same-site BWD_B must be a dep and precede it in stage order.
            mates = [tasks[d] for d in t.deps
                     if tasks[d].kind == BWD_B and tasks[d].mb == t.mb
                     and tasks[d].comp == t.comp and tasks[d].layer == t.layer]
            if not mates:
                err(f"{t.id}: BWD_W must depend on its BWD_B")
            elif any(m.stage == t.stage and pos[m.id] > pos[t.id] for m in mates):
                err(f"{t.id}: BWD_W ordered before its BWD_B")
        if t.kind == BWD_B:
            for d in t.deps:
                dt = tasks[d]
                if dt.kind == RECOMPUTE and dt.stage == t.stage and pos[d] > pos[t.id]:
                    err(f"{t.id}: RECOMPUTE_FWD ordered after its BWD_B")

    for mb, fwd in by_mb_fwd.items():
        fwd.sort(key=lambda t: (t.layer, comp_rank[t.comp]))
        for a, b in zip(fwd, fwd[1:]):
            if not _connected(a, b):
                err(f"mb {mb}: forward chain broken {a.id} -> {b.id}")
        bwd = by_mb_bwd.get(mb, [])
        bwd.sort(key=lambda t: (t.layer, comp_rank[t.comp]), reverse=True)
        for a, b in zip(bwd, bwd[1:]):
            if not _connected(a, b):
                err(f"mb {mb}: backward chain broken {a.id} -> {b.id}")

    # Stage-local memory: running sum stays non-negative, ends at zero.
    for st, order in enumerate(sched.per_stage_order):
        acc = 0
        low = 0
        for tid in order:
            acc += tasks[tid].mem_delta
            low = min(low, acc)
        if low < 0:
            err(f"stage {st}: activation balance dips to {low}")
        if acc != 0:
            err(f"stage {st}: activation balance ends at {acc}, not 0")

    return ValidationReport(not errors, errors)


# --- text serialization ---------------------------------------------------


def _fmt_deps(deps: tuple[str, ...]) -> str:
    return ",".join(deps) if deps else "-"


def dumps(sched: Schedule) -> str:
    lines = [HEADER]
    meta = {"method": sched.method, "stages": sched.n_stages, **sched.meta}
    lines.append("meta " + " ".join(f"{k}={v}" for k, v in meta.items()))
    for tid in sorted(sched.tasks):
        t = sched.tasks[tid]
        lines.append(
            f"task {t.id} stage={t.stage} kind={t.kind} comp={t.comp} mb={t.mb} "
            f"layer={t.layer} span={t.span} mem={t.mem_delta} vol={t.volume} "
            f"edge={t.edge or '-'} peer={t.peer} deps={_fmt_deps(t.deps)}"
        )
    for st, order in enumerate(sched.per_stage_order):
        lines.append(f"order stage={st} ids={_fmt_deps(tuple(order))}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Schedule:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != HEADER:
        raise ValueError(f"bad or missing header; expected {HEADER!r}")
    meta: dict[str, int | str] = {}
    tasks: dict[str, Task] = {}
    orders: dict[int, list[str]] = {}

    def _kv(parts: list[str]) -> dict[str, str]:
        out = {}
        for p in parts:
            k, _, v = p.partition("=")
            out[k] = v
        return out

    for ln in lines[1:]:
        parts = ln.split()
        tag = parts[0]
        if tag == "meta":
            for k, v in _kv(parts[1:]).items():
                meta[k] = int(v) if v.lstrip("-").isdigit() else v
        elif tag == "task":
            tid = parts[1]
            kv = _kv(parts[2:])
            deps = () if kv["deps"] == "-" else tuple(kv["deps"].split(","))
            tasks[tid] = Task(
                id=tid, stage=int(kv["stage"]), kind=kv["kind"], comp=kv["comp"],
                mb=int(kv["mb"]), layer=int(kv["layer"]), span=int(kv["span"]),
                deps=deps, edge="" if kv["edge"] == "-" else kv["edge"],
                peer=int(kv["peer"]), volume=int(kv["vol"]), mem_delta=int(kv["mem"]),
            )
        elif tag == "order":
            kv = _kv(parts[1:])
            ids = kv["ids"]
            orders[int(kv["stage"])] = [] if ids == "-" else ids.split(",")
        else:
            raise ValueError(f"unknown line tag {tag!r}")
    n_stages = int(meta.pop("stages"))
    method = str(meta.pop("method"))
    per_stage = [orders.get(st, []) for st in range(n_stages)]
    return Schedule(method=method, n_stages=n_stages, tasks=tasks,
                    per_stage_order=per_stage, meta=meta)


def write_schedule(sched: Schedule, path: str | Path) -> None:
    Path(path).write_text(dumps(sched))


def read_schedule(path: str | Path) -> Schedule:
    return loads(Path(path).read_text())
