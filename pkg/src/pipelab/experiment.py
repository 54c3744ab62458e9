"""Batch experiment driver: config files, sweeps, CSV/trace artifacts, and
the attention/communication crossover search.

Config files are flat INI-style key-value text (configparser), one section
level, diff-friendly.  Sweep axes accept plain integers or `<k>p` tokens
(`p`, `2p`, `4p`) resolved against the pipeline depth of each sweep point,
which is how sweeps like L in {p, 2p, 4p} with m = 2p are written.

Example:

    [model]
    h = 16
    b = 1
    heads = 4

    [device]
    preset = h20_like

    [run]
    methods = 1f1b, helix_naive
    mode = unit            ; unit | flops
    unit_times = 1 3 2
    qkv_in_attention = true
    comm = zero            ; zero | uniform:<cost>[:<latency>] | device
    tolerance = 0
    traces = true

    [sweep]
    p = 4
    L = 2p
    s = 64
    m = p

Sweep points iterate p, then L, then s, then m, methods innermost; rows are
emitted in that order so identical configs give byte-identical CSVs.  With
zero communication every point is also checked against the closed-form
bubble and memory predictions; the run's exit status is 0 only if all those
comparisons pass.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .analytic import ComparisonReport, compare
from .config import (
    ConfigError,
    DeviceSpec,
    ModelConfig,
    device_preset,
)
from .costs import EDGE_PRE_ATTN, DurationTable, comm_volume, transfer_ns
from .engine import CommModel
from .generators import METHODS, generate
from .schedule import validate_schedule
from .simulate import simulate, write_chrome_trace

CSV_COLUMNS = ("method", "p", "L", "s", "m", "mode", "time_unit", "makespan",
               "bubble_per_stage", "bubble_fraction", "peak_activation_per_stage",
               "total_send_elements", "analytic_ok")


@dataclass(frozen=True)
class ExperimentConfig:
    h: int
    b: int
    heads: int
    sp: int
    device: DeviceSpec
    methods: tuple[str, ...]
    mode: str                      # "unit" | "flops"
    unit_times: tuple[int, int, int]
    qkv_in_attention: bool
    comm: str                      # "zero" | "uniform:..." | "device"
    tolerance: float
    traces: bool
    outdir: str
    p_axis: tuple[int, ...]
    l_axis: tuple[str, ...]        # tokens: int or "<k>p"
    s_axis: tuple[int, ...]
    m_axis: tuple[str, ...]


def _axis_token(tok: str) -> str:
    tok = tok.strip()
    if not tok:
        raise ConfigError("empty sweep token")
    if tok.endswith("p"):
        head = tok[:-1] or "1"
        if not head.isdigit():
            raise ConfigError(f"bad sweep token {tok!r}")
        return tok
    if not tok.lstrip("-").isdigit():
        raise ConfigError(f"bad sweep token {tok!r}")
    return tok


def resolve_token(tok: str, p: int) -> int:
    if tok.endswith("p"):
        return int(tok[:-1] or "1") * p
    return int(tok)


def _split(raw: str) -> list[str]:
    return [t for t in (x.strip() for x in raw.replace(",", " ").split()) if t]


def _device_from(section: configparser.SectionProxy) -> DeviceSpec:
    if "preset" in section:
        return device_preset(section["preset"].strip())
    try:
        return DeviceSpec(
            name=section.get("name", "custom"),
            compute_rate=int(section["compute_rate"]),
            link_bandwidth=int(section["link_bandwidth"]),
            link_latency=float(section.get("link_latency", "0")),
            bytes_per_element=int(section.get("bytes_per_element", "2")),
        )
    except KeyError as e:
        raise ConfigError(f"[device] missing key {e}") from None


def parse_experiment_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    for sec in ("model", "run", "sweep"):
        if sec not in cp:
            raise ConfigError(f"config missing [{sec}] section")

    model, run, sweep = cp["model"], cp["run"], cp["sweep"]
    try:
        h = int(model["h"])
        b = int(model.get("b", "1"))
        heads = int(model.get("heads", "1"))
        sp = int(model.get("sp", "1"))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"[model] section: {e}") from None

    methods = tuple(_split(run.get("methods", "")))
    if not methods:
        raise ConfigError("no methods configured")
    for meth in methods:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r} (known: {', '.join(METHODS)})")

    mode = run.get("mode", "unit").strip()
    if mode not in ("unit", "flops"):
        raise ConfigError(f"mode must be unit or flops, got {mode!r}")
    ut = [int(x) for x in _split(run.get("unit_times", "1 3 2"))]
    if len(ut) != 3:
        raise ConfigError("unit_times needs exactly three integers")
    comm = run.get("comm", "zero").strip()
    if comm == "device" and mode != "flops":
        raise ConfigError("comm = device requires flops mode (nanosecond timebase)")

    device = _device_from(cp["device"]) if "device" in cp else device_preset("h20_like")
    if mode == "flops" and "device" not in cp:
        raise ConfigError("flops mode requires a [device] section")

    def axis(name: str, fallback: str | None = None) -> list[str]:
        raw = sweep.get(name, "")
        if not raw and fallback is not None and name in model:
            raw = model[name]
        if not raw and fallback is not None:
            raw = fallback
        vals = _split(raw)
        if not vals:
            raise ConfigError(f"sweep axis {name!r} is empty")
        return [_axis_token(v) for v in vals]

    p_axis = tuple(int(v) for v in axis("p"))
    l_axis = tuple(axis("L", fallback=model.get("L", "")))
    s_axis = tuple(int(v) for v in axis("s"))
    m_axis = tuple(axis("m", fallback="p"))

    return ExperimentConfig(
        h=h, b=b, heads=heads, sp=sp, device=device, methods=methods, mode=mode,
        unit_times=(ut[0], ut[1], ut[2]),
        qkv_in_attention=run.getboolean("qkv_in_attention", fallback=True),
        comm=comm,
        tolerance=float(run.get("tolerance", "0")),
        traces=run.getboolean("traces", fallback=False),
        outdir=run.get("outdir", "out").strip(),
        p_axis=p_axis, l_axis=l_axis, s_axis=s_axis, m_axis=m_axis,
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_experiment_config(text)


def comm_model_from_spec(spec: str, device: DeviceSpec) -> CommModel:
    if spec == "zero":
        return CommModel.zero()
    if spec == "device":
        return CommModel.from_device(device)
    if spec.startswith("uniform:"):
        parts = spec.split(":")[1:]
        try:
            nums = [int(x) for x in parts]
        except ValueError:
            raise ConfigError(f"bad comm spec {spec!r}") from None
        cost = nums[0]
        latency = nums[1] if len(nums) > 1 else 0
        ref = nums[2] if len(nums) > 2 else 0
        return CommModel.uniform(cost, latency=latency, ref_volume=ref)
    raise ConfigError(f"bad comm spec {spec!r} (zero | uniform:<cost>[:lat[:ref]] | device)")


@dataclass
class SweepRow:
    values: dict[str, object]

    def csv_cells(self) -> list[str]:
        return [str(self.values[c]) for c in CSV_COLUMNS]


@dataclass
class ExperimentResult:
    exit_code: int
    rows: list[SweepRow]
    comparisons: list[ComparisonReport]
    report: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


def _table_for(exp: ExperimentConfig, cfg: ModelConfig) -> DurationTable:
    if exp.mode == "unit":
        return DurationTable.from_units(*exp.unit_times)
    return DurationTable.from_flops(cfg, exp.device, exp.qkv_in_attention)


def metrics_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(row.csv_cells()) + "\n")
    return buf.getvalue()


def run_experiment(exp: ExperimentConfig, outdir: str | Path | None = None) -> ExperimentResult:
    """Run the full sweep, write metrics.csv (and traces when enabled), and
    compare against the closed forms where the comparison is meaningful."""
    out = Path(outdir if outdir is not None else exp.outdir)
    out.mkdir(parents=True, exist_ok=True)
    comm = comm_model_from_spec(exp.comm, exp.device)
    compare_points = exp.comm == "zero"

    rows: list[SweepRow] = []
    comparisons: list[ComparisonReport] = []
    report: list[str] = []
    artifacts: list[str] = []

    for p in exp.p_axis:
        for l_tok in exp.l_axis:
            for s in exp.s_axis:
                for m_tok in exp.m_axis:
                    L, m = resolve_token(l_tok, p), resolve_token(m_tok, p)
                    cfg = ModelConfig(L=L, h=exp.h, s=s, b=exp.b,
                                      num_heads=exp.heads, p=p, m=m, sp_size=exp.sp)
                    table = _table_for(exp, cfg)
                    for method in exp.methods:
                        sched = generate(method, cfg, table,
                                         qkv_in_attention=exp.qkv_in_attention)
                        validate_schedule(sched)
                        sim = simulate(sched, table, comm)
                        met = sim.metrics
                        ok_cell: object = ""
                        if compare_points:
                            rep = compare(method, cfg, table, met, exp.tolerance)
                            comparisons.append(rep)
                            ok_cell = int(rep.ok)
                            tag = f"{method} p={p} L={L} s={s} m={m}"
                            if rep.ok:
                                report.append(f"ok   {tag}")
                            else:
                                report.append(f"FAIL {tag}")
                                report.extend("  " + ln for ln in rep.lines()
                                              if ln.startswith("FAIL"))
                        rows.append(SweepRow({
                            "method": method, "p": p, "L": L, "s": s, "m": m,
                            "mode": exp.mode, "time_unit": met.time_unit,
                            "makespan": met.makespan,
                            "bubble_per_stage": ";".join(map(str, met.per_stage_bubble)),
                            "bubble_fraction": f"{met.bubble_fraction:.6f}",
                            "peak_activation_per_stage":
                                ";".join(map(str, met.per_stage_peak_activation)),
                            "total_send_elements": met.total_send_elements,
                            "analytic_ok": ok_cell,
                        }))
                        if exp.traces:
                            name = f"trace_{method}_p{p}_L{L}_s{s}_m{m}.json"
                            write_chrome_trace(out / name, sim)
                            artifacts.append(str(out / name))

    csv_path = out / "metrics.csv"
    csv_path.write_text(metrics_csv(rows))
    artifacts.append(str(csv_path))
    failed = sum(0 if c.ok else 1 for c in comparisons)
    if compare_points:
        report.append(f"{len(comparisons) - failed}/{len(comparisons)} comparisons passed")
    else:
        report.append("comparisons skipped (non-zero communication)")
    return ExperimentResult(exit_code=1 if failed else 0, rows=rows,
                            comparisons=comparisons, report=report, artifacts=artifacts)


# --- attention/communication crossover ------------------------------------


@dataclass
class ThresholdReport:
    device: str
    qkv_in_attention: bool
    lo: int
    hi: int
    crossover_s: int | None
    attn_ns: int | None
    comm_ns: int | None

    def lines(self) -> list[str]:
        head = (f"device {self.device}, s in [{self.lo}, {self.hi}], "
                f"qkv_in_attention={self.qkv_in_attention}")
        if self.crossover_s is None:
            return [head, "no crossover: attention never covers the transfer in range"]
        return [head,
                f"crossover at s = {self.crossover_s}: attention {self.attn_ns} ns "
                f">= transfer {self.comm_ns} ns (first such s)"]


def overlap_threshold(device: DeviceSpec, h: int, b: int, heads: int,
                      lo: int, hi: int, qkv_in_attention: bool = True,
                      sp: int = 1) -> ThresholdReport:
    """Smallest s in [lo, hi] where one layer's attention forward takes at
    least as long as the pre->attn payload transfer (wire plus latency).
    Attention grows quadratically in s and the payload linearly, so past the
    first covered point everything stays covered; below it transfers are
    exposed.  Integer bisection."""
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad search range [{lo}, {hi}]")

    def gap(s: int) -> tuple[int, int]:
        cfg = ModelConfig(L=1, h=h, s=s, b=b, num_heads=heads, p=1, m=1, sp_size=sp)
        table = DurationTable.from_flops(cfg, device, qkv_in_attention)
        attn = table.of("attn", "fwd")
        wire = transfer_ns(comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention), device)
        return attn, wire + device.latency_ns

    a_hi, c_hi = gap(hi)
    if a_hi < c_hi:
        return ThresholdReport(device.name, qkv_in_attention, lo, hi, None, None, None)
    a_lo, c_lo = gap(lo)
    if a_lo >= c_lo:
        return ThresholdReport(device.name, qkv_in_attention, lo, hi, lo, a_lo, c_lo)
    span_lo, span_hi = lo, hi  # invariant: uncovered at span_lo, covered at span_hi
    while span_hi - span_lo > 1:
        mid = (span_lo + span_hi) // 2
        a, c = gap(mid)
        if a >= c:
            span_hi = mid
        else:
            span_lo = mid
    a, c = gap(span_hi)
    return ThresholdReport(device.name, qkv_in_attention, lo, hi, span_hi, a, c)
