"""HTTP service exposing the laboratory: simulation, validation, numeric
runtime checks, sweeps, and the overlap-threshold search.

The service is the single entry point for tooling; the CLI talks to it
through an in-process ASGI transport by default, or over the network when
pointed at a running server.  Requests and responses are pydantic models, so
the wire format is the documented schema.  Configuration and schedule
problems surface as HTTP 400 with a reason; semantic failures (a comparison
or equivalence check that ran and did not hold) are successful responses
with ok = false, because the computation itself succeeded.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .analytic import compare
from .config import ConfigError, DeviceSpec, ModelConfig, device_preset
from .costs import DurationTable
from .engine import CommModel, DeadlockError
from .experiment import (
    ExperimentResult,
    overlap_threshold,
    parse_experiment_config,
    run_experiment,
)
from .generators import METHODS, generate
from .runtime import execute_schedule, make_inputs, make_model, sequential_oracle
from .schedule import loads, validate_schedule
from .simulate import chrome_trace, overlap_report, simulate

# Hard ceiling on toy-runtime work so a service request stays interactive:
# total forward elements s*b*h*L*m.
RUNTIME_CHECK_ELEMENT_LIMIT = 1 << 24


class Dims(BaseModel):
    L: int = Field(ge=1)
    h: int = Field(ge=2)
    s: int = Field(ge=1)
    b: int = Field(ge=1, default=1)
    heads: int = Field(ge=1, default=1)
    p: int = Field(ge=1)
    m: int = Field(ge=1)
    sp: int = Field(ge=1, default=1)

    def to_config(self) -> ModelConfig:
        try:
            return ModelConfig(L=self.L, h=self.h, s=self.s, b=self.b,
                               num_heads=self.heads, p=self.p, m=self.m,
                               sp_size=self.sp)
        except ConfigError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None


class CommSpec(BaseModel):
    mode: str = "zero"            # zero | uniform | device
    cost: int = 0
    latency: int = 0
    ref_volume: int = 0
    slowdown: float = 1.0

    def to_model(self, device: DeviceSpec) -> CommModel:
        if self.mode == "zero":
            return CommModel.zero()
        if self.mode == "uniform":
            return CommModel.uniform(self.cost, latency=self.latency,
                                     slowdown=self.slowdown,
                                     ref_volume=self.ref_volume)
        if self.mode == "device":
            return CommModel.from_device(device, slowdown=self.slowdown)
        raise HTTPException(status_code=400, detail=f"unknown comm mode {self.mode!r}")


class SimulateRequest(BaseModel):
    method: str
    dims: Dims
    mode: str = "unit"            # unit | flops
    unit_times: tuple[int, int, int] = (1, 3, 2)
    device: str = "h20_like"
    qkv_in_attention: bool = True
    comm: CommSpec = CommSpec()
    tolerance: float = 0.0
    include_trace: bool = False
    include_overlap: bool = False


class SimulateResponse(BaseModel):
    method: str
    time_unit: str
    makespan: int
    per_stage_bubble: list[int]
    bubble_fraction: float
    per_stage_peak_activation: list[int]
    total_send_elements: int
    analytic_ok: bool | None      # None: comparison skipped (non-zero comm)
    analytic_lines: list[str]
    steady_state_wait: int | None
    trace: list[dict] | None


def _build_table(req: SimulateRequest, cfg: ModelConfig) -> DurationTable:
    if req.mode == "unit":
        return DurationTable.from_units(*req.unit_times)
    if req.mode == "flops":
        return DurationTable.from_flops(cfg, _device(req.device), req.qkv_in_attention)
    raise HTTPException(status_code=400, detail=f"unknown mode {req.mode!r}")


def _device(name: str) -> DeviceSpec:
    try:
        return device_preset(name)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e)) from None


class ValidateRequest(BaseModel):
    schedule_text: str | None = None
    method: str | None = None
    dims: Dims | None = None
    unit_times: tuple[int, int, int] = (1, 3, 2)
    qkv_in_attention: bool = True


class ValidateResponse(BaseModel):
    ok: bool
    method: str
    stages: int
    tasks: int
    error: str | None


class RuntimeCheckRequest(BaseModel):
    dims: Dims = Dims(L=4, h=8, s=8, b=2, heads=2, p=2, m=4)
    methods: list[str] = list(METHODS)
    seed: int = 0
    mlp_chunk: int | None = None
    threaded: bool = False


class RuntimeCheckResponse(BaseModel):
    ok: bool
    losses: list[float]
    per_method: dict[str, bool]
    detail: list[str]


class SweepRequest(BaseModel):
    config_text: str
    outdir: str | None = None


class SweepResponse(BaseModel):
    exit_code: int
    ok: bool
    rows: list[dict]
    report: list[str]
    artifacts: list[str]


class ThresholdRequest(BaseModel):
    device: str = "h20_like"
    h: int = Field(ge=2)
    b: int = Field(ge=1, default=1)
    heads: int = Field(ge=1, default=1)
    lo: int = Field(ge=1)
    hi: int = Field(ge=1)
    qkv_in_attention: bool = True
    link_bandwidth: int | None = None   # preset overrides
    link_latency: float | None = None


class ThresholdResponse(BaseModel):
    device: str
    crossover_s: int | None
    attn_ns: int | None
    comm_ns: int | None
    lines: list[str]


def create_app() -> FastAPI:
    app = FastAPI(title="pipelab", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate_endpoint(req: SimulateRequest) -> SimulateResponse:
        cfg = req.dims.to_config()
        table = _build_table(req, cfg)
        try:
            sched = generate(req.method, cfg, table,
                             qkv_in_attention=req.qkv_in_attention)
            sim = simulate(sched, table, req.comm.to_model(_device(req.device)))
        except (ConfigError, DeadlockError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        met = sim.metrics
        analytic_ok: bool | None = None
        lines: list[str] = []
        if req.comm.mode == "zero":
            rep = compare(req.method, cfg, table, met, req.tolerance)
            analytic_ok = rep.ok
            lines = rep.lines()
        steady: int | None = None
        if req.include_overlap:
            steady = overlap_report(sim).steady_wait
        return SimulateResponse(
            method=req.method, time_unit=met.time_unit, makespan=met.makespan,
            per_stage_bubble=met.per_stage_bubble,
            bubble_fraction=met.bubble_fraction,
            per_stage_peak_activation=met.per_stage_peak_activation,
            total_send_elements=met.total_send_elements,
            analytic_ok=analytic_ok, analytic_lines=lines,
            steady_state_wait=steady,
            trace=chrome_trace(sim) if req.include_trace else None,
        )

    @app.post("/validate", response_model=ValidateResponse)
    def validate_endpoint(req: ValidateRequest) -> ValidateResponse:
        if (req.schedule_text is None) == (req.method is None):
            raise HTTPException(
                status_code=400,
                detail="provide exactly one of schedule_text or method+dims")
        try:
            if req.schedule_text is not None:
                sched = loads(req.schedule_text)
            else:
                if req.dims is None:
                    raise HTTPException(status_code=400, detail="method needs dims")
                cfg = req.dims.to_config()
                sched = generate(req.method, cfg,
                                 DurationTable.from_units(*req.unit_times),
                                 qkv_in_attention=req.qkv_in_attention)
        except (ConfigError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        report = validate_schedule(sched)
        return ValidateResponse(ok=report.ok, method=sched.method,
                                stages=sched.n_stages, tasks=len(sched.tasks),
                                error=None if report.ok else "; ".join(report.errors[:5]))

    @app.post("/runtime-check", response_model=RuntimeCheckResponse)
    def runtime_check_endpoint(req: RuntimeCheckRequest) -> RuntimeCheckResponse:
        cfg = req.dims.to_config()
        work = cfg.s * cfg.b * cfg.h * cfg.L * cfg.m
        if work > RUNTIME_CHECK_ELEMENT_LIMIT:
            raise HTTPException(
                status_code=400,
                detail=f"runtime check too large: {work} elements "
                       f"(limit {RUNTIME_CHECK_ELEMENT_LIMIT})")
        for meth in req.methods:
            if meth not in METHODS:
                raise HTTPException(status_code=400, detail=f"unknown method {meth!r}")
        params = make_model(cfg, seed=req.seed)
        inputs = make_inputs(cfg, seed=req.seed + 1)
        ref = sequential_oracle(params, inputs, cfg.num_heads,
                                mlp_chunk=req.mlp_chunk)
        table = DurationTable.from_units(1, 3, 2)
        per_method: dict[str, bool] = {}
        detail: list[str] = []
        for meth in req.methods:
            try:
                sched = generate(meth, cfg, table)
                res = execute_schedule(sched, params, inputs,
                                       mlp_chunk=req.mlp_chunk,
                                       threaded=req.threaded)
            except ConfigError as e:
                raise HTTPException(status_code=400,
                                    detail=f"{meth}: {e}") from None
            same = res.losses == ref.losses and all(
                np.array_equal(res.param_grads[li][name], ref.param_grads[li][name])
                for li in range(cfg.L) for name in ref.param_grads[li])
            per_method[meth] = same
            detail.append(f"{'ok  ' if same else 'FAIL'} {meth}: losses and "
                          f"gradients {'bitwise equal' if same else 'DIFFER'}")
        return RuntimeCheckResponse(ok=all(per_method.values()), losses=ref.losses,
                                    per_method=per_method, detail=detail)

    @app.post("/sweep", response_model=SweepResponse)
    def sweep_endpoint(req: SweepRequest) -> SweepResponse:
        try:
            exp = parse_experiment_config(req.config_text)
            result: ExperimentResult = run_experiment(exp, outdir=req.outdir)
        except ConfigError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return SweepResponse(exit_code=result.exit_code, ok=result.ok,
                             rows=[r.values for r in result.rows],
                             report=result.report, artifacts=result.artifacts)

    @app.post("/overlap-threshold", response_model=ThresholdResponse)
    def threshold_endpoint(req: ThresholdRequest) -> ThresholdResponse:
        dev = _device(req.device)
        if req.link_bandwidth is not None or req.link_latency is not None:
            dev = DeviceSpec(
                name=dev.name + "*",
                compute_rate=dev.compute_rate,
                link_bandwidth=req.link_bandwidth or dev.link_bandwidth,
                link_latency=dev.link_latency if req.link_latency is None
                else req.link_latency,
                bytes_per_element=dev.bytes_per_element)
        try:
            rep = overlap_threshold(dev, req.h, req.b, req.heads,
                                    req.lo, req.hi, req.qkv_in_attention)
        except ConfigError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return ThresholdResponse(device=rep.device, crossover_s=rep.crossover_s,
                                 attn_ns=rep.attn_ns, comm_ns=rep.comm_ns,
                                 lines=rep.lines())

    return app


app = create_app()
