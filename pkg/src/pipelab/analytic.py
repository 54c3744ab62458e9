"""Closed-form bubble and peak-memory predictions, and comparison to sim.

Per-stage bubble against the global window, all stages equal, for zero-cost
comm and the canonical durations (backward-input doubles attention, backward-
weight drops it):

  1F1B          3 (p-1) (t_pre + t_attn + t_post) L/p
  ZB1P            (p-1) (t_pre + 3 t_attn + t_post) L/p
  helix naive   3 (p-1) (t_pre + t_post)
  two-fold      6 (p-1) (t_pre + t_post)
  two-fold+rc   8 (p-1) (t_pre + t_post)

The helix rows are independent of both L and m: attention work always has
somewhere to go, and only the pre/post wavefront edges expose waiting.

Peak resident activation elements:

  1F1B stage i    16 bsh (p-i) L/p          (exact per stage)
  ZB1P            16 bsh L                  (upper bound; stage 0 attains it)
  helix full      16 bsh m L/p              (exact, uniform over stages)
  helix+rc         4 bsh m L/p              (exact, uniform over stages)
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, ModelConfig
from .costs import DurationTable
from .generators import (
    METHOD_1F1B,
    METHOD_HELIX_NAIVE,
    METHOD_HELIX_TWOFOLD,
    METHOD_HELIX_TWOFOLD_RC,
    METHOD_ZB1P,
)
from .simulate import Metrics

_HELIX_FACTORS = {
    METHOD_HELIX_NAIVE: 3,
    METHOD_HELIX_TWOFOLD: 6,
    METHOD_HELIX_TWOFOLD_RC: 8,
}


def bubble_time(method: str, p: int, L: int, t_pre: int, t_attn: int, t_post: int) -> int:
    """Predicted per-stage bubble in the same time unit as the inputs."""
    if method == METHOD_1F1B:
        if L % p:
            raise ConfigError("1f1b formula needs L % p == 0")
        return 3 * (p - 1) * (t_pre + t_attn + t_post) * L // p
    if method == METHOD_ZB1P:
        if L % p:
            raise ConfigError("zb1p formula needs L % p == 0")
        return (p - 1) * (t_pre + 3 * t_attn + t_post) * L // p
    if method in _HELIX_FACTORS:
        return _HELIX_FACTORS[method] * (p - 1) * (t_pre + t_post)
    raise ConfigError(f"no bubble formula for method {method!r}")


def bubble_time_from_table(method: str, p: int, L: int, table: DurationTable) -> int:
    return bubble_time(method, p, L, table.of("pre", "fwd"),
                       table.of("attn", "fwd"), table.of("post", "fwd"))


def peak_activation_elements(method: str, cfg: ModelConfig, stage: int) -> int:
    bsh = cfg.tokens * cfg.h
    per_layer = 16 * bsh
    if method == METHOD_1F1B:
        return per_layer * (cfg.p - stage) * cfg.L // cfg.p
    if method == METHOD_ZB1P:
        return per_layer * cfg.L
    if method in (METHOD_HELIX_NAIVE, METHOD_HELIX_TWOFOLD):
        return per_layer * cfg.m * cfg.L // cfg.p
    if method == METHOD_HELIX_TWOFOLD_RC:
        return 4 * bsh * cfg.m * cfg.L // cfg.p
    raise ConfigError(f"no memory formula for method {method!r}")


def memory_is_bound(method: str) -> bool:
    """ZB1P's figure is a cap every stage must respect (stage 0 attains it);
    the others are exact per-stage values."""
    return method == METHOD_ZB1P


def activation_bytes_per_gpu(method: str, cfg: ModelConfig, stage: int,
                             bytes_per_element: int = 2) -> int:
    """Peak stashed-activation bytes on one GPU of a stage.

    Sequence parallelism shards a stage's activations evenly across its
    sp_size ranks, so the per-GPU burden is the stage total divided by
    sp_size. Defaults to fp16 storage.
    """
    elems = peak_activation_elements(method, cfg, stage)
    return elems * bytes_per_element // cfg.sp_size


def activation_bytes_by_stage(method: str, cfg: ModelConfig,
                              bytes_per_element: int = 2) -> list[int]:
    """Per-GPU activation bytes for every stage, worst-stage first for 1F1B."""
    return [activation_bytes_per_gpu(method, cfg, i, bytes_per_element)
            for i in range(cfg.p)]


@dataclass
class CheckRow:
    quantity: str
    stage: int
    predicted: int
    simulated: int
    rel_diff: float
    ok: bool


@dataclass
class ComparisonReport:
    method: str
    rows: list[CheckRow]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def lines(self) -> list[str]:
        out = []
        for r in self.rows:
            mark = "ok  " if r.ok else "FAIL"
            out.append(f"{mark} {r.quantity:<10} stage {r.stage}: predicted {r.predicted} "
                       f"simulated {r.simulated} rel_diff {r.rel_diff:.3e}")
        return out


def _rel(pred: int, sim: int) -> float:
    return (sim - pred) / max(1, abs(pred))


def compare(method: str, cfg: ModelConfig, table: DurationTable,
            metrics: Metrics, tolerance: float = 0.0) -> ComparisonReport:
    """Check simulated per-stage bubble and peak memory against the formulas.

    Meaningful for zero-comm simulations; with comm enabled the simulated
    bubble legitimately exceeds the formula and the caller should pass a
    tolerance reflecting that.
    """
    rows: list[CheckRow] = []
    pred_bubble = bubble_time_from_table(method, cfg.p, cfg.L, table)
    for st, sim in enumerate(metrics.per_stage_bubble):
        rel = _rel(pred_bubble, sim)
        rows.append(CheckRow("bubble", st, pred_bubble, sim, rel, abs(rel) <= tolerance))
    bound = memory_is_bound(method)
    attained = False
    for st, sim in enumerate(metrics.per_stage_peak_activation):
        pred = peak_activation_elements(method, cfg, st)
        rel = _rel(pred, sim)
        if bound:
            ok = sim <= pred
            attained = attained or sim == pred
        else:
            ok = abs(rel) <= tolerance
        rows.append(CheckRow("memory", st, pred, sim, rel, ok))
    if bound:
        rows.append(CheckRow("memory_cap_attained", -1, 1, int(attained),
                             0.0 if attained else -1.0, attained))
    return ComparisonReport(method=method, rows=rows, tolerance=tolerance)
