"""Attention-parallel partition: component-to-stage placement and balance audits.

Layers are cut at component boundaries rather than between layers.  With
L % p == 0:

  pre(l)        -> stage l mod p
  attn(l, i)    -> stage (l + i + 1) mod p      (microbatch-dependent)
  post(l)       -> stage (l + 1) mod p, except post(L-1) -> stage 0

post(l-1) and pre(l) land on the same stage and execute back to back; that
fused pair is the "unit" the recompute transform later regenerates together.
The microbatch-rotated attention placement is what spreads the quadratic
attention FLOPs evenly: over any p consecutive microbatches every stage sees
each layer's attention exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, ModelConfig
from .costs import params_per_layer


def pre_stage(l: int, cfg: ModelConfig) -> int:
    return l % cfg.p


def attn_stage(l: int, mb: int, cfg: ModelConfig) -> int:
    return (l + mb + 1) % cfg.p


def post_stage(l: int, cfg: ModelConfig) -> int:
    if l == cfg.L - 1:
        return 0
    return (l + 1) % cfg.p


def check_helix_config(cfg: ModelConfig, fold: int = 1) -> None:
    """Helix schedules need L % p == 0 and m % (fold*p) == 0."""
    if cfg.L % cfg.p != 0:
        raise ConfigError(f"L={cfg.L} must be divisible by p={cfg.p}")
    loop = fold * cfg.p
    if cfg.m % loop != 0:
        raise ConfigError(f"m={cfg.m} must be divisible by {loop} (fold={fold}, p={cfg.p})")


@dataclass(frozen=True)
class PartitionReport:
    """Per-stage counts for one microbatch's forward pass."""

    pre_counts: list[int]
    post_counts: list[int]
    attn_counts_by_mb: list[list[int]]  # [mb][stage]
    params_per_stage: list[int]

    @property
    def balanced(self) -> bool:
        flat = set(self.pre_counts) | set(self.post_counts)
        for row in self.attn_counts_by_mb:
            flat |= set(row)
        return len(set(self.pre_counts)) == 1 and len(set(self.post_counts)) == 1 and all(
            len(set(row)) == 1 for row in self.attn_counts_by_mb
        )


def audit_partition(cfg: ModelConfig) -> PartitionReport:
    check_helix_config(cfg)
    p, L = cfg.p, cfg.L
    pre_counts = [0] * p
    post_counts = [0] * p
    for l in range(L):
        pre_counts[pre_stage(l, cfg)] += 1
        post_counts[post_stage(l, cfg)] += 1
    attn_counts = []
    for mb in range(cfg.m):
        row = [0] * p
        for l in range(L):
            row[attn_stage(l, mb, cfg)] += 1
        attn_counts.append(row)

    # Weights live with the owning component's stage; attention owns none
    # (the QKV weight stays with pre even when its FLOPs ride along).
    h = cfg.h
    pre_params = 3 * h * h + 2 * h       # qkv + ln1 gain/bias
    post_params = 9 * h * h + 2 * h      # o + mlp + ln2 gain/bias
    assert pre_params + post_params == params_per_layer(h)
    params = [0] * p
    for l in range(L):
        params[pre_stage(l, cfg)] += pre_params
        params[post_stage(l, cfg)] += post_params
    return PartitionReport(
        pre_counts=pre_counts,
        post_counts=post_counts,
        attn_counts_by_mb=attn_counts,
        params_per_stage=params,
    )
