"""Model and device descriptions shared by the cost model, generators and runtime.

Everything downstream works in integer element counts and integer nanoseconds,
so the device presets deliberately use power-of-two compute rates: FLOPs counts
for transformer blocks are (large) multiples of small powers of two, and the
division into nanoseconds then comes out exact.  That keeps quadratic-in-s
checks and bubble formulas verifiable with zero tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


class ConfigError(ValueError):
    """Raised for inconsistent model/device/experiment parameters."""


@dataclass(frozen=True)
class ModelConfig:
    """Transformer and pipeline shape.

    L: layers, h: hidden size, s: sequence length, b: microbatch size,
    num_heads: attention heads, p: pipeline stages, m: microbatch count,
    sp_size: sequence-parallel group size (divides per-GPU compute time and
    per-GPU stored bytes; it does not change whole-stage element counts).
    """

    L: int
    h: int
    s: int
    b: int
    num_heads: int
    p: int
    m: int
    sp_size: int = 1

    def __post_init__(self) -> None:
        for name in ("L", "h", "s", "b", "num_heads", "p", "m", "sp_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.h % self.num_heads != 0:
            raise ConfigError(f"h={self.h} not divisible by num_heads={self.num_heads}")
        if self.h % 2 != 0:
            raise ConfigError("h must be even (h/2 enters the FLOPs identities)")

    @property
    def head_dim(self) -> int:
        return self.h // self.num_heads

    @property
    def tokens(self) -> int:
        # Tokens per microbatch; most element counts are multiples of this.
        return self.s * self.b

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class DeviceSpec:
    """Per-GPU compute rate and inter-stage link characteristics.

    compute_rate: dense FLOP/s per GPU.
    link_bandwidth: bytes/s on one inter-stage channel direction.
    link_latency: seconds added to every transfer before bytes land.
    bytes_per_element: payload width (2 for fp16/bf16 activations).
    """

    name: str
    compute_rate: int
    link_bandwidth: int
    link_latency: float
    bytes_per_element: int = 2

    def __post_init__(self) -> None:
        if self.compute_rate <= 0 or self.link_bandwidth <= 0:
            raise ConfigError("compute_rate and link_bandwidth must be positive")
        if self.bytes_per_element <= 0:
            raise ConfigError("bytes_per_element must be positive")
        if self.link_latency < 0:
            raise ConfigError("link_latency must be >= 0")

    @property
    def latency_ns(self) -> int:
        return int(round(self.link_latency * 1e9))


# Stylized presets.  Rates are powers of two near the published dense-FLOPs
# numbers (H20 ~148 TFLOP/s, A800 ~2x that; NVLink generations likewise 2x
# apart) so that durations in integer nanoseconds divide exactly.
H20_LIKE = DeviceSpec(
    name="h20_like",
    compute_rate=2**47,          # ~140.7 TFLOP/s
    link_bandwidth=100 * 10**9,  # 100 GB/s effective per direction
    link_latency=5e-6,
)

A800_LIKE = DeviceSpec(
    name="a800_like",
    compute_rate=2**48,          # ~281.5 TFLOP/s, 2x the H20-like rate
    link_bandwidth=50 * 10**9,   # half the link bandwidth
    link_latency=5e-6,
)

DEVICE_PRESETS = {d.name: d for d in (H20_LIKE, A800_LIKE)}


def device_preset(name: str) -> DeviceSpec:
    try:
        return DEVICE_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(DEVICE_PRESETS))
        raise ConfigError(f"unknown device preset {name!r} (known: {known})") from None
