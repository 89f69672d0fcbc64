"""Token-wise swap fraction for skeletal activations.

The layer input and the attention output are always offloaded to host
memory. Of the remaining skeletal bytes, a fraction ``alpha`` of the tokens
is offloaded too and the rest is recomputed before the backward pass. We
take the largest ``alpha`` for which

* one layer's offload fits inside one layer's forward time, and
* the offloaded bytes of all but the last two layers fit in host memory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .config import MANDATORY_TENSORS, HardwareConfig, ModelConfig


class CpuInfeasibleError(Exception):
    """Even the mandatory offload does not fit in host memory."""


@dataclass(frozen=True)
class SkeletalSizes:
    s_input: int
    s_attn: int
    s_others: int
    others: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.s_input + self.s_attn + self.s_others

    @property
    def mandatory(self) -> int:
        return self.s_input + self.s_attn

    @property
    def attn_share(self) -> float:
        return self.s_attn / self.total


def skeletal_sizes(cfg: ModelConfig) -> SkeletalSizes:
    unit = cfg.unit_bytes
    units = cfg.skeletal_units
    others = {k: v * unit for k, v in units.items() if k not in MANDATORY_TENSORS}
    return SkeletalSizes(units["input"] * unit, units["attn_out"] * unit,
                         sum(others.values()), others)


@dataclass(frozen=True)
class SwapPlan:
    alpha: float
    mandatory_bytes: int
    s_others: int
    n_layers: int
    # seconds the compute stream waits per layer when even the mandatory
    # offload outlasts the layer's forward time; 0 when it fits
    stall_seconds: float = 0.0
    bound_by: str = "none"  # "bandwidth" | "cpu" | "none"

    @property
    def swapped_bytes_per_layer(self) -> float:
        return self.mandatory_bytes + self.alpha * self.s_others

    @property
    def swapped_layers(self) -> int:
        return max(self.n_layers - 2, 0)

    @property
    def cpu_footprint(self) -> float:
        return self.swapped_layers * self.swapped_bytes_per_layer

    @property
    def blocking(self) -> bool:
        return self.stall_seconds > 0

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(swapped_bytes_per_layer=self.swapped_bytes_per_layer,
                 cpu_footprint=self.cpu_footprint,
                 blocking="MandatoryBlocks" if self.blocking else None)
        return d


def _fits(sz: SkeletalSizes, alpha: float, bandwidth: float, t_layer: float,
          cpu_mem: float, n_layers: int) -> tuple[bool, bool]:
    swapped = sz.s_input + sz.s_attn + alpha * sz.s_others
    bw_ok = swapped / bandwidth <= t_layer
    cpu_ok = n_layers <= 2 or (n_layers - 2) * swapped <= cpu_mem
    return bw_ok, cpu_ok


def solve_alpha(sz: SkeletalSizes, hw: HardwareConfig, t_layer_fwd: float,
                n_layers: int) -> SwapPlan:
    """Largest offload fraction meeting the bandwidth and host-memory limits.

    If the mandatory tensors alone cannot be hidden behind the layer's
    forward time, ``alpha`` is 0 and the plan reports the per-layer stall.
    Raises ``CpuInfeasibleError`` if they alone overflow host memory.
    """
    B, M = hw.pcie_bandwidth, hw.cpu_mem
    mand = sz.mandatory
    if n_layers > 2 and (n_layers - 2) * mand > M:
        raise CpuInfeasibleError(
            f"mandatory offload of {(n_layers - 2) * mand} bytes exceeds host memory {M}")
    bw_room = B * t_layer_fwd - mand
    cpu_room = math.inf if n_layers <= 2 else M / (n_layers - 2) - mand
    stall = 0.0
    if bw_room < 0:
        stall = mand / B - t_layer_fwd
    if sz.s_others == 0:
        alpha = 1.0
        bound_by = "none"
    else:
        a_bw, a_cpu = bw_room / sz.s_others, cpu_room / sz.s_others
        raw = min(a_bw, a_cpu)
        bound_by = "none" if raw >= 1 else ("bandwidth" if a_bw <= a_cpu else "cpu")
        alpha = min(max(raw, 0.0), 1.0)
        # the closed form can land one ulp past a binding constraint
        while alpha > 0 and not all(_fits(sz, alpha, B, t_layer_fwd, M, n_layers)):
            alpha = math.nextafter(alpha, 0.0)
    return SwapPlan(alpha, mand, sz.s_others, n_layers, stall, bound_by)


def token_split(alpha: float, seq_len_local: int, granularity: int = 128) -> tuple[int, int]:
    """Split the local tokens into an offloaded prefix and a recomputed rest.

    The offloaded count is ``floor(alpha * s)`` rounded down to a multiple of
    ``granularity`` (unless alpha is 1, which offloads every token).
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1:
        return seq_len_local, 0
    swap = math.floor(alpha * seq_len_local)
    swap -= swap % granularity
    return swap, seq_len_local - swap
