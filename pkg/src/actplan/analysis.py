"""Sequence-length sweeps over the schedule simulator.

Transfer time per layer grows linearly with the sequence length while
compute grows quadratically, so above some length full offload hides
entirely behind the forward pass. These helpers find that length and fit
the two curves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import HardwareConfig, ModelConfig
from .schedule import D2H, analytic_timing, build_schedule, full_offload, simulate


@dataclass(frozen=True)
class SweepPoint:
    seq_len: int
    transfer: float  # one layer's full offload, seconds
    compute: float   # one layer's forward, seconds
    fwd_blocked: float

    def csv(self) -> str:
        return f"{self.seq_len},{self.transfer!r},{self.compute!r},{self.fwd_blocked!r}"


SWEEP_HEADER = "seq_len,transfer,compute,fwd_blocked"


def full_offload_point(cfg: ModelConfig, hw: HardwareConfig) -> SweepPoint:
    tm = analytic_timing(cfg, hw)
    sched = build_schedule(cfg, full_offload(cfg), tm, hw)
    rep = simulate(sched, cfg, hw)
    offloads = sched.on(D2H)
    transfer = offloads[0].duration if offloads else 0.0
    return SweepPoint(cfg.seq_len, transfer, tm.t_fwd_layer, rep.fwd_blocked)


def sweep_seq_len(cfg: ModelConfig, hw: HardwareConfig,
                  seq_lens: Sequence[int]) -> list[SweepPoint]:
    return [full_offload_point(replace(cfg, seq_len=s), hw) for s in seq_lens]


def find_crossover(cfg: ModelConfig, hw: HardwareConfig, lo: int = 1024,
                   hi: int = 1 << 22, step: int = 1024) -> int | None:
    """Smallest multiple of ``step`` in [lo, hi] at which full offload causes
    no forward blocking, or None if blocking persists (or never occurs).

    Bisection; relies on blocking being monotone in the sequence length,
    which holds because compute outgrows transfer.
    """
    def blocked(s):
        return full_offload_point(replace(cfg, seq_len=s), hw).fwd_blocked > 0

    lo, hi = -(-lo // step), hi // step
    if not blocked(lo * step) or blocked(hi * step):
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if blocked(mid * step):
            lo = mid
        else:
            hi = mid
    return hi * step


def fit_poly(x: Sequence[float], y: Sequence[float], degree: int) -> tuple[np.ndarray, float]:
    """Least-squares polynomial coefficients (highest power first) and R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return coef, r2
