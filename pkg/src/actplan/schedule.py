"""Discrete-event model of one training iteration with rounding buffers.

Three FIFO streams run side by side: ``compute``, ``d2h`` (offload to host)
and ``h2d`` (prefetch back to the device). Layer ``i`` writes its skeletal
activations into rounding buffer ``i % 2``; the dependency rules are

F1  forward of layer i+1 follows forward of layer i
F2  offload of layer i starts after its forward, in layer order
F3  forward of layer i+2 waits for offload of layer i (buffer reuse)
B1  backward runs in reverse layer order; the last two layers are never
    swapped
B2  prefetch of layer i starts after backward of layer i+2 and after its
    own offload
B3  backward of layer i waits for its prefetch and its recompute, which
    runs on the compute stream right before it

``validate_schedule`` rechecks these rules from the event list alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

from .config import HardwareConfig, ModelConfig
from .swap import SwapPlan, skeletal_sizes, solve_alpha

COMPUTE, D2H, H2D = "compute", "d2h", "h2d"


def count_params(cfg: ModelConfig) -> int:
    """Parameter count of a GPT-style decoder.

    P = V*h + n*(4h^2 + 2*h*h_ffn + 4h) + 2h, plus another V*h when the
    classifier is not tied to the embedding. The 4h and 2h terms are the
    layer-norm weights and biases; linear-layer biases are left out.
    """
    h, V, n = cfg.hidden, cfg.vocab, cfg.n_layers
    p = V * h + n * layer_params(cfg) + 2 * h
    if not cfg.tied_embeddings:
        p += V * h
    return p


def layer_params(cfg: ModelConfig) -> int:
    h = cfg.hidden
    return 4 * h * h + 2 * h * cfg.ffn_hidden + 4 * h


def estimate_flops_per_sample(cfg: ModelConfig, param_count: int | None = None,
                              n_layers: int | None = None) -> float:
    """Model flops for one sequence, forward plus backward: 6sP + 6nhs^2."""
    P = count_params(cfg) if param_count is None else param_count
    n = cfg.n_layers if n_layers is None else n_layers
    s, h = cfg.seq_len, cfg.hidden
    return 6 * s * P + 6 * n * h * s * s


def mfu_from_tgs(cfg: ModelConfig, tgs: float, peak_flops: float,
                 param_count: int | None = None) -> float:
    """MFU implied by a measured tokens-per-GPU-per-second figure."""
    per_token = estimate_flops_per_sample(cfg, param_count) / cfg.seq_len
    return per_token * tgs / peak_flops


@dataclass(frozen=True)
class TimingModel:
    t_fwd_layer: float
    t_attn_fwd: float
    t_bwd_layer: float
    t_outer_fwd: float = 0.0
    t_outer_bwd: float = 0.0
    comm_per_layer: float = 0.0
    source: str = "analytic"

    def __post_init__(self):
        if self.t_attn_fwd > self.t_fwd_layer:
            raise ValueError("attention time cannot exceed the layer forward time")
        if min(self.t_fwd_layer, self.t_attn_fwd, self.t_bwd_layer,
               self.t_outer_fwd, self.t_outer_bwd, self.comm_per_layer) < 0:
            raise ValueError("times must be non-negative")

    def t_recompute(self, alpha: float) -> float:
        # only the non-attention ops of the discarded tokens are replayed
        return (1.0 - alpha) * (self.t_fwd_layer - self.t_attn_fwd)

    @property
    def attn_share(self) -> float:
        return self.t_attn_fwd / self.t_fwd_layer if self.t_fwd_layer else 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def measured(cls, data: dict, bwd_ratio: float = 2.0) -> TimingModel:
        """From a measurement record with ``t_fwd_layer`` and ``t_attn_fwd``."""
        t_fwd = float(data["t_fwd_layer"])
        return cls(t_fwd, float(data.get("t_attn_fwd", 0.0)),
                   float(data.get("t_bwd_layer", bwd_ratio * t_fwd)),
                   float(data.get("t_outer_fwd", 0.0)), float(data.get("t_outer_bwd", 0.0)),
                   float(data.get("comm_per_layer", 0.0)), source="measured")

    @classmethod
    def load(cls, path: str | Path, bwd_ratio: float = 2.0) -> TimingModel:
        return cls.measured(json.loads(Path(path).read_text()), bwd_ratio)


def analytic_timing(cfg: ModelConfig, hw: HardwareConfig,
                    param_count: int | None = None) -> TimingModel:
    """Per-device layer times from model flops at ``efficiency * peak_flops``.

    Work is split evenly over the ``tp * sp`` devices of the group. A layer's
    forward does 2*s*P_layer + 2*h*s^2 flops per sequence; backward costs
    ``bwd_ratio`` times that. Embedding and classifier flops are the rest of
    6sP, split 1:2 between forward and backward.
    """
    P = count_params(cfg) if param_count is None else param_count
    b, s, h, n = cfg.batch, cfg.seq_len, cfg.hidden, cfg.n_layers
    rate = hw.peak_flops * hw.efficiency * cfg.n_gpus
    attn = b * 2 * h * s * s / rate
    dense = b * 2 * s * layer_params(cfg) / rate
    outer = b * 2 * s * max(P - n * layer_params(cfg), 0) / rate
    t_fwd = dense + attn
    return TimingModel(t_fwd, attn, hw.bwd_ratio * t_fwd, outer, hw.bwd_ratio * outer,
                       hw.comm_per_layer, "analytic")


class Event(NamedTuple):
    stream: str
    kind: str
    layer: int | None
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Schedule:
    events: tuple[Event, ...]
    n_layers: int
    alpha: float
    buffer_bytes: int  # capacity of each of the two rounding buffers

    def on(self, stream: str) -> list[Event]:
        return sorted((e for e in self.events if e.stream == stream),
                      key=lambda e: (e.start, e.end))

    def find(self, kind: str, layer: int | None = None) -> Event | None:
        for e in self.events:
            if e.kind == kind and e.layer == layer:
                return e
        return None

    def to_csv(self) -> str:
        rows = ["stream,kind,layer,start,end"]
        for e in sorted(self.events, key=lambda e: (e.start, e.stream, e.kind)):
            layer = "" if e.layer is None else e.layer
            rows.append(f"{e.stream},{e.kind},{layer},{e.start!r},{e.end!r}")
        return "\n".join(rows) + "\n"


def build_schedule(cfg: ModelConfig, swap: SwapPlan, tm: TimingModel,
                   hw: HardwareConfig) -> Schedule:
    n = cfg.n_layers
    xfer = swap.swapped_bytes_per_layer / hw.pcie_bandwidth
    step = tm.t_fwd_layer + tm.comm_per_layer
    events: list[Event] = []
    swapped = range(max(n - 2, 0))

    t = 0.0
    d2h_free = 0.0
    off_end: dict[int, float] = {}
    for i in range(n):
        start = max(t, off_end.get(i - 2, 0.0))
        t = start + step
        events.append(Event(COMPUTE, "fwd", i, start, t))
        if i in swapped:
            o_start = max(t, d2h_free)
            d2h_free = off_end[i] = o_start + xfer
            events.append(Event(D2H, "offload", i, o_start, d2h_free))

    for kind, dur in (("cls_fwd", tm.t_outer_fwd), ("cls_bwd", tm.t_outer_bwd)):
        if dur > 0:
            events.append(Event(COMPUTE, kind, None, t, t + dur))
            t += dur

    h2d_free = 0.0
    bwd_end: dict[int, float] = {}
    recompute = tm.t_recompute(swap.alpha)
    bwd_step = tm.t_bwd_layer + tm.comm_per_layer
    for i in reversed(range(n)):
        ready = t
        if i in swapped:
            p_start = max(bwd_end[i + 2], h2d_free, off_end[i])
            h2d_free = p_start + xfer
            events.append(Event(H2D, "prefetch", i, p_start, h2d_free))
            if recompute > 0:
                events.append(Event(COMPUTE, "recompute", i, t, t + recompute))
                t += recompute
            ready = max(t, h2d_free)
        t = ready + bwd_step
        bwd_end[i] = t
        events.append(Event(COMPUTE, "bwd", i, ready, t))

    buffer = skeletal_sizes(cfg).total
    return Schedule(tuple(events), n, swap.alpha, buffer)


def validate_schedule(sched: Schedule) -> list[str]:
    """Every broken ordering rule, as readable messages; empty when valid."""
    errs: list[str] = []
    n = sched.n_layers
    for stream in (COMPUTE, D2H, H2D):
        evs = sched.on(stream)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                errs.append(f"{stream}: {a.kind}[{a.layer}] overlaps {b.kind}[{b.layer}]")
    for e in sched.events:
        if e.end < e.start:
            errs.append(f"{e.kind}[{e.layer}] ends before it starts")

    def get(kind, i):
        return sched.find(kind, i)

    fwd = [get("fwd", i) for i in range(n)]
    bwd = [get("bwd", i) for i in range(n)]
    if any(e is None for e in fwd + bwd):
        return errs + ["missing forward or backward events"]
    swapped = set(range(max(n - 2, 0)))
    for kind in ("offload", "prefetch", "recompute"):
        layers = {e.layer for e in sched.events if e.kind == kind}
        if not layers <= swapped:
            errs.append(f"B1: {kind} for unswapped layers {sorted(layers - swapped)}")
    for kind in ("offload", "prefetch"):
        layers = {e.layer for e in sched.events if e.kind == kind}
        if layers != swapped:
            errs.append(f"{kind} events for layers {sorted(layers)}, expected {sorted(swapped)}")

    for i in range(n - 1):
        if fwd[i + 1].start < fwd[i].end:
            errs.append(f"F1: fwd[{i + 1}] starts before fwd[{i}] ends")
    last_fwd = max(e.end for e in fwd)
    for i in range(n):
        if bwd[i].start < last_fwd:
            errs.append(f"B1: bwd[{i}] starts during the forward pass")
    for i in range(n - 1):
        if bwd[i].start < bwd[i + 1].end:
            errs.append(f"B1: bwd[{i}] starts before bwd[{i + 1}] ends")
    for i in sorted(swapped):
        off, pre = get("offload", i), get("prefetch", i)
        if off is None or pre is None:
            continue
        if off.start < fwd[i].end:
            errs.append(f"F2: offload[{i}] starts before fwd[{i}] ends")
        nxt = get("offload", i + 1)
        if nxt is not None and nxt.start < off.end:
            errs.append(f"F2: offload[{i + 1}] starts before offload[{i}] ends")
        if i + 2 < n and fwd[i + 2].start < off.end:
            errs.append(f"F3: fwd[{i + 2}] starts before offload[{i}] ends")
        if pre.start < off.end:
            errs.append(f"B2: prefetch[{i}] starts before offload[{i}] ends")
        if pre.start < bwd[i + 2].end:
            errs.append(f"B2: prefetch[{i}] starts before bwd[{i + 2}] ends")
        if bwd[i].start < pre.end:
            errs.append(f"B3: bwd[{i}] starts before prefetch[{i}] ends")
        rec = get("recompute", i)
        if rec is not None:
            if bwd[i].start < rec.end:
                errs.append(f"B3: bwd[{i}] starts before recompute[{i}] ends")
            compute = sched.on(COMPUTE)
            k = compute.index(rec)
            if k + 1 >= len(compute) or compute[k + 1] != bwd[i]:
                errs.append(f"B3: recompute[{i}] is not right before bwd[{i}]")
    return errs


@dataclass(frozen=True)
class SimReport:
    iteration_time: float
    compute_busy: float
    compute_blocked: float
    fwd_blocked: float
    bwd_blocked: float
    offload_stream_busy: float
    prefetch_stream_busy: float
    tgs: float
    mfu: float
    alpha: float

    def to_json(self) -> dict:
        return asdict(self)


def _gaps(events: Sequence[Event], t0: float = 0.0) -> float:
    idle, t = 0.0, t0
    for e in events:
        if e.start > t:
            idle += e.start - t
        t = max(t, e.end)
    return idle


def simulate(sched: Schedule, cfg: ModelConfig, hw: HardwareConfig,
             param_count: int | None = None) -> SimReport:
    compute = sched.on(COMPUTE)
    iteration = max((e.end for e in sched.events), default=0.0)
    fwd = [e for e in compute if e.kind == "fwd"]
    rest = [e for e in compute if e.kind != "fwd"]
    fwd_blocked = _gaps(fwd)
    bwd_blocked = _gaps(rest, fwd[-1].end) if fwd and rest else 0.0
    blocked = _gaps(compute)
    busy = sum(e.duration for e in compute)
    off = sum(e.duration for e in sched.events if e.stream == D2H)
    pre = sum(e.duration for e in sched.events if e.stream == H2D)
    if iteration > 0:
        tgs = cfg.batch * cfg.seq_len / (iteration * cfg.n_gpus)
        flops = estimate_flops_per_sample(cfg, param_count) * cfg.batch
        mfu = flops / iteration / (cfg.n_gpus * hw.peak_flops)
    else:
        tgs = mfu = 0.0
    return SimReport(iteration, busy, blocked, fwd_blocked, bwd_blocked, off, pre, tgs, mfu,
                     sched.alpha)


def run(cfg: ModelConfig, hw: HardwareConfig, swap: SwapPlan | None = None,
        tm: TimingModel | None = None) -> tuple[Schedule, SimReport]:
    """Timing model, alpha, schedule and report in one call."""
    tm = tm or analytic_timing(cfg, hw)
    if swap is None:
        swap = solve_alpha(skeletal_sizes(cfg), hw, tm.t_fwd_layer, cfg.n_layers)
    sched = build_schedule(cfg, swap, tm, hw)
    return sched, simulate(sched, cfg, hw)


def full_offload(cfg: ModelConfig) -> SwapPlan:
    sz = skeletal_sizes(cfg)
    return SwapPlan(1.0, sz.mandatory, sz.s_others, cfg.n_layers)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    mfu: float
    iteration_time: float
    fwd_blocked: float
    cpu_footprint: float
    cpu_ok: bool

    def csv(self) -> str:
        return (f"{self.alpha!r},{self.mfu!r},{self.iteration_time!r},"
                f"{self.fwd_blocked!r},{self.cpu_footprint!r},{int(self.cpu_ok)}")


SWEEP_HEADER = "alpha,mfu,iteration_time,fwd_blocked,cpu_footprint,cpu_ok"


def alpha_sweep(cfg: ModelConfig, hw: HardwareConfig, alphas: Sequence[float],
                tm: TimingModel | None = None) -> list[SweepRow]:
    """Predicted MFU for each fixed alpha, ignoring the optimizer's choice."""
    tm = tm or analytic_timing(cfg, hw)
    sz = skeletal_sizes(cfg)
    rows = []
    for a in alphas:
        plan = SwapPlan(float(a), sz.mandatory, sz.s_others, cfg.n_layers)
        _, rep = run(cfg, hw, plan, tm)
        rows.append(SweepRow(float(a), rep.mfu, rep.iteration_time, rep.fwd_blocked,
                             plan.cpu_footprint, plan.cpu_footprint <= hw.cpu_mem))
    return rows
