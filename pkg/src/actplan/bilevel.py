"""Two-level memory planning over a layered iteration trace.

Level one packs the transient tensors of a single transformer layer's
forward segment, and separately its backward segment. Level two replaces
every layer segment of the iteration by one pseudo tensor of that packed
size, live for exactly the segment, and packs those blocks together with
the tensors of the embedding and classifier segments. A layer tensor's
absolute address is its block's address plus its offset inside the layer.

Skeletal tensors of transformer layers are not planned here; they live in
the two rounding buffers reserved outside this arena.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .dsa import DEFAULT_ALIGNMENT, DsaInstance, MemoryPlan, solve_exact
from .trace import (IterationTrace, Kind, MemoryRequest, Phase, TensorClass,
                    TensorLifespan, TraceError, TraceSegment, extract_lifespans,
                    malloc, free, overlap_pairs)


class NonIdenticalLayers(TraceError):
    pass


@dataclass(frozen=True)
class LayerPlan:
    fwd_plan: MemoryPlan
    bwd_plan: MemoryPlan
    fwd_instance: DsaInstance
    bwd_instance: DsaInstance
    # offset of each planned tensor keyed by its index of first appearance
    # in the reference segment; shared by every layer
    fwd_offsets: dict[int, int]
    bwd_offsets: dict[int, int]

    @property
    def fwd_peak(self) -> int:
        return self.fwd_plan.peak

    @property
    def bwd_peak(self) -> int:
        return self.bwd_plan.peak

    @property
    def optimal(self) -> bool:
        return self.fwd_plan.optimal and self.bwd_plan.optimal

    def to_json(self) -> dict:
        return {"fwd_peak": self.fwd_peak, "bwd_peak": self.bwd_peak,
                "fwd": self.fwd_plan.to_json(), "bwd": self.bwd_plan.to_json()}


@dataclass(frozen=True)
class PseudoTrace:
    requests: tuple[MemoryRequest, ...]
    # pseudo tensor id -> index of the layer segment it stands for
    blocks: dict[int, int]

    def __len__(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class GlobalPlan:
    layer_plan: LayerPlan | None
    outer_plan: MemoryPlan
    absolute: dict[tuple[int, int], int]
    total_peak: int
    pseudo: PseudoTrace
    alignment: int

    @property
    def optimal(self) -> bool:
        lp = self.layer_plan
        return self.outer_plan.optimal and (lp is None or lp.optimal)

    def pseudo_base(self, segment: int) -> int:
        for pid, seg in self.pseudo.blocks.items():
            if seg == segment:
                return self.outer_plan.addresses[pid]
        raise KeyError(f"segment {segment} has no pseudo block")

    def to_json(self) -> dict:
        return {
            "layer": self.layer_plan.to_json() if self.layer_plan else None,
            "outer": self.outer_plan.to_json(),
            "total_peak": self.total_peak,
            "alignment": self.alignment,
            "optimal": self.optimal,
            "absolute": [{"segment": s, "tensor": t, "offset": a}
                         for (s, t), a in sorted(self.absolute.items())],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _transient_spans(seg: TraceSegment) -> list[TensorLifespan]:
    spans, _ = extract_lifespans([seg])
    return [s for s in spans if s.cls is TensorClass.TRANSIENT]


def _local_index(seg: TraceSegment) -> dict[int, int]:
    local: dict[int, int] = {}
    for r in seg.requests:
        local.setdefault(r.tensor_id, len(local))
    return local


def plan_layer(fwd: TraceSegment, bwd: TraceSegment, cap: int | None = None, *,
               alignment: int = DEFAULT_ALIGNMENT,
               time_budget: float | None = 60.0) -> LayerPlan:
    """Pack one layer's forward and backward transients separately."""
    plans, insts, offsets = [], [], []
    for seg in (fwd, bwd):
        inst = DsaInstance.from_lifespans(_transient_spans(seg), cap, alignment)
        plan = solve_exact(inst, time_budget)
        local = _local_index(seg)
        plans.append(plan)
        insts.append(inst)
        offsets.append({local[t]: a for t, a in plan.addresses.items()})
    return LayerPlan(plans[0], plans[1], insts[0], insts[1], offsets[0], offsets[1])


def _layer_segments(trace: IterationTrace) -> tuple[list[int], list[int]]:
    fwd = [i for i, s in enumerate(trace.segments) if s.phase is Phase.LAYER_FWD]
    bwd = [i for i, s in enumerate(trace.segments) if s.phase is Phase.LAYER_BWD]
    return fwd, bwd


def check_identical_layers(trace: IterationTrace) -> None:
    fwd, bwd = _layer_segments(trace)
    for group, name in ((fwd, "forward"), (bwd, "backward")):
        if not group:
            continue
        ref = trace.segments[group[0]].signature()
        for i in group[1:]:
            if trace.segments[i].signature() != ref:
                seg = trace.segments[i]
                raise NonIdenticalLayers(
                    f"layer {seg.layer} {name} requests differ from layer "
                    f"{trace.segments[group[0]].layer}")


def _outer_and_layer_tensors(trace: IterationTrace) -> set[int]:
    """Ids of tensors planned at the outer level; rejects unsupported layouts."""
    spans, _ = extract_lifespans(trace)
    segs = trace.segments
    outer = set()
    for s in spans:
        a = segs[s.alloc_segment] if s.alloc_segment is not None else None
        f = segs[s.free_segment] if s.free_segment is not None else None
        touches_layer = (a is not None and a.phase.is_layer) or (f is not None and f.phase.is_layer)
        if not touches_layer:
            outer.add(s.tensor_id)
        elif s.cls is TensorClass.TRANSIENT:
            continue
        elif s.cls is TensorClass.SKELETAL and a is not None and a.phase.is_layer:
            continue
        else:
            raise TraceError(f"tensor {s.tensor_id} crosses a layer boundary and is "
                             "neither a layer transient nor a layer skeletal tensor")
    return outer


def build_pseudo_trace(trace: IterationTrace, lp: LayerPlan | None) -> PseudoTrace:
    """Condense each layer segment into one malloc/free pair of its packed size."""
    check_identical_layers(trace)
    outer = _outer_and_layer_tensors(trace)
    next_id = max((r.tensor_id for r in trace.requests()), default=0) + 1
    out: list[MemoryRequest] = []
    blocks: dict[int, int] = {}
    for idx, seg in enumerate(trace.segments):
        if seg.phase.is_layer:
            if lp is None:
                raise ValueError("trace has layer segments but no layer plan was given")
            size = lp.fwd_peak if seg.phase is Phase.LAYER_FWD else lp.bwd_peak
            if size > 0:
                out += [malloc(next_id, size), free(next_id, size)]
                blocks[next_id] = idx
                next_id += 1
        else:
            out += [r for r in seg.requests if r.tensor_id in outer]
    return PseudoTrace(tuple(out), blocks)


def _spans_from_requests(reqs: Sequence[MemoryRequest]) -> list[TensorLifespan]:
    spans, _ = extract_lifespans([TraceSegment(Phase.RAW, tuple(reqs))])
    return spans


def plan_model(trace: IterationTrace, cap: int | None = None, *,
               alignment: int = DEFAULT_ALIGNMENT,
               time_budget: float | None = 60.0) -> GlobalPlan:
    """Bi-level plan for every non-skeletal tensor of ``trace``."""
    fwd_idx, bwd_idx = _layer_segments(trace)
    lp = None
    if fwd_idx or bwd_idx:
        if not fwd_idx or not bwd_idx:
            raise TraceError("layer forward and backward segments must both be present")
        lp = plan_layer(trace.segments[fwd_idx[0]], trace.segments[bwd_idx[0]], cap,
                        alignment=alignment, time_budget=time_budget)
    pseudo = build_pseudo_trace(trace, lp)
    inst = DsaInstance.from_lifespans(_spans_from_requests(pseudo.requests), cap, alignment)
    outer_plan = solve_exact(inst, time_budget)

    absolute: dict[tuple[int, int], int] = {}
    seg_of_block = pseudo.blocks
    block_of_seg = {seg: pid for pid, seg in seg_of_block.items()}
    for seg_idx, seg in enumerate(trace.segments):
        if seg.phase.is_layer:
            if seg_idx not in block_of_seg:
                continue
            base = outer_plan.addresses[block_of_seg[seg_idx]]
            offsets = lp.fwd_offsets if seg.phase is Phase.LAYER_FWD else lp.bwd_offsets
            local = _local_index(seg)
            for tid, li in local.items():
                if li in offsets:
                    absolute[(seg_idx, tid)] = base + offsets[li]
        else:
            for r in seg.requests:
                if r.kind is Kind.MALLOC and r.tensor_id in outer_plan.addresses:
                    absolute[(seg_idx, r.tensor_id)] = outer_plan.addresses[r.tensor_id]
    return GlobalPlan(lp, outer_plan, absolute, outer_plan.peak, pseudo, alignment)


def planned_instance(trace: IterationTrace, alignment: int = DEFAULT_ALIGNMENT,
                     cap: int | None = None) -> DsaInstance:
    """Single-level DSA instance over every tensor the bi-level plan covers."""
    outer = _outer_and_layer_tensors(trace)
    spans, _ = extract_lifespans(trace)
    keep = [s for s in spans
            if s.tensor_id in outer or s.cls is TensorClass.TRANSIENT]
    return DsaInstance.from_lifespans(keep, cap, alignment)


def expand_plan(trace: IterationTrace, gp: GlobalPlan) -> tuple[DsaInstance, MemoryPlan]:
    """The bi-level result as a flat plan over the uncondensed trace."""
    inst = planned_instance(trace, gp.alignment)
    addresses = {tid: a for (_, tid), a in gp.absolute.items()}
    return inst, MemoryPlan(addresses, gp.total_peak, gp.optimal)


def outer_overlaps_layers(gp: GlobalPlan) -> bool:
    """True if some outer tensor is live while a layer segment runs."""
    spans = _spans_from_requests(gp.pseudo.requests)
    blocks = set(gp.pseudo.blocks)
    for i, j in overlap_pairs(spans):
        if (i in blocks) != (j in blocks):
            return True
    return False
