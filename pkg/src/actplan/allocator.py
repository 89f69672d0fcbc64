"""Fragmentation of a caching allocator versus a static planned arena.

The caching model is a deliberate simplification of framework allocators:

* requests round up to ``rounding`` bytes and go to the small pool
  (<= ``small_pool_threshold``) or the large pool;
* a request takes the best-fitting cached free block of its pool, splitting
  off the remainder when it is large enough;
* on a miss a new segment is reserved (``small_segment`` bytes for the
  small pool, the request rounded to ``large_segment_rounding`` otherwise);
* freed blocks merge only with free neighbours inside the same segment;
* if reserving would exceed ``capacity``, every fully free segment is
  released and the reservation retried once. Each such release is one
  reorganization; if the retry fails the replay stops with ``oom``.

Fragmentation is reported as ``peak_reserved - peak_allocated``: the memory
the allocator needed beyond what was ever live at once. For a planned arena
this is ``total_peak - peak live bytes``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .bilevel import GlobalPlan
from .config import MiB
from .dsa import align_up
from .trace import IterationTrace, Kind, TraceSegment


@dataclass(frozen=True)
class CachingAllocatorConfig:
    capacity: int
    small_pool_threshold: int = 1 * MiB
    rounding: int = 512
    split_remainder_min: int = 1 * MiB
    small_segment: int = 2 * MiB
    large_segment_rounding: int = 2 * MiB
    reorganize_on_failure: bool = True
    record_timeline: bool = True

    def __post_init__(self):
        for name in ("capacity", "small_pool_threshold", "rounding", "split_remainder_min",
                     "small_segment", "large_segment_rounding"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rounding & (self.rounding - 1):
            raise ValueError("rounding must be a power of two")

    @classmethod
    def for_capacity(cls, capacity: int, **overrides) -> CachingAllocatorConfig:
        """Defaults, with pool granularities halved until a small segment is
        at most 1/16 of ``capacity``; only toy-sized arenas are affected."""
        shift = 0
        while (2 * MiB >> shift) * 16 > capacity and (1 * MiB >> shift) > 512:
            shift += 1
        base = dict(capacity=capacity, small_pool_threshold=1 * MiB >> shift,
                    split_remainder_min=1 * MiB >> shift, small_segment=2 * MiB >> shift,
                    large_segment_rounding=2 * MiB >> shift)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class FragReport:
    peak_reserved: int
    peak_allocated: int
    peak_fragmentation: int
    max_unallocated: int
    reorganizations: int
    oom: bool
    oom_event: int | None = None
    timeline: tuple[tuple[int, int, int], ...] = field(default=(), repr=False)

    def to_json(self, timeline: bool = False) -> dict:
        d = asdict(self)
        if timeline:
            d["timeline"] = [list(t) for t in self.timeline]
        else:
            d.pop("timeline")
        return d

    def timeline_csv(self) -> str:
        rows = ["event,reserved,allocated"]
        rows += [f"{t},{r},{a}" for t, r, a in self.timeline]
        return "\n".join(rows) + "\n"


class _Block:
    __slots__ = ("segment", "offset", "size", "allocated")

    def __init__(self, segment, offset, size, allocated=False):
        self.segment, self.offset, self.size, self.allocated = segment, offset, size, allocated


class _Segment:
    __slots__ = ("sid", "size", "small", "blocks")

    def __init__(self, sid: int, size: int, small: bool):
        self.sid, self.size, self.small = sid, size, small
        self.blocks = [_Block(self, 0, size)]

    def idle(self) -> bool:
        return len(self.blocks) == 1 and not self.blocks[0].allocated


class CachingAllocator:
    def __init__(self, cfg: CachingAllocatorConfig):
        self.cfg = cfg
        self.segments: list[_Segment] = []
        self.reserved = 0
        self.allocated = 0
        self.reorganizations = 0
        self._next_sid = 0

    def _round(self, size: int) -> int:
        return align_up(max(size, 1), self.cfg.rounding)

    def _find(self, size: int, small: bool) -> _Block | None:
        best = None
        for seg in self.segments:
            if seg.small != small:
                continue
            for b in seg.blocks:
                if not b.allocated and b.size >= size:
                    key = (b.size, seg.sid, b.offset)
                    if best is None or key < best[0]:
                        best = (key, b)
        return best[1] if best else None

    def _reserve(self, size: int, small: bool) -> _Segment | None:
        seg_size = (self.cfg.small_segment if small
                    else align_up(size, self.cfg.large_segment_rounding))
        if self.reserved + seg_size > self.cfg.capacity:
            if not self.cfg.reorganize_on_failure or not self._release_idle():
                return None
            if self.reserved + seg_size > self.cfg.capacity:
                return None
        seg = _Segment(self._next_sid, seg_size, small)
        self._next_sid += 1
        self.segments.append(seg)
        self.reserved += seg_size
        return seg

    def _release_idle(self) -> bool:
        idle = [s for s in self.segments if s.idle()]
        if not idle:
            return False
        self.segments = [s for s in self.segments if not s.idle()]
        self.reserved -= sum(s.size for s in idle)
        self.reorganizations += 1
        return True

    def malloc(self, size: int) -> _Block | None:
        size = self._round(size)
        small = size <= self.cfg.small_pool_threshold
        block = self._find(size, small)
        if block is None:
            seg = self._reserve(size, small)
            if seg is None:
                return None
            block = seg.blocks[0]
        remainder = block.size - size
        min_split = self.cfg.rounding if small else self.cfg.split_remainder_min
        if remainder >= min_split:
            seg = block.segment
            idx = seg.blocks.index(block)
            seg.blocks.insert(idx + 1, _Block(seg, block.offset + size, remainder))
            block.size = size
        block.allocated = True
        self.allocated += size
        return block

    def free(self, block: _Block, size: int) -> None:
        block.allocated = False
        self.allocated -= self._round(size)
        seg = block.segment
        idx = seg.blocks.index(block)
        if idx + 1 < len(seg.blocks) and not seg.blocks[idx + 1].allocated:
            block.size += seg.blocks.pop(idx + 1).size
        if idx > 0 and not seg.blocks[idx - 1].allocated:
            prev = seg.blocks[idx - 1]
            prev.size += block.size
            seg.blocks.pop(idx)


def simulate_caching_allocator(trace: IterationTrace,
                               cfg: CachingAllocatorConfig) -> FragReport:
    alloc = CachingAllocator(cfg)
    held: dict[int, object] = {}
    peak_r = peak_a = max_gap = 0
    timeline = []
    oom_at = None
    for idx, _, r in trace.events():
        if r.kind is Kind.MALLOC:
            block = alloc.malloc(r.size)
            if block is None:
                oom_at = idx
                break
            held[r.tensor_id] = block
        else:
            alloc.free(held.pop(r.tensor_id), r.size)
        peak_r = max(peak_r, alloc.reserved)
        peak_a = max(peak_a, alloc.allocated)
        max_gap = max(max_gap, alloc.reserved - alloc.allocated)
        if cfg.record_timeline:
            timeline.append((idx, alloc.reserved, alloc.allocated))
    return FragReport(peak_r, peak_a, peak_r - peak_a, max_gap, alloc.reorganizations,
                      oom_at is not None, oom_at, tuple(timeline))


def simulate_planned(trace: IterationTrace, plan: GlobalPlan, *, extra_reserved: int = 0,
                     capacity: int | None = None, record_timeline: bool = True) -> FragReport:
    """Replay ``trace`` against the static arena of ``plan``.

    Only tensors the plan places count as allocated; ``extra_reserved``
    adds fixed reservations such as the rounding buffers.
    """
    planned = {tid for (_, tid) in plan.absolute}
    reserved = plan.total_peak + extra_reserved
    oom = capacity is not None and reserved > capacity
    live = peak_a = 0
    min_live = None
    timeline = []
    for idx, _, r in trace.events():
        if r.tensor_id in planned:
            size = align_up(r.size, plan.alignment)
            live += size if r.kind is Kind.MALLOC else -size
            peak_a = max(peak_a, live)
        min_live = live if min_live is None else min(min_live, live)
        if record_timeline:
            timeline.append((idx, reserved, live))
    max_gap = reserved - (min_live or 0)
    return FragReport(reserved, peak_a, reserved - peak_a, max_gap, 0, oom,
                      0 if oom else None, tuple(timeline))


def restrict_to_plan(trace: IterationTrace, plan: GlobalPlan) -> IterationTrace:
    """Keep only requests of tensors the plan places.

    Layer skeletal tensors live in the rounding buffers, outside the arena,
    so both replays should see the same planned subset.
    """
    planned = {tid for (_, tid) in plan.absolute}
    return IterationTrace(tuple(
        TraceSegment(s.phase, tuple(r for r in s.requests if r.tensor_id in planned), s.layer)
        for s in trace.segments))


def compare(a: FragReport, b: FragReport, names: tuple[str, str] = ("a", "b")) -> dict:
    """Field-by-field side-by-side with ``b - a`` deltas."""
    out = {}
    for f in fields(FragReport):
        if f.name == "timeline":
            continue
        va, vb = getattr(a, f.name), getattr(b, f.name)
        row = {names[0]: va, names[1]: vb}
        if isinstance(va, (int, float)) and not isinstance(va, bool) \
                and isinstance(vb, (int, float)):
            row["delta"] = vb - va
        out[f.name] = row
    return out
