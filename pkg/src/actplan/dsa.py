"""Offline dynamic storage allocation.

Given tensors with sizes and live intervals, assign each a base address so
that tensors live at the same time never share bytes, minimizing the
highest address reached (the peak).

``solve_exact`` is a branch-and-bound over *canonical* placements: tensors
are placed one at a time in nondecreasing address order, each at the lowest
address that clears its already-placed neighbours. Every instance has an
optimal layout of that form (sort any optimal layout by address and drop
each tensor as low as it goes; nothing moves up), so the search is complete.
Before branching, the instance is split into connected components of the
overlap graph and any tensor overlapping everything else in its component
is stacked at the bottom; both reductions preserve optimality.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .trace import TensorLifespan, overlap_pairs

DEFAULT_ALIGNMENT = 512


class InfeasibleError(Exception):
    """The instance cannot be packed under its memory cap."""

    def __init__(self, message: str, lower_bound: int | None = None):
        super().__init__(message)
        self.lower_bound = lower_bound


def align_up(n: int, alignment: int) -> int:
    return -(-n // alignment) * alignment


@dataclass(frozen=True)
class DsaInstance:
    lifespans: tuple[TensorLifespan, ...]
    overlaps: frozenset[tuple[int, int]]
    mem_cap: int | None = None
    alignment: int = 1

    def __post_init__(self):
        a = self.alignment
        if a < 1 or a & (a - 1):
            raise ValueError(f"alignment must be a power of two, got {a}")
        for s in self.lifespans:
            if s.size % a:
                raise ValueError(f"size of tensor {s.tensor_id} not a multiple of {a}")
        ids = [s.tensor_id for s in self.lifespans]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tensor ids in instance")

    @classmethod
    def from_lifespans(cls, spans: Iterable[TensorLifespan], mem_cap: int | None = None,
                       alignment: int = DEFAULT_ALIGNMENT,
                       overlaps: Iterable[tuple[int, int]] | None = None) -> DsaInstance:
        """Build an instance, rounding sizes up to ``alignment``."""
        rounded = tuple(
            s if s.size % alignment == 0 else
            TensorLifespan(s.tensor_id, align_up(s.size, alignment), s.alloc_index,
                           s.free_index, s.cls, s.alloc_segment, s.free_segment)
            for s in spans)
        pairs = overlap_pairs(rounded) if overlaps is None else overlaps
        return cls(rounded, frozenset(pairs), mem_cap, alignment)

    @property
    def sizes(self) -> dict[int, int]:
        return {s.tensor_id: s.size for s in self.lifespans}

    def __len__(self) -> int:
        return len(self.lifespans)


@dataclass(frozen=True)
class MemoryPlan:
    addresses: Mapping[int, int]
    peak: int
    optimal: bool = True

    def to_json(self) -> dict:
        return {"peak": self.peak,
                "addresses": {str(k): v for k, v in sorted(self.addresses.items())}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data: Mapping) -> MemoryPlan:
        return cls({int(k): int(v) for k, v in data["addresses"].items()}, int(data["peak"]))


@dataclass(frozen=True)
class Violation:
    kind: str  # "missing" | "negative" | "alignment" | "peak" | "cap" | "pair"
    detail: str
    tensors: tuple[int, ...] = field(default=())

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


def verify_plan(plan: MemoryPlan, inst: DsaInstance) -> Violation | None:
    """First violated constraint of ``plan`` against ``inst``, or None."""
    try:
        return _verify(plan, inst)
    except Exception as exc:  # malformed plan objects still get a verdict
        return Violation("malformed", repr(exc))


def _verify(plan: MemoryPlan, inst: DsaInstance) -> Violation | None:
    sizes = inst.sizes
    addr = plan.addresses
    for tid, size in sizes.items():
        if tid not in addr:
            return Violation("missing", f"tensor {tid} has no address", (tid,))
        a = addr[tid]
        if a < 0:
            return Violation("negative", f"tensor {tid} at {a}", (tid,))
        if a % inst.alignment:
            return Violation("alignment", f"tensor {tid} at {a} not aligned to "
                             f"{inst.alignment}", (tid,))
        if a + size > plan.peak:
            return Violation("peak", f"tensor {tid} ends at {a + size} > peak {plan.peak}",
                             (tid,))
    if inst.mem_cap is not None and plan.peak > inst.mem_cap:
        return Violation("cap", f"peak {plan.peak} exceeds cap {inst.mem_cap}")
    for i, j in sorted(inst.overlaps):
        ai, aj = addr[i], addr[j]
        if ai < aj + sizes[j] and aj < ai + sizes[i]:
            return Violation("pair", f"tensors {i} [{ai}, {ai + sizes[i]}) and {j} "
                             f"[{aj}, {aj + sizes[j]}) overlap in time and space", (i, j))
    return None


def lower_bound(inst: DsaInstance | Sequence[TensorLifespan]) -> int:
    """Maximum total size of simultaneously live tensors."""
    spans = inst.lifespans if isinstance(inst, DsaInstance) else inst
    events = []
    for s in spans:
        events.append((s.alloc_index, 1, s.size))
        events.append((s.free_index, 0, -s.size))
    events.sort()
    best = cur = 0
    for _, _, delta in events:
        cur += delta
        best = max(best, cur)
    return best


# ---------------------------------------------------------------------------
# heuristic


class _Block:
    __slots__ = ("start", "end", "free")

    def __init__(self, start: int, end: int, free: bool):
        self.start, self.end, self.free = start, end, free


def solve_heuristic(inst: DsaInstance) -> MemoryPlan:
    """Best-fit replay of the request sequence with coalescing of free blocks.

    A request takes the smallest free block that fits; failing that, a free
    block at the top of the arena is extended, otherwise the arena grows.
    """
    blocks: list[_Block] = []
    top = 0
    where: dict[int, _Block] = {}
    addresses: dict[int, int] = {}
    events = []
    for order, s in enumerate(inst.lifespans):
        events.append((s.alloc_index, 1, order, s))
        events.append((s.free_index, 0, order, s))
    events.sort(key=lambda e: e[:3])
    for _, is_alloc, _, s in events:
        if is_alloc:
            best = None
            for b in blocks:
                if b.free and b.end - b.start >= s.size:
                    if best is None or b.end - b.start < best.end - best.start:
                        best = b
            if best is not None:
                idx = blocks.index(best)
                if best.end - best.start > s.size:
                    blocks.insert(idx + 1, _Block(best.start + s.size, best.end, True))
                    best.end = best.start + s.size
                best.free = False
                blk = best
            elif blocks and blocks[-1].free:
                blk = blocks[-1]
                blk.end = blk.start + s.size
                blk.free = False
                top = blk.end
            else:
                blk = _Block(top, top + s.size, False)
                blocks.append(blk)
                top = blk.end
            where[s.tensor_id] = blk
            addresses[s.tensor_id] = blk.start
        else:
            blk = where.pop(s.tensor_id)
            blk.free = True
            idx = blocks.index(blk)
            if idx + 1 < len(blocks) and blocks[idx + 1].free:
                blk.end = blocks.pop(idx + 1).end
            if idx > 0 and blocks[idx - 1].free:
                prev = blocks[idx - 1]
                prev.end = blk.end
                blocks.pop(idx)
    peak = max((addresses[s.tensor_id] + s.size for s in inst.lifespans), default=0)
    if inst.mem_cap is not None and peak > inst.mem_cap:
        raise InfeasibleError(f"heuristic peak {peak} exceeds cap {inst.mem_cap}",
                              lower_bound(inst))
    return MemoryPlan(addresses, peak, optimal=False)


# ---------------------------------------------------------------------------
# exact


class _Deadline:
    def __init__(self, budget: float | None):
        self.end = None if budget is None else time.monotonic() + budget
        self.expired = False
        self._tick = 0

    def check(self) -> bool:
        self._tick += 1
        if self.end is not None and self._tick % 256 == 0 and time.monotonic() > self.end:
            self.expired = True
        return self.expired


def _gravity(size: int, occupied: list[tuple[int, int]]) -> int:
    """Lowest address where [a, a+size) clears every interval in ``occupied``."""
    a = 0
    for start, end in sorted(occupied):
        if start >= a + size:
            break
        if end > a:
            a = end
    return a


class _Search:
    def __init__(self, inst: DsaInstance, deadline: _Deadline):
        self.deadline = deadline
        spans = inst.lifespans
        self.ids = [s.tensor_id for s in spans]
        self.size = [s.size for s in spans]
        self.spans = spans
        index = {tid: k for k, tid in enumerate(self.ids)}
        self.adj: list[set[int]] = [set() for _ in spans]
        for i, j in inst.overlaps:
            if i in index and j in index:
                a, b = index[i], index[j]
                self.adj[a].add(b)
                self.adj[b].add(a)
        self.addr: list[int] = [0] * len(spans)
        self.optimal = True

    # -- reductions ---------------------------------------------------------

    def solve(self, items: list[int], base: int) -> int:
        """Place ``items`` starting at ``base``; return the peak reached."""
        peak = base
        for comp in self._components(items):
            peak = max(peak, self._solve_component(comp, base))
        return peak

    def _components(self, items: list[int]) -> list[list[int]]:
        todo = set(items)
        comps = []
        for start in items:
            if start not in todo:
                continue
            todo.discard(start)
            comp, stack = [start], [start]
            while stack:
                for nb in self.adj[stack.pop()]:
                    if nb in todo:
                        todo.discard(nb)
                        comp.append(nb)
                        stack.append(nb)
            comp.sort()
            comps.append(comp)
        return comps

    def _solve_component(self, comp: list[int], base: int) -> int:
        if len(comp) == 1:
            self.addr[comp[0]] = base
            return base + self.size[comp[0]]
        members = set(comp)
        universal = [i for i in comp if len(self.adj[i] & members) == len(comp) - 1]
        if universal:
            for i in universal:
                self.addr[i] = base
                base += self.size[i]
            rest = [i for i in comp if i not in set(universal)]
            return self.solve(rest, base) if rest else base
        return self._branch_and_bound(comp, base)

    # -- branch and bound ---------------------------------------------------

    def _greedy(self, comp: list[int], order: list[int]) -> tuple[int, dict[int, int]]:
        placed: dict[int, int] = {}
        for i in order:
            occ = [(placed[j], placed[j] + self.size[j]) for j in self.adj[i] if j in placed]
            placed[i] = _gravity(self.size[i], occ)
        peak = max(placed[i] + self.size[i] for i in comp)
        return peak, placed

    def _branch_and_bound(self, comp: list[int], base: int) -> int:
        size, adj = self.size, self.adj
        lb = lower_bound([self.spans[i] for i in comp])
        orders = [
            sorted(comp, key=lambda i: (-size[i], self.ids[i])),
            sorted(comp, key=lambda i: (self.spans[i].alloc_index, self.ids[i])),
            sorted(comp, key=lambda i: (-size[i] * (self.spans[i].free_index
                                                    - self.spans[i].alloc_index),
                                        self.ids[i])),
        ]
        best_peak, best = None, None
        for order in orders:
            peak, placed = self._greedy(comp, order)
            if best_peak is None or peak < best_peak:
                best_peak, best = peak, placed
        # best-fit replay is a different kind of incumbent; it matters when
        # the search runs out of time on large components
        sub = [self.spans[i] for i in comp]
        replay = solve_heuristic(DsaInstance(tuple(sub), frozenset(overlap_pairs(sub))))
        if replay.peak < best_peak:
            best_peak = replay.peak
            best = {i: replay.addresses[self.ids[i]] for i in comp}
        if best_peak > lb:
            best_peak, best = self._dfs(comp, best_peak, best, lb)
        for i in comp:
            self.addr[i] = base + best[i]
        return base + best_peak

    def _dfs(self, comp, best_peak, best, lb):
        size, adj, ids = self.size, self.adj, self.ids
        placed: dict[int, int] = {}
        unplaced = set(comp)
        state = {"peak": best_peak, "plan": best}

        def gravity(i):
            return _gravity(size[i], [(placed[j], placed[j] + size[j])
                                      for j in adj[i] if j in placed])

        # time points at which some tensor of the component is allocated
        points = sorted({self.spans[i].alloc_index for i in comp})
        live_at = {i: [k for k, p in enumerate(points)
                       if self.spans[i].alloc_index <= p < self.spans[i].free_index]
                   for i in comp}

        def stacked_bound(floor: int) -> int:
            # everything still unplaced lands at or above ``floor``
            acc = [0] * len(points)
            for i in unplaced:
                for k in live_at[i]:
                    acc[k] += size[i]
            for j, a in placed.items():
                above = a + size[j] - floor
                if above > 0:
                    for k in live_at[j]:
                        acc[k] += above
            return floor + max(acc)

        def rec(last_addr: int, last_id: int, cur_peak: int):
            if self.deadline.check():
                self.optimal = False
                return True
            if not unplaced:
                if cur_peak < state["peak"]:
                    state["peak"], state["plan"] = cur_peak, dict(placed)
                return state["peak"] <= lb
            grav = {i: gravity(i) for i in unplaced}
            bound = cur_peak
            for i, g in grav.items():
                bound = max(bound, max(g, last_addr) + size[i])
            if bound >= state["peak"]:
                return False
            if stacked_bound(max(last_addr, 0)) >= state["peak"]:
                return False
            cands = [i for i, g in grav.items()
                     if g > last_addr or (g == last_addr and ids[i] > last_id)]
            cands.sort(key=lambda i: (grav[i], -size[i], ids[i]))
            for i in cands:
                g = grav[i]
                if max(cur_peak, g + size[i]) >= state["peak"]:
                    continue
                placed[i] = g
                unplaced.discard(i)
                stop = rec(g, ids[i], max(cur_peak, g + size[i]))
                unplaced.add(i)
                del placed[i]
                if stop:
                    return True
            return False

        rec(-1, -1, 0)
        return state["peak"], state["plan"]


def solve_exact(inst: DsaInstance, time_budget: float | None = 60.0) -> MemoryPlan:
    """Minimum-peak plan, or the best plan found when the budget runs out.

    ``plan.optimal`` is False when the search was cut short. Raises
    ``InfeasibleError`` when the live-bytes bound or the found optimum exceeds
    ``inst.mem_cap``.
    """
    lb = lower_bound(inst)
    if inst.mem_cap is not None and lb > inst.mem_cap:
        raise InfeasibleError(f"live-bytes lower bound {lb} exceeds cap {inst.mem_cap}", lb)
    search = _Search(inst, _Deadline(time_budget))
    peak = search.solve(list(range(len(inst.lifespans))), 0)
    if inst.mem_cap is not None and peak > inst.mem_cap:
        if search.optimal:
            raise InfeasibleError(f"optimal peak {peak} exceeds cap {inst.mem_cap}", lb)
        raise InfeasibleError(f"no plan under cap {inst.mem_cap} found within budget", lb)
    addresses = {tid: search.addr[k] for k, tid in enumerate(search.ids)}
    return MemoryPlan(addresses, peak, optimal=search.optimal)


# ---------------------------------------------------------------------------
# oracle


def solve_bruteforce(inst: DsaInstance, max_tensors: int = 10) -> MemoryPlan:
    """Exhaustive minimum over every placement order with lowest-fit drops.

    No pruning and no reductions; meant as a reference for small instances.
    """
    n = len(inst.lifespans)
    if n > max_tensors:
        raise ValueError(f"brute force limited to {max_tensors} tensors, got {n}")
    ids = [s.tensor_id for s in inst.lifespans]
    size = [s.size for s in inst.lifespans]
    conflict = [[False] * n for _ in range(n)]
    pos = {tid: k for k, tid in enumerate(ids)}
    for i, j in inst.overlaps:
        conflict[pos[i]][pos[j]] = conflict[pos[j]][pos[i]] = True

    best = [None, None]
    addr = [None] * n

    def lowest(i):
        a = 0
        moved = True
        while moved:
            moved = False
            for j in range(n):
                if addr[j] is not None and conflict[i][j] \
                        and addr[j] < a + size[i] and a < addr[j] + size[j]:
                    a = addr[j] + size[j]
                    moved = True
        return a

    def rec(depth, peak):
        if depth == n:
            if best[0] is None or peak < best[0]:
                best[0], best[1] = peak, list(addr)
            return
        for i in range(n):
            if addr[i] is None:
                addr[i] = lowest(i)
                rec(depth + 1, max(peak, addr[i] + size[i]))
                addr[i] = None

    rec(0, 0)
    addresses = {ids[k]: best[1][k] for k in range(n)} if n else {}
    return MemoryPlan(addresses, best[0] or 0)
