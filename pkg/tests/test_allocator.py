import random

import pytest
from hypothesis import given, settings, strategies as st

from actplan.allocator import (CachingAllocatorConfig, compare, restrict_to_plan,
                               simulate_caching_allocator, simulate_planned)
from actplan.bilevel import plan_model
from actplan.config import MiB, toy_model
from actplan.dsa import lower_bound
from actplan.trace import (IterationTrace, Phase, TraceSegment, free, malloc,
                           synthesize_iteration_trace)

from helpers import instance_from_requests, interleaved_requests


def raw(*reqs):
    return IterationTrace((TraceSegment(Phase.RAW, tuple(reqs)),))


def test_free_space_not_contiguous_ooms():
    # one 12 MiB segment carved into three 4 MiB blocks; freeing the outer
    # two leaves 8 MiB free that an 8 MiB request cannot use
    trace = raw(malloc(1, 12 * MiB), free(1, 12 * MiB),
                malloc(2, 4 * MiB), malloc(3, 4 * MiB), malloc(4, 4 * MiB),
                free(2, 4 * MiB), free(4, 4 * MiB),
                malloc(5, 8 * MiB), free(5, 8 * MiB), free(3, 4 * MiB))
    rep = simulate_caching_allocator(trace, CachingAllocatorConfig(12 * MiB))
    assert rep.oom and rep.oom_event == 7
    _, reserved, allocated = rep.timeline[-1]
    assert reserved - allocated == 8 * MiB
    gp = plan_model(trace)
    assert gp.total_peak == 12 * MiB
    planned = simulate_planned(trace, gp, capacity=12 * MiB)
    assert not planned.oom and planned.reorganizations == 0


def test_release_idle_segments_counts_reorganization():
    trace = raw(malloc(1, 4 * MiB), malloc(2, 4 * MiB), free(1, 4 * MiB),
                malloc(3, 6 * MiB), free(3, 6 * MiB), free(2, 4 * MiB))
    rep = simulate_caching_allocator(trace, CachingAllocatorConfig(12 * MiB))
    assert not rep.oom and rep.reorganizations == 1
    assert rep.peak_reserved == 10 * MiB
    off = simulate_caching_allocator(
        trace, CachingAllocatorConfig(12 * MiB, reorganize_on_failure=False))
    assert off.oom and off.reorganizations == 0


def test_small_pool_segments():
    trace = raw(malloc(1, 1000), malloc(2, 3000), free(1, 1000), free(2, 3000))
    rep = simulate_caching_allocator(trace, CachingAllocatorConfig(64 * MiB))
    assert rep.peak_reserved == 2 * MiB
    assert rep.peak_allocated == 1024 + 3072


def test_cached_blocks_are_reused():
    trace = raw(malloc(1, 4 * MiB), free(1, 4 * MiB), malloc(2, 4 * MiB), free(2, 4 * MiB))
    rep = simulate_caching_allocator(trace, CachingAllocatorConfig(64 * MiB))
    assert rep.peak_reserved == 4 * MiB and rep.peak_fragmentation == 0


@given(st.integers(0, 10**6), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_caching_bounds(seed, n):
    reqs = interleaved_requests(random.Random(seed), n, 8 * MiB)
    rep = simulate_caching_allocator(raw(*reqs), CachingAllocatorConfig(1 << 40))
    live = lower_bound(instance_from_requests(reqs, alignment=512))
    assert not rep.oom
    assert rep.peak_allocated == live
    assert rep.peak_reserved >= rep.peak_allocated
    assert rep.peak_fragmentation == rep.peak_reserved - rep.peak_allocated


def test_planned_report():
    trace = synthesize_iteration_trace(toy_model())
    gp = plan_model(trace)
    sub = restrict_to_plan(trace, gp)
    rep = simulate_planned(sub, gp)
    assert rep.peak_reserved == gp.total_peak
    assert rep.reorganizations == 0 and not rep.oom
    assert rep.peak_fragmentation == gp.total_peak - rep.peak_allocated
    assert all(r == gp.total_peak for _, r, _ in rep.timeline)
    assert simulate_planned(sub, gp, capacity=gp.total_peak - 1).oom


def test_toy_fragmentation_at_ten_percent_headroom():
    trace = synthesize_iteration_trace(toy_model())
    gp = plan_model(trace)
    sub = restrict_to_plan(trace, gp)
    cap = int(gp.total_peak * 1.1)
    rep = simulate_caching_allocator(sub, CachingAllocatorConfig.for_capacity(cap))
    assert not rep.oom and rep.peak_reserved >= gp.total_peak


def test_for_capacity_scaling():
    big = CachingAllocatorConfig.for_capacity(80 * (1 << 30))
    assert big == CachingAllocatorConfig(80 * (1 << 30))
    small = CachingAllocatorConfig.for_capacity(600_000)
    assert small.small_segment * 16 <= 600_000
    assert small.small_pool_threshold >= small.rounding


def test_deterministic():
    trace = synthesize_iteration_trace(toy_model(n_layers=3))
    cfg = CachingAllocatorConfig.for_capacity(2 * MiB)
    assert simulate_caching_allocator(trace, cfg) == simulate_caching_allocator(trace, cfg)


def test_compare_and_csv():
    trace = raw(malloc(1, 4 * MiB), free(1, 4 * MiB))
    a = simulate_caching_allocator(trace, CachingAllocatorConfig(64 * MiB))
    b = simulate_planned(trace, plan_model(trace))
    d = compare(a, b, ("caching", "planned"))
    assert d["peak_reserved"]["delta"] == b.peak_reserved - a.peak_reserved
    assert "delta" not in d["oom"]
    assert a.timeline_csv().splitlines()[0] == "event,reserved,allocated"
    assert "timeline" not in a.to_json() and "timeline" in a.to_json(timeline=True)


def test_config_validation():
    with pytest.raises(ValueError):
        CachingAllocatorConfig(0)
    with pytest.raises(ValueError):
        CachingAllocatorConfig(MiB, rounding=300)
