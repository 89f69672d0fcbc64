import pytest
from hypothesis import given, settings, strategies as st

from actplan.bilevel import (NonIdenticalLayers, build_pseudo_trace, expand_plan,
                             outer_overlaps_layers, plan_layer, plan_model, planned_instance)
from actplan.config import toy_model
from actplan.dsa import InfeasibleError, lower_bound, solve_exact, verify_plan
from actplan.trace import (IterationTrace, Phase, TraceError, TraceSegment, free, malloc,
                           random_iteration_trace, synthesize_iteration_trace)


@pytest.fixture(scope="module")
def toy():
    trace = synthesize_iteration_trace(toy_model())
    return trace, plan_model(trace)


def test_toy_plan_verifies(toy):
    trace, gp = toy
    inst, flat = expand_plan(trace, gp)
    assert verify_plan(flat, inst) is None
    assert gp.optimal
    assert gp.total_peak >= lower_bound(inst)


def test_toy_not_better_than_single_level(toy):
    trace, gp = toy
    inst, _ = expand_plan(trace, gp)
    assert gp.total_peak >= solve_exact(inst).peak


def test_layers_share_offsets(toy):
    trace, gp = toy
    fwd = [i for i, s in enumerate(trace.segments) if s.phase is Phase.LAYER_FWD]
    rel = []
    for i in fwd:
        base = gp.pseudo_base(i)
        ids = [r.tensor_id for r in trace.segments[i].requests]
        seen = list(dict.fromkeys(ids))
        rel.append([gp.absolute[(i, t)] - base for t in seen if (i, t) in gp.absolute])
    assert rel[0] and all(r == rel[0] for r in rel)


def test_pseudo_trace_shape(toy):
    trace, gp = toy
    lp = gp.layer_plan
    n_layer_segs = sum(1 for s in trace.segments if s.phase.is_layer)
    assert len(gp.pseudo.blocks) == n_layer_segs
    sizes = {r.tensor_id: r.size for r in gp.pseudo.requests}
    for pid, seg in gp.pseudo.blocks.items():
        phase = trace.segments[seg].phase
        assert sizes[pid] == (lp.fwd_peak if phase is Phase.LAYER_FWD else lp.bwd_peak)
    assert len(gp.pseudo) < trace.num_events


def test_json_deterministic(toy):
    trace, gp = toy
    again = plan_model(trace)
    assert gp.dumps() == again.dumps()
    d = gp.to_json()
    assert {"layer", "outer", "total_peak", "alignment", "optimal", "absolute"} <= set(d)


def test_cap_below_bound_is_infeasible(toy):
    trace, gp = toy
    with pytest.raises(InfeasibleError):
        plan_model(trace, cap=gp.total_peak // 4)


def test_non_identical_layers_rejected():
    trace = random_iteration_trace(0, 2)
    segs = list(trace.segments)
    i = next(k for k, s in enumerate(segs) if s.phase is Phase.LAYER_FWD and s.layer == 1)
    reqs = list(segs[i].requests)
    tid = max(r.tensor_id for r in trace.requests()) + 1
    segs[i] = TraceSegment(Phase.LAYER_FWD, tuple(reqs) + (malloc(tid, 5), free(tid, 5)), 1)
    with pytest.raises(NonIdenticalLayers):
        plan_model(IterationTrace(tuple(segs)))


def test_tensor_crossing_into_a_layer_rejected():
    # allocated by the embedding, freed inside a layer's backward
    segs = (
        TraceSegment(Phase.EMB_FWD, (malloc(1, 4),)),
        TraceSegment(Phase.LAYER_FWD, (malloc(2, 4), free(2, 4)), 0),
        TraceSegment(Phase.CLS_FWD, ()),
        TraceSegment(Phase.CLS_BWD, ()),
        TraceSegment(Phase.LAYER_BWD, (free(1, 4),), 0),
        TraceSegment(Phase.EMB_BWD, ()),
    )
    with pytest.raises(TraceError, match="crosses a layer boundary"):
        plan_model(IterationTrace(segs), alignment=1)


def test_plan_layer_offsets_keyed_by_local_index():
    trace = random_iteration_trace(5, 2)
    f, b = (next(s for s in trace.segments if s.phase is p)
            for p in (Phase.LAYER_FWD, Phase.LAYER_BWD))
    lp = plan_layer(f, b, alignment=1)
    assert lp.fwd_peak == lp.fwd_plan.peak
    assert set(lp.fwd_offsets.values()) <= set(lp.fwd_plan.addresses.values())


def test_outer_only_trace():
    segs = (TraceSegment(Phase.RAW, (malloc(1, 6), malloc(2, 4), free(2, 4), free(1, 6))),)
    gp = plan_model(IterationTrace(segs), alignment=1)
    assert gp.total_peak == 10 and gp.layer_plan is None


@given(st.integers(0, 100_000), st.integers(2, 4))
@settings(max_examples=40, deadline=None)
def test_random_traces_sound_and_conservative(seed, n):
    trace = random_iteration_trace(seed, n)
    gp = plan_model(trace, alignment=1)
    inst, flat = expand_plan(trace, gp)
    assert verify_plan(flat, inst) is None
    single = solve_exact(planned_instance(trace, 1))
    assert gp.total_peak >= single.peak
    if not outer_overlaps_layers(gp):
        assert gp.total_peak == single.peak


def test_build_pseudo_needs_layer_plan():
    with pytest.raises(ValueError):
        build_pseudo_trace(random_iteration_trace(1, 2), None)
