"""Generators shared by the test modules."""

import random

from hypothesis import strategies as st

from actplan.dsa import DsaInstance
from actplan.trace import Phase, TraceSegment, extract_lifespans, free, malloc


def interleaved_requests(rng: random.Random, n: int, max_size: int, first_id: int = 1):
    """Random interleaving of ``n`` malloc/free pairs with random sizes."""
    order = [i for i in range(n) for _ in range(2)]
    rng.shuffle(order)
    sizes = [rng.randint(1, max_size) for _ in range(n)]
    seen, out = set(), []
    for i in order:
        tid = first_id + i
        if i in seen:
            out.append(free(tid, sizes[i]))
        else:
            seen.add(i)
            out.append(malloc(tid, sizes[i]))
    return out


def instance_from_requests(reqs, cap=None, alignment=1) -> DsaInstance:
    spans, _ = extract_lifespans([TraceSegment(Phase.RAW, tuple(reqs))])
    return DsaInstance.from_lifespans(spans, cap, alignment)


def random_instance(seed: int, n: int, max_size: int = 64, cap=None) -> DsaInstance:
    rng = random.Random(seed)
    return instance_from_requests(interleaved_requests(rng, n, max_size), cap)


@st.composite
def request_lists(draw, max_pairs: int = 12, max_size: int = 64):
    n = draw(st.integers(1, max_pairs))
    seed = draw(st.integers(0, 2**32 - 1))
    return interleaved_requests(random.Random(seed), n, max_size)
