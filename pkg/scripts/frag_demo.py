"""Reserved and allocated memory over one iteration, caching vs planned.

Synthesizes the trace of a model config, plans it, replays both allocators
at planned peak plus the given headroom and writes the two curves as CSV.
"""

import argparse

from actplan.allocator import (CachingAllocatorConfig, restrict_to_plan,
                               simulate_caching_allocator, simulate_planned)
from actplan.bilevel import plan_model
from actplan.config import ModelConfig
from actplan.trace import synthesize_iteration_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seq-lens", default="65536,131072,262144")
    ap.add_argument("--headroom", type=float, default=0.10)
    ap.add_argument("--out", default="frag_timeline.csv")
    args = ap.parse_args(argv)

    rows = ["seq_len,event,caching_reserved,caching_allocated,planned_reserved"]
    for s in map(int, args.seq_lens.split(",")):
        trace = synthesize_iteration_trace(ModelConfig(seq_len=s))
        gp = plan_model(trace)
        sub = restrict_to_plan(trace, gp)
        cap = int(gp.total_peak * (1 + args.headroom))
        cach = simulate_caching_allocator(sub, CachingAllocatorConfig.for_capacity(cap))
        plan = simulate_planned(sub, gp, capacity=cap)
        rows += [f"{s},{t},{r},{a},{plan.peak_reserved}" for t, r, a in cach.timeline]
        print(f"s={s:>7}: planned {plan.peak_reserved / 2**30:.3f} GiB, caching reserved "
              f"{cach.peak_reserved / 2**30:.3f} GiB, fragmentation "
              f"{cach.peak_fragmentation / 2**20:.1f} MiB, {cach.reorganizations} "
              f"reorganization(s){', OOM' if cach.oom else ''}")
    with open(args.out, "w") as f:
        f.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
