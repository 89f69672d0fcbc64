"""Exact solver runtime and gap to best-fit on random instances of growing size."""

import argparse
import random
import statistics
import time

from actplan.dsa import DsaInstance, lower_bound, solve_exact, solve_heuristic
from actplan.trace import Phase, TraceSegment, extract_lifespans, free, malloc


def instance(seed, n, max_size):
    rng = random.Random(seed)
    order = [i for i in range(n) for _ in range(2)]
    rng.shuffle(order)
    sizes = [rng.randint(1, max_size) for _ in range(n)]
    seen, reqs = set(), []
    for i in order:
        reqs.append(free(i + 1, sizes[i]) if i in seen else malloc(i + 1, sizes[i]))
        seen.add(i)
    spans, _ = extract_lifespans([TraceSegment(Phase.RAW, tuple(reqs))])
    return DsaInstance.from_lifespans(spans, alignment=1)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="4,8,12,16,20")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--budget", type=float, default=10.0)
    args = ap.parse_args(argv)

    print("n,median_seconds,max_seconds,optimal_fraction,mean_heuristic_gap,mean_lb_gap")
    for n in map(int, args.sizes.split(",")):
        times, opt, hgap, lgap = [], 0, [], []
        for seed in range(args.trials):
            inst = instance(seed, n, 64)
            t0 = time.perf_counter()
            plan = solve_exact(inst, args.budget)
            times.append(time.perf_counter() - t0)
            opt += plan.optimal
            hgap.append(solve_heuristic(inst).peak / plan.peak - 1)
            lgap.append(plan.peak / lower_bound(inst) - 1)
        print(f"{n},{statistics.median(times):.4f},{max(times):.4f},{opt / args.trials:.2f},"
              f"{statistics.mean(hgap):.4f},{statistics.mean(lgap):.4f}")


if __name__ == "__main__":
    main()
