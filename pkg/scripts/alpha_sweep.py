"""Predicted MFU against the swap fraction at a few sequence lengths.

For each length the solver's alpha is printed next to the sweep maximum,
so one can see where the program and a brute-force sweep disagree.
"""

import argparse

from actplan.config import HardwareConfig, model_preset
from actplan.schedule import SWEEP_HEADER, alpha_sweep, analytic_timing
from actplan.swap import CpuInfeasibleError, skeletal_sizes, solve_alpha


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--preset", default="7b")
    ap.add_argument("--seq-lens", default="262144,1048576,1572864,2097152")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--out", default="alpha_sweep.csv")
    args = ap.parse_args(argv)

    hw = HardwareConfig()
    grid = [i / args.steps for i in range(args.steps + 1)]
    with open(args.out, "w") as f:
        f.write("seq_len," + SWEEP_HEADER + "\n")
        for s in map(int, args.seq_lens.split(",")):
            cfg = model_preset(args.preset, seq_len=s)
            tm = analytic_timing(cfg, hw)
            rows = alpha_sweep(cfg, hw, grid, tm)
            f.writelines(f"{s},{r.csv()}\n" for r in rows)
            best = max((r for r in rows if r.cpu_ok), key=lambda r: r.mfu, default=None)
            try:
                plan = solve_alpha(skeletal_sizes(cfg), hw, tm.t_fwd_layer, cfg.n_layers)
                chosen = f"alpha {plan.alpha:.4f} ({plan.bound_by})"
            except CpuInfeasibleError:
                chosen = "out of host memory"
            sweep = f"{best.alpha:.2f} at MFU {best.mfu:.2%}" if best else "none fits host memory"
            print(f"s={s:>8}: solver {chosen}; sweep best {sweep}")


if __name__ == "__main__":
    main()
