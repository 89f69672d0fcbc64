"""Full-offload transfer vs layer compute over sequence length.

Writes seq_len,transfer,compute,fwd_blocked rows and reports the length
above which offloading every skeletal byte no longer stalls the forward pass.
"""

import argparse
import sys

from actplan.analysis import SWEEP_HEADER, find_crossover, fit_poly, sweep_seq_len
from actplan.config import load_config, model_preset, HardwareConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", help="model/hardware JSON (default: 7b preset)")
    ap.add_argument("--min-log2", type=int, default=12)
    ap.add_argument("--max-log2", type=int, default=20)
    ap.add_argument("--out", default="crossover.csv")
    args = ap.parse_args(argv)

    cfg, hw = load_config(args.config) if args.config else (model_preset("7b"), HardwareConfig())
    lens = [1 << k for k in range(args.min_log2, args.max_log2 + 1)]
    s_star = find_crossover(cfg, hw, lo=lens[0], hi=lens[-1])
    if s_star is not None:
        lens = sorted(set(lens) | {s_star})
    pts = sweep_seq_len(cfg, hw, lens)
    with open(args.out, "w") as f:
        f.write(SWEEP_HEADER + "\n")
        f.writelines(p.csv() + "\n" for p in pts)

    s = [p.seq_len for p in pts]
    lin, r2 = fit_poly(s, [p.transfer for p in pts], 1)
    quad, r2q = fit_poly(s, [p.compute for p in pts], 2)
    print(f"crossover: {s_star if s_star else 'none in range'}")
    print(f"transfer = {lin[0]:.4e} s/token * s + {lin[1]:.3e}   (R^2 {r2:.6f})")
    print(f"compute  = {quad[0]:.4e} s^2 + {quad[1]:.4e} s + {quad[2]:.3e}   (R^2 {r2q:.6f})")
    print(f"wrote {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
