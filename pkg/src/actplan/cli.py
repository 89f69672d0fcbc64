"""Command-line entry point.

Subcommands write JSON (or a trace file) to ``--out`` or standard output,
CSV series to the path given by their CSV flag, and a one-line human
summary to standard error.

Exit codes:

    0  success
    1  unexpected error
    2  usage or configuration error
    3  trace parse error (malformed trace, non-identical layers)
    4  memory plan infeasible under ``--cap``
    5  mandatory offload does not fit in host memory ("out of host memory")
    6  input file not found
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .allocator import (CachingAllocatorConfig, compare, restrict_to_plan,
                        simulate_caching_allocator, simulate_planned)
from .bilevel import GlobalPlan, expand_plan, plan_model
from .config import ConfigError, HardwareConfig, ModelConfig, load_config
from .dsa import InfeasibleError, verify_plan
from .schedule import (SWEEP_HEADER, TimingModel, alpha_sweep, analytic_timing,
                       build_schedule, simulate)
from .swap import CpuInfeasibleError, SwapPlan, skeletal_sizes, solve_alpha
from .trace import (IterationTrace, TraceError, parse_trace, random_iteration_trace,
                    serialize_trace, synthesize_iteration_trace)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_INFEASIBLE = 4
EXIT_HOST_OOM = 5
EXIT_MISSING = 6

FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"


class _MissingInput(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    model: dict
    hardware: dict
    alpha: float
    plan: dict
    sim: dict
    frag: dict
    version: str
    inputs: dict
    created: str

    def to_json(self) -> dict:
        return asdict(self)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise _MissingInput(f"input file not found: {path}")
    return p.read_text()


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config(path: str) -> tuple[ModelConfig, HardwareConfig]:
    _read(path)
    return load_config(path)


def _trace(path: str) -> IterationTrace:
    return parse_trace(_read(path))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _swap_from_json(data: dict) -> SwapPlan:
    known = {f.name for f in fields(SwapPlan)}
    return SwapPlan(**{k: v for k, v in data.items() if k in known})


def _timing(args, cfg: ModelConfig, hw: HardwareConfig) -> TimingModel:
    if getattr(args, "timing", None):
        _read(args.timing)
        return TimingModel.load(args.timing, hw.bwd_ratio)
    return analytic_timing(cfg, hw)


# ---------------------------------------------------------------------------
# pipeline steps shared by the subcommands and ``report``

def plan_summary(gp: GlobalPlan) -> dict:
    lp = gp.layer_plan
    return {"total_peak": gp.total_peak, "optimal": gp.optimal,
            "layer_fwd_peak": lp.fwd_peak if lp else 0,
            "layer_bwd_peak": lp.bwd_peak if lp else 0,
            "condensed_events": len(gp.pseudo)}


def alpha_step(cfg: ModelConfig, hw: HardwareConfig, t_layer: float) -> SwapPlan:
    return solve_alpha(skeletal_sizes(cfg), hw, t_layer, cfg.n_layers)


def simulate_step(cfg, hw, swap: SwapPlan, tm: TimingModel, gp_json: dict | None = None):
    sched = build_schedule(cfg, swap, tm, hw)
    rep = simulate(sched, cfg, hw).to_json()
    if gp_json is not None:
        # arena plus the two rounding buffers that hold skeletal tensors
        rep["activation_memory"] = gp_json["total_peak"] + 2 * skeletal_sizes(cfg).total
    return sched, rep


def frag_step(trace: IterationTrace, gp: GlobalPlan, cap: int | None) -> dict:
    sub = restrict_to_plan(trace, gp)
    capacity = cap if cap is not None else int(gp.total_peak * 1.1)
    cach = simulate_caching_allocator(sub, CachingAllocatorConfig.for_capacity(capacity))
    plan = simulate_planned(sub, gp, capacity=capacity)
    return {"capacity": capacity, "caching": cach.to_json(), "planned": plan.to_json(),
            "compare": compare(cach, plan, ("caching", "planned"))}, cach, plan


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    if args.seed is not None:
        trace = random_iteration_trace(args.seed, args.layers)
        what = f"random {args.layers}-layer trace (seed {args.seed})"
    else:
        if not args.config:
            raise ConfigError("synth needs --config or --seed")
        cfg, _ = _config(args.config)
        trace = synthesize_iteration_trace(cfg)
        what = f"{cfg.n_layers}-layer trace"
    _emit(serialize_trace(trace), args.out)
    _say(f"synth: {what}, {len(trace.segments)} segments, {trace.num_events} events")
    return EXIT_OK


def cmd_plan(args) -> int:
    trace = _trace(args.trace)
    gp = plan_model(trace, args.cap, alignment=args.alignment, time_budget=args.time_budget)
    inst, flat = expand_plan(trace, gp)
    bad = verify_plan(flat, inst)
    if bad is not None:
        _say(f"plan: internal error, expanded plan fails verification: {bad}")
        return EXIT_ERROR
    _emit(gp.dumps() + "\n", args.out)
    _say(f"plan: total peak {gp.total_peak} bytes, "
         f"{'optimal' if gp.optimal else 'time budget hit, best found'}")
    return EXIT_OK


def cmd_alpha(args) -> int:
    cfg, hw = _config(args.config)
    t_layer = args.t_layer if args.t_layer is not None else _timing(args, cfg, hw).t_fwd_layer
    swap = alpha_step(cfg, hw, t_layer)
    out = swap.to_json()
    out["t_layer_fwd"] = t_layer
    _emit(_dumps(out), args.out)
    if args.sweep:
        grid = [i / 20 for i in range(21)]
        if swap.alpha not in grid:
            grid = sorted(grid + [swap.alpha])
        rows = alpha_sweep(cfg, hw, grid, _timing(args, cfg, hw))
        Path(args.sweep).write_text("\n".join([SWEEP_HEADER] + [r.csv() for r in rows]) + "\n")
    _say(f"alpha: {swap.alpha:.6f} (bound by {swap.bound_by})"
         + (f", mandatory offload stalls {swap.stall_seconds:.4g} s per layer"
            if swap.blocking else ""))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, hw = _config(args.config)
    tm = _timing(args, cfg, hw)
    if args.swap:
        swap = _swap_from_json(json.loads(_read(args.swap)))
    elif args.alpha is not None:
        sz = skeletal_sizes(cfg)
        swap = SwapPlan(args.alpha, sz.mandatory, sz.s_others, cfg.n_layers)
    else:
        swap = alpha_step(cfg, hw, tm.t_fwd_layer)
    gp_json = json.loads(_read(args.plan)) if args.plan else None
    sched, rep = simulate_step(cfg, hw, swap, tm, gp_json)
    _emit(_dumps(rep), args.out)
    if args.timeline:
        Path(args.timeline).write_text(sched.to_csv())
    _say(f"simulate: iteration {rep['iteration_time']:.4g} s, MFU {rep['mfu']:.2%}, "
         f"forward blocked {rep['fwd_blocked']:.4g} s")
    return EXIT_OK


def cmd_frag(args) -> int:
    trace = _trace(args.trace)
    gp = plan_model(trace, alignment=args.alignment, time_budget=args.time_budget)
    out, cach, plan = frag_step(trace, gp, args.cap)
    _emit(_dumps(out), args.out)
    if args.timeline:
        rows = ["event,caching_reserved,caching_allocated,planned_reserved,planned_allocated"]
        planned = {t: (r, a) for t, r, a in plan.timeline}
        for t, r, a in cach.timeline:
            pr, pa = planned.get(t, ("", ""))
            rows.append(f"{t},{r},{a},{pr},{pa}")
        Path(args.timeline).write_text("\n".join(rows) + "\n")
    _say(f"frag: caching fragmentation {cach.peak_fragmentation} bytes, "
         f"{cach.reorganizations} reorganizations{', OOM' if cach.oom else ''}; "
         f"planned fragmentation {plan.peak_fragmentation} bytes")
    return EXIT_OK


def build_manifest(config_path: str, cap: int | None = None, time_budget: float = 60.0,
                   deterministic: bool = False) -> RunManifest:
    cfg, hw = _config(config_path)
    trace = synthesize_iteration_trace(cfg)
    gp = plan_model(trace, time_budget=time_budget)
    tm = analytic_timing(cfg, hw)
    swap = alpha_step(cfg, hw, tm.t_fwd_layer)
    _, sim = simulate_step(cfg, hw, swap, tm)
    frag, _, _ = frag_step(trace, gp, cap)
    created = FIXED_TIMESTAMP if deterministic else \
        datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return RunManifest(cfg.to_dict(), hw.to_dict(),
                       swap.alpha, plan_summary(gp), sim,
                       {"capacity": frag["capacity"], "caching": frag["caching"],
                        "planned": frag["planned"]},
                       __version__, {"config": _sha256(config_path)}, created)


def cmd_report(args) -> int:
    m = build_manifest(args.config, args.cap, args.time_budget, args.deterministic_timestamps)
    _emit(_dumps(m.to_json()), args.out)
    _say(f"report: alpha {m.alpha:.4f}, MFU {m.sim['mfu']:.2%}, "
         f"arena {m.plan['total_peak']} bytes")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actplan", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", help="output path (default: standard output)")
        return sp

    sp = add("synth", cmd_synth, "synthesize an iteration trace")
    sp.add_argument("--config", help="model/hardware JSON config")
    sp.add_argument("--seed", type=int, help="emit a small random layered trace instead")
    sp.add_argument("--layers", type=int, default=2, help="layers of the random trace")

    sp = add("plan", cmd_plan, "bi-level memory plan for a trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--cap", type=int, help="memory cap in bytes")
    sp.add_argument("--alignment", type=int, default=512)
    sp.add_argument("--time-budget", type=float, default=60.0, help="solver seconds per instance")

    sp = add("alpha", cmd_alpha, "solve the swap fraction")
    sp.add_argument("--config", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--t-layer", type=float, help="measured layer forward time in seconds")
    g.add_argument("--analytic", action="store_true",
                   help="take the layer time from the analytic timing model (default)")
    g.add_argument("--timing", help="measured timing JSON (t_fwd_layer, t_attn_fwd, ...)")
    sp.add_argument("--sweep", help="write an alpha vs predicted MFU CSV here")

    sp = add("simulate", cmd_simulate, "simulate the three-stream schedule")
    sp.add_argument("--config", required=True)
    sp.add_argument("--plan", help="GlobalPlan JSON, adds activation memory to the report")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--swap", help="SwapPlan JSON from the alpha subcommand")
    g.add_argument("--alpha", type=float, help="fixed swap fraction")
    sp.add_argument("--timing", help="measured timing JSON")
    sp.add_argument("--timeline", help="write a stream,kind,layer,start,end CSV here")

    sp = add("frag", cmd_frag, "caching allocator vs planned arena")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--cap", type=int, help="allocator capacity (default: planned peak + 10%%)")
    sp.add_argument("--alignment", type=int, default=512)
    sp.add_argument("--time-budget", type=float, default=60.0)
    sp.add_argument("--timeline", help="write reserved/allocated CSV here")

    sp = add("report", cmd_report, "run the whole pipeline and write a manifest")
    sp.add_argument("--config", required=True)
    sp.add_argument("--cap", type=int, help="allocator capacity for the frag step")
    sp.add_argument("--time-budget", type=float, default=60.0)
    sp.add_argument("--deterministic-timestamps", action="store_true",
                    help=f"stamp the manifest with {FIXED_TIMESTAMP}")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _MissingInput as exc:
        _say(f"error: {exc}")
        return EXIT_MISSING
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_USAGE
    except TraceError as exc:
        _say(f"trace error: {exc}")
        return EXIT_PARSE
    except InfeasibleError as exc:
        _say(f"infeasible: {exc}")
        return EXIT_INFEASIBLE
    except CpuInfeasibleError as exc:
        _say(f"out of host memory: {exc}")
        return EXIT_HOST_OOM
    except (ValueError, json.JSONDecodeError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
