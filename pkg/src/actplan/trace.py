"""Memory-request traces: data model, text format, synthesis, lifespans.

A trace is the ordered list of ``malloc``/``free`` requests issued during
one training iteration, cut into segments by model phase. The text format
is one request per line plus segment headers::

    # segment emb_fwd
    malloc 1 4096
    # segment layer_fwd 0
    malloc 2 1048576
    free 2 1048576
    ...

Requests that appear before any header belong to a ``raw`` segment, so a
bare list of ``malloc``/``free`` lines is also a valid trace.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .config import ModelConfig


class TraceError(ValueError):
    """Malformed or inconsistent trace. ``lineno`` is set when parsing text."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class Kind(str, enum.Enum):
    MALLOC = "malloc"
    FREE = "free"


class Phase(str, enum.Enum):
    RAW = "raw"
    EMB_FWD = "emb_fwd"
    LAYER_FWD = "layer_fwd"
    CLS_FWD = "cls_fwd"
    CLS_BWD = "cls_bwd"
    LAYER_BWD = "layer_bwd"
    EMB_BWD = "emb_bwd"

    @property
    def is_layer(self) -> bool:
        return self in (Phase.LAYER_FWD, Phase.LAYER_BWD)

    @property
    def is_forward(self) -> bool:
        return self in (Phase.EMB_FWD, Phase.LAYER_FWD, Phase.CLS_FWD)

    @property
    def is_backward(self) -> bool:
        return self in (Phase.EMB_BWD, Phase.LAYER_BWD, Phase.CLS_BWD)


_MATCHING_BWD = {
    Phase.EMB_FWD: Phase.EMB_BWD,
    Phase.LAYER_FWD: Phase.LAYER_BWD,
    Phase.CLS_FWD: Phase.CLS_BWD,
}


class TensorClass(str, enum.Enum):
    SKELETAL = "skeletal"
    TRANSIENT = "transient"
    # lives across segments but is not a forward->matching-backward tensor
    CROSSING = "crossing"


@dataclass(frozen=True)
class MemoryRequest:
    kind: Kind
    tensor_id: int
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise TraceError(f"request size must be positive, got {self.size}")
        if self.tensor_id < 0 or self.tensor_id >= 2**64:
            raise TraceError(f"tensor id out of range: {self.tensor_id}")


def malloc(tensor_id: int, size: int) -> MemoryRequest:
    return MemoryRequest(Kind.MALLOC, tensor_id, size)


def free(tensor_id: int, size: int) -> MemoryRequest:
    return MemoryRequest(Kind.FREE, tensor_id, size)


@dataclass(frozen=True)
class TraceSegment:
    phase: Phase
    requests: tuple[MemoryRequest, ...]
    layer: int | None = None

    def __post_init__(self):
        if self.phase.is_layer and self.layer is None:
            raise TraceError(f"{self.phase.value} segment needs a layer index")
        if not self.phase.is_layer and self.layer is not None:
            raise TraceError(f"{self.phase.value} segment takes no layer index")

    def __len__(self) -> int:
        return len(self.requests)

    def signature(self) -> tuple:
        """Request sequence with ids renamed by order of first appearance.

        Two segments with equal signatures are identical modulo tensor ids.
        """
        local: dict[int, int] = {}
        out = []
        for r in self.requests:
            idx = local.setdefault(r.tensor_id, len(local))
            out.append((r.kind, idx, r.size))
        return tuple(out)


@dataclass(frozen=True)
class IterationTrace:
    segments: tuple[TraceSegment, ...]

    @property
    def layer_count(self) -> int:
        return sum(1 for s in self.segments if s.phase is Phase.LAYER_FWD)

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.segments)

    def events(self) -> Iterator[tuple[int, int, MemoryRequest]]:
        """Yield ``(global_index, segment_index, request)``."""
        idx = 0
        for seg_idx, seg in enumerate(self.segments):
            for r in seg.requests:
                yield idx, seg_idx, r
                idx += 1

    def requests(self) -> list[MemoryRequest]:
        return [r for s in self.segments for r in s.requests]

    def segment_starts(self) -> list[int]:
        starts, pos = [], 0
        for s in self.segments:
            starts.append(pos)
            pos += len(s)
        return starts


@dataclass(frozen=True)
class TensorLifespan:
    tensor_id: int
    size: int
    alloc_index: int
    free_index: int
    cls: TensorClass
    alloc_segment: int | None = None
    free_segment: int | None = None

    def overlaps(self, other: TensorLifespan) -> bool:
        return self.alloc_index < other.free_index and other.alloc_index < self.free_index


# ---------------------------------------------------------------------------
# validation


def check_requests(requests: Iterable[MemoryRequest], *, balanced: bool = True,
                   linenos: Sequence[int] | None = None) -> None:
    """Check malloc/free pairing over a request sequence.

    With ``balanced`` every malloc must be freed by the end.
    """
    live: dict[int, int] = {}
    seen: set[int] = set()
    live_bytes = 0
    for pos, r in enumerate(requests):
        lineno = linenos[pos] if linenos is not None else None
        if r.kind is Kind.MALLOC:
            if r.tensor_id in seen:
                raise TraceError(f"tensor {r.tensor_id} allocated twice", lineno)
            seen.add(r.tensor_id)
            live[r.tensor_id] = r.size
            live_bytes += r.size
        else:
            if r.tensor_id not in live:
                what = "double free" if r.tensor_id in seen else "unmatched free"
                raise TraceError(f"{what} of tensor {r.tensor_id}", lineno)
            if live[r.tensor_id] != r.size:
                raise TraceError(
                    f"size mismatch for tensor {r.tensor_id}: malloc "
                    f"{live[r.tensor_id]}, free {r.size}", lineno)
            del live[r.tensor_id]
            live_bytes -= r.size
        if live_bytes < 0:
            raise TraceError("negative live bytes", lineno)
    if balanced and live:
        ids = sorted(live)[:5]
        raise TraceError(f"{len(live)} tensor(s) never freed, e.g. {ids}")


def check_trace(trace: IterationTrace, *, balanced: bool = True) -> None:
    check_requests(trace.requests(), balanced=balanced)


def check_structure(trace: IterationTrace) -> None:
    """Check the canonical iteration segment order.

    Embedding fwd, layer fwd 0..n-1, classifier fwd/bwd, layer bwd n-1..0,
    embedding bwd.
    """
    n = trace.layer_count
    expected = ([(Phase.EMB_FWD, None)]
                + [(Phase.LAYER_FWD, i) for i in range(n)]
                + [(Phase.CLS_FWD, None), (Phase.CLS_BWD, None)]
                + [(Phase.LAYER_BWD, i) for i in reversed(range(n))]
                + [(Phase.EMB_BWD, None)])
    got = [(s.phase, s.layer) for s in trace.segments]
    if got != expected:
        raise TraceError(f"unexpected segment order: {_fmt_order(got)}")


def _fmt_order(order) -> str:
    return ", ".join(p.value if l is None else f"{p.value}[{l}]" for p, l in order)


def live_bytes_curve(requests: Iterable[MemoryRequest], start: int = 0) -> list[int]:
    """Running live bytes, one entry before the first request and one after each."""
    curve = [start]
    cur = start
    for r in requests:
        cur += r.size if r.kind is Kind.MALLOC else -r.size
        curve.append(cur)
    return curve


# ---------------------------------------------------------------------------
# text format


def parse_trace(text: str, *, balanced: bool = True) -> IterationTrace:
    segments: list[TraceSegment] = []
    phase, layer = Phase.RAW, None
    pending: list[MemoryRequest] = []
    all_requests: list[MemoryRequest] = []
    linenos: list[int] = []
    started = False

    def close():
        if started or pending:
            segments.append(TraceSegment(phase, tuple(pending), layer))

    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) >= 2 and parts[1] == "segment":
                if len(parts) not in (3, 4):
                    raise TraceError("segment header needs a phase and optional layer", lineno)
                close()
                try:
                    phase = Phase(parts[2])
                except ValueError:
                    raise TraceError(f"unknown phase {parts[2]!r}", lineno) from None
                layer = None
                if len(parts) == 4:
                    layer = _parse_int(parts[3], "layer index", lineno)
                try:
                    TraceSegment(phase, (), layer)
                except TraceError as exc:
                    raise TraceError(str(exc), lineno) from None
                pending = []
                started = True
            continue
        if len(parts) != 3 or parts[0] not in ("malloc", "free"):
            raise TraceError(f"malformed line {line.strip()!r}", lineno)
        tid = _parse_int(parts[1], "tensor id", lineno)
        size = _parse_int(parts[2], "size", lineno)
        try:
            req = MemoryRequest(Kind(parts[0]), tid, size)
        except TraceError as exc:
            raise TraceError(str(exc), lineno) from None
        pending.append(req)
        all_requests.append(req)
        linenos.append(lineno)
    close()
    check_requests(all_requests, balanced=balanced, linenos=linenos)
    return IterationTrace(tuple(segments))


def _parse_int(tok: str, what: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TraceError(f"bad {what} {tok!r}", lineno) from None


def serialize_trace(trace: IterationTrace) -> str:
    lines = []
    for i, seg in enumerate(trace.segments):
        if not (i == 0 and seg.phase is Phase.RAW):
            header = f"# segment {seg.phase.value}"
            if seg.layer is not None:
                header += f" {seg.layer}"
            lines.append(header)
        lines.extend(f"{r.kind.value} {r.tensor_id} {r.size}" for r in seg.requests)
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# lifespans


def extract_lifespans(
    segments: IterationTrace | Sequence[TraceSegment],
) -> tuple[list[TensorLifespan], set[tuple[int, int]]]:
    """Lifespans of every tensor touched by ``segments`` and their overlap set.

    Event indices are positions in the concatenated request list. A tensor
    allocated but not freed inside the range is live until the end of the
    range; one freed but not allocated inside it is live from before the
    start (``alloc_index == -1``). Overlap pairs are ``(i, j)`` with ``i < j``.
    """
    if isinstance(segments, IterationTrace):
        segments = segments.segments
    allocs: dict[int, tuple[int, int, int]] = {}
    spans: list[TensorLifespan] = []
    pos = 0
    for seg_idx, seg in enumerate(segments):
        for r in seg.requests:
            if r.kind is Kind.MALLOC:
                allocs[r.tensor_id] = (pos, seg_idx, r.size)
            elif r.tensor_id in allocs:
                a_pos, a_seg, size = allocs.pop(r.tensor_id)
                cls = _classify(segments[a_seg], seg, a_seg == seg_idx)
                spans.append(TensorLifespan(r.tensor_id, size, a_pos, pos, cls, a_seg, seg_idx))
            else:
                cls = TensorClass.SKELETAL if seg.phase.is_backward else TensorClass.CROSSING
                spans.append(TensorLifespan(r.tensor_id, r.size, -1, pos, cls, None, seg_idx))
            pos += 1
    for tid, (a_pos, a_seg, size) in allocs.items():
        phase = segments[a_seg].phase
        cls = TensorClass.SKELETAL if phase.is_forward else TensorClass.CROSSING
        spans.append(TensorLifespan(tid, size, a_pos, pos, cls, a_seg, None))
    spans.sort(key=lambda s: (s.alloc_index, s.tensor_id))
    return spans, overlap_pairs(spans)


def _classify(a: TraceSegment, f: TraceSegment, same: bool) -> TensorClass:
    if same:
        return TensorClass.TRANSIENT
    if _MATCHING_BWD.get(a.phase) is f.phase and a.layer == f.layer:
        return TensorClass.SKELETAL
    return TensorClass.CROSSING


def overlap_pairs(spans: Sequence[TensorLifespan]) -> set[tuple[int, int]]:
    """Pairs of tensor ids whose live intervals intersect, via a sweep."""
    order = sorted(spans, key=lambda s: (s.alloc_index, s.tensor_id))
    active: list[TensorLifespan] = []
    pairs: set[tuple[int, int]] = set()
    for s in order:
        active = [a for a in active if a.free_index > s.alloc_index]
        for a in active:
            pairs.add((min(a.tensor_id, s.tensor_id), max(a.tensor_id, s.tensor_id)))
        active.append(s)
    return pairs


def transient_only(trace: IterationTrace) -> IterationTrace:
    """Drop every request whose tensor is not allocated and freed in one segment."""
    segs = []
    for seg in trace.segments:
        counts: dict[int, int] = {}
        for r in seg.requests:
            counts[r.tensor_id] = counts.get(r.tensor_id, 0) + 1
        reqs = tuple(r for r in seg.requests if counts[r.tensor_id] == 2)
        segs.append(TraceSegment(seg.phase, reqs, seg.layer))
    return IterationTrace(tuple(segs))


# ---------------------------------------------------------------------------
# synthesis
#
# Layer programs are lists of ("S", name, size) skeletal mallocs,
# ("T", name, size) transient mallocs, ("X", name, size) crossing mallocs
# and ("F", name) frees. Sizes are bytes. The transient tensors and their
# sizes are illustrative defaults; only the skeletal sizes are meaningful.

_SCRATCH_FRACTIONS = (1 / 8, 1 / 16, 1 / 32)


class _Sizes:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.unit = cfg.unit_bytes
        self.tokens = cfg.batch * cfg.local_seq
        self.heads = max(1, -(-cfg.n_heads // cfg.tp_degree))
        self.vocab = -(-cfg.vocab // cfg.tp_degree)

    def u(self, f: float) -> int:
        return max(1, round(f * self.unit))

    def tok(self, per_token_bytes: int) -> int:
        return self.tokens * per_token_bytes

    def skel(self, name: str) -> int:
        return self.cfg.skeletal_units[name] * self.unit


def _scratch(sz: _Sizes, tag: str) -> list[tuple]:
    a, b, c = (sz.u(f) for f in _SCRATCH_FRACTIONS)
    return [("T", f"{tag}.s0", a), ("T", f"{tag}.s1", b), ("F", f"{tag}.s0"),
            ("T", f"{tag}.s2", c), ("F", f"{tag}.s1"), ("F", f"{tag}.s2")]


def _layer_fwd_program(sz: _Sizes) -> list[tuple]:
    u, tok, skel = sz.u, sz.tok, sz.skel
    named = set(sz.cfg.skeletal_units)
    p: list[tuple] = [("S", "input", skel("input"))]
    p += _scratch(sz, "ln1")
    p += [("T", "ln1_upcast", u(2)), ("T", "ln1_mean", tok(4)), ("T", "ln1_rstd", tok(4))]
    p += [("S", "input_norm", skel("input_norm"))] if "input_norm" in named else []
    p += [("F", "ln1_upcast"), ("F", "ln1_mean"), ("F", "ln1_rstd")]
    p += _scratch(sz, "qkv")
    p += [("T", "qkv_ws", u(0.25)), ("T", "qkv_fused", u(3)), ("F", "qkv_ws")]
    p += [("S", n, skel(n)) for n in ("q", "k", "v") if n in named]
    p += [("F", "qkv_fused")]
    p += _scratch(sz, "rope")
    p += [("T", "rope_cos", u(0.5)), ("T", "rope_sin", u(0.5)), ("T", "q_rot", u(1)),
          ("T", "k_rot", u(1)), ("F", "q_rot"), ("F", "k_rot"), ("F", "rope_cos"),
          ("F", "rope_sin")]
    p += _scratch(sz, "attn")
    p += [("T", "fa_lse", tok(4 * sz.heads)), ("T", "fa_ws", u(0.5)),
          ("S", "attn_out", skel("attn_out")), ("F", "fa_ws"), ("F", "fa_lse")]
    p += _scratch(sz, "proj")
    p += [("T", "proj_ws", u(0.25)), ("T", "proj_out", u(1)), ("F", "proj_ws"),
          ("T", "drop1_mask", u(0.5)), ("T", "resid1", u(1)), ("F", "drop1_mask"),
          ("F", "proj_out")]
    p += _scratch(sz, "ln2")
    p += [("T", "ln2_upcast", u(2)), ("T", "ln2_mean", tok(4)), ("T", "ln2_rstd", tok(4))]
    p += [("S", "post_attn_norm", skel("post_attn_norm"))] if "post_attn_norm" in named else []
    p += [("F", "ln2_upcast"), ("F", "ln2_mean"), ("F", "ln2_rstd")]
    p += _scratch(sz, "fc1")
    p += [("T", "fc1_ws", u(0.5))]
    p += [("S", "fc1_out", skel("fc1_out"))] if "fc1_out" in named else []
    p += [("F", "fc1_ws"), ("T", "gelu_tmp", u(4))]
    p += [("S", "fc1_act", skel("fc1_act"))] if "fc1_act" in named else []
    p += [("F", "gelu_tmp")]
    p += _scratch(sz, "fc2")
    p += [("T", "fc2_ws", u(0.5)), ("T", "fc2_out", u(1)), ("F", "fc2_ws"),
          ("T", "drop2_mask", u(0.5)), ("T", "resid2", u(1)), ("F", "drop2_mask"),
          ("F", "fc2_out"), ("F", "resid1"), ("F", "resid2")]
    extra = [n for n in sz.cfg.skeletal_units if n not in DEFAULT_ORDER]
    p += [("S", n, skel(n)) for n in extra]
    return p


DEFAULT_ORDER = ("input", "input_norm", "q", "k", "v", "attn_out", "post_attn_norm",
                 "fc1_out", "fc1_act")


def _layer_bwd_program(sz: _Sizes) -> list[tuple]:
    u, tok = sz.u, sz.tok
    named = set(sz.cfg.skeletal_units)

    def drop(*names):
        return [("F", n) for n in names if n in named]

    extra = [n for n in sz.cfg.skeletal_units if n not in DEFAULT_ORDER]
    p: list[tuple] = [("T", "grad_out", u(1))]
    p += drop(*extra)
    p += _scratch(sz, "fc2b")
    p += [("T", "fc2_dgrad_ws", u(0.5)), ("T", "grad_act", u(4)), ("F", "fc2_dgrad_ws")]
    p += drop("fc1_act")
    p += _scratch(sz, "geluB")
    p += [("T", "gelu_bwd_tmp", u(4)), ("T", "grad_fc1", u(4)), ("F", "gelu_bwd_tmp"),
          ("F", "grad_act")]
    p += drop("fc1_out")
    p += _scratch(sz, "fc1b")
    p += [("T", "fc1_dgrad_ws", u(0.5)), ("T", "grad_ln2", u(1)), ("F", "fc1_dgrad_ws"),
          ("F", "grad_fc1")]
    p += _scratch(sz, "ln2b")
    p += [("T", "ln2_bwd_tmp", u(2)), ("T", "grad_resid1", u(1)), ("F", "ln2_bwd_tmp"),
          ("F", "grad_ln2")]
    p += drop("post_attn_norm")
    p += _scratch(sz, "projb")
    p += [("T", "proj_dgrad", u(1))]
    p += _scratch(sz, "attnb")
    p += [("T", "fa_bwd_ws", u(0.5)), ("T", "fa_dsum", tok(4 * sz.heads)), ("T", "dq", u(1)),
          ("T", "dk", u(1)), ("T", "dv", u(1)), ("F", "fa_bwd_ws"), ("F", "fa_dsum"),
          ("F", "proj_dgrad")]
    p += drop("attn_out", "q", "k", "v")
    p += _scratch(sz, "ropeb")
    p += [("T", "dq_rot", u(1)), ("T", "dk_rot", u(1)), ("F", "dq"), ("F", "dk")]
    p += _scratch(sz, "qkvb")
    p += [("T", "dqkv", u(3)), ("F", "dq_rot"), ("F", "dk_rot"), ("F", "dv"),
          ("T", "qkv_dgrad_ws", u(0.25)), ("T", "grad_norm_in", u(1)),
          ("F", "qkv_dgrad_ws"), ("F", "dqkv")]
    p += _scratch(sz, "ln1b")
    p += [("T", "ln1_bwd_tmp", u(2)), ("T", "grad_in", u(1)), ("F", "ln1_bwd_tmp"),
          ("F", "grad_norm_in")]
    p += drop("input_norm", "input")
    p += [("F", "grad_resid1"), ("F", "grad_out"), ("F", "grad_in")]
    return p


def _outer_programs(sz: _Sizes) -> dict[Phase, list[tuple]]:
    u, tok = sz.u, sz.tok
    logits32 = sz.tokens * sz.vocab * 4
    logits = sz.tokens * sz.vocab * sz.cfg.dtype_bytes
    return {
        Phase.EMB_FWD: [
            ("S", "position_ids", tok(8)), ("X", "loss_mask", tok(4)),
            ("T", "token_ids", tok(8)), ("T", "gather_tmp", u(1)), ("T", "emb_drop", u(0.5)),
            ("F", "token_ids"), ("F", "gather_tmp"), ("F", "emb_drop"),
        ],
        Phase.CLS_FWD: [
            ("T", "final_ln_tmp", u(2)), ("S", "final_norm", u(1)), ("F", "final_ln_tmp"),
            ("T", "logits", logits32), ("T", "loss_tmp", tok(4)), ("F", "loss_tmp"),
            ("F", "logits"),
        ],
        Phase.CLS_BWD: [
            ("T", "grad_logits", logits), ("T", "grad_hidden", u(1)), ("F", "grad_logits"),
            ("F", "final_norm"), ("F", "loss_mask"), ("F", "grad_hidden"),
        ],
        Phase.EMB_BWD: [
            ("T", "grad_emb_tmp", u(1)), ("T", "scatter_ws", u(0.25)), ("F", "scatter_ws"),
            ("F", "grad_emb_tmp"), ("F", "position_ids"),
        ],
    }


class _Emitter:
    """Turns named programs into requests with globally unique ids."""

    def __init__(self, start_id: int = 1):
        self._ids = itertools.count(start_id)
        self._live: dict[tuple[str, str], tuple[int, int]] = {}
        self.labels: dict[int, tuple[str, str]] = {}

    def emit(self, program: list[tuple], scope: str, free_scope: str | None = None) -> tuple:
        out = []
        for op in program:
            if op[0] == "F":
                key = (scope, op[1])
                if key not in self._live and free_scope is not None:
                    key = (free_scope, op[1])
                if key not in self._live:
                    key = ("global", op[1])
                tid, size = self._live.pop(key)
                out.append(free(tid, size))
            else:
                tag, name, size = op
                tid = next(self._ids)
                self._live[("global" if tag == "X" else scope, name)] = (tid, size)
                self.labels[tid] = (tag, name)
                out.append(malloc(tid, size))
        return tuple(out)


def synthesize_layer_trace(cfg: ModelConfig, layer: int = 0, start_id: int = 1,
                           labels: dict | None = None) -> tuple[TraceSegment, TraceSegment]:
    """One layer's forward and backward segments.

    If ``labels`` is given it is filled with ``id -> (tag, name)`` where tag
    is ``"S"`` for skeletal and ``"T"`` for transient tensors.
    """
    sz = _Sizes(cfg)
    em = _Emitter(start_id)
    if labels is not None:
        em.labels = labels
    fwd = em.emit(_layer_fwd_program(sz), f"L{layer}")
    bwd = em.emit(_layer_bwd_program(sz), f"B{layer}", free_scope=f"L{layer}")
    return (TraceSegment(Phase.LAYER_FWD, fwd, layer),
            TraceSegment(Phase.LAYER_BWD, bwd, layer))


def synthesize_iteration_trace(cfg: ModelConfig) -> IterationTrace:
    sz = _Sizes(cfg)
    outer = _outer_programs(sz)
    em = _Emitter(1)
    n = cfg.n_layers
    segs = [TraceSegment(Phase.EMB_FWD, em.emit(outer[Phase.EMB_FWD], "emb"))]
    fwd_prog, bwd_prog = _layer_fwd_program(sz), _layer_bwd_program(sz)
    for i in range(n):
        segs.append(TraceSegment(Phase.LAYER_FWD, em.emit(fwd_prog, f"L{i}"), i))
    segs.append(TraceSegment(Phase.CLS_FWD, em.emit(outer[Phase.CLS_FWD], "cls")))
    segs.append(TraceSegment(Phase.CLS_BWD, em.emit(outer[Phase.CLS_BWD], "clsb", "cls")))
    for i in reversed(range(n)):
        segs.append(TraceSegment(Phase.LAYER_BWD, em.emit(bwd_prog, f"B{i}", f"L{i}"), i))
    segs.append(TraceSegment(Phase.EMB_BWD, em.emit(outer[Phase.EMB_BWD], "embb", "emb")))
    return IterationTrace(tuple(segs))


def skeletal_ids(segment: TraceSegment) -> list[int]:
    """Ids of the tensors a synthesized layer-forward segment keeps for backward.

    Determined from the request sequence: mallocs with no free in the segment.
    """
    freed = {r.tensor_id for r in segment.requests if r.kind is Kind.FREE}
    return [r.tensor_id for r in segment.requests
            if r.kind is Kind.MALLOC and r.tensor_id not in freed]


def _random_program(rng, n_tensors: int, max_size: int, tag: str) -> list[tuple]:
    """Random interleaving of ``n_tensors`` transient malloc/free pairs."""
    order = [i for i in range(n_tensors) for _ in range(2)]
    rng.shuffle(order)
    seen: set[int] = set()
    sizes = {i: rng.randint(1, max_size) for i in range(n_tensors)}
    prog = []
    for i in order:
        if i in seen:
            prog.append(("F", f"{tag}{i}"))
        else:
            seen.add(i)
            prog.append(("T", f"{tag}{i}", sizes[i]))
    return prog


def _splice(rng, prog: list[tuple], extra: list[tuple]) -> list[tuple]:
    out = list(prog)
    for op in extra:
        out.insert(rng.randint(0, len(out)), op)
    return out


def random_iteration_trace(seed: int, n_layers: int = 2, *, max_tensors: int = 5,
                           max_size: int = 64, spanning: bool | None = None) -> IterationTrace:
    """Small random layered trace with the canonical segment order.

    Every layer repeats one random forward and one random backward program,
    each keeping one or two skeletal tensors from forward to backward. With
    ``spanning`` (drawn at random when None) one embedding tensor stays live
    across all layer segments until the classifier backward.
    """
    import random

    rng = random.Random(seed)
    if spanning is None:
        spanning = rng.random() < 0.5
    n_skel = rng.randint(1, 2)
    skel = [("S", f"sk{j}", rng.randint(1, max_size)) for j in range(n_skel)]
    fwd = _splice(rng, _random_program(rng, rng.randint(1, max_tensors), max_size, "f"), skel)
    bwd = _splice(rng, _random_program(rng, rng.randint(0, max_tensors), max_size, "b"),
                  [("F", f"sk{j}") for j in range(n_skel)])
    outer = {ph: _random_program(rng, rng.randint(0, 3), max_size, ph.value)
             for ph in (Phase.EMB_FWD, Phase.CLS_FWD, Phase.CLS_BWD, Phase.EMB_BWD)}
    if spanning:
        outer[Phase.EMB_FWD] = outer[Phase.EMB_FWD] + [("X", "span", rng.randint(1, max_size))]
        outer[Phase.CLS_BWD] = [("F", "span")] + outer[Phase.CLS_BWD]
    em = _Emitter(1)
    segs = [TraceSegment(Phase.EMB_FWD, em.emit(outer[Phase.EMB_FWD], "emb"))]
    for i in range(n_layers):
        segs.append(TraceSegment(Phase.LAYER_FWD, em.emit(fwd, f"L{i}"), i))
    segs.append(TraceSegment(Phase.CLS_FWD, em.emit(outer[Phase.CLS_FWD], "cls")))
    segs.append(TraceSegment(Phase.CLS_BWD, em.emit(outer[Phase.CLS_BWD], "clsb")))
    for i in reversed(range(n_layers)):
        segs.append(TraceSegment(Phase.LAYER_BWD, em.emit(bwd, f"B{i}", f"L{i}"), i))
    segs.append(TraceSegment(Phase.EMB_BWD, em.emit(outer[Phase.EMB_BWD], "embb")))
    return IterationTrace(tuple(segs))
