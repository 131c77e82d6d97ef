"""Dual-mode execution of compiled programs.

Functional mode walks the instruction stream in issue order and evolves
the byte-level machine state (DDR, three FM memories, PM); its output
must match the graph-level reference executor bit for bit.  Timing mode
runs a discrete-event simulation of the four in-order queues with the
counted DPON/DPBY token semantics; it never looks at data.  The hazard
checker replays a trace against exact byte footprints to prove that the
typed dependencies were sufficient.
"""

from dataclasses import dataclass

import numpy as np

from . import quant
from .errors import DeadlockError, OutOfBoundsError, ShapeError, \
    UseBeforeDefError
from .machine import CONV, DDR, FM, LOAD, OP_TYPES, PM, SAVE, \
    instruction_cost
from .pipeline import token_pairings


class MachineState:
    def __init__(self, cfg, ddr_bytes):
        self.cfg = cfg
        self.ddr = np.zeros(ddr_bytes, np.uint8)
        self.ddr_written = np.zeros(ddr_bytes, bool)
        self.fm = [np.zeros(cfg.fm_bytes, np.uint8)
                   for _ in range(cfg.fm_memories)]
        self.fm_written = [np.zeros(cfg.fm_bytes, bool)
                           for _ in range(cfg.fm_memories)]
        self.pm = np.zeros(cfg.pm_bytes, np.uint8)
        self.pm_written = np.zeros(cfg.pm_bytes, bool)

    def _pair(self, space, mem):
        if space == DDR:
            return self.ddr, self.ddr_written
        if space == FM:
            return self.fm[mem], self.fm_written[mem]
        return self.pm, self.pm_written

    def preload(self, off, data):
        data = np.frombuffer(bytes(data), np.uint8)
        self.ddr[off:off + data.size] = data
        self.ddr_written[off:off + data.size] = True

    def read(self, space, mem, off, n, check=True):
        buf, written = self._pair(space, mem)
        if off < 0 or off + n > buf.size:
            if space == DDR:
                raise OutOfBoundsError(f"ddr read [{off},{off + n})")
            idx = (off + np.arange(n)) % buf.size
            if check and not written[idx].all():
                raise UseBeforeDefError(
                    f"{space}{mem} read [{off},{off + n}) of unwritten bytes")
            return buf[idx]
        if check and not written[off:off + n].all():
            raise UseBeforeDefError(
                f"{space}{mem} read [{off},{off + n}) of unwritten bytes")
        return buf[off:off + n]

    def write(self, space, mem, off, data):
        buf, written = self._pair(space, mem)
        n = data.size
        if off < 0 or off + n > buf.size:
            if space == DDR:
                raise OutOfBoundsError(f"ddr write [{off},{off + n})")
            idx = (off + np.arange(n)) % buf.size
            buf[idx] = data
            written[idx] = True
            return
        buf[off:off + n] = data
        written[off:off + n] = True


# ---------------------------------------------------------------------------
# functional execution of one instruction
# ---------------------------------------------------------------------------

def _gather_ddr(state, ins):
    rows = []
    for r in range(ins.rows):
        base = ins.src.off + r * ins.ddr_row_stride
        if ins.blocks == 1:
            rows.append(state.read(DDR, 0, base, ins.block_bytes))
        else:
            parts = [state.read(DDR, 0, base + b * ins.ddr_blk_stride,
                                ins.block_bytes)
                     for b in range(ins.blocks)]
            rows.append(np.concatenate(parts))
    return np.concatenate(rows) if rows else np.zeros(0, np.uint8)


def _scatter_ddr(state, ins, data):
    rb = ins.blocks * ins.block_bytes
    for r in range(ins.rows):
        row = data[r * rb:(r + 1) * rb]
        base = ins.dst.off + r * ins.ddr_row_stride
        if ins.blocks == 1:
            state.write(DDR, 0, base, row)
        else:
            for b in range(ins.blocks):
                state.write(DDR, 0, base + b * ins.ddr_blk_stride,
                            row[b * ins.block_bytes:(b + 1) * ins.block_bytes])


def _conv_window_sum(x, w, sh, sw, out_rows, out_w):
    """x: (rows, cols, c_in) int32 padded; w: (c_out, kh, kw, c_in)."""
    kh, kw = w.shape[1], w.shape[2]
    acc = np.zeros((out_rows, out_w, w.shape[0]), np.int64)
    for a in range(kh):
        for b in range(kw):
            window = x[a:a + (out_rows - 1) * sh + 1:sh,
                       b:b + (out_w - 1) * sw + 1:sw]
            acc += window @ w[:, a, b, :].T.astype(np.int64)
    return acc


def _exec_conv(state, ins):
    n = ins.in_rows * ins.in_w * ins.c_in
    x = state.read(FM, ins.src.mem, ins.src.off, n).view(np.int8)
    x = x.reshape(ins.in_rows, ins.in_w, ins.c_in).astype(np.int64)
    taps_n = ins.c_out * ins.kh * ins.kw * ins.c_in
    blob = state.read(PM, 0, ins.wgt_off, ins.wgt_bytes)
    if ins.wgt_bytes != taps_n + 4 * ins.c_out:
        raise ShapeError(f"weight block is {ins.wgt_bytes} B, expected "
                         f"{taps_n + 4 * ins.c_out}")
    w = blob[:taps_n].view(np.int8).reshape(ins.c_out, ins.kh, ins.kw,
                                            ins.c_in)
    bias = blob[taps_n:].view("<i4").astype(np.int64)
    out_rows = ins.conv_out_rows()
    # pad far enough that every window position exists; cols beyond in_w
    # contribute zeros exactly like rows beyond in_rows
    pr_eff = max(ins.pr, (ins.out_w - 1) * ins.sw + ins.kw
                 - ins.pl - ins.in_w)
    xp = np.pad(x, ((ins.pt, ins.pb), (ins.pl, max(pr_eff, 0)), (0, 0)))
    acc = _conv_window_sum(xp, w, ins.sh, ins.sw, out_rows, ins.out_w)
    acc += bias
    y = quant.requantize(acc, ins.shift)
    state.write(FM, ins.dst.mem, ins.dst.off, y.reshape(-1).view(np.uint8))


def _exec_maxpool(state, ins):
    n = ins.in_rows * ins.in_w * ins.c_in
    x = state.read(FM, ins.src.mem, ins.src.off, n).view(np.int8)
    x = x.reshape(ins.in_rows, ins.in_w, ins.c_in)
    out_rows = ins.misc_out_rows()
    pr_eff = max(ins.pr, (ins.out_w - 1) * ins.sw + ins.kw
                 - ins.pl - ins.in_w)
    xp = np.pad(x, ((ins.pt, ins.pb), (ins.pl, max(pr_eff, 0)), (0, 0)),
                constant_values=quant.INT8_MIN)
    out = np.full((out_rows, ins.out_w, ins.c_in), quant.INT8_MIN, np.int8)
    for a in range(ins.kh):
        for b in range(ins.kw):
            window = xp[a:a + (out_rows - 1) * ins.sh + 1:ins.sh,
                        b:b + (ins.out_w - 1) * ins.sw + 1:ins.sw]
            out = np.maximum(out, window)
    if ins.shift:
        out = quant.requantize(out.astype(np.int64), ins.shift)
    state.write(FM, ins.dst.mem, ins.dst.off, out.reshape(-1).view(np.uint8))


def _exec_eltwise(state, ins):
    n = ins.rows * ins.w * ins.c
    a = state.read(FM, ins.src.mem, ins.src.off, n).view(np.int8)
    b = state.read(FM, ins.src2.mem, ins.src2.off, n).view(np.int8)
    acc = ((a.astype(np.int64) << ins.ea) + (b.astype(np.int64) << ins.eb))
    y = quant.requantize(acc, ins.eo)
    state.write(FM, ins.dst.mem, ins.dst.off, y.view(np.uint8))


def _exec_move(state, ins):
    for r in range(ins.rows):
        for blk in range(ins.blocks):
            src = (ins.src.off + r * ins.src_row_stride
                   + blk * ins.src_blk_stride)
            data = state.read(FM, ins.src.mem, src, ins.block_bytes)
            dst = (ins.dst.off + r * ins.dst_row_stride
                   + blk * ins.dst_blk_stride)
            state.write(FM, ins.dst.mem, dst, data)


def _exec_upsample(state, ins):
    n = ins.in_rows * ins.w * ins.c
    x = state.read(FM, ins.src.mem, ins.src.off, n).view(np.int8)
    x = x.reshape(ins.in_rows, ins.w, ins.c)
    ow = (ins.w - 1) * ins.factor + 1
    out = np.zeros((ins.out_rows, ow, ins.c), np.int8)
    rows = range(0, ins.out_rows, ins.factor)
    out[::ins.factor, ::ins.factor] = x[:len(rows)]
    state.write(FM, ins.dst.mem, ins.dst.off, out.reshape(-1).view(np.uint8))


def run_functional(prog, state):
    """Execute in issue order; timing is ignored but addresses, circular
    wrap, and arithmetic are exact."""
    for idx, ins in enumerate(prog.instructions):
        try:
            if ins.is_noop:
                continue
            if ins.op == LOAD:
                data = _gather_ddr(state, ins)
                state.write(ins.dst.space, ins.dst.mem, ins.dst.off, data)
            elif ins.op == SAVE:
                n = ins.transfer_bytes()
                data = state.read(FM, ins.src.mem, ins.src.off, n)
                _scatter_ddr(state, ins, data)
            elif ins.op == CONV:
                _exec_conv(state, ins)
            elif ins.sub == "maxpool":
                _exec_maxpool(state, ins)
            elif ins.sub == "eltwise":
                _exec_eltwise(state, ins)
            elif ins.sub == "move":
                _exec_move(state, ins)
            elif ins.sub == "upsample":
                _exec_upsample(state, ins)
        except (UseBeforeDefError, OutOfBoundsError, ShapeError) as e:
            raise type(e)(f"at instruction {idx} ({ins.op}/{ins.sub}): {e}")
    return state


# ---------------------------------------------------------------------------
# graph-level reference executor
# ---------------------------------------------------------------------------

def _ref_conv(x, w, bias, stride, padding, shift):
    sh, sw = stride
    ph, pw = padding
    co, kh, kw, ci = w.shape
    xp = np.pad(x.astype(np.int64), ((ph, ph), (pw, pw), (0, 0)))
    oh = (x.shape[0] + 2 * ph - kh) // sh + 1
    ow = (x.shape[1] + 2 * pw - kw) // sw + 1
    # im2col formulation, distinct from the tile-level sliding windows
    cols = np.empty((oh * ow, kh * kw * ci), np.int64)
    i = 0
    for r in range(oh):
        for c in range(ow):
            patch = xp[r * sh:r * sh + kh, c * sw:c * sw + kw, :]
            cols[i] = patch.reshape(-1)
            i += 1
    acc = cols @ w.reshape(co, -1).T.astype(np.int64)
    acc += bias.astype(np.int64)
    if shift is None:
        return acc.reshape(oh, ow, co)
    return quant.requantize(acc, shift).reshape(oh, ow, co)


def _ref_maxpool(x, kernel, stride, padding, shift):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)),
                constant_values=quant.INT8_MIN)
    oh = (x.shape[0] + 2 * ph - kh) // sh + 1
    ow = (x.shape[1] + 2 * pw - kw) // sw + 1
    out = np.full((oh, ow, x.shape[2]), quant.INT8_MIN, np.int8)
    for r in range(oh):
        for c in range(ow):
            out[r, c] = xp[r * sh:r * sh + kh, c * sw:c * sw + kw].max(
                axis=(0, 1))
    if shift:
        out = quant.requantize(out.astype(np.int64), shift)
    return out


def _ref_upsample(x, factor):
    h, w, c = x.shape
    out = np.zeros(((h - 1) * factor + 1, (w - 1) * factor + 1, c), np.int8)
    out[::factor, ::factor] = x
    return out


def reference_execute(g, inputs):
    """Direct nested evaluation of the graph, int32 accumulation, the
    centralized requantization policy.  Handles folded graphs (with fused
    super-nodes) and unfolded graphs (explicit fix/const nodes)."""
    from .graph import _topo_order
    vals = {}
    for name, data in inputs.items():
        t = g.tensors[name]
        arr = np.asarray(data, np.int8)
        if arr.shape != t.shape:
            raise ShapeError(f"input {name}: got {arr.shape}, declared "
                             f"{t.shape}")
        vals[name] = arr
    quants = {}
    for name, arr in g.param_data.items():
        vals[name] = arr

    for nid in _topo_order(g):
        n = g.nodes[nid]
        if n.op == "input":
            if n.output not in vals:
                raise ShapeError(f"missing input tensor {n.output}")
            continue
        if n.op == "const":
            continue
        if n.op == "fix":
            src = vals[n.inputs[0]]
            q_to = quant.step_exponent(n.attrs["step"])
            if n.inputs[0] in g.param_data:
                # annotates parameters; bits unchanged
                vals[n.output] = src
                quants[n.output] = q_to
                continue
            src_t = g.tensors.get(n.inputs[0])
            if src_t is not None and src_t.quant is not None:
                q_from = src_t.quant.exp
            elif n.inputs[0] in quants:
                # raw compute output still at accumulator precision
                q_from = quants[n.inputs[0]]
            else:
                q_from = q_to
            vals[n.output] = quant.requantize(
                src.astype(np.int64), q_from - q_to)
            continue
        if n.op in ("conv", "deconv"):
            x = vals[n.inputs[0]]
            if n.params is not None:
                w, bias = n.params.weights, n.params.bias
                wexp = n.params.wgt_quant.exp
            else:
                prms = [t for t in n.inputs if t in g.param_data
                        or t in quants]
                wname = next(t for t in prms if vals[t].dtype == np.int8)
                bname = next((t for t in prms if t != wname), None)
                w = vals[wname]
                bias = (vals[bname].astype(np.int32) if bname
                        else np.zeros(w.shape[0], np.int32))
                wexp = quants[wname]
            xexp = g.tensors[n.inputs[0]].quant.exp
            mid = n.fused.mid if n.fused else g.tensors.get(n.output)
            if mid is None or mid.quant is None:
                # unfolded form: leave the accumulator for the fix node
                shift = None
            else:
                shift = xexp + wexp - mid.quant.exp
            if n.op == "deconv":
                s = n.attrs.get("upsample", 2)
                p = n.attrs.get("padding", 0)
                x = _ref_upsample(x, s)
                out = _ref_conv(x, w, bias, (1, 1), (p, p), shift)
            else:
                out = _ref_conv(x, w, bias,
                                tuple(n.attrs.get("stride", (1, 1))),
                                tuple(n.attrs.get("padding", (0, 0))),
                                shift)
            if shift is None:
                quants[n.output] = xexp + wexp
            if n.fused:
                pshift = mid.quant.exp - g.tensors[n.output].quant.exp
                out = _ref_maxpool(out, n.fused.kernel, n.fused.stride,
                                   n.fused.padding, pshift)
            vals[n.output] = out
        elif n.op == "maxpool":
            x = vals[n.inputs[0]]
            shift = (g.tensors[n.inputs[0]].quant.exp
                     - g.tensors[n.output].quant.exp)
            vals[n.output] = _ref_maxpool(
                x, tuple(n.attrs["kernel"]),
                tuple(n.attrs.get("stride", (1, 1))),
                tuple(n.attrs.get("padding", (0, 0))), shift)
        elif n.op == "eltwise-add":
            a, b = vals[n.inputs[0]], vals[n.inputs[1]]
            vals[n.output] = quant.eltwise_add(
                a, b, g.tensors[n.inputs[0]].quant.exp,
                g.tensors[n.inputs[1]].quant.exp,
                g.tensors[n.output].quant.exp)
        elif n.op == "upsample":
            vals[n.output] = _ref_upsample(vals[n.inputs[0]],
                                           n.attrs.get("factor", 2))
        elif n.op == "identity":
            vals[n.output] = vals[n.inputs[0]].copy()
        elif n.op == "concat":
            vals[n.output] = np.concatenate(
                [vals[t] for t in n.inputs], axis=2)
        else:
            raise ShapeError(f"reference cannot execute op {n.op}")
    return {name: vals[name] for name in g.outputs}


# ---------------------------------------------------------------------------
# timing simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    index: int
    queue: str
    sub: str
    color: str
    issue: int
    start: int
    duration: int

    @property
    def end(self):
        return self.start + self.duration


@dataclass
class Trace:
    events: list
    makespan: int
    busy: dict
    util: dict

    def to_dict(self):
        return {
            "events": [e.__dict__ for e in self.events],
            "makespan": self.makespan,
            "busy": self.busy,
            "util": self.util,
        }

    @classmethod
    def from_dict(cls, d):
        return cls([TraceEvent(**e) for e in d["events"]], d["makespan"],
                   d["busy"], d["util"])


def run_timing(prog, cfg, watchdog=10**6):
    """Discrete-event simulation of four in-order, non-overlapping queues.

    An instruction starts when its queue is free, its queue predecessor
    has finished, and for every type in its DPON set the paired pace
    maker (counted FIFO per producer-consumer type channel) has
    completed.  Deadlock (an unsatisfiable pairing) raises DeadlockError.
    """
    instrs = prog.instructions
    pairings = token_pairings(instrs)
    gates = {i: [] for i in range(len(instrs))}
    for (s, u), pairs in pairings.items():
        for consumer, producer in pairs:
            if producer is None:
                raise DeadlockError(
                    f"instruction {consumer} waits on a {s} pace maker "
                    f"that never issues")
            gates[consumer].append(producer)

    queues = {op: [i for i, ins in enumerate(instrs) if ins.op == op]
              for op in OP_TYPES}
    head = {op: 0 for op in OP_TYPES}
    free_at = {op: 0 for op in OP_TYPES}
    done = {}
    events = [None] * len(instrs)
    remaining = len(instrs)
    while remaining:
        progressed = False
        for op in OP_TYPES:
            while head[op] < len(queues[op]):
                idx = queues[op][head[op]]
                if any(p not in done for p in gates[idx]):
                    break
                issue = free_at[op]
                start = max([issue] + [done[p] for p in gates[idx]])
                if start - issue > watchdog:
                    raise DeadlockError(f"watchdog: instruction {idx} "
                                        f"stalled {start - issue} cycles")
                dur = instruction_cost(instrs[idx], cfg)
                done[idx] = start + dur
                events[idx] = TraceEvent(idx, op, instrs[idx].sub,
                                         instrs[idx].color(), issue, start,
                                         dur)
                free_at[op] = start + dur
                head[op] += 1
                remaining -= 1
                progressed = True
        if remaining and not progressed:
            stuck = [queues[op][head[op]] for op in OP_TYPES
                     if head[op] < len(queues[op])]
            raise DeadlockError(f"typed dependencies unsatisfiable; queues "
                                f"stuck at {stuck}")
    makespan = max((e.end for e in events if e is not None), default=0)
    busy = {op: sum(e.duration for e in events if e and e.queue == op)
            for op in OP_TYPES}
    util = {op: (busy[op] / makespan if makespan else 0.0)
            for op in OP_TYPES}
    return Trace([e for e in events if e is not None], makespan, busy, util)


# ---------------------------------------------------------------------------
# hazard checking
# ---------------------------------------------------------------------------

def check_hazards(prog, trace, allocs=None, cfg=None):
    """Validate a trace against exact byte footprints.

    Empty report iff (1) every read starts at or after the completion of
    the instruction that produced those bytes, and no write begins before
    a pending earlier read of those bytes has finished, (2) no two
    simultaneously-live allocations overlap, and (3) no FM or PM port
    serves two concurrently-executing instructions in the same direction.
    """
    report = []
    instrs = prog.instructions
    ev = {e.index: e for e in trace.events}

    writers = {}   # (space, mem) -> list of [lo, hi, idx]
    readers = {}
    for idx, ins in enumerate(instrs):
        if idx not in ev:
            continue
        for space, mem, lo, hi in ins.reads(exact=True):
            key = (space, mem)
            for wlo, whi, widx in writers.get(key, []):
                if wlo < hi and lo < whi and ev[widx].end > ev[idx].start:
                    report.append(
                        ("raw-hazard", idx, widx,
                         f"instr {idx} reads {space}{mem}[{max(lo, wlo)},"
                         f"{min(hi, whi)}) before writer {widx} completes"))
            readers.setdefault(key, []).append([lo, hi, idx])
        for space, mem, lo, hi in ins.writes(exact=True):
            key = (space, mem)
            for rlo, rhi, ridx in readers.get(key, []):
                if rlo < hi and lo < rhi and ridx != idx \
                        and ev[ridx].end > ev[idx].start:
                    report.append(
                        ("war-hazard", idx, ridx,
                         f"instr {idx} overwrites {space}{mem} bytes "
                         f"instr {ridx} is still reading"))
            def cut(table):
                out = []
                for e in table:
                    if e[0] < hi and lo < e[1]:
                        if e[0] < lo:
                            out.append([e[0], lo, e[2]])
                        if hi < e[1]:
                            out.append([hi, e[1], e[2]])
                    else:
                        out.append(e)
                return out
            writers[key] = cut(writers.setdefault(key, [])) + [[lo, hi, idx]]
            readers[key] = cut(readers.get(key, []))

    if allocs:
        for i, a in enumerate(allocs):
            for b in allocs[i + 1:]:
                if a["mem"] != b["mem"]:
                    continue
                ta = (ev[a["first"]].start, ev[a["last"]].end)
                tb = (ev[b["first"]].start, ev[b["last"]].end)
                if ta[0] < tb[1] and tb[0] < ta[1]:
                    from .memory import CircularAlloc
                    ca = CircularAlloc(a["mem"], a["start"], a["length"],
                                       a.get("wrap", False))
                    cb = CircularAlloc(b["mem"], b["start"], b["length"],
                                       b.get("wrap", False))
                    cap = cfg.fm_bytes if cfg else 1 << 62
                    from .memory import _ranges_clash
                    if _ranges_clash(ca, cb, cap):
                        report.append(
                            ("alloc-overlap", a["key"], b["key"],
                             f"live allocations {a['key']} and {b['key']} "
                             f"overlap in fm{a['mem']}"))

    port_use = {}
    for idx, ins in enumerate(instrs):
        if idx not in ev or ins.is_noop:
            continue
        seen = set()
        for space, mem, _lo, _hi in ins.reads():
            if space in (FM, PM) and (space, mem, "r") not in seen:
                seen.add((space, mem, "r"))
                port_use.setdefault((space, mem, "r"), []).append(idx)
        for space, mem, _lo, _hi in ins.writes():
            if space in (FM, PM) and (space, mem, "w") not in seen:
                seen.add((space, mem, "w"))
                port_use.setdefault((space, mem, "w"), []).append(idx)
    for (space, mem, d), users in port_use.items():
        users = sorted(users, key=lambda i: ev[i].start)
        for a, b in zip(users, users[1:]):
            if ev[a].end > ev[b].start:
                report.append(
                    ("port-conflict", a, b,
                     f"{space}{mem} {('read', 'write')[d == 'w']} port "
                     f"used by {a} and {b} concurrently"))
    return report


# ---------------------------------------------------------------------------
# whole-program convenience runners
# ---------------------------------------------------------------------------

def program_state(prog, cfg):
    """Fresh machine state with the parameter image preloaded."""
    total = max((b + s) for b, s in prog.segments.values()) if \
        prog.segments else 0
    state = MachineState(cfg, total)
    if prog.param_image:
        pbase, _ = prog.segments["parameters"]
        state.preload(pbase, prog.param_image)
    return state


def run_program(prog, cfg, inputs):
    """Functional end-to-end run: place inputs, execute, collect outputs."""
    state = program_state(prog, cfg)
    for name, data in inputs.items():
        t = prog.tensors[name]
        arr = np.ascontiguousarray(np.asarray(data, np.int8))
        if tuple(arr.shape) != tuple(t["shape"]):
            raise ShapeError(f"input {name}: got {arr.shape}, program "
                             f"expects {tuple(t['shape'])}")
        base = prog.segments[t["segment"]][0] + t["off"]
        state.preload(base, arr.tobytes())
    run_functional(prog, state)
    outputs = {}
    for name, t in prog.tensors.items():
        if t["segment"] != "outputs":
            continue
        base = prog.segments["outputs"][0] + t["off"]
        raw = state.read(DDR, 0, base, t["bytes"])
        outputs[name] = raw.view(np.int8).reshape(t["shape"]).copy()
    return outputs
