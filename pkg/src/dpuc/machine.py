"""Abstract machine definition: memories, instruction set, cost model.

The machine has four units (LOAD, SAVE, CONV, MISC), each with its own
in-order queue, three circular feature-map memories (FM) with one read and
one write port each, a circular parameter memory (PM) shared by the conv
unit, and a flat DDR split into five segments.  Instructions synchronize
through DPON/DPBY sets over the four unit types only.
"""

import json
import math
from dataclasses import dataclass, field, fields, replace

from .errors import AsmError, OutOfBoundsError

LOAD = "LOAD"
SAVE = "SAVE"
CONV = "CONV"
MISC = "MISC"
OP_TYPES = (LOAD, SAVE, CONV, MISC)

# Fixed mask bit order (LOAD, SAVE, CONV, MISC) = bits 3..0.  The hardware
# encoding is immaterial; this order is pinned for reproducible assembly.
_MASK_BIT = {LOAD: 3, SAVE: 2, CONV: 1, MISC: 0}

DDR = "ddr"
FM = "fm"
PM = "pm"

DDR_SEGMENTS = ("inputs", "outputs", "parameters", "instructions", "swap")


def dep_mask(ops):
    m = 0
    for op in ops:
        m |= 1 << _MASK_BIT[op]
    return m


def mask_deps(mask):
    if not 0 <= mask < 16:
        raise ValueError(f"dependency mask out of range: {mask}")
    return frozenset(op for op, bit in _MASK_BIT.items() if mask & (1 << bit))


@dataclass(frozen=True)
class MachineConfig:
    """All hardware parameters; defaults are desk-scale but structurally
    faithful (three 8-bank FM memories, preferred conv height 8)."""

    fm_memories: int = 3
    fm_banks_per_memory: int = 8
    fm_bank_rows: int = 64
    fm_row_bytes: int = 2048
    pm_bytes: int = 131072
    # max width*channels bytes of a single row-vector operation; sized so a
    # 112x64 output row (7168 B) needs no width split but 224x64 does
    gamma: int = 8192
    h_c: int = 8
    h_p: int = 2
    h_e: int = 2
    ddr_bytes_per_cycle: int = 16
    conv_macs_per_cycle: int = 1024
    misc_elems_per_cycle: int = 64
    issue_overhead: int = 4
    clock_mhz: int = 300
    ddr_capacity: int = 0  # 0 = uncapped

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("ddr_capacity", "issue_overhead"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.h_c < self.h_p:
            raise ValueError("h_c must be >= h_p")

    @property
    def fm_bytes(self):
        """Capacity of one FM memory."""
        return self.fm_banks_per_memory * self.fm_bank_rows * self.fm_row_bytes

    def round_to_bank_row(self, nbytes):
        return -(-nbytes // self.fm_row_bytes) * self.fm_row_bytes

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({f.name: getattr(self, f.name) for f in fields(self)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class Addr:
    space: str  # ddr | fm | pm
    off: int
    mem: int = 0  # fm memory index; 0 for ddr/pm

    def __post_init__(self):
        if self.space not in (DDR, FM, PM):
            raise ValueError(f"bad address space {self.space}")

    def text(self):
        if self.space == FM:
            return f"fm{self.mem}:{self.off}"
        return f"{self.space}:{self.off}"

    @classmethod
    def parse(cls, tok):
        space, _, off = tok.partition(":")
        if space.startswith("fm") and len(space) > 2:
            return cls(FM, int(off), int(space[2:]))
        if space in (DDR, PM):
            return cls(space, int(off))
        raise ValueError(f"bad address token {tok}")


# sub-op -> ordered field names serialized after the dependency masks
_ASM_FIELDS = {
    (LOAD, "act"): ("src", "dst", "rows", "blocks", "block_bytes",
                    "ddr_row_stride", "ddr_blk_stride"),
    (LOAD, "weight"): ("src", "dst", "rows", "blocks", "block_bytes",
                       "ddr_row_stride", "ddr_blk_stride"),
    (SAVE, "act"): ("src", "dst", "rows", "blocks", "block_bytes",
                    "ddr_row_stride", "ddr_blk_stride"),
    (CONV, "conv"): ("src", "dst", "wgt_off", "wgt_bytes", "in_rows", "in_w",
                     "c_in", "out_w", "c_out", "kh", "kw", "sh", "sw",
                     "pt", "pl", "pb", "pr", "shift"),
    (MISC, "maxpool"): ("src", "dst", "in_rows", "in_w", "c_in", "out_w",
                        "kh", "kw", "sh", "sw", "pt", "pl", "pb", "pr",
                        "shift"),
    (MISC, "eltwise"): ("src", "src2", "dst", "rows", "w", "c",
                        "ea", "eb", "eo"),
    (MISC, "move"): ("src", "dst", "rows", "blocks", "block_bytes",
                     "src_row_stride", "dst_row_stride",
                     "src_blk_stride", "dst_blk_stride"),
    (MISC, "upsample"): ("src", "dst", "in_rows", "w", "c", "factor",
                         "out_rows"),
    (LOAD, "noop"): (),
    (SAVE, "noop"): (),
    (CONV, "noop"): (),
    (MISC, "noop"): (),
}

_ADDR_FIELDS = {"src", "src2", "dst"}


@dataclass
class Instruction:
    op: str
    sub: str
    dpon: frozenset = frozenset()
    dpby: frozenset = frozenset()
    src: Addr = None
    src2: Addr = None
    dst: Addr = None
    # transfer / move geometry
    rows: int = None
    blocks: int = None
    block_bytes: int = None
    ddr_row_stride: int = None
    ddr_blk_stride: int = None
    src_row_stride: int = None
    dst_row_stride: int = None
    src_blk_stride: int = None
    dst_blk_stride: int = None
    # windowed-op geometry
    in_rows: int = None
    in_w: int = None
    c_in: int = None
    out_w: int = None
    c_out: int = None
    kh: int = None
    kw: int = None
    sh: int = None
    sw: int = None
    pt: int = None
    pl: int = None
    pb: int = None
    pr: int = None
    shift: int = None
    # eltwise
    w: int = None
    c: int = None
    ea: int = None
    eb: int = None
    eo: int = None
    # upsample
    factor: int = None
    out_rows: int = None
    # conv weights
    wgt_off: int = None
    wgt_bytes: int = None

    def __post_init__(self):
        if (self.op, self.sub) not in _ASM_FIELDS:
            raise ValueError(f"unknown instruction {self.op}/{self.sub}")

    @property
    def is_noop(self):
        return self.sub == "noop"

    def conv_out_rows(self):
        return (self.in_rows + self.pt + self.pb - self.kh) // self.sh + 1

    def misc_out_rows(self):
        if self.sub == "maxpool":
            return (self.in_rows + self.pt + self.pb - self.kh) // self.sh + 1
        if self.sub == "upsample":
            return self.out_rows
        if self.sub == "eltwise":
            return self.rows
        return self.rows

    def transfer_bytes(self):
        return self.rows * self.blocks * self.block_bytes

    # ---- byte footprint (for dependency derivation and hazard checks) ----

    def _ddr_ranges(self, base, exact):
        rs, bs = self.ddr_row_stride, self.ddr_blk_stride
        if exact and (self.blocks > 1 or rs != self.blocks * self.block_bytes):
            out = []
            for r in range(self.rows):
                for b in range(self.blocks):
                    o = base + r * rs + b * bs
                    out.append((DDR, 0, o, o + self.block_bytes))
            return out
        end = (base + (self.rows - 1) * rs + (self.blocks - 1) * bs
               + self.block_bytes)
        return [(DDR, 0, base, end)]

    def _move_ranges(self, addr, row_stride, blk_stride, exact):
        if exact and (self.blocks > 1 or row_stride != self.blocks * self.block_bytes):
            out = []
            for r in range(self.rows):
                for b in range(self.blocks):
                    o = addr.off + r * row_stride + b * blk_stride
                    out.append((addr.space, addr.mem, o, o + self.block_bytes))
            return out
        end = (addr.off + (self.rows - 1) * row_stride
               + (self.blocks - 1) * blk_stride + self.block_bytes)
        return [(addr.space, addr.mem, addr.off, end)]

    def reads(self, exact=False):
        """Byte ranges this instruction reads, as (space, mem, lo, hi)."""
        if self.is_noop:
            return []
        if self.op == LOAD:
            return self._ddr_ranges(self.src.off, exact)
        if self.op == SAVE:
            n = self.transfer_bytes()
            return [(FM, self.src.mem, self.src.off, self.src.off + n)]
        if self.op == CONV:
            n = self.in_rows * self.in_w * self.c_in
            return [(FM, self.src.mem, self.src.off, self.src.off + n),
                    (PM, 0, self.wgt_off, self.wgt_off + self.wgt_bytes)]
        if self.sub == "maxpool":
            n = self.in_rows * self.in_w * self.c_in
            return [(FM, self.src.mem, self.src.off, self.src.off + n)]
        if self.sub == "eltwise":
            n = self.rows * self.w * self.c
            return [(FM, self.src.mem, self.src.off, self.src.off + n),
                    (FM, self.src2.mem, self.src2.off, self.src2.off + n)]
        if self.sub == "move":
            return self._move_ranges(self.src, self.src_row_stride,
                                     self.src_blk_stride, exact)
        if self.sub == "upsample":
            n = self.in_rows * self.w * self.c
            return [(FM, self.src.mem, self.src.off, self.src.off + n)]
        raise AssertionError(self.sub)

    def writes(self, exact=False):
        """Byte ranges this instruction writes, as (space, mem, lo, hi)."""
        if self.is_noop:
            return []
        if self.op == LOAD:
            n = self.transfer_bytes()
            a = self.dst
            return [(a.space, a.mem, a.off, a.off + n)]
        if self.op == SAVE:
            return self._ddr_ranges(self.dst.off, exact)
        if self.op == CONV:
            n = self.conv_out_rows() * self.out_w * self.c_out
            return [(FM, self.dst.mem, self.dst.off, self.dst.off + n)]
        if self.sub == "maxpool":
            n = self.misc_out_rows() * self.out_w * self.c_in
            return [(FM, self.dst.mem, self.dst.off, self.dst.off + n)]
        if self.sub == "eltwise":
            n = self.rows * self.w * self.c
            return [(FM, self.dst.mem, self.dst.off, self.dst.off + n)]
        if self.sub == "move":
            return self._move_ranges(self.dst, self.dst_row_stride,
                                     self.dst_blk_stride, exact)
        if self.sub == "upsample":
            n = self.out_rows * ((self.w - 1) * self.factor + 1) * self.c
            return [(FM, self.dst.mem, self.dst.off, self.dst.off + n)]
        raise AssertionError(self.sub)

    def color(self):
        """Timeline color class."""
        if self.op == LOAD:
            return "load-weight" if self.sub == "weight" else "load-activation"
        if self.op == SAVE:
            return "save"
        if self.op == CONV:
            return "conv"
        return {"maxpool": "pool", "eltwise": "eltwise", "move": "eltwise",
                "upsample": "eltwise", "noop": "eltwise"}[self.sub]


@dataclass
class Program:
    instructions: list = field(default_factory=list)
    param_image: bytes = b""
    # tensor name -> dict(segment, off, bytes, shape, step_exp)
    tensors: dict = field(default_factory=dict)
    # segment name -> (base, size)
    segments: dict = field(default_factory=dict)

    def queue(self, op):
        return [i for i in self.instructions if i.op == op]

    def __eq__(self, other):
        return (isinstance(other, Program)
                and self.instructions == other.instructions
                and self.tensors == other.tensors
                and self.segments == other.segments)


def instruction_cost(ins, cfg):
    """Deterministic duration in cycles: linear in work + fixed overhead."""
    oh = cfg.issue_overhead
    if ins.is_noop:
        return oh
    if ins.op in (LOAD, SAVE):
        return math.ceil(ins.transfer_bytes() / cfg.ddr_bytes_per_cycle) + oh
    if ins.op == CONV:
        macs = (ins.conv_out_rows() * ins.out_w * ins.c_out
                * ins.kh * ins.kw * ins.c_in)
        return math.ceil(macs / cfg.conv_macs_per_cycle) + oh
    if ins.sub == "maxpool":
        elems = ins.misc_out_rows() * ins.out_w * ins.c_in
    elif ins.sub == "eltwise":
        elems = ins.rows * ins.w * ins.c
    elif ins.sub == "upsample":
        elems = ins.out_rows * ((ins.w - 1) * ins.factor + 1) * ins.c
    else:  # move
        elems = ins.transfer_bytes()
    return math.ceil(elems / cfg.misc_elems_per_cycle) + oh


def check_bounds(ins, cfg):
    for space, mem, lo, hi in ins.reads() + ins.writes():
        if lo < 0:
            raise OutOfBoundsError(f"negative offset in {ins.op}/{ins.sub}")
        if space == FM:
            if mem >= cfg.fm_memories or hi > cfg.fm_bytes:
                raise OutOfBoundsError(
                    f"fm{mem} range [{lo},{hi}) exceeds {cfg.fm_bytes}")
        elif space == PM and hi > cfg.pm_bytes:
            raise OutOfBoundsError(f"pm range [{lo},{hi}) exceeds {cfg.pm_bytes}")
        elif space == DDR and cfg.ddr_capacity and hi > cfg.ddr_capacity:
            raise OutOfBoundsError(f"ddr range [{lo},{hi}) exceeds cap")


# ---------------------------------------------------------------------------
# Assembly text
# ---------------------------------------------------------------------------

def emit_assembly(prog):
    """One instruction per line: OPTYPE <dpon> <dpby> <sub> <k=v...>.

    Program metadata (segment table, tensor map) is carried in structured
    comment lines so the text round-trips completely.
    """
    lines = ["# dpuc-asm v1"]
    for name in sorted(prog.segments):
        base, size = prog.segments[name]
        lines.append(f"# segment {name} {base} {size}")
    for name in sorted(prog.tensors):
        t = prog.tensors[name]
        shape = "x".join(str(d) for d in t["shape"])
        lines.append(f"# tensor {name} {t['segment']} {t['off']} "
                     f"{t['bytes']} {shape} {t['step_exp']}")
    for ins in prog.instructions:
        toks = [ins.op, f"0b{dep_mask(ins.dpon):04b}",
                f"0b{dep_mask(ins.dpby):04b}", ins.sub]
        for name in _ASM_FIELDS[(ins.op, ins.sub)]:
            v = getattr(ins, name)
            toks.append(f"{name}={v.text() if name in _ADDR_FIELDS else v}")
        lines.append(" ".join(toks))
    return "\n".join(lines) + "\n" if lines else ""


def parse_assembly(text):
    prog = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            toks = line[1:].split()
            if toks[:1] == ["segment"]:
                prog.segments[toks[1]] = (int(toks[2]), int(toks[3]))
            elif toks[:1] == ["tensor"]:
                prog.tensors[toks[1]] = {
                    "segment": toks[2], "off": int(toks[3]),
                    "bytes": int(toks[4]),
                    "shape": tuple(int(d) for d in toks[5].split("x")),
                    "step_exp": int(toks[6]),
                }
            continue
        toks = line.split()
        if len(toks) < 4:
            raise AsmError(lineno, f"too few tokens: {line!r}")
        op, dpon_t, dpby_t, sub = toks[:4]
        if op not in OP_TYPES:
            raise AsmError(lineno, f"unknown op type {op!r}")
        if (op, sub) not in _ASM_FIELDS:
            raise AsmError(lineno, f"unknown sub-op {sub!r} for {op}")
        try:
            kw = {"op": op, "sub": sub,
                  "dpon": mask_deps(int(dpon_t, 2)),
                  "dpby": mask_deps(int(dpby_t, 2))}
        except ValueError as e:
            raise AsmError(lineno, str(e)) from None
        want = _ASM_FIELDS[(op, sub)]
        got = toks[4:]
        if len(got) != len(want):
            raise AsmError(lineno, f"expected {len(want)} fields, got {len(got)}")
        for name, tok in zip(want, got):
            key, _, val = tok.partition("=")
            if key != name:
                raise AsmError(lineno, f"expected field {name}, got {key}")
            try:
                kw[name] = Addr.parse(val) if name in _ADDR_FIELDS else int(val)
            except ValueError as e:
                raise AsmError(lineno, str(e)) from None
        prog.instructions.append(Instruction(**kw))
    return prog
