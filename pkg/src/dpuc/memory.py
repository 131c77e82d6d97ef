"""Memory assignment: segmented DDR layout, liveness, circular allocation.

DDR is flat and split by pointers into five segments (inputs, outputs,
parameters, instructions, swap).  FM and PM are circular: an allocation
may wrap from the last byte back to zero and is contiguous under the wrap.
The allocator is a bump pointer around the circle that frees space at an
allocation's last read, which makes double buffering fall out of the
stream order; a first-fit scan handles fragmented corners.
"""

from dataclasses import dataclass

from .errors import CapacityError, OutOfMemoryError, PortConflictError, \
    UseBeforeDefError
from .machine import DDR_SEGMENTS, FM, PM

# default roles: loads land in memory 0, the first compute stage writes
# memory 1, the second writes memory 2 (one read + one write port each)
FM_ROLE_BY_CHAIN_POS = (0, 1, 2)


@dataclass
class DdrLayout:
    segments: dict          # name -> (base, size)
    tensor_map: dict        # tensor -> (segment, offset)

    def address(self, tensor):
        seg, off = self.tensor_map[tensor]
        return self.segments[seg][0] + off

    @property
    def total(self):
        return max(b + s for b, s in self.segments.values())


def ddr_layout(g, program_size_estimate, cfg=None, aliases=None,
               param_bytes=None):
    """Pack tensors into the five DDR segments, deterministically.

    Graph inputs and outputs go to their own segments; every intermediate
    activation is spilled to the swap segment (feature-map residency
    across nodes is a lowering-level capability the driver does not use).
    Concat inputs resolved by aliasing get no space of their own.  The
    intermediates of fused super-nodes reserve swap space so the unfuse
    fallback never invalidates the layout.  Parameter bytes are summed
    here; the per-slab packing happens when the image is built.
    """
    aliases = aliases or {}
    tensor_map = {}
    sizes = dict.fromkeys(DDR_SEGMENTS, 0)

    def place(name, seg, nbytes):
        tensor_map[name] = (seg, sizes[seg])
        sizes[seg] += nbytes

    for name in g.inputs:
        place(name, "inputs", g.tensors[name].nbytes)
    for name in g.outputs:
        place(name, "outputs", g.tensors[name].nbytes)
    if param_bytes is not None:
        sizes["parameters"] = int(param_bytes)
    else:
        for n in sorted(g.nodes.values(), key=lambda n: n.id):
            if n.params is not None:
                sizes["parameters"] += (n.params.weights.size
                                        + 4 * n.params.bias.size)
    sizes["instructions"] += int(program_size_estimate)
    interm = [t for t in sorted(g.tensors)
              if t not in g.inputs and t not in g.outputs
              and t not in aliases]
    for n in sorted(g.nodes.values(), key=lambda n: n.id):
        if n.fused is not None:
            interm.append(n.fused.mid.name)
    for name in interm:
        t = g.tensors.get(name)
        if t is None:
            t = next(n.fused.mid for n in g.nodes.values()
                     if n.fused and n.fused.mid.name == name)
        place(name, "swap", t.nbytes)

    segments = {}
    base = 0
    for seg in DDR_SEGMENTS:
        segments[seg] = (base, sizes[seg])
        base += sizes[seg]
    if cfg is not None and cfg.ddr_capacity and base > cfg.ddr_capacity:
        raise CapacityError(f"DDR layout needs {base} B, cap is "
                            f"{cfg.ddr_capacity} B")
    return DdrLayout(segments, tensor_map)


# ---------------------------------------------------------------------------
# liveness
# ---------------------------------------------------------------------------

@dataclass
class LiveRange:
    key: tuple        # (space, mem, lo, hi) of the written slice
    first: int        # writer instruction index
    last: int         # last reader index (== first when never read)
    dead: bool = False

    def __post_init__(self):
        if self.first > self.last:
            raise ValueError("liveness range inverted")


def _overlap(a, b):
    return a[0] == b[0] and a[1] == b[1] and a[2] < b[3] and b[2] < a[3]


def _subtract(intervals, lo, hi):
    out = []
    for a, b in intervals:
        if a < hi and lo < b:
            if a < lo:
                out.append((a, lo))
            if hi < b:
                out.append((hi, b))
        else:
            out.append((a, b))
    return out


class _OpenSlice:
    __slots__ = ("space", "mem", "first", "owned")

    def __init__(self, rng, idx):
        self.space, self.mem = rng[0], rng[1]
        self.first = idx
        # byte intervals still owned by this write: [lo, hi, last_read]
        self.owned = [[rng[2], rng[3], idx]]


def compute_liveness(instructions, preloaded=(), exact=False):
    """First-write/last-read index per written byte range, byte-precise.

    Each write opens a slice; later writes take ownership of the bytes
    they cover, emitting the displaced parts with the last read seen on
    exactly those bytes.  Reads extend only the intervals that currently
    own the bytes.  Parts never read collapse to their write and are
    flagged dead.  preloaded ranges (DDR inputs and parameters) count as
    written before the stream starts.
    """
    open_slices = []
    done = []
    preload = [(s, m, lo, hi) for (s, m, lo, hi) in preloaded]

    def emit(sl, lo, hi, last):
        done.append(LiveRange((sl.space, sl.mem, lo, hi), sl.first, last,
                              dead=last == sl.first))

    for idx, ins in enumerate(instructions):
        for rng in ins.reads(exact=exact):
            space, mem, lo, hi = rng
            found = False
            for sl in open_slices:
                if sl.space != space or sl.mem != mem:
                    continue
                new_owned = []
                for a, b, last in sl.owned:
                    if a < hi and lo < b:
                        found = True
                        if a < lo:
                            new_owned.append([a, lo, last])
                        new_owned.append([max(a, lo), min(b, hi), idx])
                        if hi < b:
                            new_owned.append([hi, b, last])
                    else:
                        new_owned.append([a, b, last])
                sl.owned = new_owned
            if not found and not any(_overlap(p, rng) for p in preload):
                raise UseBeforeDefError(
                    f"instruction {idx} ({ins.op}/{ins.sub}) reads "
                    f"{rng} before any write")
        for rng in ins.writes(exact=exact):
            space, mem, lo, hi = rng
            keep = []
            for sl in open_slices:
                if sl.space == space and sl.mem == mem:
                    remaining = []
                    for a, b, last in sl.owned:
                        if a < hi and lo < b:
                            emit(sl, max(a, lo), min(b, hi), last)
                            if a < lo:
                                remaining.append([a, lo, last])
                            if hi < b:
                                remaining.append([hi, b, last])
                        else:
                            remaining.append([a, b, last])
                    sl.owned = remaining
                    if not sl.owned:
                        continue
                keep.append(sl)
            open_slices = keep
            open_slices.append(_OpenSlice(rng, idx))
    for sl in open_slices:
        for a, b, last in sl.owned:
            emit(sl, a, b, last)
    done.sort(key=lambda lr: (lr.first, lr.key))
    return done


# ---------------------------------------------------------------------------
# circular allocation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CircularAlloc:
    mem: int
    start: int
    length: int
    wrap: bool

    def intervals(self, capacity):
        if not self.wrap:
            return [(self.start, self.start + self.length)]
        head = capacity - self.start
        return [(self.start, capacity), (0, self.length - head)]


@dataclass(frozen=True)
class AllocRequest:
    key: object
    size: int
    first: int
    last: int


def _ranges_clash(a, b, capacity):
    for x0, x1 in a.intervals(capacity):
        for y0, y1 in b.intervals(capacity):
            if x0 < y1 and y0 < x1:
                return True
    return False


def allocate_circular(requests, capacity, policy="wrap", mem=0):
    """Place requests around a circular buffer without live overlap.

    policy "wrap" lets a placement run past the top and continue at zero;
    "contiguous" pads the cursor back to zero instead, so every placement
    is a single linear span (what the instruction encoding prefers).
    """
    cursor = 0
    live = []   # (last, CircularAlloc)
    out = {}
    for req in sorted(requests, key=lambda r: (r.first, str(r.key))):
        if req.size > capacity:
            raise OutOfMemoryError(
                f"request {req.key} of {req.size} B exceeds capacity "
                f"{capacity} B")
        live = [(last, al) for last, al in live if last >= req.first]

        def try_place(start):
            if policy == "contiguous" and start + req.size > capacity:
                start = 0
            wrap = start + req.size > capacity
            cand = CircularAlloc(mem, start % capacity, req.size, wrap)
            for _, al in live:
                if _ranges_clash(cand, al, capacity):
                    return None
            return cand

        placed = try_place(cursor)
        if placed is None:
            # first-fit: retry just past each live allocation's end
            ends = sorted({(al.start + al.length) % capacity
                           for _, al in live})
            for e in ends:
                placed = try_place(e)
                if placed is not None:
                    break
        if placed is None:
            raise OutOfMemoryError(
                f"no room for {req.key} ({req.size} B) among "
                f"{len(live)} live allocations in {capacity} B")
        out[req.key] = placed
        live.append((req.last, placed))
        cursor = (placed.start + placed.length) % capacity
    return out


# ---------------------------------------------------------------------------
# FM memory roles and the port rule
# ---------------------------------------------------------------------------

def check_ports(usage):
    """usage: iterable of (unit, reads: set of mem, writes: set of mem) for
    units that can execute concurrently.  Each FM memory has one read and
    one write port, so two different units must not read (or write) the
    same memory."""
    readers = {}
    writers = {}
    for unit, reads, writes in usage:
        for m in reads:
            if m in readers and readers[m] != unit:
                raise PortConflictError(
                    f"fm{m} read by both {readers[m]} and {unit}")
            readers[m] = unit
        for m in writes:
            if m in writers and writers[m] != unit:
                raise PortConflictError(
                    f"fm{m} written by both {writers[m]} and {unit}")
            writers[m] = unit


def assign_fm_memories(lowered, cfg):
    """Map each stream of a lowered node to an FM memory by chain
    position, then verify the one-read-one-write port rule over the units
    that run concurrently once the node is pipelined."""
    from .lowering import QUEUE_OF_TEMPLATE

    assignment = {}
    for name, st in lowered.streams.items():
        mem = FM_ROLE_BY_CHAIN_POS[st.chain_pos % len(FM_ROLE_BY_CHAIN_POS)]
        if mem >= cfg.fm_memories:
            raise PortConflictError(
                f"stream {name} needs memory {mem}, machine has "
                f"{cfg.fm_memories}")
        assignment[name] = mem

    usage = {}
    for tile in lowered.tiles:
        for queue, group in tile.stages:
            for t in group:
                unit = QUEUE_OF_TEMPLATE[type(t)]
                reads, writes = usage.setdefault(unit, (set(), set()))
                kind = type(t).__name__
                if kind == "TLoad":
                    writes.add(assignment[t.stream])
                elif kind == "TSave":
                    reads.add(assignment[t.stream])
                elif kind == "TElt":
                    reads.add(assignment[t.stream_a])
                    reads.add(assignment[t.stream_b])
                    writes.add(assignment[t.stream_out])
                elif kind in ("TConv", "TPool", "TUpsample", "TShuffle"):
                    reads.add(assignment[t.stream_in])
                    writes.add(assignment[t.stream_out])
    check_ports((u, r, w) for u, (r, w) in sorted(usage.items()))
    return assignment
