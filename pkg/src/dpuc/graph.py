"""Computation DAG: parsing, validation, quantizer/parameter folding,
super-layer fusion selection, and topological scheduling.

Tensors are (h, w, c) with the channel innermost in memory.  Quantizer
nodes ("fix") and parameter constants ("const") are explicit after parsing
and are assimilated into their consuming compute nodes by
fold_constants_and_quantizers, mirroring how a framework front end hands
the graph over.
"""

import base64
import heapq
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import quant
from .errors import CycleError, FoldError, ParseError, ShapeError

COMPUTE_OPS = ("conv", "maxpool", "eltwise-add", "upsample", "deconv",
               "identity", "concat")
ALL_OPS = ("input", "fix", "const") + COMPUTE_OPS


@dataclass(frozen=True)
class QuantInfo:
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ShapeError(f"quant range empty: ({self.lo}, {self.hi})")
        if self.step <= 0:
            raise ShapeError(f"quant step must be positive: {self.step}")
        if (self.hi - self.lo) / self.step > 256 + 1e-9:
            raise ShapeError(
                f"range ({self.lo},{self.hi}) needs more than 256 steps "
                f"of {self.step}")

    @property
    def exp(self):
        return quant.step_exponent(self.step)


@dataclass(frozen=True)
class TensorRef:
    name: str
    shape: tuple  # (h, w, c)
    dtype: str = "int8"
    quant: QuantInfo = None
    storage: str = None  # ddr segment | fm | pm, assigned by allocation

    def __post_init__(self):
        if len(self.shape) != 3 or any(d < 1 for d in self.shape):
            raise ShapeError(f"tensor {self.name}: bad shape {self.shape}")

    @property
    def nbytes(self):
        h, w, c = self.shape
        return h * w * c


@dataclass(frozen=True)
class WeightSpec:
    """Folded parameters of a conv/deconv: weights (c_o, k_h, k_w, c_i) as
    int8, bias (c_o) as int32 at the accumulator scale."""
    weights: np.ndarray
    bias: np.ndarray
    wgt_quant: QuantInfo

    def __eq__(self, other):
        return (isinstance(other, WeightSpec)
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.bias, other.bias)
                and self.wgt_quant == other.wgt_quant)


@dataclass(frozen=True)
class Fused:
    """Consumer absorbed into a conv super-node."""
    kind: str  # maxpool | eltwise-add
    mid: TensorRef  # intermediate tensor, no longer a graph tensor
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    extra_input: str = None  # residual operand name for eltwise


@dataclass
class Node:
    id: str
    op: str
    inputs: list
    output: str
    attrs: dict = field(default_factory=dict)
    params: WeightSpec = None
    fused: Fused = None

    def __post_init__(self):
        if self.op not in ALL_OPS:
            raise ParseError(f"node {self.id}: unknown op {self.op!r}")


@dataclass(frozen=True)
class Schedule:
    order: tuple

    def __iter__(self):
        return iter(self.order)


class Graph:
    def __init__(self, tensors, nodes, inputs, outputs, param_data=None):
        self.tensors = dict(tensors)   # name -> TensorRef
        self.nodes = {n.id: n for n in nodes}
        self.inputs = list(inputs)     # tensor names
        self.outputs = list(outputs)   # tensor names
        # parameter pseudo-tensor payloads: name -> np.ndarray
        self.param_data = dict(param_data or {})
        self._index()

    def _index(self):
        self.producer = {}
        self.consumers = {}
        for n in self.nodes.values():
            if n.output in self.producer:
                raise ParseError(f"tensor {n.output} written twice")
            self.producer[n.output] = n.id
            for t in n.inputs:
                self.consumers.setdefault(t, []).append(n.id)

    def node_list(self):
        return list(self.nodes.values())

    def tensor(self, name):
        if name in self.tensors:
            return self.tensors[name]
        raise ShapeError(f"unknown tensor {name}")

    def compute_nodes(self):
        return [n for n in self.nodes.values() if n.op in COMPUTE_OPS]

    def successors(self, node_id):
        out = self.nodes[node_id].output
        return sorted(self.consumers.get(out, []))

    def predecessors(self, node_id):
        preds = []
        for t in self.nodes[node_id].inputs:
            if t in self.producer:
                preds.append(self.producer[t])
        return preds


# ---------------------------------------------------------------------------
# Shape inference per op
# ---------------------------------------------------------------------------

def conv_out_shape(in_shape, c_out, kernel, stride, padding):
    h, w, _ = in_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kernel} larger than padded input {in_shape}")
    return (oh, ow, c_out)


def deconv_out_shape(in_shape, c_out, kernel, upsample, padding):
    # deconv = zero-insertion upsample (factor s) + pad p + conv k stride 1
    h, w, _ = in_shape
    k = kernel[0]
    s = upsample
    p = padding
    uh, uw = (h - 1) * s + 1, (w - 1) * s + 1
    return conv_out_shape((uh, uw, in_shape[2]), c_out, (k, k), (1, 1), (p, p))


def upsample_out_shape(in_shape, factor):
    h, w, c = in_shape
    return ((h - 1) * factor + 1, (w - 1) * factor + 1, c)


def infer_out_shape(node, in_shapes):
    op = node.op
    a = node.attrs
    if op in ("input", "const"):
        return None
    if op in ("fix", "identity"):
        return in_shapes[0]
    if op == "conv":
        return conv_out_shape(in_shapes[0], a["c_out"], tuple(a["kernel"]),
                              tuple(a.get("stride", (1, 1))),
                              tuple(a.get("padding", (0, 0))))
    if op == "deconv":
        return deconv_out_shape(in_shapes[0], a["c_out"], tuple(a["kernel"]),
                                a.get("upsample", 2), a.get("padding", 0))
    if op == "maxpool":
        h, w, c = conv_out_shape(in_shapes[0], in_shapes[0][2],
                                 tuple(a["kernel"]),
                                 tuple(a.get("stride", (1, 1))),
                                 tuple(a.get("padding", (0, 0))))
        return (h, w, c)
    if op == "eltwise-add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"eltwise operands differ: {in_shapes}")
        return in_shapes[0]
    if op == "upsample":
        return upsample_out_shape(in_shapes[0], a.get("factor", 2))
    if op == "concat":
        h, w, _ = in_shapes[0]
        for s in in_shapes[1:]:
            if s[:2] != (h, w):
                raise ShapeError(f"concat spatial mismatch: {in_shapes}")
        return (h, w, sum(s[2] for s in in_shapes))
    raise AssertionError(op)


# ---------------------------------------------------------------------------
# parse / validate
# ---------------------------------------------------------------------------

def _decode(b64, dtype):
    return np.frombuffer(base64.b64decode(b64), dtype=dtype).copy()


def _quant_of(d):
    return QuantInfo(float(d["lo"]), float(d["hi"]), float(d["step"]))


def parse_graph(text):
    """Parse the JSON graph document into a validated Graph.

    Quantizer ("fix") and parameter ("const") nodes stay explicit; folding
    is a separate pass.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"not valid JSON: {e}") from None
    for key in ("tensors", "nodes", "inputs", "outputs"):
        if key not in doc:
            raise ParseError(f"missing top-level key {key!r}")

    tensors = {}
    for td in doc["tensors"]:
        q = _quant_of(td["quant"]) if td.get("quant") else None
        t = TensorRef(td["name"], tuple(td["shape"]), quant=q)
        if t.name in tensors:
            raise ParseError(f"duplicate tensor {t.name}")
        tensors[t.name] = t

    nodes = []
    param_data = {}
    seen = set()
    for nd in doc["nodes"]:
        if nd["id"] in seen:
            raise ParseError(f"duplicate node id {nd['id']}")
        seen.add(nd["id"])
        node = Node(nd["id"], nd["op"], list(nd.get("inputs", [])),
                    nd["output"], dict(nd.get("attrs", {})))
        if node.op == "const":
            p = nd.get("params", {})
            if "data" not in p or "dtype" not in p:
                raise ParseError(f"const {node.id} missing params.data/dtype")
            dt = {"int8": "<i1", "int32": "<i4"}.get(p["dtype"])
            if dt is None:
                raise ParseError(f"const {node.id}: bad dtype {p['dtype']}")
            arr = _decode(p["data"], dt)
            if "shape" in p:
                arr = arr.reshape(p["shape"])
            param_data[node.output] = arr
        elif "params" in nd:
            # pre-folded convenience form: weights/bias directly on the node
            p = nd["params"]
            w = _decode(p["weights"], "<i1").reshape(p["shape"])
            b = (_decode(p["bias"], "<i4") if "bias" in p
                 else np.zeros(p["shape"][0], np.int32))
            node.params = WeightSpec(w, b, _quant_of(p["quant"]))
        nodes.append(node)

    g = Graph(tensors, nodes, doc["inputs"], doc["outputs"], param_data)
    _validate(g)
    return g


def _validate(g):
    order = _topo_order(g, err=ParseError)

    for name in g.inputs + g.outputs:
        if name not in g.tensors:
            raise ParseError(f"interface tensor {name} not declared")
    for name in g.inputs:
        prod = g.producer.get(name)
        if prod is None or g.nodes[prod].op != "input":
            raise ParseError(f"graph input {name} must be produced by an "
                             f"input node")
        if g.nodes[prod].inputs:
            raise ParseError(f"input node {prod} must have no inputs")

    # shape consistency along the dataflow; parameter pseudo-tensors flow
    # through their quantizers untouched
    shapes = dict()
    params = set(g.param_data)
    for name, t in g.tensors.items():
        shapes[name] = t.shape
    for name, arr in g.param_data.items():
        shapes.setdefault(name, tuple(arr.shape))
    for nid in order:
        n = g.nodes[nid]
        for t in n.inputs:
            if t not in shapes:
                raise ParseError(f"node {n.id} reads undeclared tensor {t}")
        if n.op in ("input", "const"):
            continue
        if n.op == "fix" and n.inputs[0] in params:
            shapes[n.output] = shapes[n.inputs[0]]
            params.add(n.output)
            continue
        act_shapes = [shapes[t] for t in n.inputs if t not in params]
        want = infer_out_shape(n, act_shapes)
        shapes.setdefault(n.output, want)
        if n.output in g.tensors and want is not None:
            got = g.tensors[n.output].shape
            if got != want:
                raise ShapeError(
                    f"node {n.id}: declared output {got}, computed {want}")

    # every node connected to an input and an output
    fwd = _reachable(g, [g.producer.get(t) for t in g.inputs
                         if t in g.producer]
                     + [n.id for n in g.nodes.values() if n.op in
                        ("input", "const")],
                     g.successors)
    bwd = _reachable(g, [g.producer[t] for t in g.outputs
                         if t in g.producer], g.predecessors)
    for nid in g.nodes:
        if nid not in fwd or nid not in bwd:
            raise ParseError(f"node {nid} not on an input-to-output path")


def _reachable(g, seeds, step):
    seen = set()
    stack = [s for s in seeds if s is not None]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(step(nid))
    return seen


def _topo_order(g, err=CycleError):
    indeg = {nid: 0 for nid in g.nodes}
    for nid in g.nodes:
        for _ in g.predecessors(nid):
            indeg[nid] += 1
    ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in g.successors(nid):
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(g.nodes):
        raise err("graph has a cycle")
    return order


# ---------------------------------------------------------------------------
# folding
# ---------------------------------------------------------------------------

def fold_constants_and_quantizers(g):
    """Assimilate fix and const nodes into their consuming compute nodes.

    After this pass only input and compute nodes remain; conv/deconv nodes
    carry a WeightSpec and every activation tensor has quantization info.
    """
    tensors = dict(g.tensors)
    nodes = {nid: replace_node(n) for nid, n in g.nodes.items()}
    param_data = dict(g.param_data)
    param_quant = {}
    inputs = list(g.inputs)

    # fix on a parameter pseudo-tensor attaches quant to the payload;
    # fix on an activation retargets its producer's output tensor
    for n in list(nodes.values()):
        if n.op != "fix":
            continue
        src = n.inputs[0]
        q = QuantInfo(n.attrs["lo"], n.attrs["hi"], n.attrs["step"])
        if src in param_data:
            param_data[n.output] = param_data[src]
            param_quant[n.output] = q
            del nodes[n.id]
            continue
        if src not in g.producer:
            raise FoldError(f"fix {n.id} reads unproduced tensor {src}")
        others = [c for c in g.consumers.get(src, []) if c != n.id]
        if others:
            raise FoldError(
                f"fix {n.id}: tensor {src} also read by {others}; cannot "
                f"retarget its producer")
        declared = tensors[src].quant if src in tensors else None
        if declared is not None and declared != q:
            raise FoldError(
                f"fix {n.id}: tensor {src} already quantized differently")
        if n.output in tensors and tensors[n.output].quant is None:
            tensors[n.output] = replace(tensors[n.output], quant=q)
        prod = nodes[g.producer[src]]
        prod.output = n.output
        if src in inputs:
            inputs[inputs.index(src)] = n.output
        tensors.pop(src, None)
        del nodes[n.id]

    # rebuild consumer view after retargeting
    consumers = {}
    for n in nodes.values():
        for t in n.inputs:
            consumers.setdefault(t, []).append(n.id)

    for n in list(nodes.values()):
        if n.op == "const":
            for c in consumers.get(n.output, []):
                if nodes[c].op not in ("conv", "deconv"):
                    raise FoldError(
                        f"const {n.id} feeds non-conv node {c}")
            del nodes[n.id]

    for n in nodes.values():
        if n.op not in ("conv", "deconv") or n.params is not None:
            continue
        acts = [t for t in n.inputs if t not in param_data]
        prms = [t for t in n.inputs if t in param_data]
        if len(acts) != 1 or len(prms) not in (1, 2):
            raise FoldError(f"node {n.id}: cannot split inputs {n.inputs} "
                            f"into one activation and weights/bias")
        wname = next((t for t in prms if param_data[t].dtype == np.int8), None)
        if wname is None:
            raise FoldError(f"node {n.id}: no int8 weight operand")
        if wname not in param_quant:
            raise FoldError(f"node {n.id}: weights {wname} have no quantizer")
        w = param_data[wname]
        if w.ndim != 4:
            raise FoldError(f"node {n.id}: weights must be 4-D, got {w.shape}")
        bname = next((t for t in prms if t != wname), None)
        b = (param_data[bname].astype(np.int32) if bname
             else np.zeros(w.shape[0], np.int32))
        n.params = WeightSpec(w, b, param_quant[wname])
        n.inputs = acts

    for n in nodes.values():
        for t in n.inputs:
            if t not in tensors:
                raise FoldError(f"node {n.id} still reads folded tensor {t}")
        if n.output in tensors and tensors[n.output].quant is None:
            raise FoldError(f"tensor {n.output} has no quantization info")

    return Graph(tensors, list(nodes.values()), inputs, g.outputs, {})


def replace_node(n):
    return Node(n.id, n.op, list(n.inputs), n.output, dict(n.attrs),
                n.params, n.fused)


# ---------------------------------------------------------------------------
# super-layer fusion selection
# ---------------------------------------------------------------------------

def fuse_superlayers(g, cfg=None):
    """Replace eligible conv -> maxpool pairs with fused super-nodes.

    Eligibility: the intermediate tensor has exactly one consumer and a
    valid production/consumption steady state exists (lowering.plan_fusion).
    conv -> eltwise pairs are planned but left separate: streaming the
    residual operand while the convolution runs would need a second
    concurrent reader on one FM memory, which the port model forbids.
    """
    from .lowering import OpGeometry, plan_fusion
    from .machine import MachineConfig

    cfg = cfg or MachineConfig()
    nodes = {nid: replace_node(n) for nid, n in g.nodes.items()}
    tensors = dict(g.tensors)

    for n in sorted(g.nodes.values(), key=lambda n: n.id):
        if n.op != "conv" or n.fused is not None:
            continue
        mid = n.output
        readers = g.consumers.get(mid, [])
        if len(readers) != 1 or mid in g.outputs:
            continue
        consumer = g.nodes[readers[0]]
        if consumer.op != "maxpool":
            continue
        geom = node_geometry(g, n)
        pool = node_geometry(g, consumer)
        plan = plan_fusion(geom, pool, cfg)
        if not plan.enabled:
            continue
        fused = nodes[n.id]
        fused.fused = Fused("maxpool", tensors[mid],
                            kernel=tuple(consumer.attrs["kernel"]),
                            stride=tuple(consumer.attrs.get("stride", (1, 1))),
                            padding=tuple(consumer.attrs.get("padding", (0, 0))))
        fused.output = consumer.output
        del nodes[consumer.id]
        del tensors[mid]

    return Graph(tensors, list(nodes.values()), g.inputs, g.outputs,
                 g.param_data)


def node_geometry(g, n):
    """Geometry summary handed to the lowering module."""
    from .lowering import OpGeometry
    in_shape = g.tensors[n.inputs[0]].shape if n.inputs else None
    out_shape = g.tensors[n.output].shape if n.output in g.tensors else None
    a = n.attrs
    return OpGeometry(
        op=n.op,
        in_shape=in_shape,
        out_shape=out_shape,
        kernel=tuple(a.get("kernel", (1, 1))),
        stride=tuple(a.get("stride", (1, 1))),
        padding=tuple(a.get("padding", (0, 0))),
    )


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

def topological_schedule(g):
    """Deterministic schedule: ready nodes taken in ascending id order."""
    return Schedule(tuple(_topo_order(g)))


def _peak_footprint(g, order):
    """Worst-case sum of live activation tensor sizes along the order."""
    pos = {nid: i for i, nid in enumerate(order)}
    last_read = {}
    for nid in order:
        for t in g.nodes[nid].inputs:
            if t in g.tensors:
                last_read[t] = max(last_read.get(t, -1), pos[nid])
    peak = 0
    for i, nid in enumerate(order):
        live = 0
        for t, ref in g.tensors.items():
            start = pos.get(g.producer.get(t), -1 if t in g.inputs else None)
            if start is None:
                continue
            end = last_read.get(t, start if start >= 0 else -1)
            if start <= i <= max(end, start):
                live += ref.nbytes
        peak = max(peak, live)
    return peak


def explore_schedules(g, budget):
    """Enumerate up to `budget` schedules, cheapest peak footprint first."""
    if budget <= 0:
        return []
    found = []

    indeg = {nid: len(g.predecessors(nid)) for nid in g.nodes}

    def rec(order, indeg):
        if len(found) >= budget:
            return
        if len(order) == len(g.nodes):
            found.append(tuple(order))
            return
        ready = sorted(nid for nid, d in indeg.items()
                       if d == 0 and nid not in order_set)
        for nid in ready:
            order.append(nid)
            order_set.add(nid)
            for s in g.successors(nid):
                indeg[s] -= 1
            rec(order, indeg)
            for s in g.successors(nid):
                indeg[s] += 1
            order_set.discard(nid)
            order.pop()
            if len(found) >= budget:
                return

    order_set = set()
    rec([], indeg)
    ranked = [(Schedule(o), _peak_footprint(g, o)) for o in found]
    ranked.sort(key=lambda se: (se[1], se[0].order))
    return ranked
