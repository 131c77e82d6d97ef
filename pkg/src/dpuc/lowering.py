"""Recursive lowering of scheduled nodes into hardware-sized tiles.

Split order is fixed: width first (so the gamma row-vector limit holds
independent of height), then height, then weights.  Each leaf is a single
elementary computation bound to an instruction template; templates use
symbolic stream positions until memory allocation assigns addresses.

Tiles re-read their full input window from DDR (the per-tile load stage),
so consecutive tiles of a strided kernel re-load the k - s overlapping
rows.  That keeps every tile self-contained and the per-class liveness at
the two-slice double-buffering bound.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError, UnsupportedError


def receptive_range(lo, hi, k, s, p, size):
    """Input range feeding output rows [lo, hi) of a windowed op.

    Returns (in_lo, in_hi, pad_lo, pad_hi), 0-based, clamped to the real
    input extent; pad_* count virtual zero rows outside it.
    """
    raw_lo = lo * s - p
    raw_hi = (hi - 1) * s + k - p
    in_lo = max(0, raw_lo)
    in_hi = min(size, raw_hi)
    return in_lo, in_hi, max(0, -raw_lo), max(0, raw_hi - size)


@dataclass(frozen=True)
class OpGeometry:
    op: str
    in_shape: tuple
    out_shape: tuple
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    factor: int = 1  # upsample factor (upsample/deconv)


@dataclass
class TileTree:
    kind: str            # w-split | h-split | slab-split | tile | leaf
    axis: str = None
    out_range: tuple = None  # index range on the parent's output axis
    in_range: tuple = None   # input rows/cols required, may overlap siblings
    children: list = field(default_factory=list)
    leaf: object = None

    def leaves(self):
        if self.leaf is not None:
            yield self.leaf
        for ch in self.children:
            yield from ch.leaves()

    def to_dict(self):
        d = {"kind": self.kind}
        if self.axis:
            d["axis"] = self.axis
        if self.out_range is not None:
            d["out_range"] = list(self.out_range)
        if self.in_range is not None:
            d["in_range"] = list(self.in_range)
        if self.leaf is not None:
            d["leaf"] = type(self.leaf).__name__
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d


# ---------------------------------------------------------------------------
# width splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WStrip:
    out_cols: tuple   # final-output column range [lo, hi)
    in_cols: tuple    # input column range feeding it
    pad_l: int
    pad_r: int


def _even_ranges(n, parts):
    base, rem = divmod(n, parts)
    out = []
    lo = 0
    for i in range(parts):
        hi = lo + base + (1 if i < rem else 0)
        out.append((lo, hi))
        lo = hi
    return out


def w_split(geom, cfg, min_parts=1):
    """Split along width until every row vector fits gamma.

    Both the output row vector (w_o * c_o) and the input row vector each
    child must read are bounded; children's input ranges overlap by
    k_w - s_w columns when the kernel is wider than the stride.
    """
    h_i, w_i, c_i = geom.in_shape
    h_o, w_o, c_o = geom.out_shape
    kw, sw, pw = geom.kernel[1], geom.stride[1], geom.padding[1]

    if c_o > cfg.gamma or c_i > cfg.gamma:
        raise InfeasibleError(
            f"single output column ({c_o} B) or input column ({c_i} B) "
            f"exceeds gamma {cfg.gamma}")

    parts = max(min_parts, math.ceil(w_o * c_o / cfg.gamma))
    while True:
        if parts > w_o:
            raise InfeasibleError(f"cannot split {w_o} output columns into "
                                  f"{parts} gamma-feasible strips")
        strips = []
        ok = True
        for lo, hi in _even_ranges(w_o, parts):
            in_lo, in_hi, pl, pr = receptive_range(lo, hi, kw, sw, pw, w_i)
            if ((hi - lo) * c_o > cfg.gamma
                    or (in_hi - in_lo) * c_i > cfg.gamma):
                ok = False
                break
            strips.append(WStrip((lo, hi), (in_lo, in_hi), pl, pr))
        if ok:
            break
        parts += 1

    root = TileTree("w-split", axis="w", out_range=(0, w_o),
                    in_range=(0, w_i))
    for s in strips:
        root.children.append(TileTree("leaf", axis="w", out_range=s.out_cols,
                                      in_range=s.in_cols, leaf=s))
    return root


def w_strips(geom, cfg, min_parts=1):
    return [t.leaf for t in w_split(geom, cfg, min_parts).children]


# ---------------------------------------------------------------------------
# height splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HBand:
    out_rows: tuple
    in_rows: tuple
    pad_t: int
    pad_b: int


def h_split(geom, cfg, preferred_h=None):
    """Split along height into output bands of at most preferred_h rows.

    The per-tile input footprint is (h - 1) * s_h + k_h rows; if the
    double-buffered footprint cannot fit one FM memory the height is
    reduced toward 1 before giving up (the caller then splits deeper along
    the width, which shrinks the per-row byte cost).
    """
    h_i, w_i, c_i = geom.in_shape
    h_o, w_o, c_o = geom.out_shape
    kh, sh, ph = geom.kernel[0], geom.stride[0], geom.padding[0]
    preferred_h = preferred_h or cfg.h_c

    h = min(preferred_h, h_o)
    while h >= 1:
        win_rows = (h - 1) * sh + kh
        in_bytes = cfg.round_to_bank_row(win_rows * w_i * c_i)
        out_bytes = cfg.round_to_bank_row(h * w_o * c_o)
        if 2 * in_bytes <= cfg.fm_bytes and 2 * out_bytes <= cfg.fm_bytes:
            break
        h -= 1
    else:
        raise InfeasibleError(
            f"input window of {kh} rows x {w_i * c_i} B does not fit FM "
            f"even at height 1")

    root = TileTree("h-split", axis="h", out_range=(0, h_o),
                    in_range=(0, h_i))
    for lo in range(0, h_o, h):
        hi = min(h_o, lo + h)
        in_lo, in_hi, pt, pb = receptive_range(lo, hi, kh, sh, ph, h_i)
        band = HBand((lo, hi), (in_lo, in_hi), pt, pb)
        root.children.append(TileTree("leaf", axis="h", out_range=(lo, hi),
                                      in_range=(in_lo, in_hi), leaf=band))
    return root


def h_bands(geom, cfg, preferred_h=None):
    return [t.leaf for t in h_split(geom, cfg, preferred_h).children]


# ---------------------------------------------------------------------------
# fusion planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionPlan:
    """Steady-state rate match between a conv producer and its consumer.

    h_conv: producer tile height (intermediate rows per conv tile)
    h_p: consumer tile height (intermediate rows advanced per consumer
         instruction); ratio k satisfies k * h_p == h_conv exactly
    out_per_instr: consumer output rows per instruction
    t_h: intermediate window rows one consumer instruction reads,
         (out_per_instr - 1) * stride + kernel
    carry: t_h - h_p, rows re-read from the previous consumer window
    """
    enabled: bool
    k: int = 0
    h_conv: int = 0
    h_p: int = 0
    out_per_instr: int = 0
    t_h: int = 0
    carry: int = 0
    reason: str = ""


def plan_fusion(conv_geom, consumer_geom, cfg, max_h=None):
    """Choose the largest conv tile height H_c' <= H_c with an integer
    consumer ratio whose intermediate footprint fits FM.

    Consumers whose kernel exceeds their stride would carry rows between
    consumer tiles, forcing reshaped (less efficient) tiles, so fusion is
    turned off for them; the rate math is still reported.
    """
    if conv_geom.op != "conv":
        return FusionPlan(False, reason="producer is not a convolution")
    kind = consumer_geom.op
    if kind == "maxpool":
        pk, ps = consumer_geom.kernel[0], consumer_geom.stride[0]
        pref = cfg.h_p
    elif kind == "eltwise-add":
        pk = ps = 1
        pref = cfg.h_e
    else:
        return FusionPlan(False, reason=f"unsupported consumer {kind}")

    out_per = max(1, pref // ps)
    advance = out_per * ps
    t_h = (out_per - 1) * ps + pk
    carry = t_h - advance

    mid_h = conv_geom.out_shape[0]
    h_cap = min(cfg.h_c, max_h) if max_h else cfg.h_c
    k_max = min(h_cap, mid_h) // advance
    if k_max < 1:
        return FusionPlan(False, h_p=advance, out_per_instr=out_per, t_h=t_h,
                          carry=max(0, carry),
                          reason="consumer advance exceeds conv tile height")

    h_i, w_i, c_i = conv_geom.in_shape
    _, w_m, c_m = conv_geom.out_shape
    ck, cs = conv_geom.kernel[0], conv_geom.stride[0]
    for k in range(k_max, 0, -1):
        h_conv = k * advance
        in_rows = (h_conv - 1) * cs + ck
        in_bytes = cfg.round_to_bank_row(in_rows * w_i * c_i)
        mid_bytes = cfg.round_to_bank_row((h_conv + max(0, carry)) * w_m * c_m)
        if 2 * in_bytes <= cfg.fm_bytes and 2 * mid_bytes <= cfg.fm_bytes:
            if carry > 0:
                return FusionPlan(False, k=k, h_conv=h_conv, h_p=advance,
                                  out_per_instr=out_per, t_h=t_h, carry=carry,
                                  reason="consumer kernel exceeds stride; "
                                         "tiles would carry rows")
            return FusionPlan(True, k=k, h_conv=h_conv, h_p=advance,
                              out_per_instr=out_per, t_h=t_h, carry=0)
    return FusionPlan(False, h_p=advance, out_per_instr=out_per, t_h=t_h,
                      carry=max(0, carry),
                      reason="no conv tile height fits the FM footprint")


# ---------------------------------------------------------------------------
# transpose convolution decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubKernel:
    phase: tuple        # (dy, dx) output phase in [0, s)^2
    taps: np.ndarray    # (c_o, th, tw, c_i) slice of the original kernel
    pad: tuple          # effective (top, left, bottom, right) over X
    crop: tuple         # leading input rows/cols skipped (top, left)
    out_rows: int
    out_cols: int

    def __eq__(self, other):
        return (isinstance(other, SubKernel) and self.phase == other.phase
                and np.array_equal(self.taps, other.taps)
                and self.pad == other.pad and self.crop == other.crop
                and self.out_rows == other.out_rows
                and self.out_cols == other.out_cols)


@dataclass(frozen=True)
class DeconvPlan:
    mode: str                 # series | upsample
    sub_kernels: tuple = ()
    reason: str = ""


def _phase_axis(k, s, p, out_n, in_n):
    """Per-phase tap positions and geometry along one axis."""
    phases = []
    for r in range(s):
        ds = [d for d in range(k) if (r + d - p) % s == 0]
        if not ds:
            continue
        es = [(r + d - p) // s for d in ds]
        e_min, e_max = es[0], es[-1]
        n_out = max(0, -(-(out_n - r) // s))  # ceil((out_n - r)/s)
        pad_lo = max(0, -e_min)
        crop = max(0, e_min)
        pad_hi = max(0, (n_out - 1) + e_max - (in_n - 1))
        phases.append((r, ds, pad_lo, pad_hi, crop, n_out))
    return phases


def decompose_deconv(weights, upsample, padding, in_shape, out_shape):
    """Replace upsample + conv with min(k, s)^2 dense sub-convolutions.

    Each output phase (oy % s, ox % s) collects exactly the kernel taps
    that land on non-zero positions of the zero-inserted input, so the tap
    sets partition the original kernel and no multiplication touches an
    inserted zero.  Phase outputs are interleaved back by a shuffle stage.
    """
    s = upsample
    c_o, k, kw_, c_i = weights.shape
    if k != kw_:
        raise UnsupportedError(f"non-square deconv kernel {k}x{kw_}")
    if s > 2:
        raise UnsupportedError(f"upsample {s}x{s} not supported; use the "
                               f"upsample+conv path")
    if s == 1:
        sub = SubKernel((0, 0), weights, (padding,) * 4, (0, 0),
                        out_shape[0], out_shape[1])
        return DeconvPlan("series", (sub,))
    if k < s:
        # some output phases would receive no taps at all (bias only)
        return DeconvPlan("upsample", (),
                          reason=f"kernel {k} smaller than upsample {s}")

    h_in, w_in, _ = in_shape
    h_out, w_out, _ = out_shape
    rows = _phase_axis(k, s, padding, h_out, h_in)
    cols = _phase_axis(k, s, padding, w_out, w_in)
    subs = []
    for ry, dys, pt, pb, crop_t, n_r in rows:
        for rx, dxs, pl, pr, crop_l, n_c in cols:
            taps = weights[:, dys][:, :, dxs]
            subs.append(SubKernel((ry, rx), taps, (pt, pl, pb, pr),
                                  (crop_t, crop_l), n_r, n_c))
    assert len(subs) == min(k, s) ** 2
    return DeconvPlan("series", tuple(subs))


def series_mult_count(plan, c_o, c_i):
    return sum(sk.out_rows * sk.out_cols * c_o
               * sk.taps.shape[1] * sk.taps.shape[2] * c_i
               for sk in plan.sub_kernels)


def upsample_conv_mult_count(out_shape, k, c_i):
    h, w, c_o = out_shape
    return h * w * c_o * k * k * c_i


# ---------------------------------------------------------------------------
# weight tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slab:
    c_lo: int
    c_hi: int
    wgt_bytes: int
    bias_bytes: int

    @property
    def nbytes(self):
        return self.wgt_bytes + self.bias_bytes


def weight_tiling(c_out, kh, kw, c_in, cfg):
    """Split conv weights into PM slabs along output channels.

    A single slab is used when weights + biases fit PM outright; otherwise
    slabs are capped at half of PM so the next slab's LOAD can overlap the
    running slab's convolutions (double buffering).
    """
    per_ch = kh * kw * c_in + 4  # int8 taps + int32 bias
    total = c_out * per_ch
    if total <= cfg.pm_bytes:
        return [Slab(0, c_out, c_out * (per_ch - 4), 4 * c_out)]
    half = cfg.pm_bytes // 2
    ch_per_slab = half // per_ch
    if ch_per_slab < 1:
        raise InfeasibleError(
            f"one output channel needs {per_ch} B, more than half of PM "
            f"({half} B)")
    slabs = []
    for lo in range(0, c_out, ch_per_slab):
        hi = min(c_out, lo + ch_per_slab)
        slabs.append(Slab(lo, hi, (hi - lo) * (per_ch - 4), 4 * (hi - lo)))
    return slabs


# ---------------------------------------------------------------------------
# instruction templates (symbolic stream positions)
# ---------------------------------------------------------------------------

@dataclass
class TLoad:
    tensor: str
    row: int
    col0: int
    ncols: int
    ch0: int
    nch: int
    stream: str
    win_row: int


@dataclass
class TLoadW:
    block0: int   # first PM block loaded
    nblocks: int
    slot: int     # PM double-buffer slot


@dataclass
class TConv:
    stream_in: str
    in_row0: int
    in_rows: int
    in_w: int
    c_in: int
    stream_out: str
    out_row0: int
    out_w: int
    c_out: int
    kh: int
    kw: int
    sh: int
    sw: int
    pt: int
    pl: int
    pb: int
    pr: int
    shift: int
    block: int = 0  # PM block holding taps + bias


@dataclass
class TPool:
    stream_in: str
    in_row0: int
    in_rows: int
    in_w: int
    c: int
    stream_out: str
    out_row0: int
    out_w: int
    kh: int
    kw: int
    sh: int
    sw: int
    pt: int
    pl: int
    pb: int
    pr: int
    shift: int


@dataclass
class TElt:
    stream_a: str
    a_row0: int
    stream_b: str
    b_row0: int
    stream_out: str
    out_row0: int
    rows: int
    w: int
    c: int
    ea: int
    eb: int
    eo: int


@dataclass
class TUpsample:
    stream_in: str
    in_row0: int
    in_rows: int
    w: int
    c: int
    factor: int
    stream_out: str
    out_row0: int
    out_rows: int


@dataclass
class TShuffle:
    stream_in: str
    src_row0: int
    n_rows: int
    blocks: int
    block_bytes: int
    src_row_bytes: int
    stream_out: str
    dst_row0: int
    dst_row_step: int
    dst_col_off: int
    dst_blk_step: int
    dst_row_bytes: int


@dataclass
class TSave:
    stream: str
    win_row0: int
    rows: int
    tensor: str
    out_row0: int
    col0: int
    ncols: int
    ch0: int
    nch: int


QUEUE_OF_TEMPLATE = {
    TLoad: "LOAD", TLoadW: "LOAD", TSave: "SAVE", TConv: "CONV",
    TPool: "MISC", TElt: "MISC", TUpsample: "MISC", TShuffle: "MISC",
}


@dataclass
class StreamInfo:
    name: str
    chain_pos: int        # 0 = load destination, 1/2 = compute outputs
    row_bytes: int
    window_rows: dict = field(default_factory=dict)  # tile index -> rows


@dataclass
class Tile:
    stages: list  # ordered (queue, [templates]) groups
    label: str = ""


@dataclass
class LoweredNode:
    node_id: str
    tiles: list
    streams: dict
    tree: TileTree
    pm_blocks: list = field(default_factory=list)   # (wgt_bytes, bias_bytes)
    pm_payloads: list = field(default_factory=list)  # bytes per block
    plan: FusionPlan = None
    notes: dict = field(default_factory=dict)


@dataclass
class LowerContext:
    """Everything lower_node needs from the surrounding schedule."""
    tensors: dict                 # name -> TensorRef
    locations: dict = None        # name -> ddr | fm (default ddr)
    aliases: dict = None          # tensor -> (concat target, channel off)
    deconv_mode: str = "series"
    max_h: int = None             # retry ladder: cap on tile height
    w_min_parts: int = 1          # retry ladder: force deeper width split

    def loc(self, name):
        return (self.locations or {}).get(name, "ddr")


def _exp(tensor):
    return tensor.quant.exp


def _load_stage(tensor, rows, cols, stream, resident):
    if resident:
        return []
    lo, hi = rows
    clo, chi = cols
    nch = None
    return [TLoad(tensor.name, r, clo, chi - clo, 0, tensor.shape[2],
                  stream, r - lo) for r in range(lo, hi)]


def _save_stage(stream, local_rows, tensor, out_rows, cols, ch, resident):
    if resident:
        return []
    out = []
    clo, chi = cols
    ch0, ch1 = ch
    for i in range(out_rows[1] - out_rows[0]):
        out.append(TSave(stream, local_rows[0] + i, 1, tensor.name,
                         out_rows[0] + i, clo, chi - clo, ch0, ch1 - ch0))
    return out


def _mk_tile(stages, label=""):
    return Tile([(q, group) for q, group in stages if group], label)


def _tree_for_tiles(root, tiles):
    for t in tiles:
        tn = TileTree("tile", axis="h", out_range=None)
        for _, group in t.stages:
            for tmpl in group:
                tn.children.append(TileTree("leaf", leaf=tmpl))
        root.children.append(tn)
    return root


def _strip_chain(out_w, out_c, levels, cfg, min_parts):
    """Width strips back-propagated through a chain of windowed stages.

    levels: innermost-last list of (kw, sw, pw, in_w, c) from the final
    output toward the input; the final output byte width is levels[0]'s
    "output".  Returns per-strip lists of (lo, hi, pad_l, pad_r) per level,
    outermost (final output) first.
    """
    parts = max(min_parts, 1)
    while True:
        if parts > out_w:
            raise InfeasibleError(
                f"cannot width-split {out_w} columns into {parts} strips")
        strips = []
        for lo, hi in _even_ranges(out_w, parts):
            chain = [(lo, hi, 0, 0)]
            cur = (lo, hi)
            for kw, sw, pw, in_w, _c in levels:
                ilo, ihi, pl, pr = receptive_range(cur[0], cur[1], kw, sw,
                                                   pw, in_w)
                chain.append((ilo, ihi, pl, pr))
                cur = (ilo, ihi)
            strips.append(chain)
        # gamma feasibility at every level of every strip; level 0 is the
        # final output whose byte width is the caller's out_c
        cs = [out_c] + [l[4] for l in levels]
        ok = all((rhi - rlo) * c <= cfg.gamma
                 for chain in strips
                 for (rlo, rhi, _, _), c in zip(chain, cs))
        if ok:
            return strips
        parts += 1


def lower_node(node, ctx, cfg):
    """Recursive tiling of one scheduled node: width, height, then weights.

    Leaves carry LOAD/CONV/MISC/SAVE templates over symbolic stream
    positions; prologue and epilogue tiles differ from steady tiles in
    their clamped input ranges and explicit padding attributes.
    """
    op = node.op
    if op == "input":
        return LoweredNode(node.id, [], {}, TileTree("tile"))
    if op == "conv":
        return _lower_conv(node, ctx, cfg)
    if op == "maxpool":
        return _lower_pool(node, ctx, cfg)
    if op == "eltwise-add":
        return _lower_elt(node, ctx, cfg)
    if op == "upsample":
        return _lower_upsample(node, ctx, cfg)
    if op == "identity":
        return _lower_copy(node, ctx, cfg)
    if op == "deconv":
        return _lower_deconv(node, ctx, cfg)
    if op == "concat":
        return _lower_concat(node, ctx, cfg)
    raise UnsupportedError(f"cannot lower op {op}")


def _conv_shift(ctx, node, mid_quant):
    x = ctx.tensors[node.inputs[0]]
    return _exp(x) + node.params.wgt_quant.exp - mid_quant.exp


def _lower_conv(node, ctx, cfg):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    h_i, w_i, c_i = x.shape
    a = node.attrs
    ck, cs, cp = (tuple(a["kernel"]), tuple(a.get("stride", (1, 1))),
                  tuple(a.get("padding", (0, 0))))
    fused = node.fused
    mid = fused.mid if fused else y
    h_m, w_m, c_m = mid.shape
    conv_geom = OpGeometry("conv", x.shape, mid.shape, ck, cs, cp)
    conv_shift = _conv_shift(ctx, node, mid.quant)

    slabs = weight_tiling(c_m, ck[0], ck[1], c_i, cfg)
    pm_blocks = [(s.wgt_bytes, s.bias_bytes) for s in slabs]
    x_res = ctx.loc(x.name) == "fm"
    y_res = ctx.loc(y.name) == "fm"

    plan = None
    pool_shift = None
    if fused:
        pool_shift = _exp(mid) - _exp(y)
        levels = [(fused.kernel[1], fused.stride[1], fused.padding[1],
                   w_m, c_m),
                  (ck[1], cs[1], cp[1], w_i, c_i)]
        strips = _strip_chain(y.shape[1], y.shape[2], levels, cfg,
                              ctx.w_min_parts)
        # footprint feasibility over the widest strip, not the full tensor
        w_mid_max = max(ch[1][1] - ch[1][0] for ch in strips)
        w_in_max = max(ch[2][1] - ch[2][0] for ch in strips)
        strip_conv = OpGeometry("conv", (h_i, w_in_max, c_i),
                                (h_m, w_mid_max, c_m), ck, cs, cp)
        pool_geom = OpGeometry(
            "maxpool" if fused.kind == "maxpool" else "eltwise-add",
            strip_conv.out_shape, y.shape, fused.kernel, fused.stride,
            fused.padding)
        plan = plan_fusion(strip_conv, pool_geom, cfg, max_h=ctx.max_h)
        if not plan.enabled:
            raise InfeasibleError(f"node {node.id}: fusion plan not viable: "
                                  f"{plan.reason}")
        band_h = plan.k * plan.out_per_instr  # final rows per tile
    else:
        levels = [(ck[1], cs[1], cp[1], w_i, c_i)]
        strips = _strip_chain(w_m, c_m, levels, cfg, ctx.w_min_parts)
        w_mid_max = max(ch[0][1] - ch[0][0] for ch in strips)
        w_in_max = max(ch[1][1] - ch[1][0] for ch in strips)
        strip_conv = OpGeometry("conv", (h_i, w_in_max, c_i),
                                (h_m, w_mid_max, c_m), ck, cs, cp)
        pref = min(ctx.max_h or cfg.h_c, cfg.h_c)
        band_h = _feasible_conv_h(strip_conv, cfg, pref)

    tiles = []
    streams = {}
    tree = TileTree("w-split", axis="w")
    final_h = y.shape[0]
    for wi, chain in enumerate(strips):
        if fused:
            out_rng, mid_rng, in_rng = chain
        else:
            out_rng, in_rng = chain
            mid_rng = out_rng
        olo, ohi = out_rng[0], out_rng[1]
        mlo_s, mhi_s = mid_rng[0], mid_rng[1]
        ilo_s, ihi_s = in_rng[0], in_rng[1]
        s_in = f"in{wi}"
        streams[s_in] = StreamInfo(s_in, 0, (ihi_s - ilo_s) * c_i)
        strip_tree = TileTree("w-strip", axis="w", out_range=(olo, ohi),
                              in_range=(ilo_s, ihi_s))
        for si, slab in enumerate(slabs):
            c_slice = (slab.c_lo, slab.c_hi)
            nch = slab.c_hi - slab.c_lo
            s_mid = f"mid{wi}s{si}"
            streams[s_mid] = StreamInfo(s_mid, 1, (mhi_s - mlo_s) * nch)
            if fused:
                s_out = f"out{wi}s{si}"
                streams[s_out] = StreamInfo(s_out, 2, (ohi - olo) * nch)
            slab_tree = TileTree("slab-split", axis="c_out",
                                 out_range=c_slice)
            band_tiles = []
            for bi, blo in enumerate(range(0, final_h, band_h)):
                bhi = min(final_h, blo + band_h)
                if fused:
                    mlo, mhi, _, _ = receptive_range(
                        blo, bhi, fused.kernel[0], fused.stride[0],
                        fused.padding[0], h_m)
                else:
                    mlo, mhi = blo, bhi
                xlo, xhi, cpt, cpb = receptive_range(mlo, mhi, ck[0], cs[0],
                                                     cp[0], h_i)
                win = xhi - xlo
                loads = []
                nbands = -(-final_h // band_h)
                if si == 0 and bi == 0:
                    if wi == 0 or len(slabs) > 2:
                        loads.append(TLoadW(0, 1, 0))
                    if len(slabs) > 1 and (wi == 0 or len(slabs) > 2):
                        loads.append(TLoadW(1, 1, 1))
                # prefetch the next slab one band into this pass, so its
                # PM-slot reuse gate is already satisfied and the load
                # overlaps this slab's convolutions
                if (si >= 1 and si + 1 < len(slabs)
                        and bi == min(1, nbands - 1)):
                    loads.append(TLoadW(si + 1, 1, (si + 1) % 2))
                loads += _load_stage(x, (xlo, xhi), (ilo_s, ihi_s), s_in,
                                     x_res)
                conv = TConv(s_in, 0, win, ihi_s - ilo_s, c_i, s_mid, 0,
                             mhi_s - mlo_s, nch, ck[0], ck[1], cs[0], cs[1],
                             cpt, in_rng[2], cpb, in_rng[3],
                             conv_shift, block=si)
                stages = [("LOAD", loads), ("CONV", [conv])]
                if fused:
                    pools = []
                    for j in range(-(-(bhi - blo) // plan.out_per_instr)):
                        plo = blo + j * plan.out_per_instr
                        phi = min(bhi, plo + plan.out_per_instr)
                        glo, ghi, ipt, ipb = receptive_range(
                            plo, phi, fused.kernel[0], fused.stride[0],
                            fused.padding[0], h_m)
                        pools.append(TPool(
                            s_mid, glo - mlo, ghi - glo, mhi_s - mlo_s, nch,
                            s_out, plo - blo, ohi - olo,
                            fused.kernel[0], fused.kernel[1],
                            fused.stride[0], fused.stride[1],
                            ipt, mid_rng[2], ipb, mid_rng[3], pool_shift))
                    stages.append(("MISC", pools))
                    saves = _save_stage(s_out, (0, bhi - blo), y, (blo, bhi),
                                        (olo, ohi), c_slice, y_res)
                else:
                    saves = _save_stage(s_mid, (0, mhi - mlo), y, (mlo, mhi),
                                        (mlo_s, mhi_s), c_slice, y_res)
                stages.append(("SAVE", saves))
                ti = len(tiles) + len(band_tiles)
                band_tiles.append(_mk_tile(stages, f"w{wi}s{si}b{bi}"))
                streams[s_in].window_rows[ti] = win
                streams[s_mid].window_rows[ti] = mhi - mlo
                if fused:
                    streams[s_out].window_rows[ti] = bhi - blo
            tiles += band_tiles
            _tree_for_tiles(slab_tree, band_tiles)
            strip_tree.children.append(slab_tree)
        tree.children.append(strip_tree)

    ln = LoweredNode(node.id, tiles, streams, tree, pm_blocks, plan=plan)
    w_all, b_all = node.params.weights, node.params.bias
    ln.pm_payloads = [
        w_all[s.c_lo:s.c_hi].tobytes()
        + b_all[s.c_lo:s.c_hi].astype("<i4").tobytes()
        for s in slabs]
    ln.notes = {"kind": "conv", "fused": bool(fused), "slabs": len(slabs),
                "strips": len(strips), "band_h": band_h}
    return ln
def _feasible_conv_h(geom, cfg, preferred):
    bands = h_bands(geom, cfg, preferred)
    return bands[0].out_rows[1] - bands[0].out_rows[0]


def _lower_pool(node, ctx, cfg):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    h_i, w_i, c = x.shape
    h_o, w_o, _ = y.shape
    a = node.attrs
    pk, ps, pp = (tuple(a["kernel"]), tuple(a.get("stride", (1, 1))),
                  tuple(a.get("padding", (0, 0))))
    out_per = max(1, cfg.h_p // ps[0])
    shift = _exp(x) - _exp(y)
    strips = _strip_chain(w_o, c, [(pk[1], ps[1], pp[1], w_i, c)], cfg,
                          ctx.w_min_parts)
    per_tile = max(1, min(ctx.max_h or cfg.h_c, cfg.h_c) // (out_per * ps[0]))
    band_h = per_tile * out_per

    tiles, streams = [], {}
    tree = TileTree("w-split", axis="w")
    x_res, y_res = ctx.loc(x.name) == "fm", ctx.loc(y.name) == "fm"
    for wi, chain in enumerate(strips):
        (olo, ohi, _, _), (ilo, ihi, pl, pr) = chain
        s_in, s_out = f"in{wi}", f"mid{wi}"
        streams[s_in] = StreamInfo(s_in, 0, (ihi - ilo) * c)
        streams[s_out] = StreamInfo(s_out, 1, (ohi - olo) * c)
        strip_tree = TileTree("w-strip", axis="w", out_range=(olo, ohi),
                              in_range=(ilo, ihi))
        band_tiles = []
        for blo in range(0, h_o, band_h):
            bhi = min(h_o, blo + band_h)
            xlo, xhi, _, _ = receptive_range(blo, bhi, pk[0], ps[0], pp[0],
                                             h_i)
            loads = _load_stage(x, (xlo, xhi), (ilo, ihi), s_in, x_res)
            pools = []
            for j in range(-(-(bhi - blo) // out_per)):
                plo = blo + j * out_per
                phi = min(bhi, plo + out_per)
                glo, ghi, ipt, ipb = receptive_range(plo, phi, pk[0], ps[0],
                                                     pp[0], h_i)
                pools.append(TPool(s_in, glo - xlo, ghi - glo, ihi - ilo, c,
                                   s_out, plo - blo, ohi - olo,
                                   pk[0], pk[1], ps[0], ps[1],
                                   ipt, pl, ipb, pr, shift))
            saves = _save_stage(s_out, (0, bhi - blo), y, (blo, bhi),
                                (olo, ohi), (0, c), y_res)
            ti = len(tiles) + len(band_tiles)
            band_tiles.append(_mk_tile([("LOAD", loads), ("MISC", pools),
                                        ("SAVE", saves)], f"w{wi}b{blo}"))
            streams[s_in].window_rows[ti] = xhi - xlo
            streams[s_out].window_rows[ti] = bhi - blo
        tiles += band_tiles
        _tree_for_tiles(strip_tree, band_tiles)
        tree.children.append(strip_tree)
    ln = LoweredNode(node.id, tiles, streams, tree)
    ln.notes = {"kind": "maxpool", "strips": len(strips), "band_h": band_h}
    return ln


def _lower_elt(node, ctx, cfg):
    from . import quant as Q
    ta, tb = (ctx.tensors[n] for n in node.inputs)
    y = ctx.tensors[node.output]
    h, w, c = y.shape
    ea, eb, eo = Q.eltwise_exponents(_exp(ta), _exp(tb), _exp(y))
    strips = _strip_chain(w, c, [(1, 1, 0, w, c)], cfg, ctx.w_min_parts)
    band_h = max(cfg.h_e, min(ctx.max_h or cfg.h_c, cfg.h_c))

    tiles, streams = [], {}
    tree = TileTree("w-split", axis="w")
    res = {n: ctx.loc(n) == "fm" for n in (ta.name, tb.name, y.name)}
    for wi, chain in enumerate(strips):
        (olo, ohi, _, _), _ = chain
        sa, sb, so = f"ina{wi}", f"inb{wi}", f"mid{wi}"
        for s in (sa, sb):
            streams[s] = StreamInfo(s, 0, (ohi - olo) * c)
        streams[so] = StreamInfo(so, 1, (ohi - olo) * c)
        strip_tree = TileTree("w-strip", axis="w", out_range=(olo, ohi),
                              in_range=(olo, ohi))
        band_tiles = []
        for blo in range(0, h, band_h):
            bhi = min(h, blo + band_h)
            loads = (_load_stage(ta, (blo, bhi), (olo, ohi), sa, res[ta.name])
                     + _load_stage(tb, (blo, bhi), (olo, ohi), sb,
                                   res[tb.name]))
            elts = []
            for j in range(-(-(bhi - blo) // cfg.h_e)):
                rlo = blo + j * cfg.h_e
                rhi = min(bhi, rlo + cfg.h_e)
                elts.append(TElt(sa, rlo - blo, sb, rlo - blo, so, rlo - blo,
                                 rhi - rlo, ohi - olo, c, ea, eb, eo))
            saves = _save_stage(so, (0, bhi - blo), y, (blo, bhi),
                                (olo, ohi), (0, c), res[y.name])
            ti = len(tiles) + len(band_tiles)
            band_tiles.append(_mk_tile([("LOAD", loads), ("MISC", elts),
                                        ("SAVE", saves)], f"w{wi}b{blo}"))
            for s in (sa, sb, so):
                streams[s].window_rows[ti] = bhi - blo
        tiles += band_tiles
        _tree_for_tiles(strip_tree, band_tiles)
        tree.children.append(strip_tree)
    ln = LoweredNode(node.id, tiles, streams, tree)
    ln.notes = {"kind": "eltwise", "strips": len(strips), "band_h": band_h}
    return ln


def _lower_upsample(node, ctx, cfg):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    f = node.attrs.get("factor", 2)
    h_i, w_i, c = x.shape
    h_o, w_o, _ = y.shape
    if w_i * c > cfg.gamma or w_o * c > cfg.gamma:
        raise InfeasibleError("upsample rows exceed gamma; width splitting "
                              "of zero-inserted rows is not supported")
    band_in = max(1, min(ctx.max_h or cfg.h_c, cfg.h_c) // f)
    tiles = []
    s_in, s_up = "in0", "mid0"
    streams = {s_in: StreamInfo(s_in, 0, w_i * c),
               s_up: StreamInfo(s_up, 1, w_o * c)}
    x_res, y_res = ctx.loc(x.name) == "fm", ctx.loc(y.name) == "fm"
    tree = TileTree("h-split", axis="h")
    for blo in range(0, h_i, band_in):
        bhi = min(h_i, blo + band_in)
        out_lo = blo * f
        out_hi = min(h_o, bhi * f)
        loads = _load_stage(x, (blo, bhi), (0, w_i), s_in, x_res)
        ups = [TUpsample(s_in, 0, bhi - blo, w_i, c, f, s_up, 0,
                         out_hi - out_lo)]
        saves = _save_stage(s_up, (0, out_hi - out_lo), y, (out_lo, out_hi),
                            (0, w_o), (0, c), y_res)
        ti = len(tiles)
        tiles.append(_mk_tile([("LOAD", loads), ("MISC", ups),
                               ("SAVE", saves)], f"b{blo}"))
        streams[s_in].window_rows[ti] = bhi - blo
        streams[s_up].window_rows[ti] = out_hi - out_lo
    _tree_for_tiles(tree, tiles)
    ln = LoweredNode(node.id, tiles, streams, tree)
    ln.notes = {"kind": "upsample", "band_h": band_in}
    return ln


def _lower_copy(node, ctx, cfg, ch_off=0, out_c=None):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    return _copy_tiles(x, y, ctx, cfg, ch_off=ch_off, out_c=out_c,
                       node_id=node.id)


def _copy_tiles(x, y, ctx, cfg, ch_off, out_c, node_id, stream_tag=""):
    h, w, c = x.shape
    if w * c > cfg.gamma:
        raise InfeasibleError("copy rows exceed gamma")
    band_h = min(ctx.max_h or cfg.h_c, cfg.h_c)
    s_in = f"in{stream_tag}0"
    streams = {s_in: StreamInfo(s_in, 0, w * c)}
    tiles = []
    x_res, y_res = ctx.loc(x.name) == "fm", ctx.loc(y.name) == "fm"
    tree = TileTree("h-split", axis="h")
    for blo in range(0, h, band_h):
        bhi = min(h, blo + band_h)
        loads = _load_stage(x, (blo, bhi), (0, w), s_in, x_res)
        saves = _save_stage(s_in, (0, bhi - blo), y, (blo, bhi), (0, w),
                            (ch_off, ch_off + c), y_res)
        streams[s_in].window_rows[len(tiles)] = bhi - blo
        tiles.append(_mk_tile([("LOAD", loads), ("SAVE", saves)],
                              f"{stream_tag}b{blo}"))
    _tree_for_tiles(tree, tiles)
    ln = LoweredNode(node_id, tiles, streams, tree)
    ln.notes = {"kind": "copy", "band_h": band_h}
    return ln


def _lower_concat(node, ctx, cfg):
    """Copy-stream fallback for concat inputs that cannot be aliased.

    The driver prefers resolving concat by pointing each producer's saves
    at a channel slice of the concatenated tensor; inputs covered by such
    an alias lower to nothing here.
    """
    y = ctx.tensors[node.output]
    tiles, streams = [], {}
    tree = TileTree("concat", axis="c")
    ch = 0
    copied = 0
    for idx, name in enumerate(node.inputs):
        x = ctx.tensors[name]
        if name in (ctx.aliases or {}):
            ch += x.shape[2]
            continue
        part = _copy_tiles(x, y, ctx, cfg, ch_off=ch, out_c=y.shape[2],
                           node_id=node.id, stream_tag=f"p{idx}")
        base = len(tiles)
        for st in part.streams.values():
            st.window_rows = {base + t: r
                              for t, r in st.window_rows.items()}
        tiles += part.tiles
        streams.update(part.streams)
        tree.children.append(part.tree)
        ch += x.shape[2]
        copied += 1
    ln = LoweredNode(node.id, tiles, streams, tree)
    ln.notes = {"kind": "concat", "parts": len(node.inputs),
                "copied": copied}
    return ln


def _lower_deconv(node, ctx, cfg):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    s = node.attrs.get("upsample", 2)
    p = node.attrs.get("padding", 0)
    k = node.attrs["kernel"][0]
    if ctx.deconv_mode == "series":
        try:
            plan = decompose_deconv(node.params.weights, s, p, x.shape,
                                    y.shape)
            if plan.mode == "series":
                return _lower_deconv_series(node, ctx, cfg, plan)
        except UnsupportedError:
            pass
    return _lower_deconv_upsample(node, ctx, cfg)


def _lower_deconv_series(node, ctx, cfg, plan):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    h_i, w_i, c_i = x.shape
    h_o, w_o, c_o = y.shape
    s = node.attrs.get("upsample", 2)
    shift = _conv_shift(ctx, node, y.quant)
    if w_i * c_i > cfg.gamma or w_o * c_o > cfg.gamma:
        raise UnsupportedError("deconv series path does not width-split")

    subs = plan.sub_kernels
    if any(sk.crop[1] > 0 for sk in subs):
        # a column crop would need strided row reads the conv unit lacks
        raise UnsupportedError("deconv padding too small for the series "
                               "path; phase windows need a column crop")
    pm_blocks = [(sk.taps.size, 4 * c_o) for sk in subs]
    # phase-row tiling: each tile covers t in [tlo, thi) for every phase,
    # i.e. s * (thi - tlo) interleaved output rows
    n_t = max(sk.out_rows for sk in subs)
    band_t = max(1, min(ctx.max_h or cfg.h_c, cfg.h_c))
    s_in = "in0"
    s_out = "out0"
    streams = {s_in: StreamInfo(s_in, 0, w_i * c_i),
               s_out: StreamInfo(s_out, 2, w_o * c_o)}
    phase_streams = {}
    for idx, sk in enumerate(subs):
        ps = f"ph{idx}"
        phase_streams[idx] = ps
        streams[ps] = StreamInfo(ps, 1, sk.out_cols * c_o)
    x_res, y_res = ctx.loc(x.name) == "fm", ctx.loc(y.name) == "fm"
    tiles = []
    tree = TileTree("h-split", axis="h")
    for bi, tlo in enumerate(range(0, n_t, band_t)):
        thi = min(n_t, tlo + band_t)
        # union of the input rows every phase needs for this t-range
        xlo, xhi = h_i, 0
        phase_geo = []
        for idx, sk in enumerate(subs):
            thi_p = min(thi, sk.out_rows)
            if tlo >= sk.out_rows or sk.out_cols <= 0:
                # this phase has no outputs left (or none at all when the
                # output extent is narrower than the upsample factor)
                phase_geo.append(None)
                continue
            th = sk.taps.shape[1]
            p_eff = sk.pad[0] - sk.crop[0]
            plo, phi, ppt, ppb = receptive_range(tlo, thi_p, th, 1, p_eff,
                                                 h_i)
            phase_geo.append((plo, phi, ppt, ppb, thi_p))
            xlo, xhi = min(xlo, plo), max(xhi, phi)
        loads = []
        if bi == 0:
            loads.append(TLoadW(0, len(subs), 0))
        loads += _load_stage(x, (xlo, xhi), (0, w_i), s_in, x_res)
        convs, shuffles = [], []
        out_lo = tlo * s
        out_hi = min(h_o, thi * s)
        for idx, sk in enumerate(subs):
            if phase_geo[idx] is None:
                continue
            plo, phi, ppt, ppb, thi_p = phase_geo[idx]
            th, tw = sk.taps.shape[1], sk.taps.shape[2]
            p_eff_l = sk.pad[1] - sk.crop[1]
            _, _, ppl, ppr = receptive_range(0, sk.out_cols, tw, 1, p_eff_l,
                                             w_i)
            convs.append(TConv(s_in, plo - xlo, phi - plo, w_i, c_i,
                               phase_streams[idx], 0, sk.out_cols, c_o,
                               th, tw, 1, 1, ppt, ppl, ppb, ppr, shift,
                               block=idx))
            ry, rx = sk.phase
            shuffles.append(TShuffle(
                phase_streams[idx], 0, thi_p - tlo, sk.out_cols, c_o,
                sk.out_cols * c_o, s_out, ry + tlo * s - out_lo, s,
                rx * c_o, s * c_o, w_o * c_o))
        saves = _save_stage(s_out, (0, out_hi - out_lo), y, (out_lo, out_hi),
                            (0, w_o), (0, c_o), y_res)
        ti = len(tiles)
        tiles.append(_mk_tile([("LOAD", loads), ("CONV", convs),
                               ("MISC", shuffles), ("SAVE", saves)],
                              f"t{tlo}"))
        streams[s_in].window_rows[ti] = xhi - xlo
        for idx, sk in enumerate(subs):
            g = phase_geo[idx]
            streams[phase_streams[idx]].window_rows[ti] = (
                0 if g is None else g[4] - tlo)
        streams[s_out].window_rows[ti] = out_hi - out_lo
    _tree_for_tiles(tree, tiles)
    ln = LoweredNode(node.id, tiles, streams, tree, pm_blocks)
    bias = node.params.bias.astype("<i4").tobytes()
    ln.pm_payloads = [sk.taps.tobytes() + bias for sk in subs]
    ln.notes = {"kind": "deconv-series", "sub_kernels": len(subs),
                "mult_count": series_mult_count(plan, c_o, c_i)}
    return ln


def _lower_deconv_upsample(node, ctx, cfg):
    x = ctx.tensors[node.inputs[0]]
    y = ctx.tensors[node.output]
    h_i, w_i, c_i = x.shape
    h_o, w_o, c_o = y.shape
    s = node.attrs.get("upsample", 2)
    p = node.attrs.get("padding", 0)
    k = node.attrs["kernel"][0]
    w_u = (w_i - 1) * s + 1
    h_u = (h_i - 1) * s + 1
    shift = _conv_shift(ctx, node, y.quant)
    if max(w_i * c_i, w_u * c_i, w_o * c_o) > cfg.gamma:
        raise InfeasibleError("deconv upsample path rows exceed gamma")

    weights = node.params.weights
    pm_blocks = [(weights.size, 4 * c_o)]
    band_h = max(1, min(ctx.max_h or cfg.h_c, cfg.h_c))
    s_in, s_up, s_mid = "in0", "up0", "mid0"
    streams = {s_in: StreamInfo(s_in, 0, w_i * c_i),
               s_up: StreamInfo(s_up, 1, w_u * c_i),
               s_mid: StreamInfo(s_mid, 2, w_o * c_o)}
    x_res, y_res = ctx.loc(x.name) == "fm", ctx.loc(y.name) == "fm"
    tiles = []
    tree = TileTree("h-split", axis="h")
    for bi, blo in enumerate(range(0, h_o, band_h)):
        bhi = min(h_o, blo + band_h)
        ulo, uhi, cpt, cpb = receptive_range(blo, bhi, k, 1, p, h_u)
        ulo_al = (ulo // s) * s
        ilo = ulo_al // s
        ihi = (uhi - 1) // s + 1
        loads = ([TLoadW(0, 1, 0)] if bi == 0 else [])
        loads += _load_stage(x, (ilo, ihi), (0, w_i), s_in, x_res)
        ups = [TUpsample(s_in, 0, ihi - ilo, w_i, c_i, s, s_up, 0,
                         uhi - ulo_al)]
        conv = TConv(s_up, ulo - ulo_al, uhi - ulo, w_u, c_i, s_mid, 0,
                     w_o, c_o, k, k, 1, 1, cpt, p, cpb,
                     max(0, (w_o - 1) + k - p - w_u), shift, block=0)
        saves = _save_stage(s_mid, (0, bhi - blo), y, (blo, bhi), (0, w_o),
                            (0, c_o), y_res)
        ti = len(tiles)
        tiles.append(_mk_tile([("LOAD", loads), ("MISC", ups),
                               ("CONV", [conv]), ("SAVE", saves)],
                              f"b{blo}"))
        streams[s_in].window_rows[ti] = ihi - ilo
        streams[s_up].window_rows[ti] = uhi - ulo_al
        streams[s_mid].window_rows[ti] = bhi - blo
    _tree_for_tiles(tree, tiles)
    ln = LoweredNode(node.id, tiles, streams, tree, pm_blocks)
    ln.pm_payloads = [weights.tobytes()
                      + node.params.bias.astype("<i4").tobytes()]
    ln.notes = {"kind": "deconv-upsample",
                "mult_count": upsample_conv_mult_count(y.shape, k, c_i)}
    return ln
