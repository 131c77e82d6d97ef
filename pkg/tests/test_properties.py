"""Whole-stack properties over randomized operator geometries.

Each case compiles a small graph, replays it functionally against the
reference executor, and hazard-checks the trace; shapes sweep the padding,
stride, and width-split corners that unit tests pin individually.
"""

import base64
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpuc import graph as G
from dpuc import lowering as L
from dpuc import simulator as S
from dpuc.compiler import CompileOptions, compile_graph
from dpuc.machine import MachineConfig, SAVE


def b64(a):
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode()


def q(e):
    s = 2.0 ** e
    return {"lo": -128 * s, "hi": 127 * s, "step": s}


def conv_doc(h, w, ci, co, k, s, p, rng):
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    wgt = rng.integers(-24, 24, (co, k, k, ci)).astype(np.int8)
    bias = rng.integers(-500, 500, co).astype(np.int32)
    return {
        "tensors": [{"name": "x", "shape": [h, w, ci], "quant": q(-2)},
                    {"name": "y", "shape": [oh, ow, co], "quant": q(4)}],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "c", "op": "conv", "inputs": ["x"], "output": "y",
             "attrs": {"kernel": [k, k], "stride": [s, s],
                       "padding": [p, p], "c_out": co},
             "params": {"weights": b64(wgt), "bias": b64(bias),
                        "shape": [co, k, k, ci], "quant": q(-3)}}],
        "inputs": ["x"], "outputs": ["y"],
    }


def roundtrip(doc, cfg, options=None):
    g = G.parse_graph(json.dumps(doc))
    folded = G.fold_constants_and_quantizers(g)
    art = compile_graph(g, cfg, options)
    rng = np.random.default_rng(99)
    inputs = {n: rng.integers(-128, 128, folded.tensors[n].shape)
              .astype(np.int8) for n in folded.inputs}
    got = S.run_program(art.program, cfg, inputs)
    ref = S.reference_execute(folded, inputs)
    for name in ref:
        assert np.array_equal(got[name], ref[name]), name
    trace = S.run_timing(art.program, cfg)
    assert S.check_hazards(art.program, trace,
                           allocs=art.memmap["fm_allocs"], cfg=cfg) == []
    return art


@st.composite
def conv_geometry(draw):
    k = draw(st.integers(1, 5))
    s = draw(st.integers(1, 3))
    p = draw(st.integers(0, k - 1))
    h = draw(st.integers(max(1, k - 2 * p), 20))
    w = draw(st.integers(max(1, k - 2 * p), 16))
    ci = draw(st.integers(1, 6))
    co = draw(st.integers(1, 6))
    if (h + 2 * p - k) // s + 1 < 1 or (w + 2 * p - k) // s + 1 < 1:
        return None
    return h, w, ci, co, k, s, p


@given(conv_geometry(), st.booleans())
@settings(max_examples=25, deadline=None)
def test_random_conv_bit_exact(geom, tight_gamma):
    if geom is None:
        return
    h, w, ci, co, k, s, p = geom
    cfg = MachineConfig(gamma=max(ci, co, 96) if tight_gamma else 8192)
    rng = np.random.default_rng(hash(geom) % (2**32))
    roundtrip(conv_doc(h, w, ci, co, k, s, p, rng), cfg)


@given(st.integers(2, 5), st.integers(1, 4), st.integers(2, 9),
       st.integers(2, 8), st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=20, deadline=None)
def test_random_deconv_both_paths_bit_exact(k, p, h, w, ci, co):
    p = min(p, k - 1)
    if p < 1:
        return
    uh, uw = (h - 1) * 2 + 1, (w - 1) * 2 + 1
    oh, ow = uh + 2 * p - k + 1, uw + 2 * p - k + 1
    if oh < 1 or ow < 1:
        return
    rng = np.random.default_rng(k * 1000 + p * 100 + h * 10 + w)
    wgt = rng.integers(-24, 24, (co, k, k, ci)).astype(np.int8)
    bias = rng.integers(-500, 500, co).astype(np.int32)
    doc = {
        "tensors": [{"name": "x", "shape": [h, w, ci], "quant": q(-2)},
                    {"name": "y", "shape": [oh, ow, co], "quant": q(4)}],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "d", "op": "deconv", "inputs": ["x"], "output": "y",
             "attrs": {"kernel": [k, k], "upsample": 2, "padding": p,
                       "c_out": co},
             "params": {"weights": b64(wgt), "bias": b64(bias),
                        "shape": [co, k, k, ci], "quant": q(-3)}}],
        "inputs": ["x"], "outputs": ["y"],
    }
    cfg = MachineConfig()
    roundtrip(doc, cfg, CompileOptions(deconv_mode="series"))
    roundtrip(doc, cfg, CompileOptions(deconv_mode="upsample"))


@given(st.integers(3, 16), st.integers(3, 12), st.integers(1, 4),
       st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2))
@settings(max_examples=20, deadline=None)
def test_random_conv_pool_chain_bit_exact(h, w, ci, ck, pk, ps, pp):
    co = ci + 1
    pp = min(pp, pk - 1) if pk > 1 else 0
    mh, mw = h - ck + 1, w - ck + 1
    if mh < 1 or mw < 1:
        return
    oh = (mh + 2 * pp - pk) // ps + 1
    ow = (mw + 2 * pp - pk) // ps + 1
    if oh < 1 or ow < 1:
        return
    rng = np.random.default_rng(h * 100 + w * 10 + ck)
    wgt = rng.integers(-24, 24, (co, ck, ck, ci)).astype(np.int8)
    bias = rng.integers(-500, 500, co).astype(np.int32)
    doc = {
        "tensors": [{"name": "x", "shape": [h, w, ci], "quant": q(-2)},
                    {"name": "t", "shape": [mh, mw, co], "quant": q(4)},
                    {"name": "y", "shape": [oh, ow, co], "quant": q(4)}],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "c", "op": "conv", "inputs": ["x"], "output": "t",
             "attrs": {"kernel": [ck, ck], "c_out": co},
             "params": {"weights": b64(wgt), "bias": b64(bias),
                        "shape": [co, ck, ck, ci], "quant": q(-3)}},
            {"id": "pl", "op": "maxpool", "inputs": ["t"], "output": "y",
             "attrs": {"kernel": [pk, pk], "stride": [ps, ps],
                       "padding": [pp, pp]}}],
        "inputs": ["x"], "outputs": ["y"],
    }
    roundtrip(doc, MachineConfig())


# ---------------------------------------------------------------------------
# structural invariants of lowered programs
# ---------------------------------------------------------------------------

def test_output_coverage_exactly_once():
    # the saves of a compiled program write each output byte exactly once
    from dpuc import corpus
    cfg = MachineConfig()
    for name in corpus.corpus_names():
        art = compile_graph(corpus.corpus_graph(name), cfg)
        base, size = art.program.segments["outputs"]
        hits = np.zeros(size, np.int32)
        for ins in art.program.instructions:
            if ins.op != SAVE:
                continue
            for _sp, _m, lo, hi in ins.writes(exact=True):
                if base <= lo and hi <= base + size:
                    hits[lo - base:hi - base] += 1
        assert (hits == 1).all(), name


def touched_rows_oracle(out_lo, out_hi, k, s, p, size):
    rows = set()
    for o in range(out_lo, out_hi):
        for t in range(k):
            pos = o * s + t - p
            if 0 <= pos < size:
                rows.add(pos)
    return rows


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (5, 1, 0), (3, 2, 1),
                                   (1, 1, 0), (4, 2, 0)])
def test_leaf_receptive_field_soundness(k, s, p):
    # every input row a lowered conv tile loads is inside the true
    # receptive field of that tile's outputs, and the tiles' outputs
    # cover every output row exactly once (32x32x8 instance)
    h = w = 32
    ci, co = 8, 8
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1:
        return
    rng = np.random.default_rng(0)
    doc = conv_doc(h, w, ci, co, k, s, p, rng)
    g = G.fold_constants_and_quantizers(G.parse_graph(json.dumps(doc)))
    lowered = L.lower_node(g.nodes["c"], L.LowerContext(tensors=g.tensors),
                           MachineConfig())
    covered = np.zeros(oh, np.int32)
    for tile in lowered.tiles:
        loads = [t for _q, grp in tile.stages for t in grp
                 if isinstance(t, L.TLoad)]
        convs = [t for _q, grp in tile.stages for t in grp
                 if isinstance(t, L.TConv)]
        saves = [t for _q, grp in tile.stages for t in grp
                 if isinstance(t, L.TSave)]
        assert len(convs) == 1
        out_rows = {sv.out_row0 for sv in saves}
        covered[sorted(out_rows)] += 1
        field = touched_rows_oracle(min(out_rows), max(out_rows) + 1,
                                    k, s, p, h)
        loaded = {ld.row for ld in loads}
        # full-window tiles may include boundary rows the padded edge
        # outputs never touch, but never rows outside the window bound
        lo, hi, _, _ = L.receptive_range(min(out_rows), max(out_rows) + 1,
                                         k, s, p, h)
        assert field <= loaded
        assert loaded == set(range(lo, hi))
    assert (covered == 1).all()


def test_weight_tiled_fused_striped_combination():
    # four PM slabs, width strips, and pool fusion in one node
    ci, co, ck, cp, h, w = 16, 48, 3, 1, 20, 12
    mh, mw = h + 2 * cp - ck + 1, w + 2 * cp - ck + 1
    oh, ow = mh // 2, mw // 2
    pm = (co * (ck * ck * ci + 4)) // 2 + 64
    cfg = MachineConfig(pm_bytes=pm, gamma=max(ci * w, co * 4, 256))
    rng = np.random.default_rng(4)
    wgt = rng.integers(-24, 24, (co, ck, ck, ci)).astype(np.int8)
    bias = rng.integers(-500, 500, co).astype(np.int32)
    doc = {
        "tensors": [{"name": "x", "shape": [h, w, ci], "quant": q(-2)},
                    {"name": "t", "shape": [mh, mw, co], "quant": q(5)},
                    {"name": "y", "shape": [oh, ow, co], "quant": q(5)}],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "c", "op": "conv", "inputs": ["x"], "output": "t",
             "attrs": {"kernel": [ck, ck], "padding": [cp, cp],
                       "c_out": co},
             "params": {"weights": b64(wgt), "bias": b64(bias),
                        "shape": [co, ck, ck, ci], "quant": q(-3)}},
            {"id": "p", "op": "maxpool", "inputs": ["t"], "output": "y",
             "attrs": {"kernel": [2, 2], "stride": [2, 2]}}],
        "inputs": ["x"], "outputs": ["y"],
    }
    art = roundtrip(doc, cfg)
    shape = art.report["nodes"][0]
    assert shape["fused"] and shape["slabs"] >= 2 and shape["strips"] >= 2


def test_sequential_streams_hazard_free():
    # the --no-pipeline baseline is fully chained and must also be clean
    from dpuc import corpus
    cfg = MachineConfig()
    for name in corpus.corpus_names():
        art = compile_graph(corpus.corpus_graph(name), cfg,
                            CompileOptions(pipeline=False))
        trace = S.run_timing(art.program, cfg)
        assert S.check_hazards(art.program, trace,
                               allocs=art.memmap["fm_allocs"],
                               cfg=cfg) == [], name
