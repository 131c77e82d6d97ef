import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpuc import machine as M
from dpuc.errors import AsmError


def mkcfg(**kw):
    return M.MachineConfig(**kw)


def test_dep_mask_bit_order():
    assert M.dep_mask({M.LOAD}) == 0b1000
    assert M.dep_mask({M.SAVE}) == 0b0100
    assert M.dep_mask({M.CONV}) == 0b0010
    assert M.dep_mask({M.MISC}) == 0b0001
    assert M.dep_mask(M.OP_TYPES) == 0b1111


@given(st.sets(st.sampled_from(M.OP_TYPES)))
def test_mask_roundtrip(ops):
    assert M.mask_deps(M.dep_mask(ops)) == frozenset(ops)


def test_noop_cost_is_overhead_only():
    cfg = mkcfg(issue_overhead=4)
    ins = M.Instruction(op=M.MISC, sub="noop")
    assert M.instruction_cost(ins, cfg) == 4


def test_load_cost_division():
    cfg = mkcfg(ddr_bytes_per_cycle=16, issue_overhead=1)
    ins = M.Instruction(op=M.LOAD, sub="act",
                        src=M.Addr(M.DDR, 0), dst=M.Addr(M.FM, 0, 0),
                        rows=4, blocks=1, block_bytes=256,
                        ddr_row_stride=256, ddr_blk_stride=0)
    # 1024 bytes at 16 B/cycle -> 64 cycles, plus unit overhead
    assert M.instruction_cost(ins, cfg) == 64 + 1


def conv_instr(in_rows=10, in_w=16, c_in=64, out_w=16, c_out=64,
               kh=3, kw=3, sh=1, sw=1, pads=(0, 0, 0, 0)):
    pt, pl, pb, pr = pads
    return M.Instruction(op=M.CONV, sub="conv",
                         src=M.Addr(M.FM, 0, 0), dst=M.Addr(M.FM, 0, 1),
                         wgt_off=0, wgt_bytes=kh * kw * c_in * c_out,
                         in_rows=in_rows, in_w=in_w, c_in=c_in,
                         out_w=out_w, c_out=c_out, kh=kh, kw=kw,
                         sh=sh, sw=sw, pt=pt, pl=pl, pb=pb, pr=pr, shift=0)


def test_conv_cost_matches_mac_count():
    # independent arithmetic oracle for the MAC count
    cfg = mkcfg(conv_macs_per_cycle=1024, issue_overhead=0)
    ins = conv_instr(in_rows=10, in_w=18, c_in=64, out_w=16, c_out=64)
    out_rows = (10 - 3) // 1 + 1
    macs = 0
    for _ in range(out_rows):
        for _ in range(16):
            for _ in range(64):
                macs += 3 * 3  # kernel positions
    macs *= 64  # input channels
    assert out_rows == 8
    assert macs == 8 * 16 * 64 * 3 * 3 * 64
    assert M.instruction_cost(ins, cfg) == math.ceil(macs / 1024) == 4608


@given(st.integers(1, 64), st.integers(1, 64))
def test_cost_monotone_in_bytes(rows_a, rows_b):
    cfg = mkcfg()
    def load(rows):
        return M.Instruction(op=M.LOAD, sub="act",
                             src=M.Addr(M.DDR, 0), dst=M.Addr(M.FM, 0, 0),
                             rows=rows, blocks=1, block_bytes=128,
                             ddr_row_stride=128, ddr_blk_stride=0)
    ca, cb = M.instruction_cost(load(rows_a), cfg), M.instruction_cost(load(rows_b), cfg)
    if rows_a <= rows_b:
        assert ca <= cb


def sample_program():
    prog = M.Program()
    prog.segments = {"inputs": (0, 1024), "outputs": (1024, 1024),
                     "parameters": (2048, 512), "instructions": (2560, 0),
                     "swap": (2560, 0)}
    prog.tensors = {"x": {"segment": "inputs", "off": 0, "bytes": 768,
                          "shape": (4, 6, 32), "step_exp": -3}}
    prog.instructions = [
        M.Instruction(op=M.LOAD, sub="act", dpby=frozenset({M.CONV}),
                      src=M.Addr(M.DDR, 0), dst=M.Addr(M.FM, 0, 0),
                      rows=4, blocks=1, block_bytes=192,
                      ddr_row_stride=192, ddr_blk_stride=0),
        conv_instr(in_rows=4, in_w=6, c_in=32, out_w=4, c_out=8),
        M.Instruction(op=M.MISC, sub="eltwise",
                      src=M.Addr(M.FM, 0, 0), src2=M.Addr(M.FM, 64, 1),
                      dst=M.Addr(M.FM, 0, 2), rows=2, w=4, c=8,
                      ea=0, eb=1, eo=-1),
        M.Instruction(op=M.MISC, sub="noop"),
        M.Instruction(op=M.SAVE, sub="act", dpon=frozenset({M.MISC}),
                      src=M.Addr(M.FM, 0, 2), dst=M.Addr(M.DDR, 1024),
                      rows=2, blocks=4, block_bytes=8,
                      ddr_row_stride=64, ddr_blk_stride=16),
    ]
    return prog


def test_emit_single_conv_masks():
    prog = M.Program()
    prog.instructions = [
        M.Instruction(op=M.CONV, sub="conv", dpon=frozenset({M.LOAD}),
                      dpby=frozenset({M.SAVE}),
                      src=M.Addr(M.FM, 0, 0), dst=M.Addr(M.FM, 0, 1),
                      wgt_off=0, wgt_bytes=9, in_rows=3, in_w=3, c_in=1,
                      out_w=1, c_out=1, kh=3, kw=3, sh=1, sw=1,
                      pt=0, pl=0, pb=0, pr=0, shift=0)]
    text = M.emit_assembly(prog)
    line = [l for l in text.splitlines() if not l.startswith("#")][0]
    assert line.startswith("CONV 0b1000 0b0100 conv ")


def test_empty_program_emits_header_only():
    text = M.emit_assembly(M.Program())
    assert all(l.startswith("#") for l in text.splitlines())
    assert M.parse_assembly(text) == M.Program()


def test_roundtrip_sample_program():
    prog = sample_program()
    assert M.parse_assembly(M.emit_assembly(prog)) == prog


def test_parse_rejects_bad_lines():
    with pytest.raises(AsmError):
        M.parse_assembly("CONV 0b1000\n")
    with pytest.raises(AsmError):
        M.parse_assembly("FROB 0b0000 0b0000 conv\n")
    with pytest.raises(AsmError):
        M.parse_assembly("MISC 0b0000 0b0000 noop extra=1\n")


def test_save_exact_ranges_are_strided():
    ins = sample_program().instructions[-1]
    exact = ins.writes(exact=True)
    assert len(exact) == 8
    assert exact[0] == (M.DDR, 0, 1024, 1032)
    assert exact[1] == (M.DDR, 0, 1040, 1048)
    lo = min(r[2] for r in exact)
    hi = max(r[3] for r in exact)
    bound = ins.writes(exact=False)[0]
    assert bound[2] <= lo and bound[3] >= hi


def test_config_json_roundtrip(tmp_path):
    cfg = mkcfg(gamma=4096, h_c=8)
    p = tmp_path / "cfg.json"
    cfg.to_json(p)
    assert M.MachineConfig.from_json(p) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        mkcfg(h_c=1, h_p=2)
    with pytest.raises(ValueError):
        mkcfg(gamma=0)
