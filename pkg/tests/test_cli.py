import json
from dataclasses import replace

import numpy as np
import pytest

from dpuc import cli
from dpuc import corpus
from dpuc.machine import MachineConfig


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert cli.main(["corpus", "-o", str(d)]) == 0
    return d


def test_compile_run_viz_roundtrip(corpus_dir, tmp_path):
    art = tmp_path / "art"
    rc = cli.main(["compile", str(corpus_dir / "toy_conv.json"),
                   "-o", str(art), "--dump-tiles"])
    assert rc == 0
    for f in ("program.asm", "params.bin", "memmap.json", "report.json",
              "config.json", "tiles.json"):
        assert (art / f).exists()

    x = np.random.default_rng(0).integers(-128, 128, (8, 8, 4)).astype(np.int8)
    xfile = tmp_path / "x.bin"
    x.tofile(xfile)
    out = tmp_path / "out"
    rc = cli.main(["run", str(art), "--mode", "both",
                   "--input", f"x={xfile}", "--out-dir", str(out)])
    assert rc == 0
    assert (out / "y.bin").exists()
    assert (out / "trace.json").exists()

    svg = tmp_path / "t.svg"
    rc = cli.main(["viz", str(out / "trace.json"), "-o", str(svg)])
    assert rc == 0
    body = svg.read_text()
    assert body.startswith("<svg") and "<rect" in body
    # four lanes labelled by queue
    for lane in ("LOAD", "SAVE", "CONV", "MISC"):
        assert lane in body


def test_run_output_matches_reference(corpus_dir, tmp_path):
    from dpuc.graph import fold_constants_and_quantizers, parse_graph
    from dpuc.simulator import reference_execute
    art = tmp_path / "art"
    assert cli.main(["compile", str(corpus_dir / "resnet_cell.json"),
                     "-o", str(art)]) == 0
    g = parse_graph((corpus_dir / "resnet_cell.json").read_text())
    folded = fold_constants_and_quantizers(g)
    x = np.random.default_rng(9).integers(-128, 128, (16, 16, 8)) \
        .astype(np.int8)
    xfile = tmp_path / "x.bin"
    x.tofile(xfile)
    assert cli.main(["run", str(art), "--mode", "functional",
                     "--input", f"x={xfile}",
                     "--out-dir", str(tmp_path)]) == 0
    got = np.fromfile(tmp_path / "y.bin", np.int8).reshape(16, 16, 8)
    ref = reference_execute(folded, {"x": x})["y"]
    assert np.array_equal(got, ref)


def test_verify_full_corpus_exit_zero(corpus_dir):
    for name in corpus.corpus_names():
        rc = cli.main(["verify", str(corpus_dir / f"{name}.json"),
                       "--seeds", "2"])
        assert rc == 0, name


def test_verify_corrupted_params_exit_one(corpus_dir, monkeypatch):
    from dpuc import compiler as C
    real = C.compile_graph

    def corrupting(g, cfg, options=None):
        art = real(g, cfg, options)
        img = bytearray(art.param_image)
        img[0] ^= 0x7F
        art.program.param_image = bytes(img)
        return art

    monkeypatch.setattr(cli, "compile_graph", corrupting)
    rc = cli.main(["verify", str(corpus_dir / "toy_conv.json"),
                   "--seeds", "1"])
    assert rc == 1


def test_verify_stripped_dpon_exit_two(corpus_dir, monkeypatch):
    from dpuc import compiler as C
    real = C.compile_graph

    def stripping(g, cfg, options=None):
        art = real(g, cfg, options)
        art.program.instructions = [
            replace(i, dpon=frozenset(), dpby=frozenset())
            for i in art.program.instructions]
        return art

    monkeypatch.setattr(cli, "compile_graph", stripping)
    rc = cli.main(["verify", str(corpus_dir / "conv_pool.json"),
                   "--seeds", "1"])
    assert rc == 2


def test_verify_compile_failure_exit_three(corpus_dir, tmp_path):
    cfgfile = tmp_path / "hopeless.json"
    MachineConfig(fm_bank_rows=1, fm_row_bytes=16, gamma=8).to_json(cfgfile)
    rc = cli.main(["verify", str(corpus_dir / "toy_conv.json"),
                   "-c", str(cfgfile)])
    assert rc == 3


def test_no_pipeline_flag_produces_slower_program(corpus_dir, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert cli.main(["compile", str(corpus_dir / "conv_pool.json"),
                     "-o", str(a)]) == 0
    assert cli.main(["compile", str(corpus_dir / "conv_pool.json"),
                     "-o", str(b), "--no-pipeline"]) == 0
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    assert ra["estimated_makespan"] < rb["estimated_makespan"]


def test_cost_model_linearity(corpus_dir, tmp_path):
    # doubling conv throughput halves conv lane durations (+- rounding)
    from dpuc.cli import load_artifacts
    from dpuc.simulator import run_timing
    art = tmp_path / "art"
    assert cli.main(["compile", str(corpus_dir / "toy_conv.json"),
                     "-o", str(art)]) == 0
    prog, cfg = load_artifacts(str(art))
    fast = cfg.with_overrides(conv_macs_per_cycle=cfg.conv_macs_per_cycle * 2)
    t1 = run_timing(prog, cfg)
    t2 = run_timing(prog, fast)
    for e1, e2 in zip(t1.events, t2.events):
        if e1.queue == "CONV" and e1.sub == "conv":
            work = e1.duration - cfg.issue_overhead
            half = e2.duration - cfg.issue_overhead
            assert abs(half - work / 2) <= 1


def test_artifacts_byte_identical_across_runs(corpus_dir, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        assert cli.main(["compile", str(corpus_dir / "inception_cell.json"),
                         "-o", str(d)]) == 0
    for f in ("program.asm", "params.bin", "memmap.json", "report.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_env_config_default(corpus_dir, tmp_path, monkeypatch):
    cfgfile = tmp_path / "env.json"
    MachineConfig(gamma=4096).to_json(cfgfile)
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfgfile))
    art = tmp_path / "art"
    assert cli.main(["compile", str(corpus_dir / "toy_conv.json"),
                     "-o", str(art)]) == 0
    saved = json.loads((art / "config.json").read_text())
    assert saved["gamma"] == 4096


def test_viz_bad_path_fails(tmp_path):
    rc = cli.main(["viz", str(tmp_path / "missing.json")])
    assert rc == 1
