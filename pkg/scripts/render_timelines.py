#!/usr/bin/env python3
"""Render four-lane SVG timelines for every corpus graph.

The deconvolution graph is rendered down both lowering paths so the
dense-series advantage is visible side by side.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dpuc import corpus
from dpuc.compiler import CompileOptions, compile_graph
from dpuc.machine import MachineConfig
from dpuc.simulator import run_timing
from dpuc.timeline import emit_timeline


def main():
    outdir = sys.argv[1] if len(sys.argv) > 1 else "timelines"
    os.makedirs(outdir, exist_ok=True)
    cfg = MachineConfig()
    jobs = [(name, CompileOptions()) for name in corpus.corpus_names()]
    jobs.append(("deconv_upsample_path",
                 CompileOptions(deconv_mode="upsample")))
    for label, options in jobs:
        gname = "deconv" if label.startswith("deconv_") else label
        art = compile_graph(corpus.corpus_graph(gname), cfg, options)
        trace = run_timing(art.program, cfg)
        path = os.path.join(outdir, f"{label}.svg")
        with open(path, "w") as fh:
            fh.write(emit_timeline(trace, "svg"))
        print(f"{path}: makespan {trace.makespan} cycles")


if __name__ == "__main__":
    main()
