#!/usr/bin/env python3
"""A/B makespan table: software-pipelined stream vs sequential baseline.

Compiles every corpus graph both ways and reports simulated cycles,
speedup, and per-queue utilization of the pipelined stream.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dpuc import corpus
from dpuc.compiler import CompileOptions, compile_graph
from dpuc.machine import MachineConfig
from dpuc.simulator import run_timing


def main():
    cfg = MachineConfig()
    print(f"{'graph':<16} {'sequential':>10} {'pipelined':>10} "
          f"{'speedup':>8}  utilization (pipelined)")
    for name in corpus.corpus_names():
        g = corpus.corpus_graph(name)
        pip = run_timing(compile_graph(g, cfg).program, cfg)
        seq = run_timing(
            compile_graph(g, cfg, CompileOptions(pipeline=False)).program,
            cfg)
        util = " ".join(f"{q}={u:.2f}"
                        for q, u in sorted(pip.util.items()))
        print(f"{name:<16} {seq.makespan:>10} {pip.makespan:>10} "
              f"{seq.makespan / pip.makespan:>7.2f}x  {util}")


if __name__ == "__main__":
    main()
