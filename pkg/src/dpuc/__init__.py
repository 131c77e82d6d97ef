"""Compiler and dual-mode simulator for a four-queue int8 CNN
accelerator."""

from .compiler import CompileArtifacts, CompileOptions, compile_graph
from .graph import fold_constants_and_quantizers, fuse_superlayers, \
    parse_graph, topological_schedule
from .machine import MachineConfig, emit_assembly, parse_assembly
from .simulator import check_hazards, reference_execute, run_functional, \
    run_program, run_timing
from .timeline import emit_timeline

__version__ = "0.1.0"

__all__ = [
    "CompileArtifacts", "CompileOptions", "MachineConfig",
    "check_hazards", "compile_graph", "emit_assembly", "emit_timeline",
    "fold_constants_and_quantizers", "fuse_superlayers", "parse_assembly",
    "parse_graph", "reference_execute", "run_functional", "run_program",
    "run_timing", "topological_schedule",
]
