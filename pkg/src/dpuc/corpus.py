"""Shipped test-graph corpus, one builder per hardware code path.

Each graph is at desk scale so the whole verification suite runs in
seconds: a toy convolution, the fused conv+pool stream, a residual cell
with an element-wise join, a concat cell with parallel branches, a
transpose convolution (compilable down both paths), a convolution whose
weights overflow PM, and the quantizer-heavy network prefix that folds
from 15 nodes to 4.  Weights are deterministic per graph.  Output scales
are picked so accumulators land mid-range rather than saturating.
"""

import base64
import json

import numpy as np

from .graph import parse_graph


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode()


def _q(exp):
    step = float(2.0 ** exp)
    return {"lo": -128.0 * step, "hi": 127.0 * step, "step": step}


def _conv_params(rng, c_out, kh, kw, c_in, wexp, wmax=24, bmax=1000):
    w = rng.integers(-wmax, wmax, (c_out, kh, kw, c_in)).astype(np.int8)
    b = rng.integers(-bmax, bmax, c_out).astype(np.int32)
    return {"weights": _b64(w), "bias": _b64(b),
            "shape": [c_out, kh, kw, c_in], "quant": _q(wexp)}


def toy_conv():
    rng = np.random.default_rng(11)
    return {
        "tensors": [
            {"name": "x", "shape": [8, 8, 4], "quant": _q(-2)},
            {"name": "y", "shape": [8, 8, 8], "quant": _q(3)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "conv", "op": "conv", "inputs": ["x"], "output": "y",
             "attrs": {"kernel": [3, 3], "stride": [1, 1],
                       "padding": [1, 1], "c_out": 8},
             "params": _conv_params(rng, 8, 3, 3, 4, -3)},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def conv_pool():
    """k=5 s=1 convolution fused with a 2x2/s2 max pool; 8 conv tiles."""
    rng = np.random.default_rng(22)
    return {
        "tensors": [
            {"name": "x", "shape": [68, 16, 16], "quant": _q(-2)},
            {"name": "t", "shape": [64, 12, 16], "quant": _q(6)},
            {"name": "y", "shape": [32, 6, 16], "quant": _q(6)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "conv", "op": "conv", "inputs": ["x"], "output": "t",
             "attrs": {"kernel": [5, 5], "stride": [1, 1],
                       "padding": [0, 0], "c_out": 16},
             "params": _conv_params(rng, 16, 5, 5, 16, -3)},
            {"id": "pool", "op": "maxpool", "inputs": ["t"], "output": "y",
             "attrs": {"kernel": [2, 2], "stride": [2, 2],
                       "padding": [0, 0]}},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def resnet_cell():
    """conv -> conv -> element-wise residual join."""
    rng = np.random.default_rng(33)
    return {
        "tensors": [
            {"name": "x", "shape": [16, 16, 8], "quant": _q(-2)},
            {"name": "z", "shape": [16, 16, 8], "quant": _q(4)},
            {"name": "t", "shape": [16, 16, 8], "quant": _q(4)},
            {"name": "y", "shape": [16, 16, 8], "quant": _q(5)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "conv1", "op": "conv", "inputs": ["x"], "output": "z",
             "attrs": {"kernel": [3, 3], "stride": [1, 1],
                       "padding": [1, 1], "c_out": 8},
             "params": _conv_params(rng, 8, 3, 3, 8, -3)},
            {"id": "conv2", "op": "conv", "inputs": ["z"], "output": "t",
             "attrs": {"kernel": [3, 3], "stride": [1, 1],
                       "padding": [1, 1], "c_out": 8},
             "params": _conv_params(rng, 8, 3, 3, 8, -11)},
            {"id": "add", "op": "eltwise-add", "inputs": ["t", "z"],
             "output": "y"},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def inception_cell():
    """Three parallel branches joined by a channel concatenation."""
    rng = np.random.default_rng(44)
    return {
        "tensors": [
            {"name": "x", "shape": [16, 16, 8], "quant": _q(-2)},
            {"name": "a", "shape": [16, 16, 8], "quant": _q(-2)},
            {"name": "b", "shape": [16, 16, 8], "quant": _q(-2)},
            {"name": "c", "shape": [16, 16, 8], "quant": _q(-2)},
            {"name": "y", "shape": [16, 16, 24], "quant": _q(-2)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "branch_a", "op": "conv", "inputs": ["x"], "output": "a",
             "attrs": {"kernel": [1, 1], "c_out": 8},
             "params": _conv_params(rng, 8, 1, 1, 8, -6)},
            {"id": "branch_b", "op": "conv", "inputs": ["x"], "output": "b",
             "attrs": {"kernel": [3, 3], "padding": [1, 1], "c_out": 8},
             "params": _conv_params(rng, 8, 3, 3, 8, -9)},
            {"id": "branch_c", "op": "maxpool", "inputs": ["x"],
             "output": "c",
             "attrs": {"kernel": [3, 3], "stride": [1, 1],
                       "padding": [1, 1]}},
            {"id": "join", "op": "concat", "inputs": ["a", "b", "c"],
             "output": "y"},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def deconv():
    """4x4 kernel, 2x2 upsample, padding 2: four 2x2 sub-kernels."""
    rng = np.random.default_rng(55)
    return {
        "tensors": [
            {"name": "x", "shape": [12, 12, 8], "quant": _q(-2)},
            {"name": "y", "shape": [24, 24, 8], "quant": _q(5)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "up", "op": "deconv", "inputs": ["x"], "output": "y",
             "attrs": {"kernel": [4, 4], "upsample": 2, "padding": 2,
                       "c_out": 8},
             "params": _conv_params(rng, 8, 4, 4, 8, -3)},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def weight_tiled():
    """Weights exceed PM: three slabs, loads pipelined with convolution."""
    rng = np.random.default_rng(66)
    return {
        "tensors": [
            {"name": "x", "shape": [12, 12, 64], "quant": _q(-2)},
            {"name": "y", "shape": [12, 12, 256], "quant": _q(7)},
        ],
        "nodes": [
            {"id": "in", "op": "input", "inputs": [], "output": "x"},
            {"id": "big", "op": "conv", "inputs": ["x"], "output": "y",
             "attrs": {"kernel": [3, 3], "padding": [1, 1], "c_out": 256},
             "params": _conv_params(rng, 256, 3, 3, 64, -3)},
        ],
        "inputs": ["x"], "outputs": ["y"],
    }


def vgg_prefix():
    """First three layers with explicit quantizers and parameters: fifteen
    nodes that fold down to one input, two convolutions, and a pool."""
    rng = np.random.default_rng(77)
    w1 = rng.integers(-24, 24, (16, 3, 3, 8)).astype(np.int8)
    b1 = rng.integers(-1000, 1000, 16).astype(np.int32)
    w2 = rng.integers(-24, 24, (16, 3, 3, 16)).astype(np.int8)
    b2 = rng.integers(-1000, 1000, 16).astype(np.int32)
    fix = lambda e: {"lo": -128.0 * 2.0 ** e, "hi": 127.0 * 2.0 ** e,
                     "step": 2.0 ** e}
    return {
        "tensors": [
            {"name": "x_raw", "shape": [32, 32, 8]},
            {"name": "x", "shape": [32, 32, 8], "quant": _q(-2)},
            {"name": "c1_raw", "shape": [32, 32, 16]},
            {"name": "c1", "shape": [32, 32, 16], "quant": _q(4)},
            {"name": "c2_raw", "shape": [32, 32, 16]},
            {"name": "c2", "shape": [32, 32, 16], "quant": _q(4)},
            {"name": "y", "shape": [16, 16, 16], "quant": _q(4)},
        ],
        "nodes": [
            {"id": "n00_input", "op": "input", "inputs": [],
             "output": "x_raw"},
            {"id": "n01_fix_in", "op": "fix", "inputs": ["x_raw"],
             "output": "x", "attrs": fix(-2)},
            {"id": "n02_w1", "op": "const", "inputs": [], "output": "w1_raw",
             "params": {"data": _b64(w1), "dtype": "int8",
                        "shape": [16, 3, 3, 8]}},
            {"id": "n03_fix_w1", "op": "fix", "inputs": ["w1_raw"],
             "output": "w1", "attrs": fix(-3)},
            {"id": "n04_b1", "op": "const", "inputs": [], "output": "b1_raw",
             "params": {"data": _b64(b1), "dtype": "int32", "shape": [16]}},
            {"id": "n05_fix_b1", "op": "fix", "inputs": ["b1_raw"],
             "output": "b1", "attrs": fix(-5)},
            {"id": "n06_conv1", "op": "conv", "inputs": ["x", "w1", "b1"],
             "output": "c1_raw",
             "attrs": {"kernel": [3, 3], "padding": [1, 1], "c_out": 16}},
            {"id": "n07_fix_c1", "op": "fix", "inputs": ["c1_raw"],
             "output": "c1", "attrs": fix(4)},
            {"id": "n08_w2", "op": "const", "inputs": [], "output": "w2_raw",
             "params": {"data": _b64(w2), "dtype": "int8",
                        "shape": [16, 3, 3, 16]}},
            {"id": "n09_fix_w2", "op": "fix", "inputs": ["w2_raw"],
             "output": "w2", "attrs": fix(-10)},
            {"id": "n10_b2", "op": "const", "inputs": [], "output": "b2_raw",
             "params": {"data": _b64(b2), "dtype": "int32", "shape": [16]}},
            {"id": "n11_fix_b2", "op": "fix", "inputs": ["b2_raw"],
             "output": "b2", "attrs": fix(-6)},
            {"id": "n12_conv2", "op": "conv", "inputs": ["c1", "w2", "b2"],
             "output": "c2_raw",
             "attrs": {"kernel": [3, 3], "padding": [1, 1], "c_out": 16}},
            {"id": "n13_fix_c2", "op": "fix", "inputs": ["c2_raw"],
             "output": "c2", "attrs": fix(4)},
            {"id": "n14_pool", "op": "maxpool", "inputs": ["c2"],
             "output": "y",
             "attrs": {"kernel": [2, 2], "stride": [2, 2]}},
        ],
        "inputs": ["x_raw"], "outputs": ["y"],
    }


BUILDERS = {
    "toy_conv": toy_conv,
    "conv_pool": conv_pool,
    "resnet_cell": resnet_cell,
    "inception_cell": inception_cell,
    "deconv": deconv,
    "weight_tiled": weight_tiled,
    "vgg_prefix": vgg_prefix,
}


def corpus_doc(name):
    return BUILDERS[name]()


def corpus_graph(name):
    return parse_graph(json.dumps(corpus_doc(name)))


def corpus_names():
    return sorted(BUILDERS)


def write_corpus(dirpath):
    import os
    os.makedirs(dirpath, exist_ok=True)
    paths = []
    for name in corpus_names():
        path = os.path.join(dirpath, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(corpus_doc(name), fh, indent=1, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths
