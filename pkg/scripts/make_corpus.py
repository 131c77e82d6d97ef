#!/usr/bin/env python3
"""Regenerate the shipped graph corpus under corpus/."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dpuc.corpus import write_corpus

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else \
        os.path.join(os.path.dirname(__file__), "..", "corpus")
    for path in write_corpus(out):
        print(path)
