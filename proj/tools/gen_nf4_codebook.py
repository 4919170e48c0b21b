#!/usr/bin/env python3
"""Regenerates the NF4 codebook constants in src/nf4.cpp.

Builds the 4-bit NormalFloat code as in QLoRA: 8 positive and 7 negative
standard-normal quantiles plus an exact zero, normalized to [-1, 1].
"""
import numpy as np
from scipy.stats import norm

OFFSET = 0.9677083


def normal_map(offset=OFFSET):
    pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1]).tolist()
    neg = (-norm.ppf(np.linspace(offset, 0.5, 8)[:-1])).tolist()
    values = np.array(sorted(pos + [0.0] + neg))
    return values / np.max(np.abs(values))


if __name__ == "__main__":
    for v in normal_map():
        print(f"    {v:.17g},")
