"""Fixed-point arithmetic model used by every execution path.

All tensors are int8 with a power-of-two scale (real value = int8 * step).
Accumulation is int32.  Requantization multiplies by the ratio of scales,
rounds half away from zero, and saturates to [-128, 127].  Keeping every
rounding decision in this module lets the policy be swapped in one place.
"""

import math

import numpy as np

INT8_MIN = -128
INT8_MAX = 127


def step_exponent(step):
    """Return e with step == 2**e, or raise ValueError.

    Scales are required to be powers of two so that every requantization
    is a shift; this is what makes the reference executor and the
    instruction-level simulator bit-compatible.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    e = math.log2(step)
    r = round(e)
    if abs(e - r) > 1e-9:
        raise ValueError(f"step {step} is not a power of two")
    return int(r)


def shift_round_half_away(acc, shift):
    """Multiply int32 values by 2**shift with round-half-away-from-zero.

    shift >= 0 is an exact left shift; shift < 0 divides by 2**-shift and
    rounds ties away from zero (so -2.5 -> -3, 2.5 -> 3).
    """
    acc = np.asarray(acc, dtype=np.int64)
    if shift >= 0:
        return acc << shift
    k = -shift
    half = np.int64(1) << (k - 1)
    mag = (np.abs(acc) + half) >> k
    return np.sign(acc) * mag


def saturate_int8(x):
    return np.clip(x, INT8_MIN, INT8_MAX).astype(np.int8)


def requantize(acc, shift):
    """int32 accumulator -> int8 at the target scale.

    shift is the exponent of the scale ratio (source scale / target scale),
    i.e. result = sat(round(acc * 2**shift)).
    """
    return saturate_int8(shift_round_half_away(acc, shift))


def conv_shift(in_exp, wgt_exp, out_exp):
    """Scale-ratio exponent from a conv accumulator to its output tensor.

    The accumulator of an int8 conv lives at scale 2**(in_exp + wgt_exp);
    biases are stored pre-scaled to the accumulator scale.
    """
    return in_exp + wgt_exp - out_exp


def eltwise_exponents(exp_a, exp_b, out_exp):
    """Alignment exponents for a two-operand add.

    Both operands are brought to the finest common scale exactly, summed in
    int32, then requantized once.  Returns (ea, eb, eo): operand left-shifts
    and the final requantization shift.
    """
    common = min(exp_a, exp_b)
    return exp_a - common, exp_b - common, common - out_exp


def eltwise_add(a, b, exp_a, exp_b, out_exp):
    ea, eb, eo = eltwise_exponents(exp_a, exp_b, out_exp)
    acc = (np.asarray(a, np.int64) << ea) + (np.asarray(b, np.int64) << eb)
    return requantize(acc, eo)
