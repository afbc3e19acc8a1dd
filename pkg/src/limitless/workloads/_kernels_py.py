"""Pure-Python kernels; the reference behaviour for the compiled module."""

from __future__ import annotations

from array import array

MASK64 = (1 << 64) - 1


def factor_block(n, divisor, max_probes):
    """Run up to ``max_probes`` trial-division probes.

    Returns ``(n_remaining, divisor, found, probes_used)``.  A probe is one
    divisibility test, one factor extraction, or the final prime-remainder
    extraction once ``divisor**2 > n_remaining``.
    """
    found = []
    used = 0
    while used < max_probes and n > 1:
        used += 1
        if divisor * divisor > n:
            found.append(n)
            n = 1
        elif n % divisor == 0:
            n //= divisor
            found.append(divisor)
        else:
            divisor = 3 if divisor == 2 else divisor + 2
    return n, divisor, found, used


def splitmix_int32(seed, count):
    """``count`` signed 32-bit values from a splitmix64 stream seeded with ``seed``."""
    out = array("q", bytes(8 * count))
    state = seed & MASK64
    for i in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        v = z & 0xFFFFFFFF
        out[i] = v - (1 << 32) if v >= (1 << 31) else v
    return out


def matmul_row(a, b, size, row):
    """Row ``row`` of ``a @ b`` for flat row-major operands, entries mod 2**64."""
    base = row * size
    arow = a[base:base + size]
    out = []
    for j in range(size):
        acc = 0
        for k in range(size):
            acc += arow[k] * b[k * size + j]
        out.append(acc & MASK64)
    return out
