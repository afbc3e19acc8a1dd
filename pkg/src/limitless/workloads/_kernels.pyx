# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.  Same contract as ``_kernels_py``."""

from array import array

from . import _kernels_py

ctypedef unsigned long long u64


def factor_block(n, divisor, long long max_probes):
    if n >= (1 << 64) or divisor >= (1 << 64):
        return _kernels_py.factor_block(n, divisor, max_probes)
    cdef u64 m = n
    cdef u64 d = divisor
    cdef long long used = 0
    found = []
    while used < max_probes and m > 1:
        used += 1
        if d > m // d:
            found.append(m)
            m = 1
        elif m % d == 0:
            m //= d
            found.append(d)
        elif d == 2:
            d = 3
        else:
            d += 2
    return m, d, found, used


def splitmix_int32(seed, Py_ssize_t count):
    out = array("q", bytes(8 * count))
    cdef long long[:] view = out
    cdef u64 state = seed & 0xFFFFFFFFFFFFFFFF
    cdef u64 z
    cdef unsigned int v
    cdef Py_ssize_t i
    for i in range(count):
        state += 0x9E3779B97F4A7C15ULL
        z = state
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
        z ^= z >> 31
        v = <unsigned int>(z & 0xFFFFFFFFULL)
        view[i] = <int>v
    return out


def matmul_row(const long long[:] a, const long long[:] b, Py_ssize_t size, Py_ssize_t row):
    cdef Py_ssize_t j, k, base = row * size
    cdef u64 acc
    out = [0] * size
    for j in range(size):
        acc = 0
        for k in range(size):
            acc += (<u64>a[base + k]) * (<u64>b[k * size + j])
        out[j] = acc
    return out
