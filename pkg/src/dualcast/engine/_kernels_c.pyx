# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled graph sweeps; the hot loops behind Tape.forward/backward.

Must stay operation-for-operation identical to ``_kernels_py`` - the
test suite asserts bit-equality between the two backends.
"""

from libc.math cimport exp as c_exp, log as c_log, tanh as c_tanh, \
    sqrt as c_sqrt, pow as c_pow, isfinite


def forward(const signed char[::1] op, const long long[::1] p1,
            const long long[::1] p2, const double[::1] aux,
            double[::1] val, Py_ssize_t n):
    """Replay nodes 0..n-1; return first non-finite index or -1."""
    cdef Py_ssize_t i
    cdef signed char o
    cdef double a, v
    for i in range(n):
        o = op[i]
        if o == 0:                       # LEAF
            continue
        a = val[p1[i]]
        if o == 1:                       # ADD
            v = a + val[p2[i]]
        elif o == 2:                     # SUB
            v = a - val[p2[i]]
        elif o == 3:                     # MUL
            v = a * val[p2[i]]
        elif o == 4:                     # DIV
            v = a / val[p2[i]]
        elif o == 5:                     # NEG
            v = -a
        elif o == 6:                     # EXP
            v = c_exp(a)
        elif o == 7:                     # LOG
            v = c_log(a)
        elif o == 8:                     # TANH
            v = c_tanh(a)
        elif o == 9:                     # SIGMOID
            v = 1.0 / (1.0 + c_exp(-a))
        elif o == 10:                    # SQRT
            v = c_sqrt(a)
        elif o == 11:                    # POWC
            v = c_pow(a, aux[i])
        elif o == 12:                    # ADDI
            v = a + aux[i]
        elif o == 13:                    # MULI
            v = a * aux[i]
        else:                            # ISUB
            v = aux[i] - a
        if not isfinite(v):
            return i
        val[i] = v
    return -1


def backward(const signed char[::1] op, const long long[::1] p1,
             const long long[::1] p2, const double[::1] aux,
             const double[::1] val, double[::1] grad, Py_ssize_t out):
    """Reverse sweep from node ``out``; return first bad index or -1."""
    cdef Py_ssize_t i, a, b
    cdef signed char o
    cdef double g, c
    grad[out] = 1.0
    for i in range(out, -1, -1):
        g = grad[i]
        if g == 0.0:
            continue
        if not isfinite(g):
            return i
        o = op[i]
        if o == 0:                       # LEAF
            continue
        a = p1[i]
        if o == 1:                       # ADD
            grad[a] += g
            grad[p2[i]] += g
        elif o == 2:                     # SUB
            grad[a] += g
            grad[p2[i]] -= g
        elif o == 3:                     # MUL
            b = p2[i]
            grad[a] += g * val[b]
            grad[b] += g * val[a]
        elif o == 4:                     # DIV
            b = p2[i]
            grad[a] += g / val[b]
            grad[b] -= g * val[i] / val[b]
        elif o == 5:                     # NEG
            grad[a] -= g
        elif o == 6:                     # EXP
            grad[a] += g * val[i]
        elif o == 7:                     # LOG
            grad[a] += g / val[a]
        elif o == 8:                     # TANH
            grad[a] += g * (1.0 - val[i] * val[i])
        elif o == 9:                     # SIGMOID
            grad[a] += g * val[i] * (1.0 - val[i])
        elif o == 10:                    # SQRT
            grad[a] += g / (2.0 * val[i])
        elif o == 11:                    # POWC
            c = aux[i]
            grad[a] += g * c * c_pow(val[a], c - 1.0)
        elif o == 12:                    # ADDI
            grad[a] += g
        elif o == 13:                    # MULI
            grad[a] += g * aux[i]
        else:                            # ISUB
            grad[a] -= g
    return -1
