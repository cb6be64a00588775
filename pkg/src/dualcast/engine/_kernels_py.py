"""Pure-Python graph sweeps, the fallback twin of ``_kernels_c``.

Operation-for-operation identical to the compiled core (same opcode
switch, same libm calls), so the two backends produce bit-identical
results on any sweep that succeeds and report the same node index when
one does not. Python's math module raises where C libm would return
inf/nan; both cases funnel into the same "bad node" return value.
"""

import math

_isfinite = math.isfinite
_exp = math.exp
_log = math.log
_tanh = math.tanh
_sqrt = math.sqrt
_ARITH_ERRORS = (OverflowError, ValueError, ZeroDivisionError)


def forward(op, p1, p2, aux, val, n):
    """Replay nodes 0..n-1; return first non-finite index or -1."""
    for i in range(n):
        o = op[i]
        if o == 0:                       # LEAF
            continue
        a = val[p1[i]]
        try:
            if o == 1:                   # ADD
                v = a + val[p2[i]]
            elif o == 2:                 # SUB
                v = a - val[p2[i]]
            elif o == 3:                 # MUL
                v = a * val[p2[i]]
            elif o == 4:                 # DIV
                v = a / val[p2[i]]
            elif o == 5:                 # NEG
                v = -a
            elif o == 6:                 # EXP
                v = _exp(a)
            elif o == 7:                 # LOG
                v = _log(a)
            elif o == 8:                 # TANH
                v = _tanh(a)
            elif o == 9:                 # SIGMOID
                v = 1.0 / (1.0 + _exp(-a))
            elif o == 10:                # SQRT
                v = _sqrt(a)
            elif o == 11:                # POWC
                v = a ** aux[i]
            elif o == 12:                # ADDI
                v = a + aux[i]
            elif o == 13:                # MULI
                v = a * aux[i]
            else:                        # ISUB
                v = aux[i] - a
        except _ARITH_ERRORS:
            return i
        if not _isfinite(v):
            return i
        val[i] = v
    return -1


def backward(op, p1, p2, aux, val, grad, out):
    """Reverse sweep from node ``out``; return first bad index or -1."""
    grad[out] = 1.0
    for i in range(out, -1, -1):
        g = grad[i]
        if g == 0.0:
            continue
        if not _isfinite(g):
            return i
        o = op[i]
        if o == 0:                       # LEAF
            continue
        a = p1[i]
        try:
            if o == 1:                   # ADD
                grad[a] += g
                grad[p2[i]] += g
            elif o == 2:                 # SUB
                grad[a] += g
                grad[p2[i]] -= g
            elif o == 3:                 # MUL
                b = p2[i]
                grad[a] += g * val[b]
                grad[b] += g * val[a]
            elif o == 4:                 # DIV
                b = p2[i]
                grad[a] += g / val[b]
                grad[b] -= g * val[i] / val[b]
            elif o == 5:                 # NEG
                grad[a] -= g
            elif o == 6:                 # EXP
                grad[a] += g * val[i]
            elif o == 7:                 # LOG
                grad[a] += g / val[a]
            elif o == 8:                 # TANH
                grad[a] += g * (1.0 - val[i] * val[i])
            elif o == 9:                 # SIGMOID
                grad[a] += g * val[i] * (1.0 - val[i])
            elif o == 10:                # SQRT
                grad[a] += g / (2.0 * val[i])
            elif o == 11:                # POWC
                c = aux[i]
                grad[a] += g * c * val[a] ** (c - 1.0)
            elif o == 12:                # ADDI
                grad[a] += g
            elif o == 13:                # MULI
                grad[a] += g * aux[i]
            else:                        # ISUB
                grad[a] -= g
        except _ARITH_ERRORS:
            return i
    return -1
