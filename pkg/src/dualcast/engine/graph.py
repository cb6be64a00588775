"""Scalar reverse-mode automatic differentiation on a replayable tape.

Every node is a scalar. Building an expression records one opcode per
node on a :class:`Tape`; values are computed eagerly so graphs can be
inspected while they are built. Because nodes are appended in creation
order, index order is a topological order, which makes replay a single
forward sweep and backpropagation a single reverse sweep over flat
arrays. Those two sweeps are the hot loops of every training routine in
this package and are delegated to a compiled core when available (see
``engine/__init__.py``).

The tape is replayable: leaf values may be overwritten and ``forward()``
recomputes every interior node. A training loop therefore records its
loss graph once and then only replays it.
"""

import math

import numpy as np

# opcodes (kept in sync with _kernels_c.pyx / _kernels_py.py)
LEAF = 0
ADD = 1
SUB = 2
MUL = 3
DIV = 4
NEG = 5
EXP = 6
LOG = 7
TANH = 8
SIGMOID = 9
SQRT = 10
POWC = 11   # x ** aux
ADDI = 12   # x + aux
MULI = 13   # x * aux
ISUB = 14   # aux - x

_OP_NAMES = {
    LEAF: "leaf", ADD: "add", SUB: "sub", MUL: "mul", DIV: "div",
    NEG: "neg", EXP: "exp", LOG: "log", TANH: "tanh", SIGMOID: "sigmoid",
    SQRT: "sqrt", POWC: "powc", ADDI: "addi", MULI: "muli", ISUB: "isub",
}


class GraphError(ValueError):
    """Numerical failure inside a graph sweep, carrying the node index."""

    def __init__(self, message, node):
        super().__init__(f"{message} (node {node})")
        self.node = node


class Tape:
    """Append-only scalar computation graph with replay and backprop."""

    def __init__(self, capacity=256):
        capacity = max(int(capacity), 16)
        self._op = np.empty(capacity, dtype=np.int8)
        self._p1 = np.empty(capacity, dtype=np.int64)
        self._p2 = np.empty(capacity, dtype=np.int64)
        self._aux = np.empty(capacity, dtype=np.float64)
        self._val = np.empty(capacity, dtype=np.float64)
        self._grad = None
        self.n = 0

    # -- construction -------------------------------------------------

    def _grow(self):
        cap = self._op.shape[0] * 2
        for name in ("_op", "_p1", "_p2", "_aux", "_val"):
            arr = getattr(self, name)
            new = np.empty(cap, dtype=arr.dtype)
            new[: self.n] = arr[: self.n]
            setattr(self, name, new)

    def _push(self, op, p1, p2, aux, val):
        n = self.n
        if n == self._op.shape[0]:
            self._grow()
        self._op[n] = op
        self._p1[n] = p1
        self._p2[n] = p2
        self._aux[n] = aux
        self._val[n] = val
        self.n = n + 1
        self._grad = None
        return n

    def leaf(self, value):
        """New mutable input node (parameter, data slot or constant)."""
        return Value(self, self._push(LEAF, -1, -1, 0.0, float(value)))

    def leaves(self, values):
        """Vector of leaves for an array, returned as a list of Values."""
        return [self.leaf(v) for v in np.asarray(values, dtype=float).ravel()]

    # -- replay and backprop -------------------------------------------

    def set_values(self, idx, values):
        """Overwrite leaf values ahead of a replay (vectorized)."""
        self._val[idx] = values

    def get_values(self, idx):
        return self._val[idx].copy()

    def get_grads(self, idx):
        if self._grad is None:
            raise RuntimeError("backward() has not been run on this tape")
        return self._grad[idx].copy()

    def forward(self):
        """Recompute every non-leaf node from current leaf values."""
        from . import _kernels
        bad = _kernels.forward(self._op, self._p1, self._p2, self._aux,
                               self._val, self.n)
        if bad >= 0:
            raise GraphError(
                f"non-finite value in {_OP_NAMES[int(self._op[bad])]}", bad)

    def backward(self, out):
        """Reverse sweep from ``out``; fills gradients for every node."""
        from . import _kernels
        if isinstance(out, Value):
            out = out.i
        if self._grad is None or self._grad.shape[0] < self.n:
            self._grad = np.zeros(self._op.shape[0], dtype=np.float64)
        self._grad[: self.n] = 0.0
        bad = _kernels.backward(self._op, self._p1, self._p2, self._aux,
                                self._val, self._grad, int(out))
        if bad >= 0:
            raise GraphError(
                f"non-finite adjoint at {_OP_NAMES[int(self._op[bad])]}", bad)

    # -- node introspection --------------------------------------------

    def value(self, node):
        return float(self._val[node.i if isinstance(node, Value) else node])

    def grad(self, node):
        if self._grad is None:
            raise RuntimeError("backward() has not been run on this tape")
        return float(self._grad[node.i if isinstance(node, Value) else node])

    def __len__(self):
        return self.n


def _ediv(a, b):
    """a / b with C semantics: inf/nan instead of a raised exception."""
    try:
        return a / b
    except ZeroDivisionError:
        if a == 0.0:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)


def _epow(a, c):
    try:
        return a ** c
    except OverflowError:
        return math.inf
    except ZeroDivisionError:
        return math.inf
    except ValueError:
        return math.nan


def _esafe(fn, x):
    try:
        return fn(x)
    except OverflowError:
        return math.inf
    except ValueError:
        return math.nan


class Value:
    """Handle to one scalar node of a :class:`Tape`."""

    __slots__ = ("tape", "i")

    def __init__(self, tape, i):
        self.tape = tape
        self.i = i

    @property
    def data(self):
        return float(self.tape._val[self.i])

    @property
    def grad(self):
        return self.tape.grad(self)

    @property
    def op(self):
        return _OP_NAMES[int(self.tape._op[self.i])]

    @property
    def parents(self):
        t = self.tape
        return tuple(int(p) for p in (t._p1[self.i], t._p2[self.i]) if p >= 0)

    def __repr__(self):
        return f"Value({self.data!r}, op={self.op}, i={self.i})"

    # arithmetic; non-Value operands are treated as immediates

    def __add__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return Value(t, t._push(ADD, self.i, other.i, 0.0,
                                    t._val[self.i] + t._val[other.i]))
        other = float(other)
        return Value(t, t._push(ADDI, self.i, -1, other,
                                t._val[self.i] + other))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return Value(t, t._push(SUB, self.i, other.i, 0.0,
                                    t._val[self.i] - t._val[other.i]))
        return self.__add__(-float(other))

    def __rsub__(self, other):
        t = self.tape
        other = float(other)
        return Value(t, t._push(ISUB, self.i, -1, other,
                                other - t._val[self.i]))

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return Value(t, t._push(MUL, self.i, other.i, 0.0,
                                    t._val[self.i] * t._val[other.i]))
        other = float(other)
        return Value(t, t._push(MULI, self.i, -1, other,
                                t._val[self.i] * other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return Value(t, t._push(DIV, self.i, other.i, 0.0,
                                    _ediv(float(t._val[self.i]),
                                          float(t._val[other.i]))))
        return self.__mul__(1.0 / float(other))

    def __rtruediv__(self, other):
        t = self.tape
        recip = Value(t, t._push(POWC, self.i, -1, -1.0,
                                 _epow(float(t._val[self.i]), -1.0)))
        return recip.__mul__(other) if float(other) != 1.0 else recip

    def __neg__(self):
        t = self.tape
        return Value(t, t._push(NEG, self.i, -1, 0.0, -t._val[self.i]))

    def __pow__(self, exponent):
        t = self.tape
        e = float(exponent)
        return Value(t, t._push(POWC, self.i, -1, e,
                                _epow(float(t._val[self.i]), e)))


def _unary(op, fn):
    def apply(x):
        if not isinstance(x, Value):
            return fn(x)
        t = x.tape
        return Value(t, t._push(op, x.i, -1, 0.0,
                                _esafe(fn, float(t._val[x.i]))))
    return apply


def _sigmoid_scalar(x):
    return 1.0 / (1.0 + math.exp(-x)) if x > -709.0 else 0.0


exp = _unary(EXP, math.exp)
log = _unary(LOG, math.log)
tanh = _unary(TANH, math.tanh)
sqrt = _unary(SQRT, math.sqrt)
sigmoid = _unary(SIGMOID, _sigmoid_scalar)


def as_value(tape, x):
    """Coerce a float to a leaf on ``tape``; Values pass through."""
    return x if isinstance(x, Value) else tape.leaf(x)


def backward(loss):
    """Backpropagate from a scalar node and return it (micrograd style).

    Gradients are afterwards available as ``node.grad`` for every node
    of the same tape, parameters included.
    """
    loss.tape.backward(loss)
    return loss


# -- graph-to-graph differentiation ------------------------------------

_TANGENT_RULES = {}


def tangent_nodes(seed, targets):
    """Forward-mode sweep: d(target)/d(seed) as new nodes on the tape.

    Propagates tangents from ``seed`` in index order, creating nodes
    only along paths actually reached (everything else has an implicit
    zero tangent). Returns one Value per target; targets not influenced
    by the seed yield a shared zero leaf. The returned nodes are part of
    the tape, so they stay valid under replay and can be differentiated
    again - applying this twice yields second derivatives.
    """
    t = seed.tape
    stop = max(v.i for v in targets) if targets else seed.i
    tan = {seed.i: t.leaf(1.0)}
    op_a, p1_a, p2_a, aux_a, val_a = t._op, t._p1, t._p2, t._aux, t._val
    for i in range(seed.i + 1, stop + 1):
        op = int(op_a[i])
        if op == LEAF:
            continue
        a = int(p1_a[i])
        b = int(p2_a[i])
        ta = tan.get(a)
        tb = tan.get(b) if b >= 0 else None
        if ta is None and tb is None:
            continue
        node = Value(t, i)
        pa = Value(t, a)
        if op == ADD:
            d = ta + tb if (ta is not None and tb is not None) else (ta if ta is not None else tb)
        elif op == SUB:
            if ta is not None and tb is not None:
                d = ta - tb
            elif ta is not None:
                d = ta
            else:
                d = -tb
        elif op == MUL:
            pb = Value(t, b)
            if ta is not None and tb is not None:
                d = ta * pb + pa * tb
            elif ta is not None:
                d = ta * pb
            else:
                d = pa * tb
        elif op == DIV:
            pb = Value(t, b)
            if ta is not None and tb is not None:
                d = (ta - node * tb) / pb
            elif ta is not None:
                d = ta / pb
            else:
                d = -(node * tb) / pb
        elif op == NEG:
            d = -ta
        elif op == EXP:
            d = node * ta
        elif op == LOG:
            d = ta / pa
        elif op == TANH:
            d = (1.0 - node * node) * ta
        elif op == SIGMOID:
            d = node * (1.0 - node) * ta
        elif op == SQRT:
            d = ta / (2.0 * node)
        elif op == POWC:
            c = float(aux_a[i])
            d = (c * pa ** (c - 1.0)) * ta
        elif op == ADDI:
            d = ta
        elif op == MULI:
            d = ta * float(aux_a[i])
        elif op == ISUB:
            d = -ta
        else:  # pragma: no cover
            raise AssertionError(f"unhandled op {op}")
        tan[i] = d
    zero = None
    out = []
    for v in targets:
        got = tan.get(v.i)
        if got is None:
            if zero is None:
                zero = t.leaf(0.0)
            got = zero
        out.append(got)
    return out


def derivative_node(output, wrt):
    """Reverse-mode sweep built as graph nodes: d(output)/d(wrt).

    Walks the recorded graph backwards from ``output`` creating adjoint
    nodes, so the result is itself differentiable; nesting two calls
    gives a second derivative. Forward-mode (:func:`tangent_nodes`) is
    cheaper when one seed feeds many outputs; this is the counterpart
    for one output and is also what higher-order tests lean on.
    """
    t = output.tape
    adj = {output.i: t.leaf(1.0)}
    op_a, p1_a, p2_a, aux_a = t._op, t._p1, t._p2, t._aux
    for i in range(output.i, wrt.i - 1, -1):
        g = adj.pop(i, None)
        if i == wrt.i:
            return g if g is not None else t.leaf(0.0)
        if g is None or int(op_a[i]) == LEAF:
            continue
        op = int(op_a[i])
        a = int(p1_a[i])
        b = int(p2_a[i])
        node = Value(t, i)
        pa = Value(t, a)

        def acc(j, contrib):
            prev = adj.get(j)
            adj[j] = contrib if prev is None else prev + contrib

        if op == ADD:
            acc(a, g)
            acc(b, g)
        elif op == SUB:
            acc(a, g)
            acc(b, -g)
        elif op == MUL:
            acc(a, g * Value(t, b))
            acc(b, g * pa)
        elif op == DIV:
            pb = Value(t, b)
            acc(a, g / pb)
            acc(b, -(g * node) / pb)
        elif op == NEG:
            acc(a, -g)
        elif op == EXP:
            acc(a, g * node)
        elif op == LOG:
            acc(a, g / pa)
        elif op == TANH:
            acc(a, g * (1.0 - node * node))
        elif op == SIGMOID:
            acc(a, g * node * (1.0 - node))
        elif op == SQRT:
            acc(a, g / (2.0 * node))
        elif op == POWC:
            c = float(aux_a[i])
            acc(a, g * (c * pa ** (c - 1.0)))
        elif op == ADDI:
            acc(a, g)
        elif op == MULI:
            acc(a, g * float(aux_a[i]))
        elif op == ISUB:
            acc(a, -g)
        else:  # pragma: no cover
            raise AssertionError(f"unhandled op {op}")
    got = adj.get(wrt.i)
    return got if got is not None else t.leaf(0.0)
