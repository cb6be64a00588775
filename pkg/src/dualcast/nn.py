"""Networks and optimizer shared by every trainable model.

Two evaluation paths exist for each network and must agree: a fast
vectorized numpy forward for inference-scale work (Monte Carlo
forecasting, validation metrics), and a tape builder that records the
same arithmetic as scalar nodes for training. Training code records a
loss graph once and replays it, see :class:`CompiledLoss`.

Checkpoints are a line-oriented text format with hexadecimal float
literals, one record per parameter array::

    dualcast-params v1
    <name> <ndim> <dim0> <dim1> ... <hex float> <hex float> ...

``float.hex`` round-trips exactly, so save/load is bit-exact and the
bytes are deterministic.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import sigmoid, tanh


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite training steps."""


def glorot_uniform(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _leaf_matrix(tape, arr):
    """Nested lists of leaves mirroring a 1-D or 2-D array."""
    if arr.ndim == 1:
        return [tape.leaf(v) for v in arr.tolist()]
    return [[tape.leaf(v) for v in row] for row in arr.tolist()]


def bind_parameters(tape, model):
    """Create leaves for ``model.parameters()`` in canonical order.

    Returns ``(nodes, idx)`` where ``nodes`` maps parameter name to the
    nested-list mirror of the array and ``idx`` is the flat array of
    leaf indices aligned with ``flatten_parameters``.
    """
    nodes = {}
    spans = []
    for name, arr in model.parameters():
        start = tape.n
        nodes[name] = _leaf_matrix(tape, arr)
        spans.append(np.arange(start, tape.n))
    return nodes, np.concatenate(spans) if spans else np.empty(0, dtype=int)


def flatten_parameters(params):
    return np.concatenate([arr.ravel() for _, arr in params])


class MLP:
    """Fully connected net, tanh hidden layers, linear output."""

    def __init__(self, sizes, rng):
        self.sizes = tuple(int(s) for s in sizes)
        self.Ws = []
        self.bs = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.Ws.append(glorot_uniform(rng, fan_in, fan_out,
                                          (fan_out, fan_in)))
            self.bs.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def parameters(self):
        out = []
        for k, (W, b) in enumerate(zip(self.Ws, self.bs)):
            out.append((f"W{k}", W))
            out.append((f"b{k}", b))
        return out

    def forward_np(self, X):
        """X: (batch, in_dim) -> (batch, out_dim)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        h = X
        last = len(self.Ws) - 1
        for k, (W, b) in enumerate(zip(self.Ws, self.bs)):
            h = h @ W.T + b
            if k != last:
                h = np.tanh(h)
        return h

    def graph_outputs(self, nodes, x):
        """Record one forward pass; ``x`` is a list of input Values."""
        h = x
        last = len(self.Ws) - 1
        for k in range(len(self.Ws)):
            W, b = nodes[f"W{k}"], nodes[f"b{k}"]
            nh = []
            for o in range(len(W)):
                s = b[o]
                row = W[o]
                for i, xi in enumerate(h):
                    s = s + row[i] * xi
                nh.append(s if k == last else tanh(s))
            h = nh
        return h


class LSTM:
    """Stacked LSTM over a scalar sequence with a linear readout.

    Gate order inside each layer's stacked weight matrices is
    (input, forget, cell, output). The forget-gate bias starts at +1.
    Inputs are consumed in chronological order (oldest first).
    """

    def __init__(self, num_layers=5, hidden=128, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_layers = int(num_layers)
        self.hidden = int(hidden)
        h = self.hidden
        self.Wx = []
        self.Wh = []
        self.b = []
        for layer in range(self.num_layers):
            d_in = 1 if layer == 0 else h
            self.Wx.append(glorot_uniform(rng, d_in + h, h, (4 * h, d_in)))
            self.Wh.append(glorot_uniform(rng, d_in + h, h, (4 * h, h)))
            bias = np.zeros(4 * h)
            bias[h:2 * h] = 1.0
            self.b.append(bias)
        self.w_out = glorot_uniform(rng, h, 1, (h,))
        self.b_out = np.zeros(1)

    def parameters(self):
        out = []
        for k in range(self.num_layers):
            out.append((f"Wx{k}", self.Wx[k]))
            out.append((f"Wh{k}", self.Wh[k]))
            out.append((f"b{k}", self.b[k]))
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    def forward_np(self, windows):
        """windows: (batch, T) chronological -> (batch,) predictions."""
        X = np.atleast_2d(np.asarray(windows, dtype=float))
        B, T = X.shape
        h = self.hidden
        hs = [np.zeros((B, h)) for _ in range(self.num_layers)]
        cs = [np.zeros((B, h)) for _ in range(self.num_layers)]
        for t in range(T):
            x = X[:, t:t + 1]
            for k in range(self.num_layers):
                z = x @ self.Wx[k].T + hs[k] @ self.Wh[k].T + self.b[k]
                i = _sigmoid_np(z[:, :h])
                f = _sigmoid_np(z[:, h:2 * h])
                g = np.tanh(z[:, 2 * h:3 * h])
                o = _sigmoid_np(z[:, 3 * h:])
                cs[k] = f * cs[k] + i * g
                hs[k] = o * np.tanh(cs[k])
                x = hs[k]
        return hs[-1] @ self.w_out + self.b_out[0]

    def graph_output(self, nodes, window):
        """Record one forward pass; ``window`` is chronological Values."""
        h = self.hidden
        L = self.num_layers
        hs = [[None] * h for _ in range(L)]
        cs = [[None] * h for _ in range(L)]
        for t, x_t in enumerate(window):
            x = [x_t]
            for k in range(L):
                Wx, Wh, b = nodes[f"Wx{k}"], nodes[f"Wh{k}"], nodes[f"b{k}"]
                z = []
                for r in range(4 * h):
                    s = b[r]
                    rowx = Wx[r]
                    for i, xi in enumerate(x):
                        s = s + rowx[i] * xi
                    if t > 0:
                        rowh = Wh[r]
                        hprev = hs[k]
                        for i in range(h):
                            s = s + rowh[i] * hprev[i]
                    z.append(s)
                newc = []
                newh = []
                for j in range(h):
                    ig = sigmoid(z[j])
                    fg = sigmoid(z[h + j])
                    gg = tanh(z[2 * h + j])
                    og = sigmoid(z[3 * h + j])
                    c = ig * gg if t == 0 else fg * cs[k][j] + ig * gg
                    newc.append(c)
                    newh.append(og * tanh(c))
                cs[k] = newc
                hs[k] = newh
                x = hs[k]
        out = nodes["b_out"][0]
        w = nodes["w_out"]
        for j in range(h):
            out = out + w[j] * hs[-1][j]
        return out


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class OptimizerConfig:
    """Adam plus early-stopping settings."""

    iterations: int = 1000
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 1000
    tolerance: float = 1e-5
    log_every: int = 1


class Adam:
    """Adam with bias correction; skips non-finite gradient steps."""

    MAX_CONSECUTIVE_SKIPS = 10

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(arr) for _, arr in params]
        self.v = [np.zeros_like(arr) for _, arr in params]
        self.skipped = 0
        self._consecutive = 0

    @classmethod
    def from_config(cls, params, opt):
        return cls(params, lr=opt.learning_rate, beta1=opt.beta1,
                   beta2=opt.beta2, eps=opt.eps)

    def step(self, params, grads):
        """Update arrays in place; returns False if the step was skipped."""
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            self._consecutive += 1
            if self._consecutive >= self.MAX_CONSECUTIVE_SKIPS:
                raise TrainingDiverged(
                    f"{self._consecutive} consecutive non-finite gradient "
                    f"steps (total skipped: {self.skipped})")
            return False
        self._consecutive = 0
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (name, p), mom, vel, g in zip(params, self.m, self.v, grads):
            mom *= self.beta1
            mom += (1.0 - self.beta1) * g
            vel *= self.beta2
            vel += (1.0 - self.beta2) * g * g
            p -= self.lr * (mom / c1) / (np.sqrt(vel / c2) + self.eps)
        return True


class CompiledLoss:
    """A recorded loss graph replayed against live parameter arrays."""

    def __init__(self, tape, loss, param_idx, params, aux=None):
        self.tape = tape
        self.loss = loss
        self.param_idx = param_idx
        self.params = params          # list of (name, array), shared refs
        self.aux = aux or {}
        self._shapes = [arr.shape for _, arr in params]

    def evaluate(self):
        """Write current params, replay; returns the loss value."""
        self.tape.set_values(self.param_idx, flatten_parameters(self.params))
        self.tape.forward()
        return self.tape.value(self.loss)

    def aux_value(self, key):
        return self.tape.value(self.aux[key])

    def gradients(self):
        """Backward pass; returns grads shaped like the parameters."""
        self.tape.backward(self.loss)
        flat = self.tape.get_grads(self.param_idx)
        out = []
        pos = 0
        for shape in self._shapes:
            size = int(np.prod(shape)) if shape else 1
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        return out


@dataclass
class FitResult:
    """Outcome of :func:`minimize`: best-validation snapshot plus log."""

    best_params: list
    best_val: float
    best_iteration: int
    iterations_run: int
    history: list = field(default_factory=list)  # (iter, train, val)

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("iteration\ttrain_loss\tval_loss\n")
            for it, tr, va in self.history:
                fh.write(f"{it}\t{tr!r}\t{va!r}\n")


def minimize(compiled, opt, validation=None, seed_params=None):
    """Adam loop with best-validation early stopping.

    ``compiled`` is a :class:`CompiledLoss`; ``validation`` is an
    optional callable(params) -> float evaluated on the pre-step
    parameters (defaults to the training loss). Stops after
    ``opt.patience`` iterations without improving the best validation
    value by more than ``opt.tolerance``, restores nothing: the best
    snapshot is returned in the result and also written back into the
    live parameter arrays.
    """
    params = compiled.params
    adam = Adam.from_config(params, opt)
    best = [arr.copy() for _, arr in params]
    best_val = math.inf
    best_iter = 0
    since_improved = 0
    history = []
    it = 0
    for it in range(1, opt.iterations + 1):
        try:
            train = compiled.evaluate()
            val = validation(params) if validation is not None else train
            if math.isfinite(val) and val < best_val - opt.tolerance:
                best_val = val
                best_iter = it - 1
                best = [arr.copy() for _, arr in params]
                since_improved = 0
            else:
                since_improved += 1
                if since_improved >= opt.patience:
                    break
            grads = compiled.gradients()
        except engine.GraphError as err:
            adam.skipped += 1
            adam._consecutive += 1
            if adam._consecutive >= Adam.MAX_CONSECUTIVE_SKIPS:
                raise TrainingDiverged(
                    f"non-finite loss graph: {err}") from err
            continue
        if it % opt.log_every == 0 or it == opt.iterations:
            history.append((it, train, val))
        adam.step(params, grads)
    if best_val is math.inf and opt.iterations > 0:
        raise TrainingDiverged("no finite validation value was ever seen")
    for (name, arr), snap in zip(params, best):
        arr[...] = snap
    return FitResult(best, best_val, best_iter, it, history)


# -- checkpoints ---------------------------------------------------------

_MAGIC = "dualcast-params v1"


def save_params(path, params):
    """Write (name, array) records; bit-exact, deterministic bytes."""
    lines = [_MAGIC]
    for name, arr in params:
        a = np.asarray(arr, dtype=float)
        dims = " ".join(str(d) for d in a.shape)
        vals = " ".join(float.hex(v) for v in a.ravel().tolist())
        lines.append(f"{name} {a.ndim} {dims} {vals}".rstrip())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path):
    """Read records back; returns an ordered dict name -> ndarray."""
    out = {}
    with open(path) as fh:
        magic = fh.readline().rstrip("\n")
        if magic != _MAGIC:
            raise ValueError(f"not a parameter checkpoint: {path}")
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            name = parts[0]
            ndim = int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
            vals = [float.fromhex(v) for v in parts[2 + ndim:]]
            out[name] = np.array(vals).reshape(shape)
    return out


def restore_params(model, loaded):
    """Copy checkpoint arrays into a model's parameters, validating shape."""
    for name, arr in model.parameters():
        src = loaded[name]
        if src.shape != arr.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: "
                f"{src.shape} vs {arr.shape}")
        arr[...] = src
