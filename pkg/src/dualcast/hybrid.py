"""LSTM-integrated state transitions with the modified Kalman filter.

The hybrid models keep the linear-Gaussian covariance machinery of the
augmented kernels but replace the predicted mean of the observable
state component with an LSTM applied to a window of the last ``lag``
measurements. Covariances still propagate through the full linear A
(the LSTM contributes no Jacobian term), so the update step is the
ordinary Kalman update and the filter NLL keeps its usual form.

Window convention: window arrays are most-recent-first, matching the
bookkeeping of the recursive forecast (for the first forecast step the
window holds the last three measurements; afterwards predictions shift
in one slot at a time until only predictions remain). The LSTM itself
consumes sequences in chronological order, so windows are reversed at
the boundary.

During training the windows always contain true measurements; the
filter NLL is differentiated jointly with respect to the kernel
log-parameters and every LSTM weight (full backpropagation through the
gain, not a truncated variant).
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .engine import Tape, exp as vexp
from .kernels import (KernelKind, KernelParams, diag_nodes, initial_params,
                      kf_fold_nodes, matern32_matrices, exponential_matrices,
                      matrices_nodes, prior_nodes, sum_nodes)
from .ssm import GaussianBelief, _update, clip_psd, symmetrize


class ShiftEquivariantPredictor:
    """LSTM applied to in-window differences with a persistence skip.

    The raw window values sit around the signal level while the
    information for one-step prediction lives in their differences,
    two to three orders of magnitude smaller; a network fed raw values
    must learn near-exact cancellations before it can do anything
    useful. Re-expressing the window as (value - latest value) and
    predicting an increment on top of the latest value removes that
    bottleneck, and makes the predictor exactly shift-equivariant,
    which is the natural symmetry of the trend-augmented models. The
    composition is still just a learned function of the raw window.
    """

    def __init__(self, core):
        self.core = core

    def parameters(self):
        return self.core.parameters()

    def forward_np(self, windows):
        """windows: (batch, T) chronological; returns (batch,)."""
        W = np.atleast_2d(np.asarray(windows, dtype=float))
        latest = W[:, -1]
        return latest + self.core.forward_np(W - latest[:, None])

    def graph_output(self, nodes, window):
        latest = window[-1]
        diffs = [w - latest for w in window[:-1]] + [latest * 0.0]
        return latest + self.core.graph_output(nodes, diffs)


@dataclass
class HybridSSM:
    """Kernel matrices plus the learned mean predictor for the first state.

    ``lstm`` is any object with forward_np / graph_output / parameters;
    a raw :class:`dualcast.nn.LSTM` or its shift-equivariant wrapper.
    """

    kind: KernelKind
    params: KernelParams
    lstm: object
    dt: float
    lag: int = 3

    def matrices(self):
        if self.kind is KernelKind.MATERN32:
            return matern32_matrices(self.params, self.dt)
        return exponential_matrices(self.params, self.dt)

    def discrete(self, y1=0.0):
        """Linear skeleton as a discrete model (priors, covariances)."""
        from . import kernels
        return kernels.build(self.kind, self.params, self.dt, y1)

    def predict_window(self, windows):
        """LSTM prediction for most-recent-first window(s)."""
        W = np.atleast_2d(np.asarray(windows, dtype=float))
        out = self.lstm.forward_np(W[:, ::-1])
        return out if np.asarray(windows).ndim > 1 else float(out[0])


def hybrid_kf_step(model, belief, window, y, first_mean=None):
    """Modified prediction, ordinary update.

    The predicted mean routes its first component through the LSTM
    (H m^- therefore equals the LSTM output); ``first_mean`` overrides
    that prediction, which is how the tests collapse the hybrid onto
    the purely linear filter.
    """
    window = np.asarray(window, dtype=float)
    if window.size != model.lag:
        raise ValueError(f"window must hold {model.lag} values")
    A, Q = model.matrices()
    z = model.predict_window(window) if first_mean is None else first_mean
    m_pred = A @ belief.m
    m_pred[0] = z
    P_pred = symmetrize(A @ belief.P @ A.T + Q)
    return _update(GaussianBelief(m_pred, P_pred), np.eye(len(Q))[0],
                   model.params.R, y)


def hybrid_filter(model, ys, steps=None, first_mean=None):
    """Filter the tail of ``ys`` with lagged windows drawn from it.

    Observations before the filtered range only supply window content;
    when a window would reach past the start of ``ys`` it is edge-padded
    with the oldest available value. Returns (beliefs, nll).
    """
    ys = np.asarray(ys, dtype=float)
    lag = model.lag
    if steps is None:
        steps = max(ys.size - lag, 1)
    start = ys.size - steps
    anchor = ys[start - 1] if start > 0 else ys[0]
    prior = model.discrete(y1=anchor).prior()
    belief = prior
    beliefs = []
    nll = 0.0
    for k in range(start, ys.size):
        idx = np.clip(np.arange(k - 1, k - 1 - lag, -1), 0, None)
        window = ys[idx]
        fm = None if first_mean is None else first_mean(window, belief.m)
        step = hybrid_kf_step(model, belief, window, ys[k], first_mean=fm)
        belief = step.posterior
        beliefs.append(step)
        nll += step.nll_increment
    return beliefs, nll


def forecast_hybrid(model, belief, recent, horizon, n_samples, rng,
                    first_mean=None):
    """Monte Carlo rollout of the hybrid transition.

    Samples initial states from ``belief``, then repeatedly applies the
    hybrid transition with process noise. Every trajectory keeps its
    own window (most-recent-first); after ``lag`` steps the windows
    contain only that trajectory's previous sampled values. Returns an
    (n_samples, horizon) array of the first state component.
    """
    recent = np.asarray(recent, dtype=float)
    if recent.size != model.lag:
        raise ValueError(f"need the last {model.lag} observations")
    A, Q = model.matrices()
    dim = A.shape[0]
    X = sample_gaussian(belief, n_samples, rng)
    windows = np.tile(recent, (n_samples, 1))
    cQ = psd_cholesky(Q)
    out = np.empty((n_samples, horizon))
    for h in range(horizon):
        if first_mean is None:
            z = model.predict_window(windows)
        else:
            z = first_mean(windows, X)
        lin = X @ A[1:].T
        X = np.column_stack([z, lin])
        if cQ is not None:
            X = X + rng.standard_normal((n_samples, dim)) @ cQ.T
        out[:, h] = X[:, 0]
        windows = np.column_stack([X[:, 0], windows[:, :-1]])
    return out


def sample_gaussian(belief, n, rng):
    """Draw from N(m, P), clipping tiny negative eigenvalues if needed."""
    try:
        c = np.linalg.cholesky(belief.P)
    except np.linalg.LinAlgError:
        import warnings
        warnings.warn("initial covariance not positive definite; "
                      "sampling from its PSD projection")
        c = psd_cholesky(clip_psd(belief.P))
        if c is None:
            return np.tile(belief.m, (n, 1))
    return belief.m + rng.standard_normal((n, belief.m.size)) @ c.T


def psd_cholesky(Q):
    """Cholesky-like factor of a PSD matrix; None for the zero matrix."""
    if not np.any(Q):
        return None
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(symmetrize(Q))
        w = np.clip(w, 0.0, None)
        return V * np.sqrt(w)


# -- joint maximum-likelihood training -------------------------------------

@dataclass
class HybridFit:
    model: HybridSSM
    result: nn.FitResult
    history: list = field(default_factory=list)


def nll_graph(kind, lstm, ys_train, ys_val, dt):
    """Record the modified-filter NLL over log-params and LSTM weights."""
    ys_train = np.asarray(ys_train, dtype=float)
    ys_val = np.asarray(ys_val, dtype=float) if ys_val is not None \
        else np.empty(0)
    ys = np.concatenate([ys_train, ys_val])
    lag = 3
    tape = Tape(capacity=1 << 16)
    start = tape.n
    log_leaves = [tape.leaf(0.0) for _ in range(4)]
    lstm_nodes, lstm_idx = nn.bind_parameters(tape, lstm)
    idx = np.concatenate([np.arange(start, start + 4), lstm_idx])
    lam, q1, q2, R = (vexp(x) for x in log_leaves)
    A, Q = matrices_nodes(kind, lam, q1, q2, dt)
    obs = [tape.leaf(v) for v in ys.tolist()]
    m0, p0 = prior_nodes(kind, lam, q1, float(ys[lag - 1]), tape)

    def predict_mean(k, m):
        # k counts filtered steps; absolute index is k + lag
        j = k + lag
        window = [obs[j - 1], obs[j - 2], obs[j - 3]]
        z = lstm.graph_output(lstm_nodes, window[::-1])
        rest = [_row_dot(A[i], m) for i in range(1, len(A))]
        return [z] + rest

    incs, _, _ = kf_fold_nodes(A, Q, R, m0, diag_nodes(p0),
                               ys[lag:].tolist(), tape,
                               predict_mean=predict_mean)
    n_train_incs = ys_train.size - lag
    train_nll = sum_nodes(incs[:n_train_incs])
    val_nll = sum_nodes(incs[n_train_incs:]) if ys_val.size else None
    return tape, train_nll, val_nll, idx


def _row_dot(row, vec):
    from .kernels import _dot
    return _dot(row, vec)


def _scale_aware_start(core, ys):
    """Match the first-layer input scale to the window differences.

    The equivariant predictor feeds the core in-window differences;
    their magnitude varies with the sampled signal, so the input
    weights start at a size that puts the gates in their active range.
    Only the starting point changes, not the model class.
    """
    scale = max(float(np.std(np.diff(ys))), 1e-6)
    core.Wx[0] /= scale
    core.w_out *= scale   # so the first predictions sit near persistence
    core.b_out[...] = 0.0


def fit_hybrid(kind, ys, ys_val, dt, opt, lstm_layers=5, lstm_hidden=128,
               seed=0, init=None, lstm=None):
    """Jointly fit kernel log-parameters and LSTM weights by NLL descent.

    Early stopping watches the validation NLL (the filter continues
    across the split); the best-validation model is returned. With
    ``opt.iterations == 0`` the initialized model comes back unchanged.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.size <= 3:
        raise ValueError("training series must be longer than the lag")
    rng = np.random.default_rng(seed)
    if lstm is None:
        core = nn.LSTM(num_layers=lstm_layers, hidden=lstm_hidden, rng=rng)
        _scale_aware_start(core, ys)
        lstm = ShiftEquivariantPredictor(core)
    p_init = init if init is not None else initial_params(ys, dt)
    tape, train_nll, val_nll, idx = nll_graph(kind, lstm, ys, ys_val, dt)
    params = [("log_params", p_init.as_log_vector())] + lstm.parameters()
    aux = {"val_nll": val_nll} if val_nll is not None else {}
    compiled = nn.CompiledLoss(tape, train_nll, idx, params, aux=aux)
    validation = None
    if val_nll is not None:
        def validation(_):
            return compiled.aux_value("val_nll")
    result = nn.minimize(compiled, opt, validation)
    model = HybridSSM(kind=kind,
                      params=KernelParams.from_log_vector(params[0][1]),
                      lstm=lstm, dt=dt)
    return HybridFit(model=model, result=result, history=result.history)


# -- checkpointing ----------------------------------------------------------

def save_hybrid(directory, model):
    """Kernel key-value document plus network checkpoint in one directory."""
    import os
    from . import kernels
    os.makedirs(directory, exist_ok=True)
    kernels.save_kernel_params(os.path.join(directory, "kernel.txt"),
                               model.kind, model.params, model.dt)
    predictor = model.lstm
    wrapped = isinstance(predictor, ShiftEquivariantPredictor)
    core = predictor.core if wrapped else predictor
    meta = [("lstm_shape", np.array([float(core.num_layers),
                                     float(core.hidden), float(wrapped)]))]
    nn.save_params(os.path.join(directory, "lstm.txt"),
                   meta + core.parameters())


def load_hybrid(directory):
    import os
    from . import kernels
    kind, params, dt = kernels.load_kernel_params(
        os.path.join(directory, "kernel.txt"))
    loaded = nn.load_params(os.path.join(directory, "lstm.txt"))
    layers, hidden, wrapped = (int(v) for v in loaded.pop("lstm_shape"))
    core = nn.LSTM(num_layers=layers, hidden=hidden,
                   rng=np.random.default_rng(0))
    nn.restore_params(core, loaded)
    lstm = ShiftEquivariantPredictor(core) if wrapped else core
    return HybridSSM(kind=kind, params=params, lstm=lstm, dt=dt)
