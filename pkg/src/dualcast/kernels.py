"""Augmented Matern-3/2 and exponential state-space model builders.

Both kernels describe a stationary zero-mean block plus a Wiener trend
state so the observed component is their sum; the trend is what lets
the models track non-zero-mean signals. Closed forms for the discrete
transition and noise matrices are implemented twice: once on numpy
for filtering/forecasting and once as tape expressions so the
negative log-likelihood can be differentiated with respect to the
log-parameters during fitting.

The closed-form Q of the Matern model is the exact value of the noise
integral (cross-checked against the matrix-fraction discretization in
the tests); note Q11 here is *not* the commonly mis-printed variant
whose limit at dt -> 0 fails to vanish.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .engine import Tape, exp as vexp, log as vlog
from .ssm import ContinuousSSM, DiscreteSSM


class KernelKind(enum.Enum):
    """Augmented kernel families; the state dimension is fixed by kind."""

    MATERN32 = "matern32"
    EXPONENTIAL = "exponential"

    @property
    def state_dim(self):
        return 3 if self is KernelKind.MATERN32 else 2


@dataclass(frozen=True)
class KernelParams:
    """Trainable kernel hyperparameters, all strictly positive.

    Optimization happens on the logs (see :func:`fit_kernel`), which
    keeps Adam unconstrained while the natural values stay positive.
    """

    lam: float    # inverse length-scale, 1/time
    q_w1: float   # spectral density of the stationary block
    q_w2: float   # spectral density of the Wiener trend block
    R: float      # measurement noise variance

    def __post_init__(self):
        for name in ("lam", "q_w1", "q_w2", "R"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got "
                                 f"{getattr(self, name)!r}")

    def as_log_vector(self):
        return np.log([self.lam, self.q_w1, self.q_w2, self.R])

    @classmethod
    def from_log_vector(cls, v):
        lam, q1, q2, r = np.exp(np.asarray(v, dtype=float))
        return cls(float(lam), float(q1), float(q2), float(r))


def initial_params(ys, dt):
    """Scale-aware starting point for fitting."""
    ys = np.asarray(ys, dtype=float)
    var = max(float(np.var(ys)), 1e-10)
    return KernelParams(lam=1.0 / (10.0 * dt),
                        q_w1=var,
                        q_w2=0.1 * var / max(ys.size, 1),
                        R=0.01 * var)


# -- closed-form discrete matrices (numpy) -------------------------------

def matern32_matrices(p, dt):
    lam, q1, q2 = p.lam, p.q_w1, p.q_w2
    ldt = lam * dt
    e = math.exp(-ldt)
    e2 = math.exp(-2.0 * ldt)
    A = np.array([
        [(1.0 + ldt) * e, dt * e, 1.0 - (1.0 + ldt) * e],
        [-lam * lam * dt * e, (1.0 - ldt) * e, lam * lam * dt * e],
        [0.0, 0.0, 1.0],
    ])
    Q11 = dt * q2 + q1 * (1.0 - e2 * (1.0 + 2.0 * ldt + 2.0 * ldt * ldt)) \
        / (4.0 * lam ** 3)
    Q12 = 0.5 * dt * dt * q1 * e2
    Q22 = q1 * (1.0 - e2 * (1.0 - 2.0 * ldt + 2.0 * ldt * ldt)) / (4.0 * lam)
    Q = np.array([
        [Q11, Q12, dt * q2],
        [Q12, Q22, 0.0],
        [dt * q2, 0.0, dt * q2],
    ])
    return A, Q


def exponential_matrices(p, dt):
    lam, q1, q2 = p.lam, p.q_w1, p.q_w2
    e = math.exp(-lam * dt)
    A = np.array([[e, 1.0 - e], [0.0, 1.0]])
    Q11 = (q1 * (1.0 - e * e) + 2.0 * lam * dt * q2) / (2.0 * lam)
    Q = np.array([[Q11, dt * q2], [dt * q2, dt * q2]])
    return A, Q


def stationary_prior_diag(kind, p):
    """Diagonal P0: stationary-block variances, 1.0 for the trend."""
    if kind is KernelKind.MATERN32:
        return np.array([p.q_w1 / (4.0 * p.lam ** 3),
                         p.q_w1 / (4.0 * p.lam), 1.0])
    return np.array([p.q_w1 / (2.0 * p.lam), 1.0])


def _prior_mean(kind, y1):
    if kind is KernelKind.MATERN32:
        return np.array([y1, 0.0, y1])
    return np.array([y1, y1])


def build_matern32(p, dt, y1=0.0):
    """Discrete augmented Matern-3/2 model, prior anchored at ``y1``.

    The observable component and the trend state start at the first
    observation; with only three filter steps before forecasting there
    is no room for a long burn-in from a zero-mean prior.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, Q = matern32_matrices(p, dt)
    return DiscreteSSM(A=A, Q=Q, H=np.array([1.0, 0.0, 0.0]), R=p.R,
                       m0=_prior_mean(KernelKind.MATERN32, y1),
                       P0=np.diag(stationary_prior_diag(
                           KernelKind.MATERN32, p)),
                       dt=dt)


def build_exponential(p, dt, y1=0.0):
    """Discrete augmented exponential (OU + trend) model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, Q = exponential_matrices(p, dt)
    return DiscreteSSM(A=A, Q=Q, H=np.array([1.0, 0.0]), R=p.R,
                       m0=_prior_mean(KernelKind.EXPONENTIAL, y1),
                       P0=np.diag(stationary_prior_diag(
                           KernelKind.EXPONENTIAL, p)),
                       dt=dt)


def build(kind, p, dt, y1=0.0):
    if kind is KernelKind.MATERN32:
        return build_matern32(p, dt, y1)
    return build_exponential(p, dt, y1)


# -- continuous counterparts (for discretization cross-checks) -----------

def continuous_model(kind, p):
    """Augmented continuous-time model matching the closed forms."""
    if kind is KernelKind.MATERN32:
        lam = p.lam
        F = np.array([[0.0, 1.0, 0.0],
                      [-lam * lam, -2.0 * lam, lam * lam],
                      [0.0, 0.0, 0.0]])
        L = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        H = np.array([1.0, 0.0, 0.0])
    else:
        F = np.array([[-p.lam, p.lam], [0.0, 0.0]])
        L = np.array([[1.0, 1.0], [0.0, 1.0]])
        H = np.array([1.0, 0.0])
    return ContinuousSSM(F=F, L=L,
                         Sigma_w=np.diag([p.q_w1, p.q_w2]),
                         H=H, R=p.R,
                         P0=np.diag(stationary_prior_diag(kind, p)))


def stationary_block(kind, p):
    """The Hurwitz sub-model (no trend state); has a finite steady state."""
    if kind is KernelKind.MATERN32:
        lam = p.lam
        return ContinuousSSM(F=np.array([[0.0, 1.0], [-lam * lam, -2.0 * lam]]),
                             L=np.array([[0.0], [1.0]]),
                             Sigma_w=np.array([[p.q_w1]]),
                             H=np.array([1.0, 0.0]), R=p.R,
                             P0=np.eye(2))
    return ContinuousSSM(F=np.array([[-p.lam]]), L=np.array([[1.0]]),
                         Sigma_w=np.array([[p.q_w1]]),
                         H=np.array([1.0]), R=p.R, P0=np.eye(1))


# -- tape expressions -----------------------------------------------------

def matrices_nodes(kind, lam, q1, q2, dt):
    """(A, Q) as nested lists of tape Values; mirrors the numpy forms."""
    if kind is KernelKind.MATERN32:
        ldt = lam * dt
        e = vexp(-ldt)
        e2 = vexp(ldt * -2.0)
        lam2dt = lam * lam * dt
        A = [[(ldt + 1.0) * e, e * dt, 1.0 - (ldt + 1.0) * e],
             [-(lam2dt * e), (1.0 - ldt) * e, lam2dt * e],
             [None, None, 1.0]]
        q11 = q2 * dt + q1 * (1.0 - e2 * (1.0 + 2.0 * ldt + 2.0 * ldt * ldt)) \
            / (lam * lam * lam * 4.0)
        q12 = q1 * e2 * (0.5 * dt * dt)
        q13 = q2 * dt
        q22 = q1 * (1.0 - e2 * (1.0 - 2.0 * ldt + 2.0 * ldt * ldt)) / (lam * 4.0)
        Q = [[q11, q12, q13], [q12, q22, None], [q13, None, q13]]
    else:
        e = vexp(-(lam * dt))
        A = [[e, 1.0 - e], [None, 1.0]]
        q11 = (q1 * (1.0 - e * e) + lam * q2 * (2.0 * dt)) / (lam * 2.0)
        q12 = q2 * dt
        Q = [[q11, q12], [q12, q12]]
    return A, Q


def prior_nodes(kind, lam, q1, y1, tape):
    """(m0, P0-diagonal) as Values; mean entries are data constants."""
    if kind is KernelKind.MATERN32:
        m0 = [tape.leaf(y1), tape.leaf(0.0), tape.leaf(y1)]
        p0 = [q1 / (lam * lam * lam * 4.0), q1 / (lam * 4.0), tape.leaf(1.0)]
    else:
        m0 = [tape.leaf(y1), tape.leaf(y1)]
        p0 = [q1 / (lam * 2.0), tape.leaf(1.0)]
    return m0, p0


def kf_fold_nodes(A_rows, Q, R, m, P, ys, tape, predict_mean=None):
    """Record Kalman steps over observations; returns per-step NLL nodes.

    ``A_rows`` supplies the linear transition rows; the observation row
    is e1 (both kernels observe the first state component).
    ``predict_mean(k, m)`` optionally overrides the predicted mean
    vector (the hybrid models route the first component through an
    LSTM while the covariance still propagates through A).
    """
    dim = len(Q)
    incs = []
    for k, y in enumerate(ys):
        if predict_mean is None:
            m_pred = [_dot(A_rows[i], m) for i in range(dim)]
        else:
            m_pred = predict_mean(k, m)
        # P_pred = A P A^T + Q
        AP = [[_dot(A_rows[i], [P[r][j] for r in range(dim)])
               for j in range(dim)] for i in range(dim)]
        P_pred = [[_add(_dot(AP[i], A_rows[j]), Q[i][j])
                   for j in range(dim)] for i in range(dim)]
        S = P_pred[0][0] + R
        v = float(y) - m_pred[0]
        K = [P_pred[i][0] / S for i in range(dim)]
        m = [m_pred[i] + K[i] * v for i in range(dim)]
        P = [[P_pred[i][j] - K[i] * K[j] * S
              for j in range(dim)] for i in range(dim)]
        incs.append((vlog(S * (2.0 * math.pi)) + v * v / S) * 0.5)
    return incs, m, P


def _add(a, b):
    """a + b where either side may be None (a structural zero)."""
    if b is None:
        return a
    if a is None:
        return b
    return a + b


def _dot(u, v):
    """Sum of u[i]*v[i] with structural entries folded away.

    ``None`` marks a hard zero and plain floats mark constants baked
    into the closed forms; both keep the recorded graph small.
    """
    s = None
    for a, b in zip(u, v):
        if a is None or b is None:
            continue
        af = isinstance(a, float)
        bf = isinstance(b, float)
        if af and bf:
            term = a * b
            if term == 0.0:
                continue
        elif af:
            if a == 0.0:
                continue
            term = b if a == 1.0 else b * a
        elif bf:
            if b == 0.0:
                continue
            term = a if b == 1.0 else a * b
        else:
            term = a * b
        s = term if s is None else s + term
    return 0.0 if s is None else s


def diag_nodes(diag):
    """Dense nested-list covariance from diagonal entries (None off-diag)."""
    dim = len(diag)
    return [[diag[i] if i == j else None for j in range(dim)]
            for i in range(dim)]


def sum_nodes(nodes):
    s = nodes[0]
    for x in nodes[1:]:
        s = s + x
    return s


# -- maximum-likelihood fitting -------------------------------------------

@dataclass
class KernelFit:
    """Fitted parameters plus the optimizer trace."""

    kind: KernelKind
    params: KernelParams
    dt: float
    result: nn.FitResult


def nll_graph(kind, ys_train, ys_val, dt, y1=None):
    """Record the filter NLL as a replayable graph over log-params.

    Filtering runs over the concatenated train and validation series
    (one continuous record split in temporal order); the two summed
    NLL nodes are returned separately so training can descend on one
    while early stopping watches the other.
    """
    ys_train = list(np.asarray(ys_train, dtype=float))
    ys_val = list(np.asarray(ys_val, dtype=float)) if ys_val is not None else []
    tape = Tape(capacity=4096)
    start = tape.n
    log_leaves = [tape.leaf(0.0) for _ in range(4)]
    idx = np.arange(start, tape.n)
    lam, q1, q2, R = (vexp(x) for x in log_leaves)
    A, Q = matrices_nodes(kind, lam, q1, q2, dt)
    anchor = ys_train[0] if y1 is None else y1
    m0, p0 = prior_nodes(kind, lam, q1, anchor, tape)
    incs, _, _ = kf_fold_nodes(A, Q, R, m0, diag_nodes(p0),
                               ys_train + ys_val, tape)
    train_nll = sum_nodes(incs[:len(ys_train)])
    val_nll = sum_nodes(incs[len(ys_train):]) if ys_val else None
    return tape, train_nll, val_nll, idx


def fit_kernel(kind, ys, dt, opt, ys_val=None, init=None):
    """Minimize the filter NLL over log-parameters with Adam.

    Early stopping watches the validation NLL when ``ys_val`` is given
    (filtering continues across the split boundary), otherwise the
    training NLL. Returns the best-validation parameters.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.size < kind.state_dim:
        raise ValueError(f"need at least {kind.state_dim} observations")
    p_init = init if init is not None else initial_params(ys, dt)
    tape, train_nll, val_nll, idx = nll_graph(kind, ys, ys_val, dt)
    params = [("log_params", p_init.as_log_vector())]
    aux = {"val_nll": val_nll} if val_nll is not None else {}
    compiled = nn.CompiledLoss(tape, train_nll, idx, params, aux=aux)
    validation = None
    if val_nll is not None:
        def validation(_):
            return compiled.aux_value("val_nll")
    result = nn.minimize(compiled, opt, validation)
    return KernelFit(kind=kind,
                     params=KernelParams.from_log_vector(params[0][1]),
                     dt=dt, result=result)


# -- key-value serialization ----------------------------------------------

def save_kernel_params(path, kind, p, dt):
    """Plain ``key = value`` document; floats use shortest round-trip."""
    with open(path, "w") as fh:
        fh.write(f"kind = {kind.value}\n"
                 f"lambda = {p.lam!r}\n"
                 f"q_w1 = {p.q_w1!r}\n"
                 f"q_w2 = {p.q_w2!r}\n"
                 f"R = {p.R!r}\n"
                 f"dt = {dt!r}\n")


def load_kernel_params(path):
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    kind = KernelKind(kv["kind"])
    p = KernelParams(lam=float(kv["lambda"]), q_w1=float(kv["q_w1"]),
                     q_w2=float(kv["q_w2"]), R=float(kv["R"]))
    return kind, p, float(kv["dt"])
