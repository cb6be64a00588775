"""Linear-Gaussian state-space models with scalar observations.

Continuous-time models ``dx = F x dt + L dw`` (white noise with
spectral density Sigma_w) are discretized exactly: the transition is
the matrix exponential and the process noise covariance comes from a
matrix fraction decomposition of the 2m x 2m block system, so no
closed form is needed. Filtering, smoothing and the accumulated
negative log-likelihood (the energy function minimized during
parameter estimation) operate on the discrete form.

All types are immutable value objects and all operations are pure
functions, so concurrent use needs no coordination.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

PSD_EIG_FLOOR = -1e-9


class SingularInnovationError(ValueError):
    """Innovation variance S <= 0; the update is undefined."""


def _as_row(H):
    H = np.asarray(H, dtype=float)
    return H.reshape(-1) if H.ndim > 1 else H


def symmetrize(P):
    return 0.5 * (P + P.T)


def clip_psd(P, floor=PSD_EIG_FLOOR):
    """Symmetrize and clamp slightly-negative eigenvalues to zero."""
    P = symmetrize(np.asarray(P, dtype=float))
    w, V = np.linalg.eigh(P)
    if w.min() >= 0.0:
        return P
    if w.min() < floor * max(1.0, abs(w.max())):
        raise ValueError(f"covariance has eigenvalue {w.min():.3e}, "
                         "below the PSD tolerance")
    w = np.clip(w, 0.0, None)
    return symmetrize((V * w) @ V.T)


@dataclass(frozen=True)
class ContinuousSSM:
    """dx = F x dt + L dw with y_k = H x(t_k) + r_k."""

    F: np.ndarray        # (m, m) drift
    L: np.ndarray        # (m, s) noise influence
    Sigma_w: np.ndarray  # (s, s) white-noise spectral density
    H: np.ndarray        # (m,) observation row
    R: float             # measurement noise variance
    P0: np.ndarray       # (m, m) initial covariance

    def __post_init__(self):
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        object.__setattr__(self, "L", np.asarray(self.L, dtype=float))
        object.__setattr__(self, "Sigma_w",
                           np.asarray(self.Sigma_w, dtype=float))
        object.__setattr__(self, "H", _as_row(self.H))
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float))
        m = self.F.shape[0]
        s = self.Sigma_w.shape[0]
        if self.F.shape != (m, m) or self.L.shape != (m, s) \
                or self.Sigma_w.shape != (s, s) or self.H.shape != (m,) \
                or self.P0.shape != (m, m):
            raise ValueError("inconsistent model dimensions: "
                             f"F{self.F.shape} L{self.L.shape} "
                             f"Sigma_w{self.Sigma_w.shape} H{self.H.shape} "
                             f"P0{self.P0.shape}")

    @property
    def dim(self):
        return self.F.shape[0]

    def diffusion(self):
        return self.L @ self.Sigma_w @ self.L.T


@dataclass(frozen=True)
class DiscreteSSM:
    """x_k = A x_{k-1} + q, y_k = H x_k + r, with prior N(m0, P0)."""

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: float
    m0: np.ndarray
    P0: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "H", _as_row(self.H))
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float))
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        m = self.A.shape[0]
        if self.Q.shape != (m, m) or self.H.shape != (m,) \
                or self.m0.shape != (m,) or self.P0.shape != (m, m):
            raise ValueError("inconsistent model dimensions")

    @property
    def dim(self):
        return self.A.shape[0]

    def prior(self):
        return GaussianBelief(self.m0, self.P0)


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a filtered or predicted state."""

    m: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))


@dataclass(frozen=True)
class FilterStep:
    """One prediction/update cycle and its likelihood contribution."""

    prior: GaussianBelief
    posterior: GaussianBelief
    innovation: float
    innovation_var: float
    gain: np.ndarray
    nll_increment: float


def discretize(model, dt):
    """Exact discretization of a ContinuousSSM over a step ``dt``.

    A = exp(F dt); Q is the noise integral, evaluated through matrix
    fraction decomposition: exponentiate the block system
    [[F, L Sigma_w L^T], [0, -F^T]] * dt and form Q = C @ A^T from its
    upper blocks. Q is symmetrized on return.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = model.dim
    blk = np.zeros((2 * m, 2 * m))
    blk[:m, :m] = model.F
    blk[:m, m:] = model.diffusion()
    blk[m:, m:] = -model.F.T
    E = scipy.linalg.expm(blk * dt)
    A = E[:m, :m]
    Q = symmetrize(E[:m, m:] @ A.T)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Q))):
        raise FloatingPointError("matrix exponential overflowed; "
                                 "check eigenvalues of F against dt")
    return A, Q


def steady_state_covariance(model):
    """Stationary covariance P solving F P + P F^T + L Sigma_w L^T = 0.

    Only exists when F is Hurwitz; marginally stable blocks (Wiener
    trends) must be stripped by the caller before asking for a steady
    state.
    """
    eig = np.linalg.eigvals(model.F)
    if np.max(eig.real) >= 0.0:
        raise ValueError("no finite steady state: F is not Hurwitz "
                         f"(max Re eig = {np.max(eig.real):.3e})")
    P = scipy.linalg.solve_continuous_lyapunov(model.F, -model.diffusion())
    return symmetrize(P)


def kf_step(model, belief, y):
    """One Kalman prediction + update against a scalar observation."""
    A, Q, H, R = model.A, model.Q, model.H, model.R
    m_pred = A @ belief.m
    P_pred = symmetrize(A @ belief.P @ A.T + Q)
    prior = GaussianBelief(m_pred, P_pred)
    return _update(prior, H, R, y)


def _update(prior, H, R, y):
    PH = prior.P @ H
    S = float(H @ PH + R)
    if S <= 0.0:
        raise SingularInnovationError(f"innovation variance {S!r} <= 0")
    v = float(y - H @ prior.m)
    K = PH / S
    m_post = prior.m + K * v
    P_post = symmetrize(prior.P - np.outer(K, K) * S)
    nll = 0.5 * np.log(2.0 * np.pi * S) + 0.5 * v * v / S
    return FilterStep(prior, GaussianBelief(m_post, P_post), v, S, K, nll)


def kf_filter(model, ys):
    """Filter a scalar series; returns posteriors and the summed NLL.

    The energy starts from zero (non-informative parameter prior), so
    the total equals the negative log marginal likelihood of ``ys``.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.size == 0:
        raise ValueError("observation sequence is empty")
    belief = model.prior()
    beliefs = []
    nll = 0.0
    for y in ys:
        step = kf_step(model, belief, y)
        belief = step.posterior
        beliefs.append(belief)
        nll += step.nll_increment
    return beliefs, nll


def rts_smooth(model, beliefs):
    """Rauch-Tung-Striebel pass over filtered beliefs.

    Predicted moments are recomputed from the model, so the input is
    exactly what :func:`kf_filter` returned. A singular predicted
    covariance gets a small diagonal bump rather than failing.
    """
    A, Q = model.A, model.Q
    out = [beliefs[-1]]
    for k in range(len(beliefs) - 2, -1, -1):
        f = beliefs[k]
        m_pred = A @ f.m
        P_pred = symmetrize(A @ f.P @ A.T + Q)
        try:
            G = np.linalg.solve(P_pred, A @ f.P).T
        except np.linalg.LinAlgError:
            bump = 1e-12 * max(1.0, float(np.trace(P_pred)))
            G = np.linalg.solve(P_pred + bump * np.eye(model.dim),
                                A @ f.P).T
        nxt = out[0]
        m_s = f.m + G @ (nxt.m - m_pred)
        P_s = symmetrize(f.P + G @ (nxt.P - P_pred) @ G.T)
        out.insert(0, GaussianBelief(m_s, P_s))
    return out


def forecast_moments(model, belief, horizon):
    """Analytic h-step predictive mean/variance of the observed scalar.

    Propagates (m, P) through h = 1..horizon prediction steps with no
    updates; returns arrays of H m_h and H P_h H^T.
    """
    A, Q, H = model.A, model.Q, model.H
    m, P = belief.m.copy(), belief.P.copy()
    means = np.empty(horizon)
    variances = np.empty(horizon)
    for h in range(horizon):
        m = A @ m
        P = symmetrize(A @ P @ A.T + Q)
        means[h] = H @ m
        variances[h] = H @ P @ H
    return means, variances


def joint_gaussian_nll(model, ys):
    """Brute-force negative log marginal likelihood of a scalar series.

    Assembles the full T x T covariance of (y_1..y_T) from the prior
    and the recursion, then evaluates the joint Gaussian density
    directly. Quadratic in memory and cubic in time; an independent
    oracle for :func:`kf_filter`, not a production path.
    """
    ys = np.asarray(ys, dtype=float)
    T = ys.size
    A, Q, H, R = model.A, model.Q, model.H, model.R
    m = model.dim
    # state means and pairwise covariances
    means = []
    covs = {}
    mu, P = model.m0, model.P0
    for k in range(T):
        mu = A @ mu
        P = A @ P @ A.T + Q
        means.append(mu)
        covs[(k, k)] = P
    for k in range(T):
        C = covs[(k, k)]
        for j in range(k + 1, T):
            C = C @ A.T
            covs[(k, j)] = C
    ym = np.array([H @ means[k] for k in range(T)])
    S = np.empty((T, T))
    for k in range(T):
        for j in range(k, T):
            S[k, j] = S[j, k] = H @ covs[(k, j)] @ H
        S[k, k] += R
    resid = ys - ym
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * S)
    return 0.5 * (logdet + resid @ np.linalg.solve(S, resid))
