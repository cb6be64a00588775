"""State-space core: discretization, filtering, smoothing oracles."""

import math

import numpy as np
import pytest

from dualcast import ssm
from dualcast.ssm import (ContinuousSSM, DiscreteSSM, GaussianBelief,
                          SingularInnovationError)


def _random_discrete(rng, m=3, stable=True):
    A = rng.normal(size=(m, m)) * (0.5 / m)
    if stable:
        A = A / max(1.0, np.max(np.abs(np.linalg.eigvals(A))) * 1.2)
    Lq = rng.normal(size=(m, m)) * 0.4
    Q = Lq @ Lq.T
    Lp = rng.normal(size=(m, m)) * 0.4
    P0 = Lp @ Lp.T + 0.1 * np.eye(m)
    H = np.zeros(m)
    H[0] = 1.0
    return DiscreteSSM(A=A, Q=Q, H=H, R=float(rng.uniform(0.05, 0.5)),
                       m0=rng.normal(size=m), P0=P0, dt=1.0)


# -- discretize -------------------------------------------------------------

def test_discretize_wiener_process():
    q = 1.7
    model = ContinuousSSM(F=[[0.0]], L=[[1.0]], Sigma_w=[[q]],
                          H=[1.0], R=0.1, P0=[[1.0]])
    A, Q = ssm.discretize(model, 2.0)
    assert A[0, 0] == pytest.approx(1.0)
    assert Q[0, 0] == pytest.approx(2.0 * q)


def test_discretize_identity_limit():
    model = ContinuousSSM(F=[[-1.0]], L=[[1.0]], Sigma_w=[[2.0]],
                          H=[1.0], R=0.1, P0=[[1.0]])
    A, Q = ssm.discretize(model, 1e-10)
    assert A[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert Q[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_discretize_matches_exponential_closed_form():
    # the 2-state augmented exponential model has known closed forms
    lam, q1, q2, dt = 0.7, 0.3, 0.1, 0.5
    model = ContinuousSSM(F=[[-lam, lam], [0.0, 0.0]],
                          L=[[1.0, 1.0], [0.0, 1.0]],
                          Sigma_w=np.diag([q1, q2]),
                          H=[1.0, 0.0], R=0.1, P0=np.eye(2))
    A, Q = ssm.discretize(model, dt)
    e = math.exp(-lam * dt)
    A_exact = np.array([[e, 1 - e], [0.0, 1.0]])
    Q_exact = np.array([
        [(q1 * (1 - e * e) + 2 * lam * dt * q2) / (2 * lam), dt * q2],
        [dt * q2, dt * q2]])
    assert np.max(np.abs(A - A_exact)) < 1e-10
    assert np.max(np.abs(Q - Q_exact)) < 1e-10


def test_discretize_rejects_bad_dt():
    model = ContinuousSSM(F=[[0.0]], L=[[1.0]], Sigma_w=[[1.0]],
                          H=[1.0], R=0.1, P0=[[1.0]])
    with pytest.raises(ValueError):
        ssm.discretize(model, 0.0)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ContinuousSSM(F=np.zeros((2, 2)), L=np.zeros((3, 1)),
                      Sigma_w=[[1.0]], H=[1.0, 0.0], R=0.1, P0=np.eye(2))


def test_semigroup_property():
    rng = np.random.default_rng(2)
    F = -np.eye(3) + 0.3 * rng.normal(size=(3, 3))
    model = ContinuousSSM(F=F, L=np.eye(3), Sigma_w=np.eye(3),
                          H=[1.0, 0, 0], R=0.1, P0=np.eye(3))
    A1, _ = ssm.discretize(model, 0.4)
    A2, _ = ssm.discretize(model, 0.9)
    A12, _ = ssm.discretize(model, 1.3)
    assert np.max(np.abs(A12 - A2 @ A1)) < 1e-10


# -- steady state ------------------------------------------------------------

def test_scalar_lyapunov():
    lam, q = 0.8, 1.2
    model = ContinuousSSM(F=[[-lam]], L=[[1.0]], Sigma_w=[[q]],
                          H=[1.0], R=0.1, P0=[[1.0]])
    P = ssm.steady_state_covariance(model)
    assert P[0, 0] == pytest.approx(q / (2 * lam))


def test_matern_base_block_steady_state():
    lam = 1.0
    q = 4.0 * lam ** 3
    model = ContinuousSSM(F=[[0.0, 1.0], [-lam * lam, -2 * lam]],
                          L=[[0.0], [1.0]], Sigma_w=[[q]],
                          H=[1.0, 0.0], R=0.1, P0=np.eye(2))
    P = ssm.steady_state_covariance(model)
    assert np.allclose(P, np.diag([1.0, lam ** 2]), atol=1e-12)
    # residual of the Lyapunov equation itself
    res = model.F @ P + P @ model.F.T + model.diffusion()
    assert np.linalg.norm(res) < 1e-10 * np.linalg.norm(model.diffusion())


def test_lyapunov_consistency_with_integral():
    # Q from the noise integral equals P_inf - A P_inf A^T (stationary case)
    rng = np.random.default_rng(5)
    F = -1.2 * np.eye(2) + 0.4 * rng.normal(size=(2, 2))
    model = ContinuousSSM(F=F, L=rng.normal(size=(2, 1)),
                          Sigma_w=[[0.8]], H=[1.0, 0.0], R=0.1, P0=np.eye(2))
    Pinf = ssm.steady_state_covariance(model)
    A, Q = ssm.discretize(model, 0.6)
    lhs = Pinf - A @ Pinf @ A.T
    assert np.linalg.norm(Q - lhs) < 1e-9 * max(1.0, np.linalg.norm(Q))


def test_no_steady_state_for_marginal_model():
    model = ContinuousSSM(F=[[0.0]], L=[[1.0]], Sigma_w=[[1.0]],
                          H=[1.0], R=0.1, P0=[[1.0]])
    with pytest.raises(ValueError, match="no finite steady state"):
        ssm.steady_state_covariance(model)


# -- Kalman filtering ---------------------------------------------------------

def test_exact_measurement_pins_first_component():
    model = DiscreteSSM(A=np.eye(2), Q=0.3 * np.eye(2), H=[1.0, 0.0],
                        R=0.0, m0=[5.0, -1.0], P0=np.eye(2), dt=1.0)
    step = ssm.kf_step(model, model.prior(), y=2.25)
    assert step.posterior.m[0] == pytest.approx(2.25)


def test_conjugate_gaussian_update():
    model = DiscreteSSM(A=[[1.0]], Q=[[0.0]], H=[1.0], R=1.0,
                        m0=[0.0], P0=[[1.0]], dt=1.0)
    step = ssm.kf_step(model, model.prior(), y=1.0)
    assert step.posterior.m[0] == pytest.approx(0.5)
    assert step.posterior.P[0, 0] == pytest.approx(0.5)
    assert step.nll_increment == pytest.approx(
        0.5 * math.log(4 * math.pi) + 0.25)
    assert step.innovation_var == pytest.approx(2.0)


def test_singular_innovation_raises():
    model = DiscreteSSM(A=[[1.0]], Q=[[0.0]], H=[1.0], R=0.0,
                        m0=[0.0], P0=[[0.0]], dt=1.0)
    with pytest.raises(SingularInnovationError):
        ssm.kf_step(model, model.prior(), y=1.0)


def test_single_observation_filter_equals_step():
    rng = np.random.default_rng(0)
    model = _random_discrete(rng)
    beliefs, nll = ssm.kf_filter(model, [0.7])
    step = ssm.kf_step(model, model.prior(), 0.7)
    assert nll == pytest.approx(step.nll_increment)
    assert np.allclose(beliefs[0].m, step.posterior.m)


def test_filter_requires_observations():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ssm.kf_filter(_random_discrete(rng), [])


@pytest.mark.parametrize("seed,T", [(0, 3), (1, 6), (2, 8)])
def test_filter_nll_matches_joint_gaussian(seed, T):
    rng = np.random.default_rng(seed)
    model = _random_discrete(rng)
    ys = rng.normal(size=T)
    _, nll = ssm.kf_filter(model, ys)
    oracle = ssm.joint_gaussian_nll(model, ys)
    assert nll == pytest.approx(oracle, abs=1e-8)


def test_large_noise_filter_approaches_prior_predictive():
    rng = np.random.default_rng(3)
    m = 2
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    model = DiscreteSSM(A=A, Q=np.zeros((2, 2)), H=[1.0, 0.0], R=1e9,
                        m0=[0.3, -0.2], P0=0.5 * np.eye(m), dt=1.0)
    ys = rng.normal(size=8)
    _, nll = ssm.kf_filter(model, ys)
    direct = 0.0
    mu, P = model.m0, model.P0
    for y in ys:
        mu = A @ mu
        P = A @ P @ A.T
        S = P[0, 0] + model.R
        direct += 0.5 * math.log(2 * math.pi * S) + 0.5 * (y - mu[0]) ** 2 / S
    assert nll == pytest.approx(direct, rel=1e-9)


def test_posterior_covariance_stays_psd():
    rng = np.random.default_rng(9)
    model = _random_discrete(rng, m=4)
    ys = rng.normal(size=40)
    beliefs, _ = ssm.kf_filter(model, ys)
    for b in beliefs:
        assert np.allclose(b.P, b.P.T)
        assert np.min(np.linalg.eigvalsh(b.P)) > -1e-9


# -- smoothing ----------------------------------------------------------------

def test_smoother_base_case():
    rng = np.random.default_rng(1)
    model = _random_discrete(rng)
    beliefs, _ = ssm.kf_filter(model, [0.4])
    sm = ssm.rts_smooth(model, beliefs)
    assert np.allclose(sm[0].m, beliefs[0].m)
    assert np.allclose(sm[0].P, beliefs[0].P)


def test_smoother_constant_state():
    model = DiscreteSSM(A=np.eye(2), Q=np.zeros((2, 2)), H=[1.0, 0.0],
                        R=0.5, m0=[0.0, 0.0], P0=np.eye(2), dt=1.0)
    ys = [1.0, 1.2, 0.9, 1.1]
    beliefs, _ = ssm.kf_filter(model, ys)
    sm = ssm.rts_smooth(model, beliefs)
    for s in sm:
        assert np.allclose(s.m, beliefs[-1].m, atol=1e-10)


def test_smoother_matches_joint_conditioning():
    rng = np.random.default_rng(11)
    model = _random_discrete(rng, m=2)
    T = 5
    ys = rng.normal(size=T)
    beliefs, _ = ssm.kf_filter(model, ys)
    sm = ssm.rts_smooth(model, beliefs)

    # brute force: joint Gaussian over all states and observations
    m_dim = 2
    A, Q, H, R = model.A, model.Q, model.H, model.R
    mu_x = []
    mu, P = model.m0, model.P0
    cov = np.zeros((T * m_dim, T * m_dim))
    means = []
    Ps = []
    for k in range(T):
        mu = A @ mu
        P = A @ P @ A.T + Q
        means.append(mu)
        Ps.append(P)
    for k in range(T):
        cov[k * m_dim:(k + 1) * m_dim, k * m_dim:(k + 1) * m_dim] = Ps[k]
        C = Ps[k]
        for j in range(k + 1, T):
            C = C @ A.T
            cov[k * m_dim:(k + 1) * m_dim, j * m_dim:(j + 1) * m_dim] = C
            cov[j * m_dim:(j + 1) * m_dim, k * m_dim:(k + 1) * m_dim] = C.T
    mu_x = np.concatenate(means)
    Hbig = np.zeros((T, T * m_dim))
    for k in range(T):
        Hbig[k, k * m_dim:(k + 1) * m_dim] = H
    S = Hbig @ cov @ Hbig.T + R * np.eye(T)
    cross = cov @ Hbig.T
    resid = np.asarray(ys) - Hbig @ mu_x
    mu_post = mu_x + cross @ np.linalg.solve(S, resid)
    cov_post = cov - cross @ np.linalg.solve(S, cross.T)
    for k in range(T):
        sl = slice(k * m_dim, (k + 1) * m_dim)
        assert np.allclose(sm[k].m, mu_post[sl], atol=1e-8)
        assert np.allclose(sm[k].P, cov_post[sl, sl], atol=1e-8)


def test_forecast_moments_against_direct_propagation():
    rng = np.random.default_rng(21)
    model = _random_discrete(rng, m=2)
    belief = GaussianBelief(np.array([0.4, -0.3]),
                            np.array([[0.2, 0.05], [0.05, 0.3]]))
    means, variances = ssm.forecast_moments(model, belief, 4)
    m, P = belief.m, belief.P
    for h in range(4):
        m = model.A @ m
        P = model.A @ P @ model.A.T + model.Q
        assert means[h] == pytest.approx(model.H @ m)
        assert variances[h] == pytest.approx(model.H @ P @ model.H)
