"""Monte Carlo input forecasting, recursive output prediction, metrics."""

import math

import numpy as np
import pytest

from dualcast import forecast as fc
from dualcast import hybrid as H
from dualcast import kernels as K
from dualcast import nn, pinn, ssm
from dualcast.forecast import ForecastConfig, ForecastEnsemble


def _conv_model(lam=0.5, q1=0.4, q2=0.01, R=0.02, dt=1.0):
    return fc.ConventionalInputModel(
        K.KernelKind.MATERN32, K.KernelParams(lam, q1, q2, R), dt)


# -- metrics -------------------------------------------------------------------

def test_metrics_perfect_mean():
    samples = np.tile([1.0, 2.0, 3.0], (7, 1))
    m = fc.metrics(ForecastEnsemble(samples), [1.0, 2.0, 3.0])
    assert m.mse == 0.0 and m.mae == 0.0 and m.mre == 0.0


def test_metrics_known_gaussian_values():
    rng = np.random.default_rng(0)
    # ensemble with mean ~0 and var ~1 scored against truth 1
    samples = np.array([[1.0, 1.0], [-1.0, -1.0]])  # mean 0, var 1
    m = fc.metrics(ForecastEnsemble(samples), [1.0, 1.0])
    assert m.mse == pytest.approx(1.0)
    assert m.loglik[0] == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5,
                                        rel=1e-9)


def test_metrics_relative_error_definition():
    samples = np.array([[1.1]])
    m = fc.metrics(ForecastEnsemble(samples), [1.0])
    assert m.mre == pytest.approx(0.1)


def test_metrics_skips_zero_truth_for_mre():
    samples = np.array([[1.0, 2.0]])
    m = fc.metrics(ForecastEnsemble(samples), [0.0, 1.0])
    assert m.mre == pytest.approx(1.0)  # only the second step counts


def test_metrics_requires_alignment():
    with pytest.raises(ValueError):
        fc.metrics(ForecastEnsemble(np.zeros((3, 4))), [1.0, 2.0])


def test_variance_floor_prevents_degenerate_loglik():
    samples = np.ones((5, 2))
    m = fc.metrics(ForecastEnsemble(samples), [1.0, 1.0])
    assert np.all(np.isfinite(m.loglik))


# -- conventional input forecasting ------------------------------------------------

def test_noiseless_sample_follows_deterministic_recursion():
    """With Q = 0 every trajectory is A^h applied to its sampled start.

    The first state component of the exponential model then has the
    closed form e^{-lam h} a + (1 - e^{-lam h}) b; recover (a, b) from
    the first two steps and check the rest follows exactly.
    """
    lam = 0.5
    model = fc.ConventionalInputModel(
        K.KernelKind.EXPONENTIAL,
        K.KernelParams(lam, 1e-300, 1e-300, 1e-6), 1.0)
    history = np.array([2.0, 2.05, 2.1])
    cfg = ForecastConfig(horizon=6, samples=3, seed=0)
    paths = model.sample_paths(history, cfg, fc.channel_rng(0, 0))
    e = np.exp(-lam * np.arange(1, 7))
    for j in range(3):
        M = np.array([[e[0], 1 - e[0]], [e[1], 1 - e[1]]])
        a, b = np.linalg.solve(M, paths[j, :2])
        assert np.allclose(paths[j], e * a + (1 - e) * b, atol=1e-9)
    # and the run is reproducible under the same stream
    again = model.sample_paths(history, cfg, fc.channel_rng(0, 0))
    assert np.array_equal(paths, again)


@pytest.mark.slow
def test_ensemble_mean_matches_analytic_propagation():
    model = _conv_model()
    rng = np.random.default_rng(1)
    history = 2.0 + 0.1 * rng.standard_normal(3)
    cfg = ForecastConfig(horizon=8, samples=10000, seed=5)
    paths = model.sample_paths(history, cfg, fc.channel_rng(5, 0))
    means, variances = model.analytic_moments(history, cfg)
    err = np.abs(paths.mean(axis=0) - means)
    assert np.all(err < 3.0 * np.sqrt(variances / cfg.samples))


@pytest.mark.slow
def test_monte_carlo_error_shrinks_like_inverse_sqrt_m():
    model = _conv_model()
    history = np.array([2.0, 2.1, 2.05])
    cfg0 = ForecastConfig(horizon=6, samples=1, seed=0)
    means, _ = model.analytic_moments(history, cfg0)
    Ms = [1000, 4000, 16000, 64000]
    avg_errs = []
    for M in Ms:
        errs = []
        for rep in range(12):
            cfg = ForecastConfig(horizon=6, samples=M, seed=rep)
            paths = model.sample_paths(history, cfg,
                                       fc.channel_rng(rep, M))
            errs.append(np.mean(np.abs(paths.mean(axis=0) - means)))
        avg_errs.append(np.mean(errs))
    slope = np.polyfit(np.log(Ms), np.log(avg_errs), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.15)


def test_forecast_inputs_deterministic_under_seed():
    model = _conv_model()
    cfg = ForecastConfig(horizon=4, samples=50, seed=9)
    hist = {"C_in": np.array([2.0, 2.1, 1.9])}
    a = fc.forecast_inputs({"C_in": model}, hist, cfg)["C_in"].samples
    b = fc.forecast_inputs({"C_in": model}, hist, cfg)["C_in"].samples
    assert np.array_equal(a, b)


def test_nonpsd_initial_covariance_clipped_with_warning():
    belief = ssm.GaussianBelief(np.zeros(2), np.array([[1.0, 0.0],
                                                       [0.0, -1e-12]]))
    with pytest.warns(UserWarning, match="PSD projection"):
        draws = H.sample_gaussian(belief, 10, np.random.default_rng(0))
    assert np.all(np.isfinite(draws))


# -- output forecasting --------------------------------------------------------------

class _ConstHead:
    """One-output head predicting a constant, for phase separation tests."""

    def __init__(self, value):
        self.value = value

    def predict_np(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.value)


def test_constant_head_gives_zero_variance_outputs():
    ens = {"C_in": ForecastEnsemble(np.random.default_rng(0)
                                    .normal(size=(20, 5)))}
    cfg = ForecastConfig(horizon=5, samples=20)
    out = fc.forecast_outputs(_ConstHead(3.3), ens, cfg=cfg)
    assert np.allclose(out.samples, 3.3)
    assert np.allclose(out.var, 0.0)


def test_stepwise_prediction_matches_chained_single_steps():
    """Feeding the true inputs step by step reproduces the single-step
    test predictions applied in sequence."""
    rng = np.random.default_rng(2)
    tb = pinn.gauss_legendre_tableau(2)
    net = nn.MLP((1, 6, 3), rng)
    head = pinn.CstrHead(net, dt=1.0, params=pinn.CstrParams(), tableau=tb)
    inputs = rng.uniform(1.5, 2.5, size=(1, 4))
    ens = {"C_in": ForecastEnsemble(inputs)}
    cfg = ForecastConfig(horizon=4, samples=1)
    out = fc.forecast_outputs(head, ens, cfg=cfg)
    for h in range(4):
        single = head.predict_np(np.array([[inputs[0, h]]]))[0]
        assert out.samples[0, h] == pytest.approx(single, abs=1e-12)


def test_phase_separation_inputs_independent_of_head():
    model = _conv_model()
    cfg = ForecastConfig(horizon=4, samples=30, seed=3)
    hist = {"C_in": np.array([2.0, 2.0, 2.0])}
    ens_a = fc.forecast_inputs({"C_in": model}, hist, cfg)
    _ = fc.forecast_outputs(_ConstHead(0.0), ens_a, cfg)
    ens_b = fc.forecast_inputs({"C_in": model}, hist, cfg)
    assert np.array_equal(ens_a["C_in"].samples, ens_b["C_in"].samples)


def test_forecast_outputs_checks_alignment():
    cfg = ForecastConfig(horizon=3, samples=2)
    ens = {"a": ForecastEnsemble(np.zeros((2, 3))),
           "b": ForecastEnsemble(np.zeros((2, 4)))}
    with pytest.raises(ValueError):
        fc.forecast_outputs(_ConstHead(0.0), ens, cfg,
                            channel_order=["a", "b"])


def test_profile_outputs_shape_and_outlet():
    rng = np.random.default_rng(4)
    tb = pinn.gauss_legendre_tableau(2)
    net = nn.MLP((3, 5, 3), rng)
    head = pinn.PfrHead(net, dt=0.5, params=pinn.PfrParams(), tableau=tb)
    M, Hor, nz = 3, 4, 17
    ens = {"C_in": ForecastEnsemble(rng.uniform(1.5, 2.5, (M, Hor))),
           "v": ForecastEnsemble(rng.uniform(0.9, 1.1, (M, Hor)))}
    z = np.linspace(0.005, 0.995, nz)
    cfg = ForecastConfig(horizon=Hor, samples=M)
    profiles, outlet = fc.forecast_profile_outputs(head, ens, z, cfg)
    assert profiles.shape == (M, Hor, nz)
    assert np.array_equal(outlet.samples, profiles[:, :, -1])
    expected = head.predict_np(np.array([[ens["C_in"].samples[1, 2],
                                          ens["v"].samples[1, 2], z[-1]]]))
    assert outlet.samples[1, 2] == pytest.approx(expected[0], abs=1e-12)


# -- origins ----------------------------------------------------------------------

def _tiny_dataset():
    from dualcast.simulate import Dataset
    n = 40
    times = np.arange(float(n))
    return Dataset(times=times,
                   inputs={"C_in": 2.0 + 0.1 * np.sin(times)},
                   outputs={"C": 0.5 + 0.05 * np.cos(times)},
                   splits=(20, 8, 12))


def test_test_origins_inside_test_split():
    ds = _tiny_dataset()
    cfg = ForecastConfig(horizon=3, samples=2)
    origins = fc.test_origins(ds, cfg, n_origins=2, stride=2, history_len=4)
    lo, hi = ds.split_range("test")
    for o in origins:
        assert o - 4 + 1 >= lo
        assert o + 3 < hi


def test_test_origins_rejects_overlong_horizon():
    ds = _tiny_dataset()
    cfg = ForecastConfig(horizon=30, samples=2)
    with pytest.raises(ValueError):
        fc.test_origins(ds, cfg, n_origins=1, stride=1)


def test_evaluate_input_model_runs_and_averages():
    ds = _tiny_dataset()
    model = _conv_model(dt=1.0)
    cfg = ForecastConfig(horizon=3, samples=40, seed=0)
    summary = fc.evaluate_input_model(model, ds.inputs["C_in"], ds, cfg,
                                      n_origins=2, stride=3, history_len=4)
    assert summary.n_origins == 2
    assert summary.loglik.shape == (3,)
    assert math.isfinite(summary.mse)
