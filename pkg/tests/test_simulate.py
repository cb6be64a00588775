"""Simulators against analytic and budget oracles."""

import math

import numpy as np
import pytest

from dualcast import simulate as S
from dualcast.pinn import CstrParams, FlotationParams, PfrParams
from dualcast.simulate import Dataset, MultiFreqSignal


# -- signals -------------------------------------------------------------------

def test_zero_amplitudes_give_offset():
    sig = MultiFreqSignal(2.0, ((0.0, 0.0, 100.0),))
    assert sig(17.3) == 2.0
    assert np.all(sig(np.array([0.0, 5.0])) == 2.0)


def test_single_term_value():
    sig = MultiFreqSignal(2.0, ((1.0, 0.0, 4.0),))
    # n=1: sin(2 pi t / 4) at t=1 -> sin(pi/2) = 1
    assert sig(1.0) == pytest.approx(3.0)


def test_periodicity():
    sig = S.cstr_inlet_signal(seed=3)
    period = 3000.0 * 2  # lcm-ish multiple of every component period
    ts = np.array([12.0, 500.0, 1234.0])
    assert np.allclose(sig(ts), sig(ts + 2 * period), atol=1e-9)


def test_cstr_inlet_stays_positive():
    for seed in range(5):
        sig = S.cstr_inlet_signal(seed)
        ts = np.linspace(0, 10000, 20001)
        assert sig(ts).min() > 0.5


def test_signal_rejects_bad_period():
    with pytest.raises(ValueError):
        MultiFreqSignal(0.0, ((0.1, 0.1, -1.0),))


# -- adaptive integrator ---------------------------------------------------------

def test_rk45_matches_fixed_step_rk4_reference():
    def f(t, y):
        return np.array([math.sin(t) - 0.5 * y[0]])

    ts = np.linspace(0.0, 10.0, 11)
    sol = S.integrate_rk45(f, [1.0], ts, rtol=1e-9, atol=1e-12)[:, 0]

    # fixed-step RK4 at dt=1e-3 as an independent reference
    y = np.array([1.0])
    dt = 1e-3
    ref = [y[0]]
    t = 0.0
    for step in range(10000):
        k1 = f(t, y)
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if (step + 1) % 1000 == 0:
            ref.append(y[0])
    ref = np.array(ref)
    assert np.sqrt(np.mean((sol - ref) ** 2)) < 1e-6


def test_rk45_step_underflow_raises():
    def f(t, y):
        return np.array([np.inf])

    with pytest.raises(FloatingPointError):
        S.integrate_rk45(f, [1.0], np.array([0.0, 1.0]))


# -- CSTR -------------------------------------------------------------------------

def test_cstr_constant_inlet_reaches_quadratic_root():
    sig = MultiFreqSignal(2.0, ())
    ds = S.simulate_cstr(signal=sig, t_end=200.0, dt_sample=1.0)
    p = CstrParams()
    root = (-p.F_over_V + math.sqrt(p.F_over_V ** 2
                                    + 4 * p.k * p.F_over_V * 2.0)) \
        / (2 * p.k)
    assert ds.outputs["C"][-1] == pytest.approx(root, abs=1e-6)


def test_cstr_linear_decay_without_reaction():
    sig = MultiFreqSignal(0.0, ())
    ds = S.simulate_cstr(signal=sig, params=CstrParams(F_over_V=0.2,
                                                       k=1e-300),
                         t_end=30.0)
    expected = 1.05 * np.exp(-0.2 * ds.times)
    assert np.max(np.abs(ds.outputs["C"] - expected)) < 1e-8


def test_cstr_zero_amplitude_monotone_after_transient():
    sig = MultiFreqSignal(2.0, ((0.0, 0.0, 500.0),))
    ds = S.simulate_cstr(signal=sig, t_end=100.0)
    c = ds.outputs["C"]
    diffs = np.diff(c[5:])
    assert np.all(diffs <= 0) or np.all(diffs >= 0)


def test_cstr_default_shape_and_splits():
    ds = S.simulate_cstr(t_end=10000.0, dt_sample=1.0, seed=0)
    assert ds.n == 10000
    assert ds.splits == (7000, 1500, 1500)
    assert ds.split_range("test") == (8500, 10000)


# -- ADPFR ---------------------------------------------------------------------------

def test_adpfr_zero_everything_stays_zero():
    zero = MultiFreqSignal(0.0, ())
    ds = S.simulate_adpfr(zero, zero, PfrParams(D=0.01, k=1e-300),
                          nodes=40, t_end=2.0, dt_sample=0.5,
                          inner_dt=0.01, splits=(2, 1, 1))
    assert np.allclose(ds.outputs["C"], 0.0, atol=1e-15)


def test_adpfr_outlet_approaches_inlet_after_transport_delay():
    cin = MultiFreqSignal(2.0, ())
    v = MultiFreqSignal(1.0, ())
    ds = S.simulate_adpfr(cin, v, PfrParams(D=0.002, k=1e-300),
                          nodes=120, t_end=6.0, dt_sample=0.25,
                          inner_dt=0.005, splits=(12, 6, 6))
    out = ds.outputs["C"][:, -1]
    # before one transport time L/v = 1 s the outlet is still near zero
    assert out[ds.times < 0.5].max() < 0.2
    assert out[-1] == pytest.approx(2.0, rel=1e-3)


def test_adpfr_discrete_mass_budget():
    """With one inner step per sample the trapezoid mass budget is exact:
    mass gain per step equals the trapezoid of (v C_in - v C_outlet)."""
    cin = MultiFreqSignal(1.5, ((0.2, 0.0, 3.0),))
    v = MultiFreqSignal(1.0, ((0.0, 0.1, 4.0),))
    n = 60
    ds = S.simulate_adpfr(cin, v, PfrParams(D=0.01, k=1e-300),
                          nodes=n, t_end=3.0, dt_sample=0.05,
                          inner_dt=0.05, splits=(30, 15, 15))
    dz = 1.0 / n
    mass = ds.outputs["C"].sum(axis=1) * dz
    influx = ds.inputs["v"] * ds.inputs["C_in"] \
        - ds.inputs["v"] * ds.outputs["C"][:, -1]
    h = 0.05
    lhs = np.diff(mass)
    rhs = 0.5 * h * (influx[:-1] + influx[1:])
    assert np.max(np.abs(lhs - rhs)) < 1e-8


def test_adpfr_grid_refinement_converges():
    ds_a = S.simulate_adpfr(nodes=100, t_end=30.0, dt_sample=0.5,
                            inner_dt=0.01, splits=(40, 10, 10), seed=0)
    ds_b = S.simulate_adpfr(nodes=200, t_end=30.0, dt_sample=0.5,
                            inner_dt=0.01, splits=(40, 10, 10), seed=0)
    a = ds_a.outputs["C"][:, -1]
    b = ds_b.outputs["C"][:, -1]
    rel = np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2))
    assert rel < 0.01


def test_adpfr_default_split_arithmetic():
    # the full-scale defaults: 5500 samples -> 4000/900/600
    assert S._fractional_splits(5500, (4000 / 5500, 900 / 5500,
                                       600 / 5500)) == (4000, 900, 600)


def test_adpfr_rejects_tiny_grid():
    with pytest.raises(ValueError):
        S.simulate_adpfr(nodes=5, t_end=1.0, splits=(1, 0, 1))


# -- flotation ------------------------------------------------------------------------

def test_flotation_frozen_froth_without_rate_or_draw():
    signals = S.flotation_signals(seed=0)
    signals = dict(signals)
    signals["Q_c"] = MultiFreqSignal(0.0, ())
    ds = S.simulate_flotation(signals=signals, r_true=lambda c_p: 0.0,
                              t_end=300.0, dt_sample=5.0)
    c_f = ds.outputs["C_f"]
    assert np.max(np.abs(c_f - c_f[0])) < 1e-9


def test_flotation_zero_rate_gives_linear_pulp_ode():
    p = FlotationParams()
    const = {name: MultiFreqSignal(v, ()) for name, v in
             (("C_feed", 1.5), ("Q_feed", 0.3), ("Q_t", 0.25),
              ("Q_c", 0.02))}
    ds = S.simulate_flotation(signals=const, r_true=lambda c_p: 0.0,
                              t_end=400.0, dt_sample=2.0)
    # dC_p/dt = a - b C_p with constant coefficients
    a = 1.5 * (p.rho_feed / p.rho_p) * 0.3 / p.V_p
    b = 0.25 / p.V_p
    c0 = ds.outputs["C_p"][0]
    expected = a / b + (c0 - a / b) * np.exp(-b * ds.times)
    assert np.max(np.abs(ds.outputs["C_p"] - expected)) < 1e-6


def test_flotation_steady_froth_grade():
    const = {name: MultiFreqSignal(v, ()) for name, v in
             (("C_feed", 1.5), ("Q_feed", 0.3), ("Q_t", 0.25),
              ("Q_c", 0.02))}
    p = FlotationParams()
    rate = S.default_flotation_rate(p)
    ds = S.simulate_flotation(signals=const, r_true=rate, t_end=4000.0,
                              dt_sample=10.0)
    c_p_end = ds.outputs["C_p"][-1]
    expected_cf = rate(c_p_end) / (p.rho_f * 0.02)
    assert ds.outputs["C_f"][-1] == pytest.approx(expected_cf, rel=1e-4)


def test_flotation_requires_all_signals():
    with pytest.raises(ValueError, match="missing input signal"):
        S.simulate_flotation(signals={"C_feed": MultiFreqSignal(1.0, ())},
                             t_end=10.0)


# -- dataset files -----------------------------------------------------------------

def test_dataset_roundtrip_and_determinism(tmp_path):
    ds = S.simulate_cstr(t_end=50.0, dt_sample=1.0, seed=4)
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    ds.to_csv(p1)
    S.simulate_cstr(t_end=50.0, dt_sample=1.0, seed=4).to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = Dataset.from_csv(p1, ds.splits, {"C_in"})
    assert np.array_equal(back.outputs["C"], ds.outputs["C"])
    assert np.array_equal(back.inputs["C_in"], ds.inputs["C_in"])
    assert np.array_equal(back.times, ds.times)


def test_dataset_profile_columns_roundtrip(tmp_path):
    zero = MultiFreqSignal(1.0, ())
    ds = S.simulate_adpfr(zero, zero, nodes=12, t_end=1.0, dt_sample=0.5,
                          inner_dt=0.05, splits=(1, 0, 1))
    path = tmp_path / "field.csv"
    ds.to_csv(path)
    back = Dataset.from_csv(path, ds.splits, {"C_in", "v"})
    assert back.outputs["C"].shape == ds.outputs["C"].shape
    assert np.array_equal(back.outputs["C"], ds.outputs["C"])


def test_dataset_split_validation():
    with pytest.raises(ValueError):
        Dataset(times=np.arange(5.0), inputs={}, outputs={},
                splits=(2, 2, 2))
