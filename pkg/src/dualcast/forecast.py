"""Dual-level multi-step forecasting with Monte Carlo uncertainty.

Phase 1 forecasts each input channel independently: a short Kalman
filter pass (three steps, enough to make the three-state augmented
model observable) produces the initial state belief, M states are
sampled from it and propagated through the (hybrid) transition with
process noise; the forecast value is the first state component.

Phase 2 feeds the sampled input trajectories through the trained
output network, one trajectory at a time in lockstep: the network's
previous prediction is carried as its state input between steps (the
dispersion reactor instead re-emits a full spatial profile from the
current inputs). The two phases are strictly sequential; input
forecasts do not depend on the output model.

Per-trajectory randomness derives from the master seed by spawned
Philox streams keyed on the channel, so results are reproducible and
independent of evaluation order.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .hybrid import HybridSSM, forecast_hybrid, psd_cholesky, sample_gaussian
from .kernels import build as build_kernel
from .ssm import kf_step
from . import hybrid as _hybrid


@dataclass(frozen=True)
class ForecastConfig:
    horizon: int = 10
    samples: int = 1000
    init_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValueError("horizon and samples must be >= 1")


@dataclass
class ForecastEnsemble:
    """Sampled trajectories plus their per-step Gaussian summary.

    ``extra_var`` widens the summary beyond the sample scatter; output
    forecasts set it to the one-step model's validation residual
    variance, so the predictive distribution carries both propagated
    input uncertainty and the model's own error. Without that term the
    bands of a deterministic one-step model would collapse onto the
    input spread alone and could never cover its approximation error.
    """

    samples: np.ndarray       # (M, H)
    extra_var: float = 0.0

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    @property
    def var(self):
        return self.samples.var(axis=0) + self.extra_var

    def band(self, level=1.959963984540054):
        sd = np.sqrt(self.var)
        return self.mean - level * sd, self.mean + level * sd


class ConventionalInputModel:
    """Fitted kernel parameters wrapped for forecasting."""

    def __init__(self, kind, params, dt):
        self.kind = kind
        self.params = params
        self.dt = dt

    def init_belief(self, history, init_steps=3):
        """Three filter steps from a prior anchored at the oldest point."""
        history = np.asarray(history, dtype=float)
        tail = history[-init_steps:]
        model = build_kernel(self.kind, self.params, self.dt, y1=tail[0])
        belief = model.prior()
        for y in tail:
            belief = kf_step(model, belief, y).posterior
        return model, belief

    def sample_paths(self, history, cfg, rng):
        model, belief = self.init_belief(history, cfg.init_steps)
        A, Q = model.A, model.Q
        X = sample_gaussian(belief, cfg.samples, rng)
        cQ = psd_cholesky(Q)
        out = np.empty((cfg.samples, cfg.horizon))
        for h in range(cfg.horizon):
            X = X @ A.T
            if cQ is not None:
                X = X + rng.standard_normal(X.shape) @ cQ.T
            out[:, h] = X[:, 0]
        return out

    def analytic_moments(self, history, cfg):
        """h-step predictive mean/variance of the first state component."""
        from .ssm import forecast_moments
        model, belief = self.init_belief(history, cfg.init_steps)
        return forecast_moments(model, belief, cfg.horizon)


class HybridInputModel:
    """Trained hybrid transition wrapped for forecasting."""

    def __init__(self, model: HybridSSM):
        self.model = model

    def init_belief(self, history, init_steps=3):
        history = np.asarray(history, dtype=float)
        steps, _ = _hybrid.hybrid_filter(self.model, history,
                                         steps=init_steps)
        return steps[-1].posterior

    def sample_paths(self, history, cfg, rng):
        history = np.asarray(history, dtype=float)
        belief = self.init_belief(history, cfg.init_steps)
        recent = history[::-1][:self.model.lag]  # most-recent-first
        return forecast_hybrid(self.model, belief, recent, cfg.horizon,
                               cfg.samples, rng)


def channel_rng(seed, *key):
    """Counter-based Philox stream split off the master seed.

    Extra key components (channel index, origin index) decorrelate
    streams deterministically, independent of evaluation order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=seed, spawn_key=tuple(int(k) for k in key))))


def forecast_inputs(models, histories, cfg):
    """Phase 1 for every channel; returns {channel: ForecastEnsemble}.

    ``models`` maps channel name to a wrapped input model; ``histories``
    maps channel name to the observation window ending at the forecast
    origin (at least ``cfg.init_steps`` points; hybrid windows reach
    further back when more are provided).
    """
    out = {}
    for i, (name, model) in enumerate(sorted(models.items())):
        rng = channel_rng(cfg.seed, i)
        out[name] = ForecastEnsemble(
            model.sample_paths(np.asarray(histories[name], dtype=float),
                               cfg, rng))
    return out


def forecast_outputs(head, input_ensembles, cfg, channel_order=None):
    """Phase 2: the trained head applied step by step per trajectory.

    Each sampled input trajectory is pushed through the one-step model
    in sequence; the sampled inputs themselves are the recursion (they
    were produced by recursive state transitions in phase 1). Returns
    a ForecastEnsemble for single-output heads or a dict of them keyed
    by output channel for the flotation pair.
    """
    names = channel_order or sorted(input_ensembles)
    sample_sets = [input_ensembles[n].samples for n in names]
    M, H = sample_sets[0].shape
    if H != cfg.horizon:
        raise ValueError("input ensemble horizon mismatch")
    for s in sample_sets[1:]:
        if s.shape != (M, H):
            raise ValueError("input ensembles are not aligned")
    out = None
    for h in range(H):
        X = np.column_stack([s[:, h] for s in sample_sets])
        pred = head.predict_np(X)
        if pred.ndim == 1:
            pred = pred[:, None]
        if out is None:
            out = np.empty((M, H, pred.shape[1]))
        out[:, h, :] = pred
    model_var = float(getattr(head, "residual_var", 0.0))
    if out.shape[2] == 1:
        return ForecastEnsemble(out[:, :, 0], extra_var=model_var)
    return {k: ForecastEnsemble(out[:, :, j], extra_var=model_var)
            for j, k in enumerate(("C_p", "C_f"))}


def forecast_profile_outputs(head, input_ensembles, z_grid, cfg,
                             channel_order=("C_in", "v")):
    """Phase 2 for the dispersion reactor: a profile per step.

    The head maps (C_in, v, z) to the next profile, so the recursion
    carries the predicted field only as the reported output. Returns
    (profiles (M, H, nz), outlet ForecastEnsemble).
    """
    names = list(channel_order)
    sample_sets = [input_ensembles[n].samples for n in names]
    M, H = sample_sets[0].shape
    z_grid = np.asarray(z_grid, dtype=float)
    nz = z_grid.size
    profiles = np.empty((M, H, nz))
    for h in range(H):
        cin = np.repeat(sample_sets[0][:, h], nz)
        v = np.repeat(sample_sets[1][:, h], nz)
        Z = np.tile(z_grid, M)
        pred = head.predict_np(np.column_stack([cin, v, Z]))
        profiles[:, h, :] = pred.reshape(M, nz)
    model_var = float(getattr(head, "residual_var", 0.0))
    return profiles, ForecastEnsemble(profiles[:, :, -1],
                                      extra_var=model_var)


@dataclass
class ForecastMetrics:
    mse: float
    mae: float
    mre: float
    loglik: np.ndarray        # per step
    mean: np.ndarray
    var: np.ndarray
    truth: np.ndarray

    @property
    def mean_loglik(self):
        return float(np.mean(self.loglik))


VAR_FLOOR = 1e-12


def metrics(ensemble, truth):
    """Point metrics of the ensemble mean plus stepwise log-likelihood.

    The log-likelihood fits a Gaussian to the ensemble at each step
    (sample mean and variance, floored to avoid degenerate spikes) and
    scores the truth under it. Relative error skips steps whose truth
    is numerically zero.
    """
    truth = np.asarray(truth, dtype=float)
    mean = ensemble.mean
    var = ensemble.var
    if truth.shape != mean.shape:
        raise ValueError("truth length must equal the horizon")
    err = mean - truth
    mse = float(np.mean(err ** 2))
    mae = float(np.mean(np.abs(err)))
    denom_ok = np.abs(truth) > 1e-9
    mre = float(np.mean(np.abs(err[denom_ok]) / np.abs(truth[denom_ok]))) \
        if np.any(denom_ok) else math.nan
    v = var + VAR_FLOOR
    loglik = -0.5 * (np.log(2.0 * np.pi * v) + err ** 2 / v)
    return ForecastMetrics(mse=mse, mae=mae, mre=mre, loglik=loglik,
                           mean=mean.copy(), var=var.copy(),
                           truth=truth.copy())


@dataclass
class OriginSummary:
    """Averaged metrics over many forecast origins."""

    mse: float
    mae: float
    mre: float
    loglik: np.ndarray
    n_origins: int
    per_origin: list = field(default_factory=list)

    @property
    def mean_loglik(self):
        return float(np.mean(self.loglik))


def summarize_origins(per_origin):
    return OriginSummary(
        mse=float(np.mean([m.mse for m in per_origin])),
        mae=float(np.mean([m.mae for m in per_origin])),
        mre=float(np.mean([m.mre for m in per_origin])),
        loglik=np.mean([m.loglik for m in per_origin], axis=0),
        n_origins=len(per_origin),
        per_origin=list(per_origin))


def test_origins(dataset, cfg, n_origins, stride, history_len=6):
    """Forecast origin indices inside the test split.

    Each origin index t is the time of the last observation; the
    forecast covers t+1 .. t+H, and ``history_len`` observations up to
    and including t must exist inside the test split.
    """
    lo, hi = dataset.split_range("test")
    first = lo + history_len - 1
    last = hi - cfg.horizon - 1
    if last < first:
        raise ValueError("test split too short for the requested horizon")
    origins = list(range(first, last + 1, stride))[:n_origins]
    if len(origins) < n_origins:
        raise ValueError(f"only {len(origins)} origins fit; "
                         f"asked for {n_origins}")
    return origins


def evaluate_input_model(model, series, dataset, cfg, n_origins, stride,
                         history_len=6):
    """Average input-forecast metrics over sliding test origins."""
    per = []
    for o in test_origins(dataset, cfg, n_origins, stride, history_len):
        hist = series[o - history_len + 1:o + 1]
        ens = ForecastEnsemble(model.sample_paths(
            hist, cfg, channel_rng(cfg.seed, o)))
        per.append(metrics(ens, series[o + 1:o + 1 + cfg.horizon]))
    return summarize_origins(per)
