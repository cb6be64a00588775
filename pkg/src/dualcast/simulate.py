"""Ground-truth data generation for the three benchmark systems.

Everything here is deterministic given a seed: signal coefficients are
drawn once from a seeded generator and the integrators are fixed
algorithms, so dataset files are reproducible byte for byte.

The dispersion reactor uses a cell-centered finite-volume
semi-discretization (first-order upwind advection, central-difference
diffusion through the faces) so that the discrete mass budget
telescopes exactly: with no reaction, d/dt of the held-up mass equals
inlet flux v*C_in minus outlet flux v*C(L). The inlet face flux being
v*C_in is precisely the Danckwerts flux-matching condition, and the
zero-gradient outlet makes the outlet flux purely advective. Time
stepping is an implicit trapezoid rule with Newton iterations on the
banded Jacobian; explicit stepping at D = 0.01 and a thousand cells
would need prohibitively small steps.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .pinn import CstrParams, FlotationParams, PfrParams


@dataclass(frozen=True)
class MultiFreqSignal:
    """offset + sum_n a_n sin(2 n pi t / T_n) + b_n cos(2 n pi t / T_n)."""

    offset: float
    components: tuple  # of (a_n, b_n, T_n)

    def __post_init__(self):
        for _, _, T in self.components:
            if T <= 0:
                raise ValueError("periods must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, self.offset)
        for n, (a, b, T) in enumerate(self.components, start=1):
            w = 2.0 * n * np.pi / T
            out = out + a * np.sin(w * t) + b * np.cos(w * t)
        return out if out.shape else float(out)


def _draw_components(rng, scale, periods):
    comps = []
    for n, T in enumerate(periods, start=1):
        a, b = rng.uniform(-scale / n, scale / n, size=2)
        comps.append((float(a), float(b), float(T)))
    return tuple(comps)


def cstr_inlet_signal(seed=0):
    """Time-varying inlet concentration around 2.0 kmol/m^3 (minutes)."""
    rng = np.random.default_rng(seed)
    return MultiFreqSignal(2.0, _draw_components(
        rng, 0.15, (500.0, 750.0, 1000.0, 1500.0, 2000.0, 3000.0)))


def adpfr_inlet_signal(seed=0):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    return MultiFreqSignal(2.0, _draw_components(
        rng, 0.15, (50.0, 75.0, 100.0, 150.0, 200.0, 300.0)))


def adpfr_velocity_signal(seed=0):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    return MultiFreqSignal(1.0, _draw_components(
        rng, 0.08, (60.0, 90.0, 120.0, 180.0, 240.0, 360.0)))


def flotation_signals(seed=0):
    """Synthetic plant inputs: feed grade and the three flow rates.

    Periods are long relative to the cell residence times so the
    concentrations track their quasi-steady response; magnitudes keep
    the pulp/froth grades at realistic O(1) levels.
    """
    periods = (3600.0, 4800.0, 6000.0, 7200.0, 9600.0, 14400.0)
    out = {}
    for i, (name, offset, scale) in enumerate((
            ("C_feed", 1.5, 0.10),
            ("Q_feed", 0.70, 0.045),
            ("Q_t", 0.65, 0.040),
            ("Q_c", 0.30, 0.006))):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 10 + i)))
        out[name] = MultiFreqSignal(offset,
                                    _draw_components(rng, scale, periods))
    return out


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    """Sampled trajectories with contiguous temporal splits."""

    times: np.ndarray
    inputs: dict
    outputs: dict
    splits: tuple          # (n_train, n_val, n_test), in temporal order
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.times.size
        if sum(self.splits) != n:
            raise ValueError(f"splits {self.splits} do not cover {n} rows")
        for name, arr in {**self.inputs, **self.outputs}.items():
            if arr.shape[0] != n:
                raise ValueError(f"channel {name} has {arr.shape[0]} rows")

    @property
    def n(self):
        return self.times.size

    def split_range(self, part):
        tr, va, te = self.splits
        return {"train": (0, tr), "val": (tr, tr + va),
                "test": (tr + va, self.n)}[part]

    def channel(self, name):
        if name in self.inputs:
            return self.inputs[name]
        return self.outputs[name]

    def to_csv(self, path):
        cols = ["time"]
        arrays = [self.times]
        for name, arr in {**self.inputs, **self.outputs}.items():
            if arr.ndim == 1:
                cols.append(name)
                arrays.append(arr)
            else:
                width = len(str(arr.shape[1] - 1))
                for j in range(arr.shape[1]):
                    cols.append(f"{name}_{j:0{width}d}")
                arrays.append(arr)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            flat = [a if a.ndim == 2 else a[:, None] for a in arrays]
            data = np.hstack(flat)
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, splits, input_names, meta=None):
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = data[:, 0]
        groups = {}
        for j, col in enumerate(header[1:], start=1):
            base, _, suffix = col.rpartition("_")
            if base and suffix.isdigit():
                groups.setdefault(base, []).append(j)
            else:
                groups.setdefault(col, []).append(j)
        inputs = {}
        outputs = {}
        for name, idx in groups.items():
            arr = data[:, idx[0]] if len(idx) == 1 else data[:, idx]
            (inputs if name in input_names else outputs)[name] = arr
        return cls(times=times, inputs=inputs, outputs=outputs,
                   splits=tuple(splits), meta=meta or {})


def _fractional_splits(n, fractions=(0.7, 0.15, 0.15)):
    tr = int(round(n * fractions[0]))
    va = int(round(n * fractions[1]))
    return (tr, va, n - tr - va)


# -- adaptive embedded Runge-Kutta (Dormand-Prince 5(4)) --------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176,
              -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def integrate_rk45(f, y0, t_grid, rtol=1e-9, atol=1e-12, h0=None):
    """Adaptive 4(5) integration sampled exactly at ``t_grid``.

    Steps are clamped to land on every grid time, so no interpolant is
    needed. Raises on step-size underflow.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    out = np.empty((t_grid.size, y.size))
    out[0] = y
    t = t_grid[0]
    span = t_grid[-1] - t_grid[0]
    h = h0 if h0 is not None else span / 1000.0
    for gi in range(1, t_grid.size):
        t_target = t_grid[gi]
        while t < t_target - 1e-12 * span:
            h = min(h, t_target - t)
            if h < 1e-14 * span:
                raise FloatingPointError("step size underflow in rk45")
            ks = np.empty((7, y.size))
            ks[0] = f(t, y)
            for s in range(1, 7):
                ys = y + h * (_DP_A[s] @ ks[:s])
                ks[s] = f(t + _DP_C[s] * h, ys)
            y5 = y + h * (_DP_B5 @ ks)
            y4 = y + h * (_DP_B4 @ ks)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
            err = np.sqrt(np.mean(((y5 - y4) / scale) ** 2))
            if err <= 1.0:
                t = t + h
                y = y5
                factor = 5.0 if err == 0 else min(5.0, 0.9 * err ** -0.2)
                h = h * factor
            else:
                h = h * max(0.2, 0.9 * err ** -0.2)
        out[gi] = y
    return out


# -- system simulators -------------------------------------------------------

def simulate_cstr(signal=None, params=CstrParams(), t_end=10000.0,
                  dt_sample=1.0, c0=1.05, seed=0,
                  split_fractions=(0.7, 0.15, 0.15), rtol=1e-9):
    """Tank reactor dataset: dC/dt = (F/V)(C_in - C) - k C^2."""
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if signal is None:
        signal = cstr_inlet_signal(seed)

    def rhs(t, y):
        c_in = signal(t)
        return np.array([params.F_over_V * (c_in - y[0])
                         - params.k * y[0] * y[0]])

    times = np.arange(int(round(t_end / dt_sample))) * dt_sample
    traj = integrate_rk45(rhs, [c0], times, rtol=rtol)[:, 0]
    return Dataset(times=times,
                   inputs={"C_in": signal(times)},
                   outputs={"C": traj},
                   splits=_fractional_splits(times.size, split_fractions),
                   meta={"system": "cstr", "seed": seed,
                         "F_over_V": params.F_over_V, "k": params.k,
                         "C0": c0, "dt_sample": dt_sample})


def adpfr_rhs(C, c_in, v, p, dz):
    """Finite-volume right-hand side for the dispersion reactor."""
    flux = np.empty(C.size + 1)
    flux[0] = v * c_in
    flux[1:-1] = v * C[:-1] - p.D * np.diff(C) / dz
    flux[-1] = v * C[-1]
    return (flux[:-1] - flux[1:]) / dz - p.k * C * C


def _adpfr_jacobian_bands(C, v, p, dz):
    """(upper, main, lower) diagonals of d(rhs)/dC."""
    n = C.size
    adv = v / dz
    dif = p.D / (dz * dz)
    lower = np.full(n - 1, adv + dif)
    upper = np.full(n - 1, dif)
    main = np.full(n, -(adv + 2.0 * dif)) - 2.0 * p.k * C
    main[0] += dif   # inlet face flux is v*C_in, independent of C
    main[-1] += dif  # outlet face carries no diffusive flux
    return upper, main, lower


def simulate_adpfr(c_in_signal=None, v_signal=None, params=PfrParams(),
                   nodes=1000, t_end=2750.0, dt_sample=0.5, inner_dt=0.01,
                   seed=0, splits=None, newton_tol=1e-10):
    """Dispersion reactor dataset via method of lines.

    Cell-centered grid of ``nodes`` cells over [0, L]; zero initial
    profile; implicit trapezoid stepping at ``inner_dt`` with Newton
    iterations and a tridiagonal solve per iteration.
    """
    if nodes < 10:
        raise ValueError("need at least 10 cells")
    if c_in_signal is None:
        c_in_signal = adpfr_inlet_signal(seed)
    if v_signal is None:
        v_signal = adpfr_velocity_signal(seed)
    dz = params.L / nodes
    z = (np.arange(nodes) + 0.5) * dz
    n_samples = int(round(t_end / dt_sample))
    times = np.arange(n_samples) * dt_sample
    C = np.zeros(nodes)
    field_out = np.empty((n_samples, nodes))
    field_out[0] = C
    per_sample = max(1, int(round(dt_sample / inner_dt)))
    h = dt_sample / per_sample
    t = 0.0
    eye = np.ones(nodes)
    for gi in range(1, n_samples):
        for _ in range(per_sample):
            t_new = t + h
            cin0, v0 = float(c_in_signal(t)), float(v_signal(t))
            cin1, v1 = float(c_in_signal(t_new)), float(v_signal(t_new))
            f0 = adpfr_rhs(C, cin0, v0, params, dz)
            Cn = C + h * f0  # explicit predictor
            for _newton in range(8):
                f1 = adpfr_rhs(Cn, cin1, v1, params, dz)
                g = Cn - C - 0.5 * h * (f0 + f1)
                if np.max(np.abs(g)) < newton_tol:
                    break
                up, mid, lo = _adpfr_jacobian_bands(Cn, v1, params, dz)
                ab = np.zeros((3, nodes))
                ab[0, 1:] = -0.5 * h * up
                ab[1] = eye - 0.5 * h * mid
                ab[2, :-1] = -0.5 * h * lo
                Cn = Cn - scipy.linalg.solve_banded((1, 1), ab, g)
            else:
                raise FloatingPointError("Newton stalled in adpfr step")
            C = Cn
            t = t_new
        field_out[gi] = C
    if splits is None:
        splits = _fractional_splits(n_samples, (4000 / 5500, 900 / 5500,
                                                600 / 5500))
    return Dataset(times=times,
                   inputs={"C_in": c_in_signal(times),
                           "v": v_signal(times)},
                   outputs={"C": field_out},
                   splits=splits,
                   meta={"system": "adpfr", "seed": seed, "D": params.D,
                         "k": params.k, "L": params.L, "nodes": nodes,
                         "dt_sample": dt_sample, "inner_dt": inner_dt,
                         "z": z.tolist()})


DEFAULT_RATE_GAIN = 0.016  # 1/s; keeps the synthetic concentrate grade O(1)


def default_flotation_rate(params=FlotationParams(), gain=DEFAULT_RATE_GAIN):
    """Pulp-proportional transfer rate R = gain * C_p * V_p."""

    def rate(c_p):
        return gain * c_p * params.V_p

    return rate


def simulate_flotation(signals=None, params=FlotationParams(), r_true=None,
                       t_end=45000.0, dt_sample=15.0, seed=0,
                       split_fractions=(1 / 3, 1 / 3, 1 / 3), rtol=1e-9):
    """Synthetic flotation cell dataset (pulp and froth concentrations).

    Stands in for the proprietary plant record: the same coupled mass
    balances driven by seeded multi-frequency inputs, started at the
    steady state of the mean inputs.
    """
    if signals is None:
        signals = flotation_signals(seed)
    if r_true is None:
        r_true = default_flotation_rate(params)
    for name in ("C_feed", "Q_feed", "Q_t", "Q_c"):
        if name not in signals:
            raise ValueError(f"missing input signal {name}")

    def rhs(t, y):
        c_p = max(y[0], 0.0)
        c_f = max(y[1], 0.0)
        r = r_true(c_p)
        dp = signals["C_feed"](t) * (params.rho_feed / params.rho_p) \
            * (signals["Q_feed"](t) / params.V_p) \
            - (signals["Q_t"](t) / params.V_p) * c_p \
            - r / (params.rho_p * params.V_p)
        df = -(signals["Q_c"](t) / params.V_f) * c_f \
            + r / (params.rho_f * params.V_f)
        return np.array([dp, df])

    # steady state of the mean inputs as the initial condition
    cf0_denom = params.rho_f * signals["Q_c"](0.0)
    cp0 = signals["C_feed"](0.0) * (params.rho_feed / params.rho_p) \
        * signals["Q_feed"](0.0) \
        / (signals["Q_t"](0.0) + DEFAULT_RATE_GAIN * params.V_p)
    cf0 = r_true(cp0) / cf0_denom if cf0_denom > 0 else 0.0
    y0 = [cp0, cf0]
    times = np.arange(int(round(t_end / dt_sample))) * dt_sample
    traj = integrate_rk45(rhs, y0, times, rtol=rtol)
    if np.any(traj < 0.0):
        import warnings
        warnings.warn("flotation concentrations clipped at zero")
        traj = np.clip(traj, 0.0, None)
    return Dataset(times=times,
                   inputs={name: signals[name](times)
                           for name in ("C_feed", "Q_feed", "Q_t", "Q_c")},
                   outputs={"C_p": traj[:, 0], "C_f": traj[:, 1]},
                   splits=_fractional_splits(times.size, split_fractions),
                   meta={"system": "flotation", "seed": seed,
                         "V_p": params.V_p, "V_f": params.V_f,
                         "rho_feed": params.rho_feed, "rho_p": params.rho_p,
                         "rho_f": params.rho_f, "dt_sample": dt_sample,
                         "rate_gain": DEFAULT_RATE_GAIN})
