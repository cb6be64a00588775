"""Command-line pipeline: simulate, train, forecast, evaluate, report.

Every command is a pure function of (config file, seed) to output
bytes: no timestamps, sorted JSON manifests, shortest round-trip float
formatting. Each artifact directory carries a manifest with the config
hash; re-running with a changed config refuses to overwrite without
``--force``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, forecast as fc, hybrid, kernels, nn, pinn, simulate
from .config import (SYSTEM_INPUT_CHANNELS, SYSTEM_OUTPUT_CHANNELS,
                     ConfigError, load as load_config)
from .engine import GraphError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = (nn.TrainingDiverged, GraphError, FloatingPointError,
                   np.linalg.LinAlgError)


def _info(msg):
    print(msg, file=sys.stderr)


def _resolve(cfg_dir, path):
    return path if os.path.isabs(path) else os.path.join(cfg_dir, path)


def _write_manifest(out_dir, cfg, command, extra=None):
    payload = {"command": command, "config_sha256": cfg.sha256,
               "version": __version__, "seed": cfg.seed,
               "system": cfg.system}
    payload.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _check_manifest(out_dir, cfg, force):
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        return
    with open(path) as fh:
        previous = json.load(fh)
    if previous.get("config_sha256") != cfg.sha256 and not force:
        raise ConfigError(
            f"{out_dir} holds artifacts from a different config "
            f"(hash {previous.get('config_sha256', '?')[:12]}...); "
            "pass --force to overwrite")


def _read_manifest(path_dir):
    with open(os.path.join(path_dir, "manifest.json")) as fh:
        return json.load(fh)


def _load_dataset(cfg, cfg_dir):
    path = _resolve(cfg_dir, cfg.paths.dataset)
    manifest = _read_manifest(os.path.dirname(path) or ".")
    splits = tuple(manifest["splits"])
    ds = simulate.Dataset.from_csv(
        path, splits, set(SYSTEM_INPUT_CHANNELS[cfg.system]),
        meta=manifest.get("meta", {}))
    return ds


def _fmt(value):
    return repr(float(value))


def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(
                cell if isinstance(cell, str) else _fmt(cell)
                for cell in row) + "\n")


# -- simulate ----------------------------------------------------------------

_SIM_DEFAULTS = {
    "cstr": {"t_end": 10000.0, "dt_sample": 1.0},
    "adpfr": {"t_end": 2750.0, "dt_sample": 0.5},
    "flotation": {"t_end": 45000.0, "dt_sample": 15.0},
}


def cmd_simulate(cfg, cfg_dir, out_dir, force):
    os.makedirs(out_dir, exist_ok=True)
    _check_manifest(out_dir, cfg, force)
    sim = cfg.simulate
    t_end = sim.t_end if sim.t_end > 0 else _SIM_DEFAULTS[cfg.system]["t_end"]
    dt = sim.dt_sample if sim.dt_sample > 0 \
        else _SIM_DEFAULTS[cfg.system]["dt_sample"]
    _info(f"simulating {cfg.system}: t_end={t_end} dt={dt} seed={cfg.seed}")
    if cfg.system == "cstr":
        ds = simulate.simulate_cstr(t_end=t_end, dt_sample=dt, seed=cfg.seed)
    elif cfg.system == "adpfr":
        ds = simulate.simulate_adpfr(nodes=sim.nodes, t_end=t_end,
                                     dt_sample=dt, inner_dt=sim.inner_dt,
                                     seed=cfg.seed)
    else:
        if sim.points > 0:
            t_end = sim.points * dt
        ds = simulate.simulate_flotation(t_end=t_end, dt_sample=dt,
                                         seed=cfg.seed)
    ds.to_csv(os.path.join(out_dir, "dataset.csv"))
    _write_manifest(out_dir, cfg, "simulate",
                    {"splits": list(ds.splits), "rows": ds.n,
                     "meta": ds.meta})
    _info(f"wrote {ds.n} rows, splits {ds.splits}")


# -- train-input --------------------------------------------------------------

def _fit_input_channel(cfg, ds, channel):
    im = cfg.input_model
    tr, va, _ = ds.splits
    series = ds.channel(channel)
    ys = series[max(0, tr - im.max_train_points):tr]
    n_val = min(va, im.val_points)
    ys_val = series[tr:tr + n_val] if n_val > 0 else None
    dt = float(ds.times[1] - ds.times[0])
    opt = nn.OptimizerConfig(iterations=im.iterations,
                             learning_rate=im.learning_rate,
                             patience=im.patience, tolerance=im.tolerance,
                             log_every=im.log_every)
    kind = kernels.KernelKind.MATERN32 if "matern" in im.kind \
        else kernels.KernelKind.EXPONENTIAL
    if im.kind.startswith("hybrid"):
        fit = hybrid.fit_hybrid(kind, ys, ys_val, dt, opt,
                                lstm_layers=im.lstm_layers,
                                lstm_hidden=im.lstm_hidden, seed=cfg.seed)
        return fit.model, fit.result
    fit = kernels.fit_kernel(kind, ys, dt, opt, ys_val=ys_val)
    return fit, fit.result


def cmd_train_input(cfg, cfg_dir, out_dir, force):
    ds = _load_dataset(cfg, cfg_dir)
    kind_dir = os.path.join(out_dir, cfg.input_model.kind)
    os.makedirs(kind_dir, exist_ok=True)
    _check_manifest(kind_dir, cfg, force)
    summary = {}
    for channel in cfg.input_channels():
        _info(f"fitting {cfg.input_model.kind} input model for {channel}")
        fitted, result = _fit_input_channel(cfg, ds, channel)
        ch_dir = os.path.join(kind_dir, channel)
        os.makedirs(ch_dir, exist_ok=True)
        if isinstance(fitted, hybrid.HybridSSM):
            hybrid.save_hybrid(ch_dir, fitted)
        else:
            kernels.save_kernel_params(os.path.join(ch_dir, "kernel.txt"),
                                       fitted.kind, fitted.params, fitted.dt)
        result.write_log(os.path.join(ch_dir, "training_log.tsv"))
        summary[channel] = {"best_val": result.best_val,
                            "best_iteration": result.best_iteration,
                            "iterations_run": result.iterations_run}
        _info(f"  best val NLL {result.best_val:.4f} "
              f"at iteration {result.best_iteration}")
    _write_manifest(kind_dir, cfg, "train-input", {"channels": summary})


def load_input_model(input_dir, kind, channel):
    ch_dir = os.path.join(input_dir, kind, channel)
    if kind.startswith("hybrid"):
        return fc.HybridInputModel(hybrid.load_hybrid(ch_dir))
    kkind, params, dt = kernels.load_kernel_params(
        os.path.join(ch_dir, "kernel.txt"))
    return fc.ConventionalInputModel(kkind, params, dt)


# -- train-output --------------------------------------------------------------

def _pair_indices(rng, lo, hi, count):
    """Sample row indices n with n+1 still inside [lo, hi)."""
    pool = np.arange(lo, hi - 1)
    if count >= pool.size:
        return pool
    return np.sort(rng.choice(pool, size=count, replace=False))


def build_output_batches(ds, system, train_points, val_points, seed):
    """Random snapshot pairs from the train and validation splits."""
    tr, va, _ = ds.splits
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(201,)))
    if system == "adpfr":
        z = np.asarray(ds.meta["z"], dtype=float)
        field_arr = ds.outputs["C"]

        def make(lo, hi, count):
            ij = np.column_stack([
                rng.integers(lo, hi - 1, size=count),
                rng.integers(0, z.size, size=count)])
            x = np.column_stack([ds.inputs["C_in"][ij[:, 0]],
                                 ds.inputs["v"][ij[:, 0]], z[ij[:, 1]]])
            u_n = field_arr[ij[:, 0], ij[:, 1]]
            u_next = field_arr[ij[:, 0] + 1, ij[:, 1]]
            return pinn.SnapshotBatch(x, u_n, u_next)

        return make(0, tr, train_points), make(tr, tr + va, val_points)

    in_names = SYSTEM_INPUT_CHANNELS[system]
    out_names = SYSTEM_OUTPUT_CHANNELS[system]

    def make(lo, hi, count):
        idx = _pair_indices(rng, lo, hi, count)
        x = np.column_stack([ds.inputs[n][idx] for n in in_names])
        if len(out_names) == 1:
            u_n = ds.outputs[out_names[0]][idx]
            u_next = ds.outputs[out_names[0]][idx + 1]
        else:
            u_n = np.column_stack([ds.outputs[n][idx] for n in out_names])
            u_next = np.column_stack([ds.outputs[n][idx + 1]
                                      for n in out_names])
        return pinn.SnapshotBatch(x, u_n, u_next)

    return make(0, tr, train_points), make(tr, tr + va, val_points)


def build_head(system, om, dt, meta, seed):
    """Fresh head per config; weights seeded off the master seed."""
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(202,)))
    hidden = tuple(int(h) for h in om.hidden)
    tableau = pinn.gauss_legendre_tableau(om.q) if om.kind == "pinn" else None
    n_out = om.q + 1 if om.kind == "pinn" else 1
    if system == "cstr":
        params = pinn.CstrParams(F_over_V=meta.get("F_over_V", 0.2),
                                 k=meta.get("k", 0.32))
        net = nn.MLP((1, *hidden, n_out), rng)
        return pinn.CstrHead(net, dt, params, tableau)
    if system == "adpfr":
        params = pinn.PfrParams(D=meta.get("D", 0.01), k=meta.get("k", 0.2),
                                L=meta.get("L", 1.0))
        net = nn.MLP((3, *hidden, n_out), rng)
        return pinn.PfrHead(net, dt, params, tableau)
    params = pinn.FlotationParams(
        V_p=meta.get("V_p", 24.86), V_f=meta.get("V_f", 5.0),
        rho_feed=meta.get("rho_feed", 1.003),
        rho_p=meta.get("rho_p", 1.002), rho_f=meta.get("rho_f", 1.20))
    net_p = nn.MLP((4, *hidden, n_out), rng)
    net_f = nn.MLP((4, *hidden, n_out), rng)
    rate = nn.MLP((2, om.rate_hidden, 1), rng) if om.kind == "pinn" else None
    return pinn.FlotationHead(net_p, net_f, dt, params, tableau, rate)


def cmd_train_output(cfg, cfg_dir, out_dir, force):
    ds = _load_dataset(cfg, cfg_dir)
    om = cfg.output_model
    kind_dir = os.path.join(out_dir, om.kind)
    os.makedirs(kind_dir, exist_ok=True)
    _check_manifest(kind_dir, cfg, force)
    dt = float(ds.times[1] - ds.times[0])
    train_batch, val_batch = build_output_batches(
        ds, cfg.system, om.train_points, om.val_points, cfg.seed)
    head = build_head(cfg.system, om, dt, ds.meta, cfg.seed)
    opt = nn.OptimizerConfig(iterations=om.epochs,
                             learning_rate=om.learning_rate,
                             patience=om.patience, tolerance=om.tolerance,
                             log_every=om.log_every)
    _info(f"training {om.kind} output model for {cfg.system} "
          f"({len(train_batch)} train points, budget {om.epochs})")
    trained = pinn.train_output_model(head, train_batch, val_batch, opt)
    nn.save_params(os.path.join(kind_dir, "params.txt"), head.parameters())
    head_meta = {"system": cfg.system, "kind": om.kind, "q": om.q,
                 "hidden": list(om.hidden), "rate_hidden": om.rate_hidden,
                 "dt": dt, "residual_var": head.residual_var}
    with open(os.path.join(kind_dir, "head.json"), "w") as fh:
        json.dump(head_meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    trained.result.write_log(os.path.join(kind_dir, "training_log.tsv"))
    _write_manifest(kind_dir, cfg, "train-output",
                    {"best_val_mse": trained.result.best_val,
                     "best_iteration": trained.result.best_iteration,
                     "iterations_run": trained.result.iterations_run})
    _info(f"  best val MSE {trained.result.best_val:.3e} "
          f"at iteration {trained.result.best_iteration}")


def load_output_head(output_dir, kind, system, meta, seed):
    """Rebuild a head from its checkpoint directory."""
    kind_dir = os.path.join(output_dir, kind)
    with open(os.path.join(kind_dir, "head.json")) as fh:
        head_meta = json.load(fh)

    class _Om:
        pass

    om = _Om()
    om.kind = head_meta["kind"]
    om.q = head_meta["q"]
    om.hidden = head_meta["hidden"]
    om.rate_hidden = head_meta["rate_hidden"]
    head = build_head(system, om, head_meta["dt"], meta, seed)
    loaded = nn.load_params(os.path.join(kind_dir, "params.txt"))
    _restore_head(head, loaded)
    head.residual_var = head_meta.get("residual_var", 0.0)
    return head


def _restore_head(head, loaded):
    for name, arr in head.parameters():
        src = loaded[name]
        if src.shape != arr.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        arr[...] = src


# -- forecast and evaluate ------------------------------------------------------

def _histories(ds, origin, history_len):
    lo = origin - history_len + 1
    return {ch: ds.inputs[ch][lo:origin + 1] for ch in ds.inputs}


def _integrated_forecast(cfg, ds, input_models, head, origin, fcfg):
    """One origin's input ensembles and output ensembles."""
    ensembles = {}
    for i, ch in enumerate(sorted(input_models)):
        rng = fc.channel_rng(fcfg.seed, i, origin)
        hist = ds.inputs[ch][origin - cfg.forecast.history + 1:origin + 1]
        ensembles[ch] = fc.ForecastEnsemble(
            input_models[ch].sample_paths(hist, fcfg, rng))
    channel_order = list(SYSTEM_INPUT_CHANNELS[cfg.system])
    if cfg.system == "adpfr":
        z = np.asarray(ds.meta["z"], dtype=float)
        _, outlet = fc.forecast_profile_outputs(head, ensembles, z, fcfg,
                                                channel_order)
        outputs = {"C": outlet}
    elif cfg.system == "flotation":
        outputs = fc.forecast_outputs(head, ensembles, fcfg, channel_order)
    else:
        outputs = {"C": fc.forecast_outputs(head, ensembles, fcfg,
                                            channel_order)}
    return ensembles, outputs


def _output_truth(ds, channel, origin, horizon):
    arr = ds.outputs[channel]
    if arr.ndim == 2:  # spatial profile; score the outlet cell
        arr = arr[:, -1]
    return arr[origin + 1:origin + 1 + horizon]


def cmd_forecast(cfg, cfg_dir, out_dir, force):
    ds = _load_dataset(cfg, cfg_dir)
    os.makedirs(out_dir, exist_ok=True)
    _check_manifest(out_dir, cfg, force)
    fcfg = fc.ForecastConfig(horizon=cfg.forecast.horizon,
                             samples=cfg.forecast.samples, seed=cfg.seed)
    input_dir = _resolve(cfg_dir, cfg.paths.input_dir)
    output_dir = _resolve(cfg_dir, cfg.paths.output_dir)
    models = {ch: load_input_model(input_dir, cfg.input_model.kind, ch)
              for ch in SYSTEM_INPUT_CHANNELS[cfg.system]}
    head = load_output_head(output_dir, cfg.output_model.kind, cfg.system,
                            ds.meta, cfg.seed)
    origin = cfg.forecast.origin
    if origin < 0:
        origin = ds.split_range("test")[0] + cfg.forecast.history - 1
    _info(f"forecasting {cfg.forecast.horizon} steps from origin {origin} "
          f"with M={cfg.forecast.samples}")
    ensembles, outputs = _integrated_forecast(cfg, ds, models, head,
                                              origin, fcfg)
    header = ["step", "mean", "lower95", "upper95", "truth"]
    for ch, ens in ensembles.items():
        lo, hi = ens.band()
        truth = ds.inputs[ch][origin + 1:origin + 1 + fcfg.horizon]
        rows = [(str(h + 1), ens.mean[h], lo[h], hi[h], truth[h])
                for h in range(fcfg.horizon)]
        _write_table(os.path.join(out_dir, f"bands_input_{ch}.tsv"),
                     header, rows)
    for ch, ens in outputs.items():
        lo, hi = ens.band()
        truth = _output_truth(ds, ch, origin, fcfg.horizon)
        rows = [(str(h + 1), ens.mean[h], lo[h], hi[h], truth[h])
                for h in range(fcfg.horizon)]
        _write_table(os.path.join(out_dir, f"bands_output_{ch}.tsv"),
                     header, rows)
    _write_manifest(out_dir, cfg, "forecast", {"origin": int(origin)})


def cmd_evaluate(cfg, cfg_dir, out_dir, force):
    ds = _load_dataset(cfg, cfg_dir)
    os.makedirs(out_dir, exist_ok=True)
    _check_manifest(out_dir, cfg, force)
    fcfg = fc.ForecastConfig(horizon=cfg.forecast.horizon,
                             samples=cfg.forecast.samples, seed=cfg.seed)
    input_dir = _resolve(cfg_dir, cfg.paths.input_dir)
    output_dir = _resolve(cfg_dir, cfg.paths.output_dir)
    input_kinds = cfg.forecast.input_kinds or [cfg.input_model.kind]
    output_kinds = cfg.forecast.output_kinds or [cfg.output_model.kind]
    origins = fc.test_origins(ds, fcfg, cfg.forecast.origins,
                              cfg.forecast.stride, cfg.forecast.history)
    H = fcfg.horizon
    header = (["model", "system", "channel", "mse", "mae", "mre",
               "mean_loglik"] + [f"loglik_{h + 1}" for h in range(H)])
    rows = []
    for ik in input_kinds:
        models = {ch: load_input_model(input_dir, ik, ch)
                  for ch in SYSTEM_INPUT_CHANNELS[cfg.system]}
        for ch in SYSTEM_INPUT_CHANNELS[cfg.system]:
            _info(f"evaluating input model {ik} on {ch} "
                  f"over {len(origins)} origins")
            summary = fc.evaluate_input_model(
                models[ch], ds.inputs[ch], ds, fcfg, len(origins),
                cfg.forecast.stride, cfg.forecast.history)
            rows.append([f"input-{ik}", cfg.system, ch, summary.mse,
                         summary.mae, summary.mre, summary.mean_loglik]
                        + list(summary.loglik))
        for ok in output_kinds:
            head = load_output_head(output_dir, ok, cfg.system, ds.meta,
                                    cfg.seed)
            _info(f"evaluating {ok}-{ik} over {len(origins)} origins")
            per_channel = {}
            for origin in origins:
                _, outputs = _integrated_forecast(cfg, ds, models, head,
                                                  origin, fcfg)
                for ch, ens in outputs.items():
                    truth = _output_truth(ds, ch, origin, H)
                    per_channel.setdefault(ch, []).append(
                        fc.metrics(ens, truth))
            for ch, per in per_channel.items():
                s = fc.summarize_origins(per)
                rows.append([f"{ok}-{ik}", cfg.system, ch, s.mse, s.mae,
                             s.mre, s.mean_loglik] + list(s.loglik))
    _write_table(os.path.join(out_dir, "results.tsv"), header, rows)
    _write_manifest(out_dir, cfg, "evaluate",
                    {"origins": [int(o) for o in origins],
                     "input_kinds": list(input_kinds),
                     "output_kinds": list(output_kinds)})
    _info(f"wrote {len(rows)} result rows")


def cmd_report(cfg, cfg_dir, out_dir, force):
    os.makedirs(out_dir, exist_ok=True)
    _check_manifest(out_dir, cfg, force)
    if not cfg.report.files:
        raise ConfigError("[report] files is empty")
    header = None
    rows = []
    for path in cfg.report.files:
        with open(_resolve(cfg_dir, path)) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if header is None:
            header = lines[0].split("\t")
        elif lines[0].split("\t") != header:
            raise ConfigError(f"column mismatch in {path}")
        rows.extend(ln.split("\t") for ln in lines[1:])
    rows.sort(key=lambda r: (r[1], r[2], float(r[3])))
    _write_table(os.path.join(out_dir, "report.tsv"), header, rows)
    _write_manifest(out_dir, cfg, "report",
                    {"files": list(cfg.report.files)})


# -- entry point ----------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "train-input": cmd_train_input,
    "train-output": cmd_train_output,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dualcast",
        description="dual-level probabilistic forecasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override [experiment].seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite artifacts from a different config")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        cfg_dir = os.path.dirname(os.path.abspath(args.config))
        _COMMANDS[args.command](cfg, cfg_dir, args.out, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
