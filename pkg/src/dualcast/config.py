"""Experiment configuration: one TOML table per pipeline stage.

Unknown keys anywhere are hard errors; experiment matrices are easy to
typo and a silently ignored knob is worse than a crash. Budgets and
enumerations are validated here so commands can assume a well-formed
config.
"""

import hashlib
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


SYSTEMS = ("cstr", "adpfr", "flotation")
INPUT_KINDS = ("exponential", "matern", "hybrid_exponential", "hybrid_matern")
OUTPUT_KINDS = ("pinn", "ffnn")

SYSTEM_INPUT_CHANNELS = {
    "cstr": ("C_in",),
    "adpfr": ("C_in", "v"),
    "flotation": ("C_feed", "Q_feed", "Q_t", "Q_c"),
}

SYSTEM_OUTPUT_CHANNELS = {
    "cstr": ("C",),
    "adpfr": ("C",),          # spatial profile; metrics use the outlet cell
    "flotation": ("C_p", "C_f"),
}


@dataclass
class ExperimentSection:
    system: str = "cstr"
    seed: int = 0


@dataclass
class PathsSection:
    dataset: str = "dataset.csv"
    input_dir: str = "inputs"
    output_dir: str = "outputs"
    results_dir: str = "results"


@dataclass
class SimulateSection:
    t_end: float = -1.0        # -1 means the per-system default
    dt_sample: float = -1.0
    nodes: int = 1000          # adpfr only
    inner_dt: float = 0.01     # adpfr only
    points: int = -1           # flotation row count override


@dataclass
class InputModelSection:
    kind: str = "matern"
    channels: list = field(default_factory=list)  # empty = all for system
    iterations: int = 2000
    learning_rate: float = 0.02
    patience: int = 1000
    tolerance: float = 1e-5
    max_train_points: int = 1500
    val_points: int = 300
    lstm_layers: int = 1
    lstm_hidden: int = 12
    log_every: int = 25


@dataclass
class OutputModelSection:
    kind: str = "pinn"
    q: int = 10
    hidden: list = field(default_factory=lambda: [32, 64, 32])
    rate_hidden: int = 100
    train_points: int = 15
    val_points: int = 300
    epochs: int = 4000
    learning_rate: float = 1e-3
    patience: int = 30000
    tolerance: float = 1e-5
    log_every: int = 100


@dataclass
class ForecastSection:
    horizon: int = 10
    samples: int = 200
    origins: int = 20
    stride: int = 40
    history: int = 6
    origin: int = -1           # -1 = first valid test origin
    input_kinds: list = field(default_factory=list)   # evaluate matrix
    output_kinds: list = field(default_factory=list)


@dataclass
class ReportSection:
    files: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection
    paths: PathsSection
    simulate: SimulateSection
    input_model: InputModelSection
    output_model: OutputModelSection
    forecast: ForecastSection
    report: ReportSection
    sha256: str = ""

    @property
    def system(self):
        return self.experiment.system

    @property
    def seed(self):
        return self.experiment.seed

    def input_channels(self):
        chans = self.input_model.channels
        return tuple(chans) if chans else SYSTEM_INPUT_CHANNELS[self.system]


_SECTIONS = {
    "experiment": ExperimentSection,
    "paths": PathsSection,
    "simulate": SimulateSection,
    "input_model": InputModelSection,
    "output_model": OutputModelSection,
    "forecast": ForecastSection,
    "report": ReportSection,
}


def _build_section(cls, table, where):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: "
                          f"{', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in table.items():
        f = known[name]
        want = f.type if isinstance(f.type, type) else None
        if f.type in ("int", int) and isinstance(value, bool):
            raise ConfigError(f"[{where}] {name} must be an integer")
        if f.type in ("float", float) and isinstance(value, int):
            value = float(value)
        _ = want
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{where}] section: {exc}") from exc


def validate(cfg):
    if cfg.experiment.system not in SYSTEMS:
        raise ConfigError(f"system must be one of {SYSTEMS}")
    if cfg.input_model.kind not in INPUT_KINDS:
        raise ConfigError(f"input_model.kind must be one of {INPUT_KINDS}")
    if cfg.output_model.kind not in OUTPUT_KINDS:
        raise ConfigError(f"output_model.kind must be one of {OUTPUT_KINDS}")
    for k in cfg.forecast.input_kinds:
        if k not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind in forecast matrix: {k}")
    for k in cfg.forecast.output_kinds:
        if k not in OUTPUT_KINDS:
            raise ConfigError(f"unknown output kind in forecast matrix: {k}")
    allowed = set(SYSTEM_INPUT_CHANNELS[cfg.experiment.system])
    for ch in cfg.input_model.channels:
        if ch not in allowed:
            raise ConfigError(f"channel {ch!r} not an input of "
                              f"{cfg.experiment.system}")
    non_negative = [
        ("input_model.iterations", cfg.input_model.iterations),
        ("input_model.patience", cfg.input_model.patience),
        ("output_model.epochs", cfg.output_model.epochs),
        ("output_model.patience", cfg.output_model.patience),
        ("output_model.train_points", cfg.output_model.train_points),
        ("forecast.horizon", cfg.forecast.horizon),
        ("forecast.samples", cfg.forecast.samples),
        ("forecast.origins", cfg.forecast.origins),
    ]
    for name, value in non_negative:
        if value < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg.forecast.horizon < 1 or cfg.forecast.samples < 1:
        raise ConfigError("forecast.horizon and forecast.samples must be >= 1")
    if cfg.output_model.q < 1:
        raise ConfigError("output_model.q must be >= 1")
    return cfg


def load(path, seed_override=None):
    """Parse, validate and fingerprint a config file."""
    with open(path, "rb") as fh:
        raw_bytes = fh.read()
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown table(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(cls, table, name)
    cfg = ExperimentConfig(sha256=hashlib.sha256(raw_bytes).hexdigest(),
                           **sections)
    if seed_override is not None:
        cfg.experiment.seed = int(seed_override)
    return validate(cfg)
