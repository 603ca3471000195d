"""Sectioned ``key = value`` experiment configuration."""

from dataclasses import dataclass, field, fields, replace
import hashlib

from .cem import CemConfig
from .cost import CostWeights
from .gps import GpsConfig
from .sac import ENCODERS, SacConfig
from .trajopt import DgdConfig
from .world import ScenarioConfig

ALGORITHMS = ("gps", "cem", "sac")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSettings:
    algorithm: str = "gps"
    encoder: str = "graph"
    seeds: tuple = (0,)
    output_dir: str = "runs"
    with_obstacle: bool = False
    total_steps: int = 50_000  # sac only
    eval_episodes: int = 40


@dataclass
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    sim: ScenarioConfig = field(default_factory=ScenarioConfig)
    cost: CostWeights = field(default_factory=CostWeights)
    gps: GpsConfig = field(default_factory=GpsConfig)
    dgd: DgdConfig = field(default_factory=DgdConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    sac: SacConfig = field(default_factory=SacConfig)

    @property
    def algorithm(self):
        return self.experiment.algorithm

    @property
    def seeds(self):
        return self.experiment.seeds

    @property
    def output_dir(self):
        return self.experiment.output_dir

    def to_text(self):
        """Canonical rendering of every resolved value (round-trips through parse_config_text)."""
        lines = []
        for section, obj in _sections(self):
            if section != "dgd":
                lines.append(f"[{section}]")
            for f in fields(obj):
                lines.append(f"{_key_out(section, f.name)} = {_format(getattr(obj, f.name))}")
            if section != "gps":
                lines.append("")
        return "\n".join(lines)

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# dgd keys live in the [gps] section under a dgd_ prefix
_DGD_KEYS = {f"dgd_{f.name}": f.name for f in fields(DgdConfig)}


def _key_out(section, name):
    return f"dgd_{name}" if section == "dgd" else name


def _sections(cfg):
    return [("experiment", cfg.experiment), ("sim", cfg.sim), ("cost", cfg.cost), ("gps", cfg.gps),
            ("dgd", cfg.dgd), ("cem", cfg.cem), ("sac", cfg.sac)]


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw, default, key, lineno):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            conv = int if default and all(isinstance(x, int) for x in default) else float
            return tuple(conv(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from None


def parse_config_text(text):
    defaults = ExperimentConfig()
    section_objs = dict(_sections(defaults))
    section_objs.pop("dgd")
    values = {name: {} for name in list(section_objs) + ["dgd"]}
    seen = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped or stripped.startswith(";"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in section_objs:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: malformed line: {line.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of a section")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: malformed line: {line.strip()!r}")
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}] on lines {seen[(section, key)]} and {lineno}")
        seen[(section, key)] = lineno
        target, name = section, key
        if section == "gps" and key in _DGD_KEYS:
            target, name = "dgd", _DGD_KEYS[key]
        obj = defaults.dgd if target == "dgd" else section_objs[section]
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        values[target][name] = _parse_value(raw, known[name], key, lineno)

    try:
        cfg = ExperimentConfig(
            experiment=replace(defaults.experiment, **values["experiment"]),
            sim=replace(defaults.sim, **values["sim"]),
            cost=replace(defaults.cost, **values["cost"]),
            gps=replace(defaults.gps, **values["gps"]),
            dgd=replace(defaults.dgd, **values["dgd"]),
            cem=replace(defaults.cem, **values["cem"]),
            sac=replace(defaults.sac, **values["sac"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg):
    e = cfg.experiment
    if e.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {e.algorithm!r}")
    if e.encoder not in ENCODERS:
        raise ConfigError(f"encoder must be one of {ENCODERS}, got {e.encoder!r}")
    if not e.seeds:
        raise ConfigError("seeds must be nonempty")
    if e.total_steps < 0 or e.eval_episodes < 0:
        raise ConfigError("step and episode counts must be nonnegative")


def parse_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())
