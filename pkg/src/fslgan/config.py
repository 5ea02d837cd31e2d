"""Experiment configuration: INI sections of ``key = value`` pairs.

Every key has a default; a ``preset`` in ``[run]`` swaps in a set of defaults
before the file's own values are applied. Unknown sections or keys are errors.
The fully resolved configuration is written next to every run's outputs and
can be fed back to ``fslgan replay``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import splitplan as sp
from .fedorch import DevicePoolSpec, FederationConfig
from .timesim import TimingConfig


class ConfigError(ValueError):
    pass


# section -> key -> default (the type of the default drives parsing)
DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "benchmark": "time",
        "preset": "full",
        "output_dir": "out",
        "seeds": 100,
        "first_seed": 0,
        "baseline": True,
        "ledgers": "first",
        "m_list": [1, 3, 5, 7, 8],
        "image_interval": 10,
        "image_samples": 64,
    },
    "federation": {
        "num_clients": 5,
        "devices_per_client": 4,
        "epochs": 500,
        "g_steps_per_round": 24,
        "seed": 0,
        "strategy": "sorted_multiple",
        "granularity": "per_block",
        "mem_unit": "max_portion",
        "cap_weight": 1.0,
        "time_weight": 1.0,
    },
    "model": {
        "latent_dim": 100,
        "base_channels": 64,
        "image_size": 32,
        "n_blocks": 3,
        "lr": 2e-4,
        "beta1": 0.5,
        "beta2": 0.999,
    },
    "timing": {
        "lan_latency": 0.050,
        "batches_per_epoch": 24,
        "batch_size": 256,
        "unit_time": 1e-9,
    },
    "devices": {
        "time_factor_min": 1.0,
        "time_factor_max": 8.0,
        "capacities": [1.0, 2.0, 3.0, 4.0],
        "seed": 0,
        "explicit": "",
    },
    "data": {
        "root": "",
        "subset": 0,
        "heldout": 1000,
        "shard_mode": "iid",
        "classes_per_client": 2,
    },
}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "full": {},
    # desk scale: narrow networks, short run, small real-data subset
    "desk": {
        "federation": {"epochs": 30},
        "model": {"base_channels": 16},
        "timing": {"batch_size": 64},
        "data": {"subset": 2000},
    },
}


def _parse(value: str, default: Any, where: str) -> Any:
    value = value.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            kind = type(default[0]) if default else float
            return [kind(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(default).__name__}") from exc
    return value


def _format(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run"]["output_dir"])

    def pool(self, seed: int | None = None) -> DevicePoolSpec:
        d = self.values["devices"]
        explicit = parse_explicit(d["explicit"]) if d["explicit"] else None
        return DevicePoolSpec((d["time_factor_min"], d["time_factor_max"]), tuple(d["capacities"]),
                              d["seed"] if seed is None else seed, explicit)

    def timing(self) -> TimingConfig:
        return TimingConfig(**self.values["timing"])

    def federation(self, **overrides) -> FederationConfig:
        f, m, dat = self.values["federation"], self.values["model"], self.values["data"]
        mem_unit: Any = f["mem_unit"]
        if mem_unit not in ("max_portion", "total"):
            mem_unit = float(mem_unit)
        kwargs = dict(
            num_clients=f["num_clients"], devices_per_client=f["devices_per_client"], epochs=f["epochs"],
            g_steps_per_round=f["g_steps_per_round"], seed=f["seed"], strategy=f["strategy"],
            granularity=f["granularity"], timing=self.timing(), pool=self.pool(), mem_unit=mem_unit,
            latent_dim=m["latent_dim"], base_channels=m["base_channels"], image_size=m["image_size"],
            n_blocks=m["n_blocks"], lr=m["lr"], beta1=m["beta1"], beta2=m["beta2"],
            shard_mode=dat["shard_mode"], classes_per_client=dat["classes_per_client"],
        )
        kwargs.update(overrides)
        return FederationConfig(**kwargs)

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, directory: Path | None = None) -> Path:
        directory = Path(directory or self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config_resolved"
        path.write_text(self.to_text())
        return path


def parse_explicit(text: str) -> tuple[tuple[tuple[float, float], ...], ...]:
    """``tf:cap tf:cap; tf:cap ...`` with one ``;``-separated group per client."""
    clients = []
    for group in text.split(";"):
        devs = []
        for item in group.replace(",", " ").split():
            try:
                tf, cap = item.split(":")
                devs.append((float(tf), float(cap)))
            except ValueError as exc:
                raise ConfigError(f"devices.explicit: bad device {item!r}, expected tf:cap") from exc
        if devs:
            clients.append(tuple(devs))
    return tuple(clients)


def from_text(text: str, overrides: dict[str, dict[str, Any]] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case so typos are caught, not folded
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    preset = parser.get("run", "preset", fallback=DEFAULTS["run"]["preset"]).strip()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = {s: dict(keys) for s, keys in DEFAULTS.items()}
    for s, keys in PRESETS[preset].items():
        values[s].update(keys)
    for section in parser.sections():
        for key, raw in parser[section].items():
            values[section][key] = _parse(raw, DEFAULTS[section][key], f"{section}.{key}")
    for s, keys in (overrides or {}).items():
        values[s].update(keys)
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def load(path: str | Path, overrides=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_text(text, overrides)


def validate(cfg: ExperimentConfig) -> None:
    run, fed = cfg["run"], cfg["federation"]
    if run["benchmark"] not in ("time", "accuracy"):
        raise ConfigError(f"run.benchmark must be 'time' or 'accuracy', got {run['benchmark']!r}")
    if run["ledgers"] not in ("first", "all", "none"):
        raise ConfigError("run.ledgers must be first, all or none")
    if run["seeds"] < 1:
        raise ConfigError("run.seeds must be >= 1")
    if not run["m_list"] or min(run["m_list"]) < 1:
        raise ConfigError("run.m_list needs positive client counts")
    if run["image_interval"] < 1:
        raise ConfigError("run.image_interval must be >= 1")
    if fed["strategy"] not in sp.STRATEGIES:
        raise ConfigError(f"federation.strategy must be one of {sp.STRATEGIES}")
    if fed["granularity"] not in ("per_block", "per_layer"):
        raise ConfigError("federation.granularity must be per_block or per_layer")
    if cfg["data"]["shard_mode"] not in ("iid", "label_skew"):
        raise ConfigError("data.shard_mode must be iid or label_skew")
    d = cfg["devices"]
    if d["explicit"]:
        pools = parse_explicit(d["explicit"])
        if len(pools) != fed["num_clients"]:
            raise ConfigError(f"devices.explicit lists {len(pools)} clients, federation.num_clients is "
                              f"{fed['num_clients']}")
    elif not 0 < d["time_factor_min"] <= d["time_factor_max"]:
        raise ConfigError("devices: need 0 < time_factor_min <= time_factor_max")
    try:
        cfg.federation()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
