"""Run configuration files.

Flat INI text with section headers and ``#`` comments.  Every key has a typed
default and unknown keys are rejected.  :func:`render` writes the fully
resolved configuration back out in canonical order.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .adaptive_threshold import AbnParams
from .errors import ConfigError
from .metrics import EnergyConstants
from .neuron_core import LifParams, SrmParams
from .network import LayerSpec, NetworkConfig, PolicySpec, TrainConfig

COMMANDS = ("train", "eval", "sweep-weights", "ablate-components", "homeostasis", "spike-trace")

PAPER_K_GRID = "0.05 0.15 0.05; 0.15 0.25 0.15; 0.25 0.5 0.25; 0.5 0.75 0.5; 0.75 0.85 0.75"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "run": {
        "command": (str, "train"),
        "seed": (int, 0),
        "output_dir": (str, "runs/out"),
        "workers": (int, 1),
        "checkpoint": (str, ""),
    },
    "dataset": {
        "kind": (str, "nmnist"),          # nmnist | poisson | burst | ramp
        "path": (str, ""),
        "preset": (str, "nmnist-100"),
        "dt_ms": (float, 1.0),
        "rate_hz": (float, 12.0),
        "end_rate_hz": (float, 48.0),
        "num_neurons": (int, 1156),
        "duration_us": (int, 300000),
        "trials": (int, 8),
        "burst_factor": (float, 10.0),
        "burst_windows_us": (str, "100000-200000"),
    },
    "network": {
        "hidden": (str, "128"),
        "num_classes": (int, 10),
        "neuron_model": (str, "lif"),
        "num_steps": (int, 300),
        "readout": (str, "spike_count"),
        "init_scale": (float, 30.0),
        "tau1": (float, 0.1),
        "tau_m": (float, 10.0),
        "e_l": (float, 0.0),
        "r_m": (float, 1.0),
        "v_reset": (float, 0.0),
        "t_ref": (float, 2.0),
        "tau_eps": (float, 5.0),
        "tau_zeta": (float, 5.0),
        "zeta_amp": (float, -1.0),
        "dtype": (str, "float32"),
    },
    "policy": {
        "kind": (str, "abn"),
        "k1": (float, 0.25),
        "k2": (float, 0.5),
        "k3": (float, 0.25),
        "eta": (float, 0.5),
        "alpha": (float, 0.9),
        "window_n": (int, 10),
        "theta_init": (float, 1.0),
        "theta_min": (float, 0.05),
        "theta_max": (float, 10.0),
        "use_mg": (_bool, True),
        "use_trg": (_bool, True),
        "use_se": (_bool, True),
    },
    "train": {
        "learning_rate": (float, 1e-2),
        "epochs": (int, 30),
        "batch_size": (int, 50),
        "surrogate_width": (float, 1.0),
        "rate_scale": (float, 20.0),
        "optimizer": (str, "adam"),
        "loss": (str, "ce_rates"),
    },
    "energy": {
        "e_mac": (float, 4.6e-12),
        "e_ac": (float, 0.9e-12),
        "freq": (float, 1.0),
    },
    "sweep": {
        "k_grid": (str, PAPER_K_GRID),
    },
    "homeostasis": {
        "reference": (str, "base"),
        "conditions": (str, "double"),
    },
}

HOMEOSTASIS_CONDITIONS = ("base", "double", "sparse", "burst")


@dataclass
class RunConfig:
    values: dict  # section -> key -> typed value
    source: Optional[Path] = None

    def __getitem__(self, section) -> dict:
        return self.values[section]

    @property
    def command(self) -> str:
        return self.values["run"]["command"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` overrides applied."""
        values = {s: dict(kv) for s, kv in self.values.items()}
        for section, kv in sections.items():
            for key, value in kv.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[section][key] = value
        return RunConfig(values, self.source)

    # -- typed views -------------------------------------------------------

    def abn_params(self) -> AbnParams:
        p = self.values["policy"]
        return AbnParams(k1=p["k1"], k2=p["k2"], k3=p["k3"], eta=p["eta"], alpha=p["alpha"],
                         window_n=p["window_n"], dt=self.values["dataset"]["dt_ms"],
                         theta_init=p["theta_init"], theta_min=p["theta_min"], theta_max=p["theta_max"])

    def policy_spec(self) -> PolicySpec:
        p = self.values["policy"]
        return PolicySpec(p["kind"], self.abn_params(), p["use_mg"], p["use_trg"], p["use_se"])

    def hidden_sizes(self) -> list[int]:
        text = self.values["network"]["hidden"].strip()
        if not text:
            return []
        try:
            return [int(v) for v in text.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"network.hidden must list integers: {exc}") from exc

    def input_size(self) -> int:
        d = self.values["dataset"]
        return 34 * 34 if d["kind"] == "nmnist" else d["num_neurons"]

    def network_config(self, policy: Optional[PolicySpec] = None, input_size: Optional[int] = None) -> NetworkConfig:
        n = self.values["network"]
        sizes = [input_size or self.input_size(), *self.hidden_sizes(), n["num_classes"]]
        policy = policy or self.policy_spec()
        layers = [LayerSpec(a, b, n["neuron_model"], policy) for a, b in zip(sizes[:-1], sizes[1:])]
        return NetworkConfig(
            layers=layers, dt=self.values["dataset"]["dt_ms"], num_steps=n["num_steps"],
            readout=n["readout"], seed=self.seed,
            lif=LifParams(n["tau_m"], n["e_l"], n["r_m"], n["v_reset"], n["t_ref"]),
            srm=SrmParams(n["tau_eps"], n["tau_zeta"], n["zeta_amp"]),
            tau1=n["tau1"], init_scale=n["init_scale"], dtype=n["dtype"],
        ).validate()

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"], batch_size=t["batch_size"],
                           surrogate_width=t["surrogate_width"], loss=t["loss"], rate_scale=t["rate_scale"],
                           optimizer=t["optimizer"]).validate()

    def energy_constants(self) -> EnergyConstants:
        e = self.values["energy"]
        return EnergyConstants(e["e_mac"], e["e_ac"], e["freq"])

    def k_grid(self) -> list[tuple[float, float, float]]:
        rows = []
        for chunk in self.values["sweep"]["k_grid"].split(";"):
            if not chunk.strip():
                continue
            try:
                triple = tuple(float(v) for v in chunk.replace(",", " ").split())
            except ValueError as exc:
                raise ConfigError(f"sweep.k_grid: {exc}") from exc
            if len(triple) != 3:
                raise ConfigError(f"sweep.k_grid entry {chunk.strip()!r} is not a (k1, k2, k3) triple")
            rows.append(triple)
        if not rows:
            raise ConfigError("sweep.k_grid is empty")
        return rows

    def burst_windows(self) -> list[tuple[int, int]]:
        out = []
        for chunk in self.values["dataset"]["burst_windows_us"].split(","):
            if chunk.strip():
                try:
                    a, b = (int(v) for v in chunk.split("-"))
                except ValueError as exc:
                    raise ConfigError(f"dataset.burst_windows_us: bad window {chunk!r}") from exc
                out.append((a, b))
        return out

    def homeostasis_conditions(self) -> tuple[str, list[str]]:
        h = self.values["homeostasis"]
        conds = [c.strip() for c in h["conditions"].split(",") if c.strip()]
        for c in [h["reference"], *conds]:
            if c not in HOMEOSTASIS_CONDITIONS:
                raise ConfigError(f"unknown homeostasis condition {c!r}; choose from {HOMEOSTASIS_CONDITIONS}")
        if not conds:
            raise ConfigError("homeostasis needs at least one degraded condition")
        return h["reference"], conds


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse(text: str, source: Optional[Path] = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            typ = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = typ(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
    cfg.source = source
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(), path)


def validate(cfg: RunConfig) -> RunConfig:
    run, data = cfg["run"], cfg["dataset"]
    if run["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {run['command']!r}")
    if run["workers"] < 1:
        raise ConfigError("run.workers must be >= 1")
    if data["kind"] not in ("nmnist", "poisson", "burst", "ramp"):
        raise ConfigError(f"unknown dataset kind {data['kind']!r}")
    if data["kind"] == "nmnist":
        if not data["path"] or not Path(data["path"]).is_dir():
            raise ConfigError(f"dataset path does not exist: {data['path']!r}")
    elif data["trials"] < 1:
        raise ConfigError("dataset.trials must be >= 1")
    if run["command"] == "eval" and not Path(run["checkpoint"]).is_file():
        raise ConfigError(f"checkpoint not found: {run['checkpoint']!r}")
    if run["command"] in ("train", "eval", "sweep-weights", "ablate-components") and data["kind"] != "nmnist":
        raise ConfigError(f"{run['command']} needs a labelled nmnist-layout dataset")
    if run["command"] in ("homeostasis", "spike-trace") and data["kind"] == "nmnist":
        raise ConfigError(f"{run['command']} runs on synthetic workloads (poisson, burst or ramp)")
    cfg.policy_spec().build(data["dt_ms"])
    cfg.network_config()
    cfg.train_config()
    if run["command"] == "sweep-weights":
        cfg.k_grid()
    if run["command"] == "homeostasis":
        cfg.homeostasis_conditions()
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg: RunConfig) -> str:
    lines = ["# fully resolved configuration"]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        lines += [f"{key} = {_fmt(cfg.values[section][key])}" for key in keys]
        lines.append("")
    return "\n".join(lines)
