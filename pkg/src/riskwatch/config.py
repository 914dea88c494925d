"""Layered run configuration: defaults < config file < RISKWATCH_* env < flags.

The file is INI-style (``configparser``); every key belongs to a section and
has a declared type. Environment overrides are named
``RISKWATCH_<SECTION>_<KEY>`` (upper case). Flags use ``section.key=value``.
Unknown sections or keys are errors, and all problems are reported at once.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Any, Mapping, Sequence

from .alert import CostSpec
from .datagen import GeneratorSpec
from .evaluation import BacktestSpec
from .lstm import TrainConfig
from .trees import TreeParams

ENV_PREFIX = "RISKWATCH_"

# section -> key -> (type, default); types: int, float, str, bool, date, list
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "generator": {
        "seed": ("int", 20240101),
        "n_instruments": ("int", 10),
        "n_forex": ("int", 3),
        "n_commodities": ("int", 2),
        "start_date": ("date", date(2020, 1, 1)),
        "end_date": ("date", date(2023, 12, 31)),
        "base_volatility": ("float", 0.012),
        "precursor_days": ("int", 30),
    },
    "preprocess": {
        "lookback": ("int", 30),
        "horizon": ("int", 30),
        "z_threshold": ("float", 8.0),
        "train_fraction": ("float", 0.8),
    },
    "lstm": {
        "hidden_size": ("int", 128),
        "batch_size": ("int", 64),
        "learning_rate": ("float", 0.001),
        "max_epochs": ("int", 100),
        "patience": ("int", 10),
        "seed": ("int", 0),
    },
    "random_forest": {
        "n_trees": ("int", 500),
        "max_depth": ("int", 10),
        "min_leaf_samples": ("int", 5),
        "seed": ("int", 0),
        "n_jobs": ("int", 1),
    },
    "gradient_boosting": {
        "n_trees": ("int", 200),
        "max_depth": ("int", 6),
        "min_leaf_samples": ("int", 10),
        "learning_rate": ("float", 0.1),
        "seed": ("int", 0),
    },
    "backtest": {
        # the default synthetic history spans 4 years: start from 2 years of
        # training and keep every earlier event in the window as it grows
        "initial_train": ("int", 730),
        "horizon": ("int", 30),
        "step": ("int", 30),
        "mode": ("str", "expanding"),
    },
    "cost": {
        "cost_fp": ("float", 1.0),
        "cost_fn": ("float", 1.0),
    },
    "service": {
        "host": ("str", "127.0.0.1"),
        "port": ("int", 8080),
        "store_path": ("str", "riskwatch-store"),
        "model_dir": ("str", ""),
        "tokens": ("list", []),
        "max_body_bytes": ("int", 32 * 1024 * 1024),
        "watermark_bound_ms": ("int", 2000),
        "allowed_lateness_ms": ("int", 0),
        "snapshot_every": ("int", 50),
    },
    "bench": {
        "volumes": ("list", ["100M", "500M", "1G"]),
        "concurrency": ("list", ["1", "8", "32", "64"]),
        "duration": ("float", 5.0),
        "repetitions": ("int", 3),
        "seed": ("int", 0),
    },
}


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind: str, raw: Any):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    if kind == "int":
        return int(s)
    if kind == "float":
        return float(s)
    if kind == "bool":
        if s.lower() in _TRUE:
            return True
        if s.lower() in _FALSE:
            return False
        raise ValueError(f"not a boolean: {s!r}")
    if kind == "date":
        return date.fromisoformat(s)
    if kind == "list":
        return [p.strip() for p in s.split(",") if p.strip()]
    return s


def _parse_flag(flag: str) -> tuple[str, str, str]:
    if "=" not in flag or "." not in flag.split("=", 1)[0]:
        raise ValueError(f"override {flag!r} must look like section.key=value")
    name, value = flag.split("=", 1)
    section, key = name.split(".", 1)
    return section.strip(), key.strip(), value


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    sources: dict[str, str]   # "section.key" -> default|file|env|flag

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    @classmethod
    def load(cls, path=None, env: Mapping[str, str] | None = None,
             overrides: Sequence[str] = ()) -> "RunConfig":
        env = os.environ if env is None else env
        problems: list[str] = []
        layered: dict[str, dict[str, tuple[Any, str]]] = {
            s: {k: (d, "default") for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}

        def put(section, key, raw, origin):
            if section not in SCHEMA:
                problems.append(f"{origin}: unknown section [{section}]")
                return
            if key not in SCHEMA[section]:
                problems.append(f"{origin}: unknown key {section}.{key}")
                return
            layered[section][key] = (raw, origin)

        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError([f"config file {p} does not exist"])
            cp = configparser.ConfigParser(interpolation=None)
            try:
                cp.read(p)
            except configparser.Error as exc:
                raise ConfigError([f"{p}: {exc}"]) from None
            for section in cp.sections():
                for key, raw in cp.items(section):
                    put(section, key, raw, "file")
        for name, raw in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):].lower()
            match = next(((s, rest[len(s) + 1:]) for s in SCHEMA if rest.startswith(s + "_")), None)
            if match is None:
                if rest == "backend":
                    continue  # kernel selection flag, read by the kernels module
                problems.append(f"env: {name} does not name a known section")
                continue
            put(match[0], match[1], raw, "env")
        for flag in overrides:
            try:
                section, key, raw = _parse_flag(flag)
            except ValueError as exc:
                problems.append(f"flag: {exc}")
                continue
            put(section, key, raw, "flag")

        values: dict[str, dict[str, Any]] = {}
        sources: dict[str, str] = {}
        for section, keys in layered.items():
            values[section] = {}
            for key, (raw, origin) in keys.items():
                kind = SCHEMA[section][key][0]
                try:
                    values[section][key] = _coerce(kind, raw)
                except ValueError as exc:
                    problems.append(f"{origin}: {section}.{key}: {exc}")
                    values[section][key] = SCHEMA[section][key][1]
                sources[f"{section}.{key}"] = origin
        cfg = cls(values, sources)
        # keys that failed to parse hold their (valid) defaults, so this adds no noise
        problems.extend(cfg.validate())
        if problems:
            raise ConfigError(problems)
        return cfg

    def validate(self) -> list[str]:
        """Build every typed object once and collect their complaints."""
        problems = []
        for name, build in (("generator", self.generator_spec), ("lstm", self.train_config),
                            ("random_forest", self.rf_params), ("gradient_boosting", self.gbt_params),
                            ("backtest", self.backtest_spec), ("cost", self.cost_spec)):
            try:
                obj = build()
                if hasattr(obj, "validate"):
                    obj.validate()
            except (ValueError, TypeError) as exc:
                problems.append(f"{name}: {exc}")
        pre = self.values["preprocess"]
        if pre["lookback"] < 1 or pre["horizon"] < 1:
            problems.append("preprocess: lookback and horizon must be >= 1")
        if not 0 < pre["train_fraction"] < 1:
            problems.append("preprocess: train_fraction must lie in (0, 1)")
        if pre["z_threshold"] <= 0:
            problems.append("preprocess: z_threshold must be positive")
        svc = self.values["service"]
        if not 0 < svc["port"] < 65536:
            problems.append("service: port must lie in 1..65535")
        for tok in svc["tokens"]:
            if ":" not in tok:
                problems.append("service: tokens are written token:role")
        if svc["max_body_bytes"] < 1:
            problems.append("service: max_body_bytes must be positive")
        return problems

    def generator_spec(self) -> GeneratorSpec:
        g = self.values["generator"]
        return GeneratorSpec(seed=g["seed"], n_instruments=g["n_instruments"], n_forex=g["n_forex"],
                             n_commodities=g["n_commodities"], start_date=g["start_date"],
                             end_date=g["end_date"], base_volatility=g["base_volatility"],
                             precursor_days=g["precursor_days"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["lstm"])

    def rf_params(self) -> TreeParams:
        v = dict(self.values["random_forest"])
        v.pop("n_jobs")
        return TreeParams.random_forest(**v)

    def gbt_params(self) -> TreeParams:
        return TreeParams.gradient_boosting(**self.values["gradient_boosting"])

    def backtest_spec(self) -> BacktestSpec:
        return BacktestSpec(**self.values["backtest"])

    def cost_spec(self) -> CostSpec:
        return CostSpec(**self.values["cost"])

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, v in keys.items():
                if isinstance(v, list):
                    v = ",".join(v)
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)
